"""Link-aware context generation: image filtering, context variants, hints.

The pipeline turns entity images into textual context via a generation
backend: relevance-filtered link-aware summaries (fichad-1), unfiltered
entity-centric summaries (fichad-2), and the two augmented variants that
append a database description sentence (1+x) or a conceptual hint (1+y).
Entities or triples with no image clearing the relevance threshold fall back
to name-only generation, flagged so coverage statistics can exclude them.
"""

from __future__ import annotations

import json
import random
import string
from dataclasses import dataclass, field, asdict
from pathlib import Path

from .backend import RELEVANCE, BackendError, GenerationBackend, \
    GenerationRequest
from .kg import KnowledgeGraph, MultimodalAssets, Triple, first_sentence

V1 = "fichad-1"
V2 = "fichad-2"
V1X = "fichad-1+x"
V1Y = "fichad-1+y"
VARIANTS = (V1, V2, V1X, V1Y)

#: images grouped per endpoint for link-aware generation
MAX_GROUP = 5
#: default relevance threshold on the yes-token probability
DEFAULT_TAU = 0.85
#: triples sampled per relation for hints and relation templates
SAMPLE_TRIPLES = 20


class TemplateError(Exception):
    pass


class CompositionError(Exception):
    """A variant was requested without its required parts."""


DEFAULT_TEMPLATES = {
    "relevance": (
        "Do these images depict both {head} and {tail} together or in a "
        "directly related scene? Answer yes or no."),
    "entity_description": (
        "Describe {entity} in one concise sentence based on the attached "
        "images."),
    "link_summary": (
        "In one sentence, summarize how {head} and {tail} appear together "
        "in the attached images. {head}: {d_head} {tail}: {d_tail}"),
    "link_summary_fallback": (
        "In one sentence, describe the likely connection between {head} and "
        "{tail} using only their names."),
    "entity_summary": (
        "Write a holistic visual description of {entity} based on all "
        "attached images."),
    "entity_summary_fallback": (
        "Describe {entity} in one sentence using only its name."),
    "hint": (
        "Question: what completes ({entity}, {relation}, ?)? Example triples "
        "for this relation: {triples}. Visual summary of {entity}: {summary}. "
        "In one or two sentences, state the likely type of the missing "
        "entity."),
    "relation_template": (
        "Example triples for the relation '{relation}': {triples}. Write one "
        "natural-language sentence template for this relation using the "
        "placeholders [A] and [B] exactly once each."),
}


def instantiate(template: str, **slots: str) -> str:
    """Pure slot substitution; every referenced slot must be provided."""
    fields_needed = {name for _, name, _, _ in string.Formatter().parse(template)
                     if name is not None}
    missing = fields_needed - slots.keys()
    if missing:
        raise TemplateError(f"unfilled template slots: {sorted(missing)}")
    return template.format(**{k: slots[k] for k in fields_needed})


@dataclass
class PromptTemplateSet:
    """The editable prompt wordings driving every backend call."""

    templates: dict[str, str] = field(
        default_factory=lambda: dict(DEFAULT_TEMPLATES))

    def __getitem__(self, name: str) -> str:
        try:
            return self.templates[name]
        except KeyError:
            raise TemplateError(f"unknown prompt template: {name!r}") from None

    @classmethod
    def load_dir(cls, path) -> "PromptTemplateSet":
        """Read ``<name>.txt`` files from a directory, defaults fill the gaps."""
        templates = dict(DEFAULT_TEMPLATES)
        for f in sorted(Path(path).glob("*.txt")):
            templates[f.stem] = f.read_text(encoding="utf-8").strip()
        return cls(templates)

    def save_dir(self, path) -> None:
        out = Path(path)
        out.mkdir(parents=True, exist_ok=True)
        for name, text in self.templates.items():
            (out / f"{name}.txt").write_text(text + "\n", encoding="utf-8")


@dataclass
class ScoredImage:
    ref: str
    score: float


@dataclass
class GeneratedContext:
    """One unit of generated context, serializable to a JSONL store line."""

    variant: str
    subject: dict  # {"kind": "triple", head/relation/tail labels} or {"kind": "entity", ...}
    text: str
    images: list[ScoredImage] = field(default_factory=list)
    fallback: bool = False
    created: float | None = None  # left None for byte-reproducible stores

    def to_json_line(self) -> str:
        rec = asdict(self)
        if rec["created"] is None:
            del rec["created"]
        return json.dumps(rec, sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json_line(cls, line: str) -> "GeneratedContext":
        rec = json.loads(line)
        rec["images"] = [ScoredImage(**im) for im in rec.get("images", [])]
        return cls(**rec)


def read_context_store(path) -> list[GeneratedContext]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(GeneratedContext.from_json_line(line))
    return out


def write_context_store(path, contexts: list[GeneratedContext]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ctx in contexts:
            fh.write(ctx.to_json_line() + "\n")


# -- core operations -----------------------------------------------------

def filter_images(head_name: str, tail_name: str, images_head: list[str],
                  images_tail: list[str], tau: float,
                  backend: GenerationBackend,
                  templates: PromptTemplateSet | None = None,
                  max_group: int = MAX_GROUP):
    """Relevance-filter both endpoints' images for one entity pair.

    Each image is scored by the backend's yes-probability; images scoring
    >= ``tau`` are kept, and each side is truncated to the ``max_group``
    highest scorers (manifest order breaks ties). A backend failure on an
    individual image scores it 0 and increments the skipped counter.

    Returns (filtered_head, filtered_tail, skipped_count).
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must be in [0, 1]")
    templates = templates or PromptTemplateSet()
    prompt = instantiate(templates["relevance"], head=head_name, tail=tail_name)
    skipped = 0

    def score_side(refs: list[str]) -> list[ScoredImage]:
        nonlocal skipped
        scored = []
        for ref in refs:
            req = GenerationRequest(prompt=prompt, images=(ref,), kind=RELEVANCE,
                                    max_tokens=1,
                                    subjects=(head_name, tail_name))
            try:
                p = backend.relevance(req)
            except BackendError:
                p = 0.0
                skipped += 1
            scored.append(ScoredImage(ref, p))
        kept = [si for si in scored if si.score >= tau]
        # stable sort: descending score, manifest order breaks ties
        kept.sort(key=lambda si: -si.score)
        return kept[:max_group]

    return score_side(images_head), score_side(images_tail), skipped


def lamm_context(head_name: str, tail_name: str,
                 filtered_head: list[ScoredImage],
                 filtered_tail: list[ScoredImage],
                 backend: GenerationBackend,
                 templates: PromptTemplateSet | None = None):
    """Link-aware summary text for one entity pair (the fichad-1 core).

    With both filtered sets non-empty: per-endpoint descriptions feed a joint
    one-sentence summary over all retained images. Otherwise a name-only
    fallback summary is generated. Returns (text, images_used, fallback).
    """
    templates = templates or PromptTemplateSet()
    if filtered_head and filtered_tail:
        d_head = backend.generate(GenerationRequest(
            prompt=instantiate(templates["entity_description"], entity=head_name),
            images=tuple(si.ref for si in filtered_head),
            subjects=(head_name,)))
        d_tail = backend.generate(GenerationRequest(
            prompt=instantiate(templates["entity_description"], entity=tail_name),
            images=tuple(si.ref for si in filtered_tail),
            subjects=(tail_name,)))
        text = backend.generate(GenerationRequest(
            prompt=instantiate(templates["link_summary"], head=head_name,
                               tail=tail_name, d_head=d_head, d_tail=d_tail),
            images=tuple(si.ref for si in filtered_head + filtered_tail),
            subjects=(head_name, tail_name)))
        return text, filtered_head + filtered_tail, False
    text = backend.generate(GenerationRequest(
        prompt=instantiate(templates["link_summary_fallback"],
                           head=head_name, tail=tail_name),
        subjects=(head_name, tail_name)))
    return text, [], True


def entity_summary(entity_name: str, images: list[str],
                   backend: GenerationBackend,
                   templates: PromptTemplateSet | None = None):
    """Relation-agnostic summary over the full capped image list (fichad-2).

    Returns (text, fallback); entities without images get a name-only fallback.
    """
    templates = templates or PromptTemplateSet()
    if images:
        text = backend.generate(GenerationRequest(
            prompt=instantiate(templates["entity_summary"], entity=entity_name),
            images=tuple(images), subjects=(entity_name,)))
        return text, False
    text = backend.generate(GenerationRequest(
        prompt=instantiate(templates["entity_summary_fallback"],
                           entity=entity_name),
        subjects=(entity_name,)))
    return text, True


def sample_relation_triples(graph: KnowledgeGraph, relation: int,
                            n: int = SAMPLE_TRIPLES,
                            seed: int = 0) -> list[Triple]:
    """min(n, available) train triples of the relation, sorted then seed-sampled."""
    pool = graph.triples_with_relation(relation, split="train")
    if len(pool) <= n:
        return pool
    rng = random.Random(f"{seed}:{relation}")
    picked = rng.sample(range(len(pool)), n)
    return [pool[i] for i in sorted(picked)]


def _format_triples(graph: KnowledgeGraph, triples: list[Triple]) -> str:
    ent, rel = graph.entities, graph.relations
    return "; ".join(
        f"({ent.display_name(t.head)}, {rel.display_name(t.relation)}, "
        f"{ent.display_name(t.tail)})" for t in triples)


def conceptual_hint(graph: KnowledgeGraph, query_entity: int, relation: int,
                    entity_summary_text: str, backend: GenerationBackend,
                    templates: PromptTemplateSet | None = None,
                    n: int = SAMPLE_TRIPLES, seed: int = 0):
    """Hint text constraining the likely type of the missing entity.

    Built from deterministically sampled same-relation training triples plus
    the query entity's visual summary. Returns (text, flagged); flagged is
    True when the relation has no training triples and the hint had to come
    from the relation label alone.
    """
    templates = templates or PromptTemplateSet()
    ent_name = graph.entities.display_name(query_entity)
    rel_name = graph.relations.display_name(relation)
    sampled = sample_relation_triples(graph, relation, n=n, seed=seed)
    flagged = not sampled
    triples_text = _format_triples(graph, sampled) if sampled else "(none)"
    text = backend.generate(GenerationRequest(
        prompt=instantiate(templates["hint"], entity=ent_name,
                           relation=rel_name, triples=triples_text,
                           summary=entity_summary_text),
        subjects=(ent_name, rel_name)))
    return text, flagged


def _valid_template(text: str) -> bool:
    return text.count("[A]") == 1 and text.count("[B]") == 1


def relation_template(graph: KnowledgeGraph, relation: int,
                      backend: GenerationBackend,
                      templates: PromptTemplateSet | None = None,
                      assets: MultimodalAssets | None = None,
                      seed: int = 0) -> str:
    """Natural-language [A]/[B] template for a relation.

    Backend output must contain [A] and [B] exactly once each; one retry,
    then the literal ``[A] <label> [B]`` fallback.
    """
    templates = templates or PromptTemplateSet()
    rel_name = graph.relations.display_name(relation)
    sampled = sample_relation_triples(graph, relation, seed=seed)
    images = []
    if assets is not None:
        # one image per sampled head, when available
        for t in sampled:
            refs = assets.images_of(t.head)
            if refs:
                images.append(refs[0])
    prompt = instantiate(templates["relation_template"], relation=rel_name,
                         triples=_format_triples(graph, sampled) or "(none)")
    for attempt in range(2):
        req = GenerationRequest(prompt=prompt if attempt == 0 else prompt + " ",
                                images=tuple(images), subjects=(rel_name,))
        try:
            text = backend.generate(req)
        except BackendError:
            break
        if _valid_template(text):
            return text
    return f"[A] {rel_name} [B]"


def compose_variant(variant: str, lamm: str | None = None,
                    entity_summary_text: str | None = None,
                    db_description: str | None = None,
                    hint: str | None = None, degrade: bool = True):
    """Assemble the final context text for a variant.

    Returns (text, degraded): ``degraded`` marks a 1+x request that fell back
    to plain fichad-1 because the database description is missing.
    """
    if variant == V1:
        if lamm is None:
            raise CompositionError("fichad-1 requires the link-aware text")
        return lamm, False
    if variant == V2:
        if entity_summary_text is None:
            raise CompositionError("fichad-2 requires the entity summary")
        return entity_summary_text, False
    if variant == V1X:
        if lamm is None:
            raise CompositionError("fichad-1+x requires the link-aware text")
        if db_description is None:
            if not degrade:
                raise CompositionError(
                    "fichad-1+x requires a database description")
            return lamm, True
        return f"{lamm} {first_sentence(db_description)}", False
    if variant == V1Y:
        if lamm is None or hint is None:
            raise CompositionError("fichad-1+y requires link-aware text and hint")
        return f"{lamm} {hint}", False
    raise CompositionError(f"unknown variant: {variant!r}")


# -- pipeline orchestration ----------------------------------------------

class ContextGenerator:
    """Drives context generation for whole splits with one backend."""

    def __init__(self, graph: KnowledgeGraph, assets: MultimodalAssets,
                 backend: GenerationBackend,
                 templates: PromptTemplateSet | None = None,
                 tau: float = DEFAULT_TAU, seed: int = 0):
        self.graph = graph
        self.assets = assets
        self.backend = backend
        self.templates = templates or PromptTemplateSet()
        self.tau = tau
        self.seed = seed
        self.degraded_compositions = 0
        self.skipped_images = 0

    def _name(self, entity: int) -> str:
        return self.graph.entities.display_name(entity)

    def triple_subject(self, t: Triple) -> dict:
        return {"kind": "triple",
                "head": self.graph.entities.label_of(t.head),
                "relation": self.graph.relations.label_of(t.relation),
                "tail": self.graph.entities.label_of(t.tail)}

    def triple_context(self, triple: Triple, variant: str = V1) -> GeneratedContext:
        """Generate one fichad-1-family context for a triple."""
        if variant not in (V1, V1X, V1Y):
            raise CompositionError(f"{variant!r} is not a triple-level variant")
        head_name, tail_name = self._name(triple.head), self._name(triple.tail)
        fh, ft, skipped = filter_images(
            head_name, tail_name, self.assets.images_of(triple.head),
            self.assets.images_of(triple.tail), self.tau, self.backend,
            self.templates)
        self.skipped_images += skipped
        text, used, fallback = lamm_context(head_name, tail_name, fh, ft,
                                            self.backend, self.templates)
        db_desc = self.assets.description(triple.head)
        hint = None
        if variant == V1Y:
            summary, _ = entity_summary(head_name,
                                        self.assets.images_of(triple.head),
                                        self.backend, self.templates)
            hint, _ = conceptual_hint(self.graph, triple.head, triple.relation,
                                      summary, self.backend, self.templates,
                                      seed=self.seed)
        final, degraded = compose_variant(variant, lamm=text,
                                          db_description=db_desc, hint=hint)
        if degraded:
            self.degraded_compositions += 1
        return GeneratedContext(variant=variant,
                                subject=self.triple_subject(triple),
                                text=final, images=used, fallback=fallback)

    def entity_context(self, entity: int) -> GeneratedContext:
        """Generate the fichad-2 context for one entity."""
        text, fallback = entity_summary(self._name(entity),
                                        self.assets.images_of(entity),
                                        self.backend, self.templates)
        return GeneratedContext(
            variant=V2,
            subject={"kind": "entity",
                     "entity": self.graph.entities.label_of(entity)},
            text=text, fallback=fallback)

    def generate_for_splits(self, variant: str,
                            splits: tuple[str, ...] = ("train", "valid", "test")
                            ) -> list[GeneratedContext]:
        """All contexts needed for a variant run, in deterministic order."""
        out = []
        if variant == V2:
            for e in range(self.graph.n_entities):
                out.append(self.entity_context(e))
            return out
        seen = set()
        for split in splits:
            for t in self.graph.splits[split]:
                if t in seen:
                    continue
                seen.add(t)
                out.append(self.triple_context(t, variant))
        return out


# -- coverage statistics -------------------------------------------------

@dataclass
class CoverageStats:
    """Context-corpus counters and display-name coverage rates."""

    dataset_id: str
    n_entities: int
    with_images: int
    with_fichad1: int
    with_fichad2: int
    triples_with_fichad1: int
    single_entity_coverage: float
    both_entity_coverage: float
    fichad2_entity_coverage: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_table(self) -> str:
        lines = [
            f"{'Dataset':<18} {'#Entity':>8} {'Images':>8} "
            f"{'FICHAD-1':>9} {'FICHAD-2':>9}",
            f"{self.dataset_id:<18} {self.n_entities:>8} {self.with_images:>8} "
            f"{self.with_fichad1:>9} {self.with_fichad2:>9}",
            "",
            f"{'Single Entity Coverage':<24} {self.single_entity_coverage:.2f}",
            f"{'Both Entity Coverage':<24} {self.both_entity_coverage:.2f}",
            f"{'FICHAD-2 Entity Coverage':<24} {self.fichad2_entity_coverage:.2f}",
        ]
        return "\n".join(lines)


def corpus_stats(contexts: list[GeneratedContext], graph: KnowledgeGraph,
                 assets: MultimodalAssets,
                 dataset_id: str = "dataset") -> CoverageStats:
    """Table-style counters over a completed generation pass.

    An entity "has fichad-1" when at least one non-fallback link-aware context
    touches it; coverage rates use case-insensitive display-name substring
    matching inside the generated text.
    """
    ent = graph.entities
    with_f1: set[int] = set()
    with_f2: set[int] = set()
    f1_triples = 0
    single_hits = both_hits = f1_total = 0
    f2_hits = f2_total = 0

    for ctx in contexts:
        if ctx.variant in (V1, V1X, V1Y) and ctx.subject.get("kind") == "triple":
            if ctx.fallback:
                continue
            h = ent.id_of(ctx.subject["head"])
            t = ent.id_of(ctx.subject["tail"])
            with_f1.update((h, t))
            f1_triples += 1
            f1_total += 1
            text = ctx.text.lower()
            named_h = ent.display_name(h).lower() in text
            named_t = ent.display_name(t).lower() in text
            if named_h or named_t:
                single_hits += 1
            if named_h and named_t:
                both_hits += 1
        elif ctx.variant == V2 and ctx.subject.get("kind") == "entity":
            e = ent.id_of(ctx.subject["entity"])
            if ctx.fallback:
                continue
            with_f2.add(e)
            f2_total += 1
            if ent.display_name(e).lower() in ctx.text.lower():
                f2_hits += 1

    return CoverageStats(
        dataset_id=dataset_id,
        n_entities=graph.n_entities,
        with_images=len(assets.entities_with_images()),
        with_fichad1=len(with_f1),
        with_fichad2=len(with_f2),
        triples_with_fichad1=f1_triples,
        single_entity_coverage=single_hits / f1_total if f1_total else 0.0,
        both_entity_coverage=both_hits / f1_total if f1_total else 0.0,
        fichad2_entity_coverage=f2_hits / f2_total if f2_total else 0.0,
    )
