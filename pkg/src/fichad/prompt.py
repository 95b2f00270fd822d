"""Assembly of the final KGC input text with token-budget truncation.

The rendered input has a fixed section order with frozen header strings, so
downstream description-based KGC models can consume it unchanged::

    Entity: <name>

    # Generated Entity Description:
    <text>

    # Neighbor Contexts:
    # FICHAD-1
    <relation>|<neighbor>:
    <text>

    Relation: <name>
    # Relation Template:
    <template>

    Query: (<head-or-?>, <relation>, <tail-or-?>)

Truncation trims lowest-priority content first (neighbor entries from the
last, then the description's word tail) and keeps the Query line at all
costs; the default counting rule is whitespace-separated words, a stated
approximation of the downstream model's subword count.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .context import GeneratedContext, V1, V2, V1X, V1Y
from .kg import KnowledgeGraph, OUT
from .linkpred import Query, TAIL

ENTITY_HEADER = "Entity:"
DESC_HEADER = "# Generated Entity Description:"
NEIGHBOR_HEADER = "# Neighbor Contexts:"
RELATION_HEADER = "Relation:"
TEMPLATE_HEADER = "# Relation Template:"
QUERY_HEADER = "Query:"

_VARIANT_MARKERS = {V1: "# FICHAD-1", V2: "# FICHAD-2",
                    V1X: "# FICHAD-1", V1Y: "# FICHAD-1"}


class BuildError(Exception):
    pass


class TruncationError(Exception):
    pass


def whitespace_words(text: str) -> int:
    return len(text.split())


@dataclass
class TokenBudget:
    """Token limit plus the counting rule (pluggable for exact tokenizers)."""

    limit: int
    counter: object = whitespace_words

    def __post_init__(self):
        if self.limit < 1:
            raise ValueError("token budget must be >= 1")

    def count(self, text: str) -> int:
        return self.counter(text)


@dataclass
class KgcInput:
    """One assembled KGC model input."""

    query: Query
    entity_name: str
    description: str
    neighbor_lines: list[tuple[str, str]]  # (label line, context text)
    relation_name: str
    template: str
    text: str
    truncated: bool = False
    skipped_neighbors: int = 0


class ContextIndex:
    """Lookup structure over a loaded context store."""

    def __init__(self, contexts: list[GeneratedContext], graph: KnowledgeGraph):
        self.graph = graph
        self.by_entity: dict[int, GeneratedContext] = {}
        self.by_triple: dict[tuple[int, int, int, str], GeneratedContext] = {}
        self.touching: dict[int, list[GeneratedContext]] = {}
        ent, rel = graph.entities, graph.relations
        for ctx in contexts:
            if ctx.subject.get("kind") == "entity":
                e = ent.id_of(ctx.subject["entity"])
                self.by_entity.setdefault(e, ctx)
            elif ctx.subject.get("kind") == "triple":
                h = ent.id_of(ctx.subject["head"])
                r = rel.id_of(ctx.subject["relation"])
                t = ent.id_of(ctx.subject["tail"])
                self.by_triple.setdefault((h, r, t, ctx.variant), ctx)
                self.touching.setdefault(h, []).append(ctx)
                self.touching.setdefault(t, []).append(ctx)

    def entity_description(self, entity: int) -> str | None:
        """fichad-2 summary when present, else any link-aware text touching it."""
        ctx = self.by_entity.get(entity)
        if ctx is not None:
            return ctx.text
        touching = self.touching.get(entity)
        if touching:
            return touching[0].text
        return None

    def triple_text(self, h: int, r: int, t: int, variant: str) -> str | None:
        ctx = self.by_triple.get((h, r, t, variant))
        return ctx.text if ctx is not None else None


def query_line(query: Query, graph: KnowledgeGraph) -> str:
    rel = graph.relations.display_name(query.relation)
    known = graph.entities.display_name(query.known)
    if query.direction == TAIL:
        return f"{QUERY_HEADER} ({known}, {rel}, ?)"
    return f"{QUERY_HEADER} (?, {rel}, {known})"


def build_kgc_input(query: Query, index: ContextIndex, graph: KnowledgeGraph,
                    k: int, variant: str = V1,
                    budget: TokenBudget | None = None,
                    relation_templates: dict[str, str] | None = None) -> KgcInput:
    """Assemble the KGC input for one query.

    Neighbor contexts come from the deterministic ``neighbors(k)`` selection;
    neighbors whose context is missing from the store are skipped and counted.
    Raises :class:`BuildError` when the query entity has no context at all.
    """
    ent_names = graph.entities
    entity = query.known
    entity_name = ent_names.display_name(entity)
    relation_name = graph.relations.display_name(query.relation)

    description = index.entity_description(entity)
    if description is None:
        raise BuildError(f"no generated context for entity {entity_name!r}")

    neighbor_lines: list[tuple[str, str]] = []
    skipped = 0
    for rel, nbr, direction in graph.neighbors(entity, k):
        label = (f"{graph.relations.display_name(rel)}|"
                 f"{ent_names.display_name(nbr)}:")
        if variant == V2:
            ctx = index.by_entity.get(nbr)
            text = ctx.text if ctx is not None else None
        else:
            h, t = (entity, nbr) if direction == OUT else (nbr, entity)
            text = index.triple_text(h, rel, t, variant)
        if text is None:
            skipped += 1
            continue
        neighbor_lines.append((label, text))

    templates = relation_templates or {}
    rel_label = graph.relations.label_of(query.relation)
    template = templates.get(rel_label) or f"[A] {relation_name} [B]"

    text = _render(entity_name, description, neighbor_lines, relation_name,
                   template, query_line(query, graph), variant)
    truncated = False
    if budget is not None:
        trimmed = truncate(text, budget)
        truncated = trimmed != text
        text = trimmed
    return KgcInput(query=query, entity_name=entity_name,
                    description=description, neighbor_lines=neighbor_lines,
                    relation_name=relation_name, template=template, text=text,
                    truncated=truncated, skipped_neighbors=skipped)


def _render(entity_name, description, neighbor_lines, relation_name, template,
            qline, variant) -> str:
    parts = [f"{ENTITY_HEADER} {entity_name}", ""]
    parts += [DESC_HEADER, description, ""]
    parts.append(NEIGHBOR_HEADER)
    if neighbor_lines:
        parts.append(_VARIANT_MARKERS.get(variant, "# FICHAD-1"))
        for label, text in neighbor_lines:
            parts += [label, text]
    parts.append("")
    parts += [f"{RELATION_HEADER} {relation_name}", TEMPLATE_HEADER, template, ""]
    parts.append(qline)
    return "\n".join(parts)


# -- truncation ----------------------------------------------------------

@dataclass
class _Sections:
    entity: str | None = None
    desc_header: bool = False
    desc_words: list[str] = field(default_factory=list)
    neighbor_header: bool = False
    marker: str | None = None
    neighbors: list[list[str]] = field(default_factory=list)  # line groups
    relation: str | None = None
    template_lines: list[str] = field(default_factory=list)
    query: str | None = None


def _parse_sections(lines: list[str]) -> _Sections:
    s = _Sections()
    section = None
    for line in lines:
        if line.startswith(ENTITY_HEADER):
            s.entity = line
            section = None
        elif line == DESC_HEADER:
            s.desc_header = True
            section = "desc"
        elif line == NEIGHBOR_HEADER:
            s.neighbor_header = True
            section = "neighbors"
        elif line.startswith(RELATION_HEADER):
            s.relation = line
            section = None
        elif line == TEMPLATE_HEADER:
            section = "template"
        elif line.startswith(QUERY_HEADER):
            s.query = line
            section = None
        elif not line.strip():
            continue
        elif section == "desc":
            s.desc_words.extend(line.split())
        elif section == "neighbors":
            if line.startswith("# "):
                s.marker = line
            elif line.endswith(":") and "|" in line:
                s.neighbors.append([line])
            elif s.neighbors:
                s.neighbors[-1].append(line)
            else:
                s.neighbors.append([line])
        elif section == "template":
            s.template_lines.append(line)
    return s


def _render_sections(s: _Sections) -> str:
    parts: list[str] = []
    if s.entity is not None:
        parts += [s.entity, ""]
    if s.desc_header or s.desc_words:
        parts += [DESC_HEADER, " ".join(s.desc_words), ""]
    if s.neighbor_header:
        parts.append(NEIGHBOR_HEADER)
        if s.neighbors and s.marker:
            parts.append(s.marker)
        for group in s.neighbors:
            parts += group
        parts.append("")
    if s.relation is not None or s.template_lines:
        if s.relation is not None:
            parts.append(s.relation)
        if s.template_lines:
            parts += [TEMPLATE_HEADER] + s.template_lines
        parts.append("")
    parts.append(s.query or "")
    return "\n".join(parts)


def truncate(text: str, budget: TokenBudget) -> str:
    """Trim ``text`` to the budget, lowest-priority sections first.

    Structured inputs (containing a ``Query:`` line) drop neighbor entries from
    the last, then trim the description's word tail, then the remaining
    sections; the Query line is never dropped and a budget smaller than it is
    an error. Unstructured text is trimmed word-by-word from the end.
    Idempotent: output always fits the budget, and fitting text is returned
    unchanged.
    """
    if budget.count(text) <= budget.limit:
        return text

    lines = text.split("\n")
    if not any(ln.startswith(QUERY_HEADER) for ln in lines):
        words = text.split()
        return " ".join(words[:budget.limit])

    s = _parse_sections(lines)
    if budget.count(s.query or "") > budget.limit:
        raise TruncationError(
            f"budget {budget.limit} cannot hold the query line")

    def fits() -> bool:
        return budget.count(_render_sections(s)) <= budget.limit

    while s.neighbors and not fits():
        s.neighbors.pop()
    if not s.neighbors:
        s.marker = None
    while s.desc_words and not fits():
        overshoot = budget.count(_render_sections(s)) - budget.limit
        del s.desc_words[-max(overshoot, 1):]
    if not fits():
        s.desc_header = False
        s.neighbor_header = False
    if not fits():
        s.entity = None
    if not fits():
        s.template_lines = []
    if not fits():
        s.relation = None
    if not fits():
        return s.query or ""
    return _render_sections(s)


def export_prompts(inputs: list[KgcInput], budget: TokenBudget | None,
                   path) -> None:
    """Write one JSONL record per assembled input."""
    counter = budget.count if budget is not None else whitespace_words
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for item in inputs:
            q = item.query
            rec = {"query": {"direction": q.direction, "known": q.known,
                             "relation": q.relation, "answer": q.answer},
                   "text": item.text,
                   "n_tokens": counter(item.text),
                   "truncated": item.truncated}
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")
