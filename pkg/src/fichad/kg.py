"""Knowledge graph data model and benchmark file loaders.

Entities and relations are interned to dense 0-based handles in first-appearance
order, so loading the same files always produces the same handle assignment.
Triple files are UTF-8 TSV (``head<TAB>relation<TAB>tail``), image manifests and
description files are two-column TSV keyed by entity label.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

SPLITS = ("train", "valid", "test")

#: neighbor edge directions; outgoing sorts before incoming
OUT, IN = "out", "in"
_DIR_ORDER = {OUT: 0, IN: 1}


class DatasetError(Exception):
    """Malformed or inconsistent dataset input."""


class ParseError(DatasetError):
    """A line of a dataset file could not be parsed."""

    def __init__(self, path, line_no: int, message: str):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class VocabError(DatasetError):
    """Unknown label encountered while the vocabulary is frozen."""


class Vocab:
    """Bijective label <-> dense-handle table with optional display names."""

    def __init__(self):
        self.labels: list[str] = []
        self._index: dict[str, int] = {}
        self._display: dict[int, str] = {}

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, label: str) -> bool:
        return label in self._index

    def intern(self, label: str) -> int:
        """Return the handle for ``label``, assigning the next one if new."""
        handle = self._index.get(label)
        if handle is None:
            handle = len(self.labels)
            self._index[label] = handle
            self.labels.append(label)
        return handle

    def id_of(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise VocabError(f"unknown label: {label!r}") from None

    def label_of(self, handle: int) -> str:
        return self.labels[handle]

    def set_display_name(self, handle: int, name: str) -> None:
        self._display[handle] = name

    def display_name(self, handle: int) -> str:
        """Human-readable name; falls back to the raw label."""
        return self._display.get(handle, self.labels[handle])


@dataclass(frozen=True, order=True)
class Triple:
    head: int
    relation: int
    tail: int


def load_triples(path, entities: Vocab, relations: Vocab,
                 mode: str = "build-vocab") -> list[Triple]:
    """Parse a triple TSV into handle-based triples.

    ``mode`` is ``build-vocab`` (unseen labels are interned) or ``frozen-vocab``
    (unseen labels raise :class:`VocabError`). Triples come back in file order
    with duplicates preserved.
    """
    if mode not in ("build-vocab", "frozen-vocab"):
        raise ValueError(f"unknown mode: {mode!r}")
    build = mode == "build-vocab"
    triples = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ParseError(path, line_no,
                                 f"expected 3 tab-separated fields, got {len(fields)}")
            h, r, t = fields
            if build:
                triples.append(Triple(entities.intern(h), relations.intern(r),
                                      entities.intern(t)))
            else:
                triples.append(Triple(entities.id_of(h), relations.id_of(r),
                                      entities.id_of(t)))
    return triples


def save_triples(path, triples: list[Triple], entities: Vocab,
                 relations: Vocab) -> None:
    """Write triples back to canonical TSV (labels, LF endings)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for tr in triples:
            fh.write(f"{entities.label_of(tr.head)}\t"
                     f"{relations.label_of(tr.relation)}\t"
                     f"{entities.label_of(tr.tail)}\n")


class KnowledgeGraph:
    """Triples per split plus the query-time indices derived from them.

    Immutable after construction; indices cover train ∪ valid ∪ test (the
    filtered-evaluation universe) and per-split membership sets.
    """

    def __init__(self, entities: Vocab, relations: Vocab,
                 splits: dict[str, list[Triple]]):
        self.entities = entities
        self.relations = relations
        self.splits = {name: list(splits.get(name, [])) for name in SPLITS}

        self._split_sets = {name: frozenset(ts) for name, ts in self.splits.items()}
        self._all = frozenset().union(*self._split_sets.values())

        tails: dict[tuple[int, int], set[int]] = {}
        heads: dict[tuple[int, int], set[int]] = {}
        incident: dict[int, set[tuple[int, int, str]]] = {}
        for tr in self._all:
            tails.setdefault((tr.head, tr.relation), set()).add(tr.tail)
            heads.setdefault((tr.tail, tr.relation), set()).add(tr.head)
            incident.setdefault(tr.head, set()).add((tr.relation, tr.tail, OUT))
            incident.setdefault(tr.tail, set()).add((tr.relation, tr.head, IN))
        self._tails = tails
        self._heads = heads
        self._incident = {
            e: sorted(edges, key=lambda x: (x[0], x[1], _DIR_ORDER[x[2]]))
            for e, edges in incident.items()
        }

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    def contains(self, triple: Triple, split: str | None = None) -> bool:
        """Membership in one split, or in the union of all splits."""
        if split is None:
            return triple in self._all
        return triple in self._split_sets[split]

    def known_tails(self, head: int, relation: int) -> set[int]:
        return set(self._tails.get((head, relation), ()))

    def known_heads(self, tail: int, relation: int) -> set[int]:
        return set(self._heads.get((tail, relation), ()))

    def neighbors(self, entity: int, k: int) -> list[tuple[int, int, str]]:
        """First ``k`` incident edges of ``entity`` as (relation, neighbor, direction).

        Edges are sorted by (relation handle, neighbor handle, out-before-in),
        so the selection is deterministic and ``neighbors(e, k)`` is a prefix of
        ``neighbors(e, k+1)``.
        """
        if k < 0:
            raise ValueError("k must be >= 0")
        return self._incident.get(entity, [])[:k]

    def triples_with_relation(self, relation: int,
                              split: str = "train") -> list[Triple]:
        """Triples of one split carrying ``relation``, sorted by handles."""
        return sorted(t for t in self.splits[split] if t.relation == relation)


@dataclass
class MultimodalAssets:
    """Per-entity image references and human-annotated descriptions.

    Image lists are already truncated to ``image_cap``. ``description`` returns
    ``None`` when an entity has no entry, never the empty string.
    """

    image_cap: int
    images: dict[int, list[str]] = field(default_factory=dict)
    descriptions: dict[int, str] = field(default_factory=dict)
    skipped_image_lines: int = 0
    duplicate_description_lines: int = 0

    def images_of(self, entity: int) -> list[str]:
        return list(self.images.get(entity, ()))

    def description(self, entity: int) -> str | None:
        return self.descriptions.get(entity)

    def entities_with_images(self) -> set[int]:
        return {e for e, refs in self.images.items() if refs}


def load_image_manifest(path, entities: Vocab, cap: int,
                        assets: MultimodalAssets | None = None) -> MultimodalAssets:
    """Load an ``entity<TAB>image_ref`` manifest, keeping the first ``cap`` images.

    Lines naming entities outside the vocabulary are skipped and counted
    (benchmark manifests legitimately cover only part of the entity set).
    """
    if cap < 1:
        raise ValueError("image cap must be >= 1")
    if assets is None:
        assets = MultimodalAssets(image_cap=cap)
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise ParseError(path, line_no,
                                 f"expected 2 tab-separated fields, got {len(fields)}")
            label, ref = fields
            if label not in entities:
                assets.skipped_image_lines += 1
                continue
            refs = assets.images.setdefault(entities.id_of(label), [])
            if len(refs) < cap:
                refs.append(ref)
    return assets


def load_descriptions(path, entities: Vocab,
                      assets: MultimodalAssets) -> MultimodalAssets:
    """Load ``entity<TAB>description`` text; duplicate entities are last-wins."""
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise ParseError(path, line_no,
                                 f"expected 2 tab-separated fields, got {len(fields)}")
            label, text = fields
            if label not in entities:
                continue
            handle = entities.id_of(label)
            if handle in assets.descriptions:
                assets.duplicate_description_lines += 1
            assets.descriptions[handle] = text
    return assets


def first_sentence(text: str) -> str:
    """Text up to the first ``". "`` or ``".\\n"`` boundary (inclusive of the period)."""
    best = None
    for sep in (". ", ".\n"):
        idx = text.find(sep)
        if idx != -1 and (best is None or idx < best):
            best = idx
    if best is None:
        return text
    return text[:best + 1]


@dataclass
class Dataset:
    """A loaded benchmark: graph, assets, and the id from its config."""

    dataset_id: str
    graph: KnowledgeGraph
    assets: MultimodalAssets


def load_dataset(config_path) -> Dataset:
    """Load a benchmark from a ``dataset.json`` config.

    The config names the five data files (paths relative to the config), the
    per-entity image cap, and a dataset id::

        {"id": "fb15k-237-img", "train": "train.tsv", "valid": "valid.tsv",
         "test": "test.tsv", "images": "images.tsv",
         "descriptions": "descriptions.tsv", "image_cap": 10}

    ``images`` and ``descriptions`` may be null/absent.
    """
    config_path = Path(config_path)
    with open(config_path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    base = config_path.parent

    entities, relations = Vocab(), Vocab()
    splits = {}
    for split in SPLITS:
        if split not in cfg:
            raise DatasetError(f"dataset config missing {split!r} file")
        splits[split] = load_triples(base / cfg[split], entities, relations)

    cap = int(cfg.get("image_cap", 10))
    assets = MultimodalAssets(image_cap=cap)
    if cfg.get("images"):
        load_image_manifest(base / cfg["images"], entities, cap, assets)
    if cfg.get("descriptions"):
        load_descriptions(base / cfg["descriptions"], entities, assets)
    if cfg.get("names"):
        # optional entity<TAB>display-name table
        with open(base / cfg["names"], encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                label, _, name = line.partition("\t")
                if name and label in entities:
                    entities.set_display_name(entities.id_of(label), name)

    graph = KnowledgeGraph(entities, relations, splits)
    return Dataset(dataset_id=str(cfg.get("id", config_path.stem)),
                   graph=graph, assets=assets)
