"""Shared fixtures: random graphs, brute-force oracles, scripted backends."""

from __future__ import annotations

import random
from pathlib import Path

import numpy as np
import pytest

from fichad.backend import GenerationBackend
from fichad.kg import KnowledgeGraph, Triple, Vocab

DATA_DIR = Path(__file__).parent / "data"
ARLES_CONFIG = DATA_DIR / "arles" / "dataset.json"


def make_vocab(labels):
    v = Vocab()
    for lab in labels:
        v.intern(lab)
    return v


def random_graph(rng: random.Random, max_entities=50, max_relations=5,
                 max_triples=300) -> KnowledgeGraph:
    """Random KG with train/valid/test splits for oracle-equivalence tests."""
    n_ent = rng.randint(3, max_entities)
    n_rel = rng.randint(1, max_relations)
    entities = make_vocab([f"e{i}" for i in range(n_ent)])
    relations = make_vocab([f"r{i}" for i in range(n_rel)])
    n_triples = rng.randint(3, max_triples)
    triples = [Triple(rng.randrange(n_ent), rng.randrange(n_rel),
                      rng.randrange(n_ent)) for _ in range(n_triples)]
    n_test = max(1, n_triples // 5)
    n_valid = max(1, n_triples // 10)
    splits = {"test": triples[:n_test],
              "valid": triples[n_test:n_test + n_valid],
              "train": triples[n_test + n_valid:] or triples[:1]}
    return KnowledgeGraph(entities, relations, splits)


# -- brute-force oracles (kept independent of fichad.linkpred internals) --

def brute_force_candidates(graph: KnowledgeGraph, direction: str, known: int,
                           relation: int, answer: int) -> set[int]:
    """Filtered candidate set by direct enumeration over all entities."""
    all_known = set()
    for split in ("train", "valid", "test"):
        all_known.update(graph.splits[split])
    out = set()
    for e in range(graph.n_entities):
        if direction == "tail":
            cand = Triple(known, relation, e)
        else:
            cand = Triple(e, relation, known)
        if e == answer or cand not in all_known:
            out.add(e)
    return out


def brute_force_rank(score_fn, graph, direction, known, relation,
                     answer) -> float:
    cands = sorted(brute_force_candidates(graph, direction, known, relation,
                                          answer))
    scores = []
    for e in cands:
        if direction == "tail":
            scores.append(score_fn(known, relation, e))
        else:
            scores.append(score_fn(e, relation, known))
    s_true = scores[cands.index(answer)]
    greater = sum(1 for s in scores if s > s_true)
    ties = sum(1 for s in scores if s == s_true) - 1
    return 1.0 + greater + ties / 2.0


def brute_force_report(score_fn, graph, split="test"):
    """(mrr, hits1, hits3, hits10) by direct enumeration."""
    ranks = []
    for t in graph.splits[split]:
        ranks.append(brute_force_rank(score_fn, graph, "tail", t.head,
                                      t.relation, t.tail))
        ranks.append(brute_force_rank(score_fn, graph, "head", t.tail,
                                      t.relation, t.head))
    mrr = sum(1.0 / r for r in ranks) / len(ranks)
    hits = [sum(1 for r in ranks if r <= k) / len(ranks) for k in (1, 3, 10)]
    return mrr, hits[0], hits[1], hits[2]


class ScriptedBackend(GenerationBackend):
    """Relevance scores looked up per image ref; generate echoes subjects."""

    backend_id = "scripted"
    model_id = "scripted"

    def __init__(self, scores: dict[str, float] | None = None,
                 texts: list[str] | None = None):
        super().__init__()
        self.scores = scores or {}
        self.texts = list(texts or [])

    def generate(self, request):
        self.call_count += 1
        if self.texts:
            return self.texts.pop(0)
        return "scripted text about " + " and ".join(request.subjects)

    def relevance(self, request):
        self.call_count += 1
        ref = request.images[0] if request.images else ""
        return self.scores.get(ref, 0.0)


def two_cluster_graph():
    """60 entities in two clusters, 2 functional relations, 400/50 split.

    r0 maps a_i -> b_i, r1 maps b_i -> a_{i+1 mod 30}; the 60 ground facts are
    cycled to 400 train lines (duplicates preserved by contract) and the first
    50 are the test triples, so every query has a unique memorizable answer.
    """
    entities = make_vocab([f"a{i}" for i in range(30)]
                          + [f"b{i}" for i in range(30)])
    relations = make_vocab(["r0", "r1"])
    facts = []
    for i in range(30):
        facts.append(Triple(i, 0, 30 + i))
        facts.append(Triple(30 + i, 1, (i + 1) % 30))
    train = [facts[i % len(facts)] for i in range(400)]
    test = facts[:50]
    return KnowledgeGraph(entities, relations,
                          {"train": train, "valid": [], "test": test})


@pytest.fixture
def arles():
    from fichad.kg import load_dataset
    return load_dataset(ARLES_CONFIG)


def write_synthetic_dataset(path: Path, n_entities=500, n_relations=8,
                            n_train=600, n_valid=40, n_test=40, seed=13,
                            images_per_entity=2, image_cap=3) -> Path:
    """Write a synthetic benchmark to disk and return its config path."""
    rng = random.Random(seed)
    path.mkdir(parents=True, exist_ok=True)
    ents = [f"ent_{i:04d}" for i in range(n_entities)]
    rels = [f"rel_{i}" for i in range(n_relations)]

    def rand_triples(n):
        return [(rng.choice(ents), rng.choice(rels), rng.choice(ents))
                for _ in range(n)]

    for name, n in (("train", n_train), ("valid", n_valid), ("test", n_test)):
        with open(path / f"{name}.tsv", "w", encoding="utf-8") as fh:
            for h, r, t in rand_triples(n):
                fh.write(f"{h}\t{r}\t{t}\n")
    with open(path / "images.tsv", "w", encoding="utf-8") as fh:
        for e in ents:
            for j in range(images_per_entity):
                fh.write(f"{e}\timg/{e}_{j}.jpg\n")
    with open(path / "descriptions.tsv", "w", encoding="utf-8") as fh:
        for e in ents[: n_entities // 2]:
            fh.write(f"{e}\t{e} is a synthetic entity. It exists for tests.\n")
    config = path / "dataset.json"
    config.write_text(
        '{"id": "synthetic", "train": "train.tsv", "valid": "valid.tsv", '
        '"test": "test.tsv", "images": "images.tsv", '
        f'"descriptions": "descriptions.tsv", "image_cap": {image_cap}}}\n',
        encoding="utf-8")
    return config
