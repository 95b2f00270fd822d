"""Filtered link-prediction protocol: candidate filtering, ranking, metrics.

Every test triple yields two queries (tail prediction and head prediction).
Candidates are all entities minus other known-true answers across
train ∪ valid ∪ test; ties get the real-valued mean rank, so a constant scorer
cannot game Hits@K.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .kg import KnowledgeGraph

TAIL, HEAD = "tail", "head"


class EvalError(Exception):
    pass


@dataclass(frozen=True)
class Query:
    """One link-prediction query: (known, r, ?) or (?, r, known)."""

    direction: str  # TAIL predicts the tail, HEAD predicts the head
    known: int
    relation: int
    answer: int


@dataclass
class DirectionReport:
    mrr: float
    hits1: float
    hits3: float
    hits10: float
    n_queries: int

    def to_dict(self) -> dict:
        return {"mrr": self.mrr, "hits1": self.hits1, "hits3": self.hits3,
                "hits10": self.hits10, "n_queries": self.n_queries}


@dataclass
class EvalReport:
    mrr: float
    hits1: float
    hits3: float
    hits10: float
    head: DirectionReport
    tail: DirectionReport
    n_queries: int

    def to_dict(self) -> dict:
        return {"mrr": self.mrr, "hits1": self.hits1, "hits3": self.hits3,
                "hits10": self.hits10, "head": self.head.to_dict(),
                "tail": self.tail.to_dict(), "n_queries": self.n_queries}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_table(self) -> str:
        rows = [("all", self), ("head", self.head), ("tail", self.tail)]
        lines = [f"{'':>6}  {'MRR':>8}  {'H@1':>8}  {'H@3':>8}  {'H@10':>8}  {'#q':>7}"]
        for name, r in rows:
            lines.append(f"{name:>6}  {r.mrr:8.4f}  {r.hits1:8.4f}  "
                         f"{r.hits3:8.4f}  {r.hits10:8.4f}  {r.n_queries:7d}")
        return "\n".join(lines)


def filtered_candidates(graph: KnowledgeGraph, query: Query) -> np.ndarray:
    """Sorted entity handles remaining after filtered-protocol removal.

    Removes every entity (other than the true answer) whose substitution forms
    a triple known in any split; the true answer is always kept.
    """
    if query.direction == TAIL:
        known_true = graph.known_tails(query.known, query.relation)
    elif query.direction == HEAD:
        known_true = graph.known_heads(query.known, query.relation)
    else:
        raise ValueError(f"unknown direction: {query.direction!r}")
    removed = known_true - {query.answer}
    if not removed:
        return np.arange(graph.n_entities)
    keep = np.ones(graph.n_entities, dtype=bool)
    keep[list(removed)] = False
    return np.flatnonzero(keep)


def rank(scores: np.ndarray, candidates: np.ndarray, true_entity: int) -> float:
    """Mean-tie real-valued rank of ``true_entity`` within ``candidates``.

    rank = 1 + #{strictly greater} + #{ties excluding the true answer} / 2.
    """
    idx = np.flatnonzero(candidates == true_entity)
    if idx.size != 1:
        raise EvalError(f"true entity {true_entity} missing from candidate scores")
    s_true = scores[idx[0]]
    greater = int(np.sum(scores > s_true))
    ties = int(np.sum(scores == s_true)) - 1
    return 1.0 + greater + ties / 2.0


def queries_for_split(graph: KnowledgeGraph, split: str) -> list[Query]:
    out = []
    for tr in graph.splits[split]:
        out.append(Query(TAIL, tr.head, tr.relation, tr.tail))
        out.append(Query(HEAD, tr.tail, tr.relation, tr.head))
    return out


def evaluate(scorer, graph: KnowledgeGraph, split: str = "test") -> EvalReport:
    """Run the filtered protocol over ``split``.

    ``scorer(query, candidates)`` must return a score array aligned with the
    candidate handles; higher = more plausible.
    """
    queries = queries_for_split(graph, split)
    if not queries:
        raise EvalError(f"split {split!r} is empty")
    ranks = {TAIL: [], HEAD: []}
    for q in queries:
        cands = filtered_candidates(graph, q)
        scores = np.asarray(scorer(q, cands), dtype=np.float64)
        if scores.shape != cands.shape:
            raise EvalError("scorer returned wrong-shaped score array")
        ranks[q.direction].append(rank(scores, cands, q.answer))
    return report_from_ranks(ranks[HEAD], ranks[TAIL])


def _direction_report(ranks: list[float]) -> DirectionReport:
    r = np.asarray(ranks, dtype=np.float64)
    return DirectionReport(
        mrr=float(np.mean(1.0 / r)),
        hits1=float(np.mean(r <= 1)),
        hits3=float(np.mean(r <= 3)),
        hits10=float(np.mean(r <= 10)),
        n_queries=len(ranks),
    )


def report_from_ranks(head_ranks: list[float],
                      tail_ranks: list[float]) -> EvalReport:
    """Aggregate per-direction rank lists into the full report."""
    all_ranks = np.asarray(list(head_ranks) + list(tail_ranks), dtype=np.float64)
    if all_ranks.size == 0:
        raise EvalError("no ranks to aggregate")
    return EvalReport(
        mrr=float(np.mean(1.0 / all_ranks)),
        hits1=float(np.mean(all_ranks <= 1)),
        hits3=float(np.mean(all_ranks <= 3)),
        hits10=float(np.mean(all_ranks <= 10)),
        head=_direction_report(head_ranks) if head_ranks else DirectionReport(0, 0, 0, 0, 0),
        tail=_direction_report(tail_ranks) if tail_ranks else DirectionReport(0, 0, 0, 0, 0),
        n_queries=int(all_ranks.size),
    )


def model_scorer(model):
    """Adapt an :class:`~fichad.embed.EmbeddingModel` to the scorer contract."""

    def scorer(query: Query, candidates: np.ndarray) -> np.ndarray:
        if query.direction == TAIL:
            return model.score_tails(query.known, query.relation, candidates)
        return model.score_heads(query.relation, query.known, candidates)

    return scorer
