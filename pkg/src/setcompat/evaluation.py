"""Ranking metrics, fill-in-the-blank evaluation, and embedding export."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import FitbQuery, ItemRecord, write_features
from .errors import EngineError, InputError
from .model import ItemInput, ModelParams, embed_item, score_outfit


class EvaluationError(EngineError, ValueError):
    pass


def auc(pos_scores, neg_scores) -> float:
    """Probability a random positive outscores a random negative, ties half.

    Computed with the rank-sum identity over the pooled scores, which
    equals brute-force pair counting exactly.
    """
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise EvaluationError("auc needs at least one score in each class")
    pooled = np.concatenate([pos, neg])
    order = np.argsort(pooled, kind="stable")
    ranks = np.empty(pooled.size, dtype=np.float64)
    sorted_scores = pooled[order]
    # run boundaries of equal scores; ties share their average 1-based rank
    boundaries = np.flatnonzero(np.r_[True, sorted_scores[1:] != sorted_scores[:-1], True])
    for lo, hi in zip(boundaries[:-1], boundaries[1:]):
        ranks[order[lo:hi]] = 0.5 * (lo + hi + 1)
    rank_sum_pos = ranks[: pos.size].sum()
    u = rank_sum_pos - pos.size * (pos.size + 1) / 2.0
    return u / (pos.size * neg.size)


@dataclass
class EvalReport:
    auc: float
    n_pos: int
    n_neg: int
    histogram: dict


def eval_compat(
    params: ModelParams, labeled: Sequence[tuple[Sequence[ItemInput], int]]
) -> EvalReport:
    """Score every labeled outfit in eval mode and report the AUC."""
    pos, neg = [], []
    for items, label in labeled:
        score = score_outfit(params, items, mode="eval")
        (pos if label == 1 else neg).append(score.m_s)
    if not pos or not neg:
        raise EvaluationError(
            f"need both classes to evaluate: {len(pos)} positive, {len(neg)} negative"
        )
    edges = np.linspace(0.0, 1.0, 11)
    histogram = {
        "bin_edges": edges.tolist(),
        "pos": np.histogram(pos, bins=edges)[0].tolist(),
        "neg": np.histogram(neg, bins=edges)[0].tolist(),
    }
    return EvalReport(auc=auc(pos, neg), n_pos=len(pos), n_neg=len(neg), histogram=histogram)


@dataclass
class FitbResult:
    outfit_id: str
    chosen: int
    answer: int
    scores: tuple[float, float, float, float]
    tied: bool


@dataclass
class FitbReport:
    accuracy: float
    n_queries: int
    n_excluded: int
    n_ties: int
    results: list[FitbResult] = field(default_factory=list)


def eval_fitb(
    params: ModelParams,
    queries: Sequence[FitbQuery],
    items: Mapping[str, ItemInput],
) -> FitbReport:
    """Pick the candidate maximizing the completed outfit's score.

    Ties break to the lowest candidate index and are flagged. Queries
    referencing items without features are excluded and counted, not
    fatal.
    """
    results: list[FitbResult] = []
    n_excluded = 0
    n_ties = 0
    correct = 0
    for q in queries:
        try:
            partial = [items[i] for i in q.partial_items]
            candidates = [items[i] for i in q.candidates]
        except KeyError:
            n_excluded += 1
            continue
        scores = tuple(
            score_outfit(params, partial + [cand], mode="eval").m_s for cand in candidates
        )
        best = max(scores)
        chosen = scores.index(best)
        tied = scores.count(best) > 1
        if tied:
            n_ties += 1
        if chosen == q.answer_index:
            correct += 1
        results.append(
            FitbResult(
                outfit_id=q.outfit_id,
                chosen=chosen,
                answer=q.answer_index,
                scores=scores,
                tied=tied,
            )
        )
    if not results:
        raise EvaluationError("no scorable queries")
    return FitbReport(
        accuracy=correct / len(results),
        n_queries=len(results),
        n_excluded=n_excluded,
        n_ties=n_ties,
        results=results,
    )


def export_embeddings(params: ModelParams, items: Sequence[ItemInput], path) -> None:
    """Write each item's compatibility embedding in the feature-file format."""
    records = [ItemRecord(it.item_id, embed_item(params, it)) for it in items]
    write_features(records, path)


@dataclass
class Pca2dResult:
    coords: np.ndarray  # (n, 2)
    components: np.ndarray  # (2, d), rows orthonormal (zero row if deficient)
    variances: tuple[float, float]
    rank_deficient: bool


_POWER_TOL = 1e-9
_POWER_MAX_ITERS = 1000


def _power_iteration(cov: np.ndarray) -> tuple[float, np.ndarray]:
    d = cov.shape[0]
    starts = [np.full(d, 1.0 / np.sqrt(d))]
    starts += [np.eye(d)[k] for k in (int(np.argmax(np.diag(cov))), 0)]
    best_lam, best_v = 0.0, np.zeros(d)
    for start in starts:
        v = start
        for _ in range(_POWER_MAX_ITERS):
            w = cov @ v
            norm = float(np.linalg.norm(w))
            if norm < 1e-30:
                break
            nxt = w / norm
            if float(np.linalg.norm(nxt - v)) < _POWER_TOL:
                v = nxt
                break
            v = nxt
        lam = float(v @ cov @ v)
        if lam > best_lam:
            best_lam, best_v = lam, v
    return best_lam, best_v


def _fix_sign(v: np.ndarray) -> np.ndarray:
    # deterministic orientation: the largest-magnitude entry is positive
    idx = int(np.argmax(np.abs(v)))
    return -v if v[idx] < 0 else v


def pca2d(vectors: np.ndarray) -> Pca2dResult:
    """Project onto the top-2 principal axes via power iteration.

    Rank-deficient inputs get a zeroed second (or first) component and
    the ``rank_deficient`` flag instead of an error.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InputError(f"pca2d needs an (n >= 2, d) matrix, got {x.shape}")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    lam1, v1 = _power_iteration(cov)
    d = x.shape[1]
    if lam1 <= 1e-30:
        return Pca2dResult(
            coords=np.zeros((x.shape[0], 2)),
            components=np.zeros((2, d)),
            variances=(0.0, 0.0),
            rank_deficient=True,
        )
    v1 = _fix_sign(v1)
    deflated = cov - lam1 * np.outer(v1, v1)
    lam2, v2 = _power_iteration(deflated)
    rank_deficient = lam2 <= lam1 * 1e-8
    if rank_deficient:
        lam2, v2 = 0.0, np.zeros(d)
    else:
        v2 = _fix_sign(v2)
    components = np.vstack([v1, v2])
    coords = centered @ components.T
    return Pca2dResult(
        coords=coords,
        components=components,
        variances=(lam1, lam2),
        rank_deficient=rank_deficient,
    )
