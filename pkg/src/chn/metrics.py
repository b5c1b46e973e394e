"""Retrieval metrics: MAP@R, Hamming-radius precision-recall curves and
precision@top-R, with the shared-label relevance rule.

Rankings are given as a query-by-database distance matrix; items are
ordered by ascending distance with ties broken by ascending database
index, the same order :func:`chn.hashing.search` returns.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError, UndefinedMetricError
from .hashing import rank_by_distance


@dataclass
class CurvePoints:
    x: np.ndarray
    y: np.ndarray

    def __iter__(self):
        return iter(zip(self.x.tolist(), self.y.tolist()))

    def __len__(self):
        return len(self.x)

    def to_csv(self, header=("x", "y")) -> str:
        lines = [",".join(header)]
        lines.extend(f"{repr(float(a))},{repr(float(b))}" for a, b in self)
        return "\n".join(lines) + "\n"

    def save_csv(self, path, header=("x", "y")) -> None:
        Path(path).write_text(self.to_csv(header), encoding="utf-8")


def relevant(q_labels, d_labels) -> bool:
    q = np.asarray(q_labels)
    d = np.asarray(d_labels)
    if q.shape != d.shape:
        raise ShapeError(f"label dims differ: {q.shape} vs {d.shape}")
    return bool(np.any((q != 0) & (d != 0)))


def relevance_matrix(query_labels, db_labels) -> np.ndarray:
    q = np.atleast_2d(np.asarray(query_labels) != 0).astype(np.int64)
    d = np.atleast_2d(np.asarray(db_labels) != 0).astype(np.int64)
    if q.shape[1] != d.shape[1]:
        raise ShapeError(f"label dims differ: {q.shape[1]} vs {d.shape[1]}")
    return (q @ d.T) > 0


def average_precision(ranked_relevance: Sequence[bool], R: int, total_relevant: int) -> float:
    """AP over the top ``R`` ranks, normalised by ``min(R, total_relevant)``."""
    if R <= 0:
        raise ConfigError("R must be positive")
    if total_relevant <= 0:
        return 0.0
    rel = np.asarray(ranked_relevance, dtype=bool)[:R]
    if not rel.any():
        return 0.0
    hits = np.cumsum(rel)
    ranks = np.arange(1, len(rel) + 1)
    return float(np.sum((hits / ranks)[rel]) / min(R, total_relevant))


def _check(distances, relevance):
    distances = np.atleast_2d(np.asarray(distances))
    relevance = np.atleast_2d(np.asarray(relevance, dtype=bool))
    if distances.shape != relevance.shape:
        raise ShapeError(f"distance shape {distances.shape} != relevance shape {relevance.shape}")
    return distances, relevance


def ap_per_query(distances, relevance, R: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """AP@R of every query plus a mask of queries with at least one relevant item."""
    distances, relevance = _check(distances, relevance)
    order = rank_by_distance(distances)
    ranked = np.take_along_axis(relevance, order, axis=1)
    totals = relevance.sum(axis=1)
    aps = np.array([average_precision(ranked[q], R, int(totals[q])) for q in range(len(ranked))])
    return aps, totals > 0


def map_at_r(distances, relevance, R: int = 50) -> float:
    """Mean AP@R over queries that have any relevant database item."""
    aps, eligible = ap_per_query(distances, relevance, R)
    if not eligible.any():
        raise UndefinedMetricError("no query has a relevant database item")
    return float(aps[eligible].mean())


def precision_recall_curve(distances, relevance, b: int) -> CurvePoints:
    """Mean (recall, precision) at every Hamming radius ``t = 0..b``.

    A query whose radius-``t`` ball is empty counts as precision 1.
    Queries with no relevant item are skipped, as for MAP. Recall is
    nondecreasing in ``t`` but may repeat, so ``x`` can plateau.
    """
    distances, relevance = _check(distances, relevance)
    totals = relevance.sum(axis=1)
    keep = totals > 0
    if not keep.any():
        raise UndefinedMetricError("no query has a relevant database item")
    distances, relevance, totals = distances[keep], relevance[keep], totals[keep]
    xs, ys = [], []
    for t in range(b + 1):
        inside = distances <= t
        retrieved = inside.sum(axis=1)
        hits = (inside & relevance).sum(axis=1)
        prec = np.where(retrieved > 0, hits / np.maximum(retrieved, 1), 1.0)
        xs.append(float(np.mean(hits / totals)))
        ys.append(float(np.mean(prec)))
    return CurvePoints(np.array(xs), np.array(ys))


def precision_at_top_r(distances, relevance, grid: Sequence[int]) -> CurvePoints:
    """Mean fraction of relevant items in the top ``R`` for each ``R`` in ``grid``."""
    distances, relevance = _check(distances, relevance)
    grid = [int(r) for r in grid]
    if any(r <= 0 for r in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ConfigError("grid must be strictly ascending positive integers")
    order = rank_by_distance(distances)
    ranked = np.take_along_axis(relevance, order, axis=1)
    hits = np.cumsum(ranked, axis=1)
    n = ranked.shape[1]
    ys = [float(np.mean(hits[:, min(r, n) - 1] / r)) for r in grid]
    return CurvePoints(np.array(grid, dtype=np.float64), np.array(ys))


def format_metrics(metrics: dict) -> str:
    lines = []
    for key, value in metrics.items():
        if isinstance(value, float):
            lines.append(f"{key}={value:.4f}")
        else:
            lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"
