"""Brute-force reference implementations for the retrieval metrics.

Everything here works on Python lists with explicit loops so that it
shares no code path with the vectorised package implementation.
"""
import itertools

import numpy as np


def bits_distance(a, b):
    return sum(1 for x, y in zip(a, b) if x != y)


def brute_rank(q_bits, db_bits):
    """Database indices sorted by (distance, index)."""
    keyed = [(bits_distance(q_bits, d), k) for k, d in enumerate(db_bits)]
    return [k for _, k in sorted(keyed)]


def brute_ap(rel_list, R, total):
    if total == 0:
        return 0.0
    s = 0.0
    hits = 0
    for r, rel in enumerate(rel_list[:R], start=1):
        if rel:
            hits += 1
            s += hits / r
    return s / min(R, total)


def brute_map(q_bits, db_bits, rel, R):
    aps = []
    for q in range(len(q_bits)):
        total = sum(rel[q])
        if total == 0:
            continue
        order = brute_rank(q_bits[q], db_bits)
        aps.append(brute_ap([rel[q][k] for k in order], R, total))
    return sum(aps) / len(aps) if aps else None


def brute_pr(q_bits, db_bits, rel, b):
    xs, ys = [], []
    eligible = [q for q in range(len(q_bits)) if sum(rel[q]) > 0]
    for t in range(b + 1):
        rec, prec = [], []
        for q in eligible:
            ball = [k for k in range(len(db_bits)) if bits_distance(q_bits[q], db_bits[k]) <= t]
            hits = sum(1 for k in ball if rel[q][k])
            rec.append(hits / sum(rel[q]))
            prec.append(hits / len(ball) if ball else 1.0)
        xs.append(sum(rec) / len(rec))
        ys.append(sum(prec) / len(prec))
    return xs, ys


def brute_top_r(q_bits, db_bits, rel, grid):
    out = []
    for R in grid:
        vals = []
        for q in range(len(q_bits)):
            order = brute_rank(q_bits[q], db_bits)
            vals.append(sum(rel[q][k] for k in order[:R]) / R)
        out.append(sum(vals) / len(vals))
    return out


def expected_random_ap(N, T, R):
    """Exact mean AP@R of a uniformly random ranking of N items, T relevant.

    E[rel_k * hits_k] = (T/N) * (1 + (k-1)(T-1)/(N-1)) by the hypergeometric
    pair probability, and AP is linear in those terms.
    """
    if T == 0:
        return 0.0
    s = 0.0
    for k in range(1, min(R, N) + 1):
        s += (T / N) * (1 + (k - 1) * (T - 1) / max(N - 1, 1)) / k
    return s / min(R, T)


def enumerate_permutation_ap(rel, R):
    """Mean AP@R over every permutation of a tiny relevance vector."""
    total = sum(rel)
    vals = [brute_ap(list(p), R, total) for p in itertools.permutations(rel)]
    return float(np.mean(vals))
