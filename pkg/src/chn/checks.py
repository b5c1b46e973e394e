"""Randomised verification suites used by the CLI and the acceptance tests."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hashing import BoundReport, quantization_bound_report
from .losses import SimilaritySet, finite_diff_check, kink_margin, output_residuals
from .net import forward, init_network, stack_specs


@dataclass
class GradientCase:
    nets: tuple
    batch: tuple
    S: SimilaritySet
    lam: float
    gamma: float


def random_gradient_case(seed: int, min_margin: float = 1e-3, min_norm: float = 0.0) -> GradientCase:
    """A small random (nets, batch, pairs, weights) configuration.

    Draws are repeated until every ReLU pre-activation and hash output is
    at least ``min_margin`` away from zero, where the loss has kinks, and
    every embedding has norm at least ``min_norm``.
    """
    rng = np.random.default_rng(seed)
    while True:
        d_x, d_y = rng.integers(3, 7, 2)
        bits = int(rng.integers(2, 6))
        n = int(rng.integers(3, 7))
        hidden_x = [int(h) for h in rng.integers(2, 6, rng.integers(0, 3))]
        hidden_y = [int(h) for h in rng.integers(2, 6, rng.integers(0, 3))]
        image = init_network(stack_specs(d_x, hidden_x, bits), int(rng.integers(2 ** 31)))
        text = init_network(stack_specs(d_y, hidden_y, bits), int(rng.integers(2 ** 31)))
        for net in (image, text):
            for b in net.biases:
                b[:] = rng.normal(0.0, 0.1, b.shape)
        X = rng.normal(size=(n, d_x))
        Y = (rng.random((n, d_y)) < 0.5).astype(np.float64) + rng.normal(0.0, 0.05, (n, d_y))
        labels = rng.random((n, 3)) < 0.4
        S = SimilaritySet.all_pairs(labels)
        lam, gamma = float(rng.uniform(0, 1)), float(rng.uniform(0, 1))
        norms = np.linalg.norm(np.concatenate([forward(image, X).output, forward(text, Y).output]), axis=1)
        if kink_margin((image, text), (X, Y)) >= min_margin and norms.min() >= min_norm:
            return GradientCase((image, text), (X, Y), S, lam, gamma)


def sign_flipped_quantization(U, V, S, lam, gamma):
    """Residuals with the quantization term's sign reversed (a known-bad mutant)."""
    return output_residuals(U, V, S, lam, -gamma)


def gradient_suite(n_configs: int = 100, seed: int = 0, step: float = 1e-5) -> list[float]:
    """Max relative finite-difference error for each of ``n_configs`` random cases."""
    seeds = np.random.SeedSequence(seed).generate_state(n_configs)
    errors = []
    for s in seeds:
        case = random_gradient_case(int(s))
        errors.append(finite_diff_check(case.nets, case.batch, case.S, case.lam, case.gamma, step))
    return errors


def sample_embeddings(bits: int, n_uniform: int, seed: int, with_vertices: bool = True) -> np.ndarray:
    """Uniform draws from ``(-1, 1)^bits`` followed, optionally, by every +-1 vertex."""
    rng = np.random.default_rng(seed)
    parts = [rng.uniform(-1.0, 1.0, (n_uniform, bits))]
    if with_vertices:
        ids = np.arange(2 ** bits, dtype=np.int64)
        parts.append(np.where((ids[:, None] >> np.arange(bits)) & 1, 1.0, -1.0))
    return np.concatenate(parts)


def bound_report_csv(report: BoundReport) -> str:
    lines = ["item,itq_error,bound_rhs,identity_lhs,exact_rhs,violated"]
    for k, itq, rhs, lhs, exact, bad in report.rows():
        lines.append(",".join([str(k), *(repr(float(v)) for v in (itq, rhs, lhs, exact)), str(int(bad))]))
    return "\n".join(lines) + "\n"


def bound_suite(bits: int, n_uniform: int, seed: int) -> BoundReport:
    return quantization_bound_report(sample_embeddings(bits, n_uniform, seed))
