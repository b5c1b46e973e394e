"""Squared cosine correlation losses, cosine quantization loss, and the
exact output-layer residuals that drive backprop.

Embedding matrices hold one item per row: ``U`` for the image side and
``V`` for the text side. Pair sets are index arrays into those rows.

The residuals returned by :func:`output_residuals` are the analytic
gradient of :func:`joint_loss` with respect to the tanh pre-activations.
The quantization part enters with a negative sign because the loss term
is ``-cos(|u|, 1)``; :func:`finite_diff_check` is the arbiter.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ShapeError

EPS = 1e-12
ATANH_CLAMP = 1.0 - 1e-12


@dataclass(frozen=True)
class SimilaritySet:
    """Labeled pairs ``(i, j, s)`` with ``s`` in ``{-1, +1}``."""

    i: np.ndarray
    j: np.ndarray
    s: np.ndarray
    warning: str | None = field(default=None, compare=False)

    def __post_init__(self):
        i = np.asarray(self.i, dtype=np.int64).reshape(-1)
        j = np.asarray(self.j, dtype=np.int64).reshape(-1)
        s = np.asarray(self.s, dtype=np.int64).reshape(-1)
        if not (len(i) == len(j) == len(s)):
            raise ShapeError("pair arrays differ in length")
        if len(s) and not np.all(np.abs(s) == 1):
            raise ConfigError("similarity labels must be +1 or -1")
        if len(i):
            keys = np.stack([i, j], axis=1)
            if len(np.unique(keys, axis=0)) != len(keys):
                raise ConfigError("duplicate (i, j) pair in similarity set")
        object.__setattr__(self, "i", i)
        object.__setattr__(self, "j", j)
        object.__setattr__(self, "s", s)

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[int, int, int]], warning=None) -> "SimilaritySet":
        if len(pairs) == 0:
            return cls(np.zeros(0), np.zeros(0), np.zeros(0), warning)
        arr = np.asarray(pairs, dtype=np.int64)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2], warning)

    @classmethod
    def all_pairs(cls, labels) -> "SimilaritySet":
        """Every unordered pair ``i < j`` with ``s = +1`` iff a label is shared."""
        labels = np.asarray(labels)
        n = labels.shape[0]
        i, j = np.triu_indices(n, k=1)
        shared = (labels.astype(np.int64) @ labels.T.astype(np.int64)) > 0
        s = np.where(shared[i, j], 1, -1)
        return cls(i, j, s)

    def __len__(self):
        return len(self.s)

    def check_indices(self, n: int) -> None:
        if len(self) and (min(self.i.min(), self.j.min()) < 0 or max(self.i.max(), self.j.max()) >= n):
            raise IndexError(f"pair index out of range for {n} items")


@dataclass(frozen=True)
class LossReport:
    c_xy: float
    c_xx: float
    c_yy: float
    q_x: float
    q_y: float
    lam: float
    gamma: float
    total: float
    cross: float = 1.0

    def as_dict(self) -> dict:
        return {"c_xy": self.c_xy, "c_xx": self.c_xx, "c_yy": self.c_yy,
                "q_x": self.q_x, "q_y": self.q_y, "lambda": self.lam,
                "gamma": self.gamma, "cross": self.cross, "total": self.total}


@dataclass
class ResidualPair:
    image_residuals: np.ndarray
    text_residuals: np.ndarray


# -- vector primitives --------------------------------------------------------

def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ShapeError(f"cosine of vectors with shapes {u.shape} and {v.shape}")
    c = float(u @ v) / (max(np.linalg.norm(u), EPS) * max(np.linalg.norm(v), EPS))
    return min(1.0, max(-1.0, c))


def grad_cosine(u, v) -> tuple[np.ndarray, np.ndarray]:
    """Partial derivatives of ``cos(u, v)`` with respect to ``u`` and ``v``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ShapeError(f"grad_cosine of vectors with shapes {u.shape} and {v.shape}")
    nu = max(np.linalg.norm(u), EPS)
    nv = max(np.linalg.norm(v), EPS)
    dot = float(u @ v)
    du = v / (nu * nv) - u * dot / (nu ** 3 * nv)
    dv = u / (nu * nv) - v * dot / (nv ** 3 * nu)
    return du, dv


def sgn(x):
    """Sign with ``sgn(0) = -1``."""
    return np.where(np.asarray(x) > 0, 1.0, -1.0)


def quant_cosine(u) -> np.ndarray | float:
    """``cos(|u|, 1)``, row-wise for matrices."""
    u = np.asarray(u, dtype=np.float64)
    b = u.shape[-1]
    norm = np.maximum(np.linalg.norm(u, axis=-1), EPS)
    return np.abs(u).sum(axis=-1) / (norm * np.sqrt(b))


def grad_quant(u) -> np.ndarray:
    """Gradient of ``-cos(|u|, 1)`` with respect to ``u``.

    Uses ``sgn(0) = -1`` for the derivative of ``|u_k|`` at zero.
    """
    u = np.asarray(u, dtype=np.float64)
    b = u.shape[-1]
    norm = np.maximum(np.linalg.norm(u, axis=-1, keepdims=True), EPS)
    l1 = np.abs(u).sum(axis=-1, keepdims=True)
    g = sgn(u) / (np.sqrt(b) * norm) - u * l1 / (np.sqrt(b) * norm ** 3)
    return -g


# -- batched pair terms -------------------------------------------------------

def _rows_cos(A, B):
    na = np.maximum(np.linalg.norm(A, axis=1), EPS)
    nb = np.maximum(np.linalg.norm(B, axis=1), EPS)
    dot = np.einsum("ij,ij->i", A, B)
    return dot, na, nb


def _sq_cos_term(A, B, s, weight):
    """Loss ``sum (s - cos(a, b))^2`` and its row gradients w.r.t. A and B."""
    dot, na, nb = _rows_cos(A, B)
    c = np.clip(dot / (na * nb), -1.0, 1.0)
    r = c - s
    loss = float(np.sum(r * r))
    coef = (2.0 * weight * r)[:, None]
    inv = 1.0 / (na * nb)
    gA = coef * (B * inv[:, None] - A * (dot / (na ** 3 * nb))[:, None])
    gB = coef * (A * inv[:, None] - B * (dot / (nb ** 3 * na))[:, None])
    return loss, gA, gB


def _validate(U, V, S: SimilaritySet):
    U = np.asarray(U, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if U.ndim != 2 or U.shape != V.shape:
        raise ShapeError(f"embedding shapes {U.shape} and {V.shape} must match")
    S.check_indices(U.shape[0])
    return U, V


def _loss_and_grads(U, V, S: SimilaritySet, lam: float, gamma: float, need_grads: bool,
                    cross: float = 1.0):
    U, V = _validate(U, V, S)
    gU = np.zeros_like(U)
    gV = np.zeros_like(V)
    if len(S) == 0:
        return LossReport(0.0, 0.0, 0.0, 0.0, 0.0, float(lam), float(gamma), 0.0, float(cross)), gU, gV
    i, j = S.i, S.j
    s = S.s.astype(np.float64)
    Ui, Uj, Vi, Vj = U[i], U[j], V[i], V[j]

    c1, g_ui, g_vj = _sq_cos_term(Ui, Vj, s, cross)
    c2, g_vi, g_uj = _sq_cos_term(Vi, Uj, s, cross)
    cxx, g_ui2, g_uj2 = _sq_cos_term(Ui, Uj, s, lam)
    cyy, g_vi2, g_vj2 = _sq_cos_term(Vi, Vj, s, lam)

    # each item's quantization term appears once per pair it belongs to
    n = U.shape[0]
    counts = np.bincount(i, minlength=n) + np.bincount(j, minlength=n)
    qU = quant_cosine(U)
    qV = quant_cosine(V)
    q_x = -float(counts @ qU)
    q_y = -float(counts @ qV)

    c_xy = c1 + c2
    total = cross * c_xy + lam * (cxx + cyy) + gamma * (q_x + q_y)
    report = LossReport(c_xy, cxx, cyy, q_x, q_y, float(lam), float(gamma), float(total), float(cross))
    if need_grads:
        np.add.at(gU, i, g_ui + g_ui2)
        np.add.at(gU, j, g_uj + g_uj2)
        np.add.at(gV, i, g_vi + g_vi2)
        np.add.at(gV, j, g_vj + g_vj2)
        gU += gamma * counts[:, None] * grad_quant(U)
        gV += gamma * counts[:, None] * grad_quant(V)
    return report, gU, gV


def joint_loss(U, V, S: SimilaritySet, lam: float = 1.0, gamma: float = 0.1,
               cross: float = 1.0) -> LossReport:
    """``C_xy + lam*(C_xx + C_yy) + gamma*(Q_x + Q_y)`` over the pairs in ``S``.

    ``cross`` scales ``C_xy`` in the total; it is 0 only for the
    within-modal-only ablation.
    """
    if lam < 0 or gamma < 0 or cross < 0:
        raise ConfigError("loss weights must be nonnegative")
    report, _, _ = _loss_and_grads(U, V, S, lam, gamma, need_grads=False, cross=cross)
    return report


def embedding_gradients(U, V, S: SimilaritySet, lam: float, gamma: float, cross: float = 1.0):
    """Gradients of the joint loss w.r.t. the embeddings themselves."""
    report, gU, gV = _loss_and_grads(U, V, S, lam, gamma, need_grads=True, cross=cross)
    return report, gU, gV


def output_residuals(U, V, S: SimilaritySet, lam: float, gamma: float,
                     with_report: bool = False, cross: float = 1.0):
    """dL/d(pre-activation) for both tanh hash layers.

    ``U`` and ``V`` are the tanh outputs, so the chain factor is ``1 - u**2``.
    """
    report, gU, gV = _loss_and_grads(U, V, S, lam, gamma, need_grads=True, cross=cross)
    U = np.clip(np.asarray(U, dtype=np.float64), -ATANH_CLAMP, ATANH_CLAMP)
    V = np.clip(np.asarray(V, dtype=np.float64), -ATANH_CLAMP, ATANH_CLAMP)
    res = ResidualPair(gU * (1.0 - U * U), gV * (1.0 - V * V))
    if with_report:
        return res, report
    return res


# -- finite-difference oracle -------------------------------------------------

ResidualFn = Callable[..., ResidualPair]


def _batch_embeddings(nets, batch, mode, seed):
    from .net import forward

    image_net, text_net = nets
    X, Y = batch
    tu = forward(image_net, X, mode=mode, seed=seed)
    tv = forward(text_net, Y, mode=mode, seed=None if seed is None else seed + 1)
    return tu, tv


def _oracle_forward(layers, params, X, masks):
    """Plain forward pass in extended precision, independent of ``chn.net``."""
    h = np.asarray(X, dtype=np.longdouble)
    for k, spec in enumerate(layers):
        W, b = params[2 * k], params[2 * k + 1]
        z = h @ W.T + b
        h = np.maximum(z, 0) if spec.activation == "relu" else np.tanh(z)
        if masks[k] is not None:
            h = h * masks[k].astype(np.longdouble)
    return h


def _oracle_loss(U, V, S: SimilaritySet, lam, gamma):
    """Joint loss written out pair by pair in extended precision."""
    one = np.longdouble(1)
    b = U.shape[1]

    def cos(a, c):
        return (a @ c) / (np.sqrt(a @ a) * np.sqrt(c @ c))

    def qcos(a):
        return np.abs(a).sum() / (np.sqrt(a @ a) * np.sqrt(np.longdouble(b)))

    total = np.longdouble(0)
    for i, j, s in zip(S.i, S.j, S.s):
        s = np.longdouble(s)
        total += (s - cos(U[i], V[j])) ** 2 + (s - cos(V[i], U[j])) ** 2
        total += lam * ((s - cos(U[i], U[j])) ** 2 + (s - cos(V[i], V[j])) ** 2)
        total -= gamma * (qcos(U[i]) + qcos(U[j]) + qcos(V[i]) + qcos(V[j]))
    return total * one


def finite_diff_check(nets, batch, S: SimilaritySet, lam: float, gamma: float,
                      step: float = 1e-5, residual_fn: ResidualFn | None = None,
                      mode: str = "eval", seed: int | None = None, stencil: int = 5) -> float:
    """Max relative error between backprop gradients and central differences.

    Every weight and bias of both nets is perturbed by ``+-step`` (and
    ``+-2*step`` for the default 5-point stencil) and the joint loss
    recomputed through full forward passes. The numeric side is a
    separate forward and loss implementation evaluated in extended
    precision, so cancellation in ``L(+h) - L(-h)`` stays far below the
    tolerance; the 5-point stencil keeps truncation error at O(h^4) for
    gradient entries much smaller than the loss curvature. ``stencil=3``
    gives the plain ``(L(+h) - L(-h)) / 2h`` difference.

    The relative error per entry uses ``max(|analytic|, |numeric|, 1e-8)``
    as denominator. ``residual_fn`` replaces :func:`output_residuals`
    (for mutation tests).
    """
    if not 1e-7 <= step <= 1e-3:
        raise ConfigError("step must lie in [1e-7, 1e-3]")
    if stencil not in (3, 5):
        raise ConfigError("stencil must be 3 or 5")
    tu, tv = _batch_embeddings(nets, batch, mode, seed)
    residual_fn = residual_fn or output_residuals
    res = residual_fn(tu.output, tv.output, S, lam, gamma)
    from .net import backward

    grads = (backward(nets[0], tu, res.image_residuals), backward(nets[1], tv, res.text_residuals))
    masks = (tu.masks or [None] * len(nets[0].layers), tv.masks or [None] * len(nets[1].layers))
    params = [[p.astype(np.longdouble) for p in net.parameters()] for net in nets]
    lam_l, gamma_l = np.longdouble(lam), np.longdouble(gamma)
    h = np.longdouble(step)

    def loss_now():
        U = _oracle_forward(nets[0].layers, params[0], batch[0], masks[0])
        V = _oracle_forward(nets[1].layers, params[1], batch[1], masks[1])
        return _oracle_loss(U, V, S, lam_l, gamma_l)

    worst = 0.0
    for side in range(2):
        for param, analytic in zip(params[side], grads[side].parameters()):
            for idx in np.ndindex(param.shape):
                orig = param[idx]
                f = {}
                for k in ((-2, -1, 1, 2) if stencil == 5 else (-1, 1)):
                    param[idx] = orig + k * h
                    f[k] = loss_now()
                param[idx] = orig
                if stencil == 5:
                    numeric = float((8 * (f[1] - f[-1]) - (f[2] - f[-2])) / (12 * h))
                else:
                    numeric = float((f[1] - f[-1]) / (2 * h))
                a = float(analytic[idx])
                denom = max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, abs(a - numeric) / denom)
    return worst


def kink_margin(nets, batch) -> float:
    """Smallest distance of any ReLU pre-activation or hash output from zero.

    Both ``max(0, z)`` and ``|u|`` are non-differentiable at zero, so a
    central difference whose step straddles such a point is meaningless.
    """
    tu, tv = _batch_embeddings(nets, batch, "eval", None)
    margin = np.inf
    for net, trace in zip(nets, (tu, tv)):
        for spec, z in zip(net.layers, trace.pre):
            if spec.activation == "relu":
                margin = min(margin, float(np.abs(z).min()))
        margin = min(margin, float(np.abs(trace.output).min()))
    return margin
