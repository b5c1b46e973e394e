"""Joint training of the image and text networks, encoding, and the
lambda/gamma grid search.
"""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import BimodalDataset, SplitSpec
from .errors import ConfigError, DivergenceError, ShapeError
from .hashing import HashCodeMatrix, binarize, hamming_matrix
from .losses import LossReport, SimilaritySet, output_residuals
from .metrics import map_at_r, relevance_matrix
from .net import (ModalityNet, OptimizerState, backward, forward, init_network,
                  sgd_step, stack_specs)

log = logging.getLogger(__name__)

VARIANTS = ("chn", "chn-w", "chn-c", "chn-q")


@dataclass
class TrainConfig:
    epochs: int
    bits: int = 16
    lam: float = 1.0
    gamma: float = 1.0
    learning_rate: float = 5e-5
    momentum: float = 0.9
    batch_size: int = 64
    seed: int = 0
    variant: str = "chn"
    image_layer_dims: tuple[int, ...] = (128,)
    text_layer_dims: tuple[int, ...] = (256, 256)
    image_dropout: float = 0.0
    text_dropout: float = 0.5
    fch_lr_mult: float = 1.0
    lr_decay_every: int = 0
    lr_decay_factor: float = 0.1
    eval_every: int = 0

    def __post_init__(self):
        self.image_layer_dims = tuple(int(d) for d in self.image_layer_dims)
        self.text_layer_dims = tuple(int(d) for d in self.text_layer_dims)
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")
        if self.bits <= 0:
            raise ConfigError("bits must be positive")
        if self.lam < 0 or self.gamma < 0:
            raise ConfigError("lambda and gamma must be nonnegative")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {', '.join(VARIANTS)}")
        if any(d <= 0 for d in self.image_layer_dims + self.text_layer_dims):
            raise ConfigError("hidden layer sizes must be positive")
        if self.lr_decay_every < 0 or self.eval_every < 0:
            raise ConfigError("lr_decay_every and eval_every must be nonnegative")

    def loss_weights(self) -> tuple[float, float, float]:
        """``(cross, lambda, gamma)`` after variant masking."""
        if self.variant == "chn-w":
            return 0.0, self.lam, self.gamma
        if self.variant == "chn-c":
            return 1.0, 0.0, 0.0
        if self.variant == "chn-q":
            return 1.0, self.lam, 0.0
        return 1.0, self.lam, self.gamma

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def _parse_value(name, raw, kind):
    raw = raw.strip()
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        # layer dims: comma or space separated ints
        return tuple(int(t) for t in raw.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


_FIELD_KINDS = {
    "epochs": int, "bits": int, "lam": float, "gamma": float, "learning_rate": float,
    "momentum": float, "batch_size": int, "seed": int, "variant": str,
    "image_layer_dims": tuple, "text_layer_dims": tuple, "image_dropout": float,
    "text_dropout": float, "fch_lr_mult": float, "lr_decay_every": int,
    "lr_decay_factor": float, "eval_every": int,
}
_ALIASES = {"lambda": "lam"}


def parse_config_text(text: str) -> dict:
    """``key = value`` lines to a dict of typed values; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip().replace("-", "_")
        key = _ALIASES.get(key, key)
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key not in _FIELD_KINDS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _parse_value(key, raw, _FIELD_KINDS[key])
    return values


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    values = parse_config_text(Path(path).read_text(encoding="utf-8")) if path else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if "epochs" not in values:
        raise ConfigError("epochs is required")
    return TrainConfig(**values)


def dumps_config(cfg: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(d) for d in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


@dataclass
class EpochRecord:
    epoch: int
    loss: LossReport
    seconds: float
    val_map: float | None = None


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.epochs)

    def totals(self) -> list[float]:
        return [r.loss.total for r in self.epochs]

    def to_csv(self, include_time: bool = False) -> str:
        cols = ["epoch", "c_xy", "c_xx", "c_yy", "q_x", "q_y", "total", "val_map"]
        if include_time:
            cols.append("seconds")
        lines = [",".join(cols)]
        for r in self.epochs:
            row = [str(r.epoch)] + [repr(getattr(r.loss, k)) for k in ("c_xy", "c_xx", "c_yy", "q_x", "q_y", "total")]
            row.append("" if r.val_map is None else repr(r.val_map))
            if include_time:
                row.append(f"{r.seconds:.6f}")
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"


def build_networks(cfg: TrainConfig, d_x: int, d_y: int) -> tuple[ModalityNet, ModalityNet]:
    seeds = np.random.SeedSequence(cfg.seed).generate_state(2)
    image = init_network(stack_specs(d_x, cfg.image_layer_dims, cfg.bits, cfg.image_dropout), int(seeds[0]))
    text = init_network(stack_specs(d_y, cfg.text_layer_dims, cfg.bits, cfg.text_dropout), int(seeds[1]))
    return image, text


def _mean_report(reports: list[LossReport], weights: list[int]) -> LossReport:
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    keys = ("c_xy", "c_xx", "c_yy", "q_x", "q_y", "total")
    vals = {k: float(np.dot(w, [getattr(r, k) for r in reports])) for k in keys}
    first = reports[0]
    return LossReport(vals["c_xy"], vals["c_xx"], vals["c_yy"], vals["q_x"], vals["q_y"],
                      first.lam, first.gamma, vals["total"], first.cross)


def train_step(nets, opt_states, X, Y, labels, weights, seed):
    """One mini-batch update of both networks. Returns new nets, states and the batch loss."""
    image_net, text_net = nets
    cross, lam, gamma = weights
    tu = forward(image_net, X, mode="train", seed=seed)
    tv = forward(text_net, Y, mode="train", seed=seed + 1)
    S = SimilaritySet.all_pairs(labels)
    res, report = output_residuals(tu.output, tv.output, S, lam, gamma, cross=cross, with_report=True)
    if not np.isfinite(report.total):
        raise DivergenceError("non-finite loss", checkpoint=nets)
    gi = backward(image_net, tu, res.image_residuals)
    gt = backward(text_net, tv, res.text_residuals)
    try:
        new_image, si = sgd_step(image_net, gi, opt_states[0])
        new_text, st = sgd_step(text_net, gt, opt_states[1])
    except DivergenceError as exc:
        raise DivergenceError(str(exc), checkpoint=nets, layer=exc.layer) from None
    return (new_image, new_text), (si, st), report


def train(dataset: BimodalDataset, split: SplitSpec, cfg: TrainConfig,
          on_epoch=None) -> tuple[ModalityNet, ModalityNet, TrainHistory]:
    """Mini-batch SGD on the joint objective over ``split.train``.

    Pairs are every labeled pair inside a mini-batch. Deterministic given
    ``(dataset, split, cfg)``.
    """
    train_idx = np.asarray(split.train, dtype=np.int64)
    if len(train_idx) < 2:
        raise ConfigError("training split needs at least two items")
    split.check(dataset.n)
    nets = build_networks(cfg, dataset.image_features.shape[1], dataset.text_features.shape[1])
    states = tuple(OptimizerState.for_net(net, cfg.learning_rate, cfg.momentum, cfg.fch_lr_mult)
                   for net in nets)
    weights = cfg.loss_weights()
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
    history = TrainHistory()
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        if cfg.lr_decay_every and epoch and epoch % cfg.lr_decay_every == 0:
            states = tuple(dataclasses.replace(s, learning_rate=s.learning_rate * cfg.lr_decay_factor)
                           for s in states)
        order = train_idx[rng.permutation(len(train_idx))]
        reports, sizes = [], []
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo:lo + cfg.batch_size]
            if len(batch) < 2:
                continue
            seed = int(rng.integers(0, 2 ** 62))
            nets, states, report = train_step(
                nets, states, dataset.image_features[batch], dataset.text_features[batch],
                dataset.labels[batch], weights, seed)
            reports.append(report)
            sizes.append(len(batch))
        record = EpochRecord(epoch + 1, _mean_report(reports, sizes), time.perf_counter() - start)
        if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0 and len(split.val):
            record.val_map = float(np.mean(list(
                evaluate_cross_modal(nets[0], nets[1], dataset, split.val, split.train).values())))
        history.epochs.append(record)
        log.info("epoch %d total=%.6f%s", record.epoch, record.loss.total,
                 "" if record.val_map is None else f" val_map@50={record.val_map:.4f}")
        if on_epoch is not None:
            on_epoch(record)
    return nets[0], nets[1], history


def encode(net: ModalityNet, features) -> tuple[np.ndarray, HashCodeMatrix]:
    """Eval-mode hash-layer outputs and their sign codes."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[1] != net.input_dim:
        raise ShapeError(f"features have width {features.shape[1]}, network expects {net.input_dim}")
    U = forward(net, features, mode="eval").output
    return U, binarize(U)


def evaluate_cross_modal(image_net, text_net, dataset: BimodalDataset, query_idx, db_idx,
                         R: int = 50) -> dict[str, float]:
    """MAP@R for image-to-text and text-to-image retrieval."""
    query_idx = np.asarray(query_idx)
    db_idx = np.asarray(db_idx)
    _, img_q = encode(image_net, dataset.image_features[query_idx])
    _, txt_q = encode(text_net, dataset.text_features[query_idx])
    _, img_db = encode(image_net, dataset.image_features[db_idx])
    _, txt_db = encode(text_net, dataset.text_features[db_idx])
    rel = relevance_matrix(dataset.labels[query_idx], dataset.labels[db_idx])
    return {
        "i2t": map_at_r(hamming_matrix(img_q, txt_db), rel, R),
        "t2i": map_at_r(hamming_matrix(txt_q, img_db), rel, R),
    }


def quantization_gap(image_net, text_net, dataset: BimodalDataset, idx) -> float:
    """Mean ``|cos(u_i, v_j) - cos(h_i, h_j)|`` over all cross-modal pairs in ``idx``."""
    idx = np.asarray(idx)
    U, hu = encode(image_net, dataset.image_features[idx])
    V, hv = encode(text_net, dataset.text_features[idx])
    Un = U / np.maximum(np.linalg.norm(U, axis=1, keepdims=True), 1e-12)
    Vn = V / np.maximum(np.linalg.norm(V, axis=1, keepdims=True), 1e-12)
    cont = Un @ Vn.T
    binary = (hu.signs() @ hv.signs().T) / hu.b
    return float(np.mean(np.abs(cont - binary)))


@dataclass
class SweepResult:
    table: list[tuple[float, float, float]]
    best: tuple[float, float, float]

    def to_tsv(self) -> str:
        lines = ["lambda\tgamma\tval_map@50"]
        lines.extend(f"{l!r}\t{g!r}\t{m!r}" for l, g, m in self.table)
        return "\n".join(lines) + "\n"


def sweep(dataset: BimodalDataset, split: SplitSpec, base: TrainConfig,
          lambda_grid, gamma_grid, R: int = 50) -> SweepResult:
    """Train per ``(lambda, gamma)`` cell, score by validation MAP@R.

    The validation MAP is the mean of the two retrieval directions, with
    validation items as queries against the training set. Ties go to the
    smaller lambda, then the smaller gamma.
    """
    lams = sorted(set(float(v) for v in lambda_grid))
    gams = sorted(set(float(v) for v in gamma_grid))
    if not lams or not gams:
        raise ConfigError("lambda and gamma grids must be nonempty")
    if len(split.val) == 0:
        raise ConfigError("sweep needs a validation split")
    table = []
    for lam in lams:
        for gam in gams:
            image_net, text_net, _ = train(dataset, split, base.replace(lam=lam, gamma=gam))
            scores = evaluate_cross_modal(image_net, text_net, dataset, split.val, split.train, R)
            table.append((lam, gam, float(np.mean(list(scores.values())))))
    best = max(table, key=lambda row: (row[2], -row[0], -row[1]))
    return SweepResult(table, best)


def pair_pass_seconds(n_pairs: int, bits: int = 16, n_items: int = 1024, seed: int = 0,
                      repeats: int = 5) -> float:
    """Best-of-``repeats`` wall time of one loss + residual pass over ``n_pairs`` pairs.

    This is the only pairwise part of a training step; hidden-layer
    backprop does not depend on the pair count.
    """
    rng = np.random.default_rng(seed)
    U = np.tanh(rng.normal(size=(n_items, bits)))
    V = np.tanh(rng.normal(size=(n_items, bits)))
    i = rng.integers(0, n_items, n_pairs)
    j = rng.integers(0, n_items, n_pairs)
    # SimilaritySet rejects duplicate pairs
    keys = np.unique(np.stack([i, j], axis=1), axis=0)
    while len(keys) < n_pairs:
        extra = rng.integers(0, n_items, (n_pairs, 2))
        keys = np.unique(np.concatenate([keys, extra]), axis=0)
    keys = keys[rng.permutation(len(keys))[:n_pairs]]
    S = SimilaritySet(keys[:, 0], keys[:, 1], rng.choice([-1, 1], n_pairs))
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        output_residuals(U, V, S, 1.0, 0.1)
        best = min(best, time.perf_counter() - t0)
    return best
