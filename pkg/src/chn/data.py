"""Synthetic bimodal data, similarity-pair sampling, and dataset files."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError, ShapeError
from .losses import SimilaritySet

log = logging.getLogger(__name__)

IMAGE_FILE = "image_features.tsv"
TEXT_FILE = "text_features.tsv"
LABEL_FILE = "labels.tsv"
SPLIT_FILE = "split.txt"


@dataclass
class BimodalDataset:
    image_features: np.ndarray
    text_features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.image_features = np.asarray(self.image_features, dtype=np.float64)
        self.text_features = np.asarray(self.text_features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.image_features.shape[0]
        if self.text_features.shape[0] != n or self.labels.shape[0] != n:
            raise ShapeError("image features, text features and labels must have equal row counts")
        for name, arr in (("image", self.image_features), ("text", self.text_features)):
            if arr.ndim != 2 or arr.shape[1] == 0:
                raise ShapeError(f"{name} features must be a non-empty matrix")
            if not np.all(np.isfinite(arr)):
                raise ShapeError(f"{name} features contain NaN or Inf")
        if self.labels.ndim != 2 or self.labels.shape[1] == 0:
            raise ShapeError("labels must be a non-empty multi-hot matrix")

    @property
    def n(self) -> int:
        return self.labels.shape[0]


@dataclass
class SplitSpec:
    train: np.ndarray
    query: np.ndarray
    val: np.ndarray

    def __post_init__(self):
        self.train = np.asarray(self.train, dtype=np.int64)
        self.query = np.asarray(self.query, dtype=np.int64)
        self.val = np.asarray(self.val, dtype=np.int64)
        parts = np.concatenate([self.train, self.query, self.val])
        if len(np.unique(parts)) != len(parts):
            raise ConfigError("train/query/val index lists overlap")

    def check(self, n: int) -> None:
        for part in (self.train, self.query, self.val):
            if len(part) and (part.min() < 0 or part.max() >= n):
                raise ConfigError(f"split index out of range for {n} items")


def generate_synthetic(n: int, d_x: int, d_y: int, classes: int, noise: float = 0.1,
                       seed: int = 0, multi_label_prob: float = 0.2) -> BimodalDataset:
    """Class-prototype data with 1-2 labels per item.

    Image features are the mean of the item's class prototypes plus
    Gaussian noise of scale ``noise``. Text features are 0/1 tag draws
    from the mean of the classes' tag probabilities.
    """
    if classes < 2:
        raise ConfigError("need at least two classes")
    if noise < 0:
        raise ConfigError("noise must be nonnegative")
    if n <= 0 or d_x <= 0 or d_y <= 0:
        raise ConfigError("n, d_x and d_y must be positive")
    rng = np.random.default_rng(seed)
    image_protos = rng.normal(size=(classes, d_x))
    tag_probs = rng.beta(0.5, 2.0, size=(classes, d_y))

    labels = np.zeros((n, classes), dtype=np.int64)
    first = rng.integers(0, classes, n)
    labels[np.arange(n), first] = 1
    second = rng.random(n) < multi_label_prob
    offset = rng.integers(1, classes, n)
    labels[np.arange(n)[second], ((first + offset) % classes)[second]] = 1

    weights = labels / labels.sum(axis=1, keepdims=True)
    image = weights @ image_protos + noise * rng.normal(size=(n, d_x))
    text = (rng.random((n, d_y)) < weights @ tag_probs).astype(np.float64)
    return BimodalDataset(image, text, labels)


def make_split(n: int, n_query: int, n_val: int, seed: int = 0) -> SplitSpec:
    """Random disjoint split; everything not in query/val goes to train."""
    if n_query < 0 or n_val < 0 or n_query + n_val >= n:
        raise ConfigError("query and validation sizes must leave a nonempty training set")
    perm = np.random.default_rng(seed).permutation(n)
    return SplitSpec(np.sort(perm[n_query + n_val:]), np.sort(perm[:n_query]),
                     np.sort(perm[n_query:n_query + n_val]))


def build_similarity(labels, pair_budget: int, balance: float | None = 0.5, seed=0,
                     max_attempts: int | None = None) -> SimilaritySet:
    """Rejection-sample ``pair_budget`` distinct unordered pairs ``i != j``.

    ``s = +1`` iff the items share a label. With ``balance`` set, positives
    and negatives are accepted up to their quotas; when one side runs dry
    the remainder is filled from the other and ``warning`` is set.
    ``balance=None`` samples uniformly.
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    if pair_budget < 1:
        raise ConfigError("pair_budget must be at least 1")
    if balance is not None and not 0.0 <= balance <= 1.0:
        raise ConfigError("balance must lie in [0, 1]")
    if n < 2:
        raise ConfigError("need at least two items to form pairs")
    total_pairs = n * (n - 1) // 2
    warning = None
    if pair_budget > total_pairs:
        warning = f"pair budget {pair_budget} exceeds the {total_pairs} available pairs"
        pair_budget = total_pairs
    rng = np.random.default_rng(seed)
    lab = labels != 0
    max_attempts = max_attempts or 50 * pair_budget + 1000

    if balance is None:
        want = {1: pair_budget, -1: pair_budget}
    else:
        pos = int(round(balance * pair_budget))
        want = {1: pos, -1: pair_budget - pos}
    chosen: dict[tuple[int, int], int] = {}
    have = {1: 0, -1: 0}
    spill: dict[tuple[int, int], int] = {}
    attempts = 0
    while len(chosen) < pair_budget and attempts < max_attempts:
        attempts += 1
        i, j = (int(v) for v in rng.integers(0, n, 2))
        if i == j:
            continue
        key = (min(i, j), max(i, j))
        if key in chosen:
            continue
        s = 1 if np.any(lab[i] & lab[j]) else -1
        if have[s] < want[s]:
            chosen[key] = s
            have[s] += 1
        elif key not in spill:
            spill[key] = s

    if len(chosen) < pair_budget:
        # quota for one side could not be met; fill from rejected pairs, then exhaustively
        for key, s in spill.items():
            if len(chosen) >= pair_budget:
                break
            if key not in chosen:
                chosen[key] = s
        if len(chosen) < pair_budget:
            ii, jj = np.triu_indices(n, k=1)
            for k in rng.permutation(len(ii)):
                key = (int(ii[k]), int(jj[k]))
                if key not in chosen:
                    chosen[key] = 1 if np.any(lab[key[0]] & lab[key[1]]) else -1
                    if len(chosen) >= pair_budget:
                        break
    pairs = [(i, j, s) for (i, j), s in chosen.items()]
    if balance is not None and pairs:
        achieved = sum(1 for p in pairs if p[2] == 1) / len(pairs)
        if abs(achieved - balance) > 0.05:
            msg = f"achieved positive fraction {achieved:.3f}, target {balance:.3f}"
            warning = f"{warning}; {msg}" if warning else msg
    if warning:
        log.warning("build_similarity: %s", warning)
    return SimilaritySet.from_pairs(pairs, warning=warning)


# -- files --------------------------------------------------------------------

def _format_row(row, integer=False) -> str:
    if integer:
        return "\t".join(str(int(v)) for v in row)
    return "\t".join(repr(float(v)) for v in row)


def save_features(path, matrix) -> None:
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    text = "".join(_format_row(r) + "\n" for r in matrix)
    Path(path).write_text(text, encoding="utf-8")


def save_labels(path, matrix) -> None:
    matrix = np.atleast_2d(np.asarray(matrix))
    if not np.all((matrix == 0) | (matrix == 1)):
        raise ConfigError("labels must be 0/1")
    text = "".join(_format_row(r, integer=True) + "\n" for r in matrix)
    Path(path).write_text(text, encoding="utf-8")


def _read_rows(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError:
        raise ParseError("file is not valid UTF-8", str(path)) from None
    rows = []
    width = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.rstrip("\n").split("\t")
        if width is None:
            width = len(fields)
        elif len(fields) != width:
            raise ParseError(f"expected {width} fields, found {len(fields)}", str(path), lineno)
        rows.append((lineno, fields))
    if not rows:
        raise ParseError("file has no rows", str(path))
    return rows


def load_features(path) -> np.ndarray:
    out = []
    for lineno, fields in _read_rows(path):
        try:
            vals = [float(f) for f in fields]
        except ValueError:
            raise ParseError("non-numeric token", str(path), lineno) from None
        if not all(np.isfinite(vals)):
            raise ParseError("non-finite value", str(path), lineno)
        out.append(vals)
    return np.array(out, dtype=np.float64)


def load_labels(path) -> np.ndarray:
    out = []
    for lineno, fields in _read_rows(path):
        row = []
        for f in fields:
            if f.strip() not in ("0", "1"):
                raise ParseError(f"label value {f!r} is not 0 or 1", str(path), lineno)
            row.append(int(f))
        out.append(row)
    return np.array(out, dtype=np.int64)


def save_split(path, split: SplitSpec) -> None:
    lines = [f"{name}: " + " ".join(str(int(v)) for v in getattr(split, attr))
             for name, attr in (("train", "train"), ("query", "query"), ("val", "val"))]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_split(path) -> SplitSpec:
    parts = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        name, sep, rest = line.partition(":")
        name = name.strip()
        if not sep or name not in ("train", "query", "val"):
            raise ParseError("expected 'train:', 'query:' or 'val:'", str(path), lineno)
        try:
            parts[name] = [int(t) for t in rest.split()]
        except ValueError:
            raise ParseError("non-integer index", str(path), lineno) from None
    missing = {"train", "query", "val"} - parts.keys()
    if missing:
        raise ParseError(f"missing section(s): {', '.join(sorted(missing))}", str(path))
    try:
        return SplitSpec(parts["train"], parts["query"], parts["val"])
    except ConfigError as exc:
        raise ParseError(str(exc), str(path)) from None


def save_dataset(directory, dataset: BimodalDataset, split: SplitSpec | None = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_features(d / IMAGE_FILE, dataset.image_features)
    save_features(d / TEXT_FILE, dataset.text_features)
    save_labels(d / LABEL_FILE, dataset.labels)
    if split is not None:
        save_split(d / SPLIT_FILE, split)


def load_dataset(directory) -> tuple[BimodalDataset, SplitSpec | None]:
    d = Path(directory)
    try:
        ds = BimodalDataset(load_features(d / IMAGE_FILE), load_features(d / TEXT_FILE),
                            load_labels(d / LABEL_FILE))
    except ShapeError as exc:
        raise ParseError(str(exc), str(d)) from None
    split = load_split(d / SPLIT_FILE) if (d / SPLIT_FILE).exists() else None
    if split is not None:
        try:
            split.check(ds.n)
        except ConfigError as exc:
            raise ParseError(str(exc), str(d / SPLIT_FILE)) from None
    return ds, split
