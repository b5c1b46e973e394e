"""Bit-packed hash codes, popcount Hamming distance, exact top-R scans, and
checks for the Hamming/cosine identities and the quantization bound.

Storage: bit ``j`` of item ``i`` lives in ``words[i, j // 64]`` at
position ``j % 64``; 1 encodes +1 and 0 encodes -1. Padding bits are 0.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError, ParseError, ShapeError, VerificationError
from .losses import EPS, quant_cosine

CODE_MAGIC = b"CHNB"
CODE_VERSION = 1
_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class HashCodeMatrix:
    words: np.ndarray  # (n, ceil(b/64)) uint64
    b: int

    def __post_init__(self):
        words = np.ascontiguousarray(self.words, dtype="<u8")
        if words.ndim != 2 or words.shape[0] == 0 or self.b <= 0:
            raise ShapeError("code matrix needs n > 0 items and b > 0 bits")
        if words.shape[1] != n_words(self.b):
            raise ShapeError(f"{self.b} bits need {n_words(self.b)} words per item, got {words.shape[1]}")
        if np.any(words & ~_valid_mask(self.b)):
            raise ShapeError("padding bits beyond b must be zero")
        words.setflags(write=False)
        object.__setattr__(self, "words", words)

    @property
    def n(self) -> int:
        return self.words.shape[0]

    def __len__(self):
        return self.n

    def __getitem__(self, idx) -> "HashCodeMatrix":
        rows = self.words[np.atleast_1d(np.arange(self.n)[idx])]
        return HashCodeMatrix(rows, self.b)

    def bits(self) -> np.ndarray:
        """0/1 matrix of shape (n, b)."""
        as_bytes = self.words.view(np.uint8).reshape(self.n, -1)
        return np.unpackbits(as_bytes, axis=1, bitorder="little")[:, : self.b]

    def signs(self) -> np.ndarray:
        """+1/-1 integer matrix of shape (n, b)."""
        return self.bits().astype(np.int64) * 2 - 1

    @classmethod
    def from_bits(cls, bits) -> "HashCodeMatrix":
        bits = np.atleast_2d(np.asarray(bits)).astype(bool)
        n, b = bits.shape
        packed = np.packbits(bits, axis=1, bitorder="little")
        padded = np.zeros((n, n_words(b) * 8), dtype=np.uint8)
        padded[:, : packed.shape[1]] = packed
        return cls(padded.view("<u8"), b)

    @classmethod
    def from_signs(cls, signs) -> "HashCodeMatrix":
        return cls.from_bits(np.asarray(signs) > 0)

    def __eq__(self, other):
        return (isinstance(other, HashCodeMatrix) and self.b == other.b
                and np.array_equal(self.words, other.words))

    __hash__ = None


def n_words(b: int) -> int:
    return (int(b) + 63) // 64


def _valid_mask(b: int) -> np.ndarray:
    mask = np.full(n_words(b), np.uint64(0xFFFFFFFFFFFFFFFF), dtype="<u8")
    rem = b % 64
    if rem:
        mask[-1] = np.uint64((1 << rem) - 1)
    return mask


def binarize(U) -> HashCodeMatrix:
    """``h = sgn(u)`` with exact zeros mapped to -1."""
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    return HashCodeMatrix.from_bits(U > 0)


def _popcount_xor(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.bitwise_count((a ^ b) & mask).sum(axis=-1).astype(np.int64)


def hamming(a, b) -> int:
    """Hamming distance between two single-item code matrices (or word rows)."""
    if isinstance(a, HashCodeMatrix) and isinstance(b, HashCodeMatrix):
        if a.b != b.b:
            raise ShapeError(f"code lengths differ: {a.b} vs {b.b}")
        return int(_popcount_xor(a.words[0], b.words[0], _valid_mask(a.b)))
    raise TypeError("hamming expects HashCodeMatrix rows")


def hamming_matrix(queries: HashCodeMatrix, db: HashCodeMatrix) -> np.ndarray:
    """All query-by-database distances, shape (n_queries, n_db)."""
    if queries.b != db.b:
        raise ShapeError(f"code lengths differ: {queries.b} vs {db.b}")
    mask = _valid_mask(db.b)
    out = np.zeros((queries.n, db.n), dtype=np.int64)
    for w in range(db.words.shape[1]):
        x = (queries.words[:, w, None] ^ db.words[None, :, w]) & mask[w]
        out += np.bitwise_count(x)
    return out


def rank_by_distance(distances: np.ndarray) -> np.ndarray:
    """Per-row database order: ascending distance, then ascending index."""
    return np.argsort(distances, axis=-1, kind="stable")


def search(db: HashCodeMatrix, query: HashCodeMatrix, R: int) -> list[tuple[int, int]]:
    """Top-``R`` database items for one query as ``(index, distance)`` pairs.

    Exact linear scan. ``R`` larger than the database returns everything.
    """
    if R <= 0:
        raise ValueError("R must be positive")
    if query.n != 1:
        raise ShapeError("search takes a single query code")
    dist = hamming_matrix(query, db)[0]
    order = rank_by_distance(dist)[:R]
    return [(int(k), int(dist[k])) for k in order]


# -- identity checks -----------------------------------------------------------

def all_codes(b: int) -> HashCodeMatrix:
    """Every one of the ``2**b`` codes of length ``b``."""
    ids = np.arange(2 ** b, dtype=np.uint64)
    bits = (ids[:, None] >> np.arange(b, dtype=np.uint64)[None, :]) & np.uint64(1)
    return HashCodeMatrix.from_bits(bits)


def random_codes(n: int, b: int, seed) -> HashCodeMatrix:
    rng = np.random.default_rng(seed)
    return HashCodeMatrix.from_bits(rng.random((n, b)) < 0.5)


@dataclass
class IdentityReport:
    pairs_checked: int
    inner_product_violations: int
    max_cosine_deviation: float

    @property
    def ok(self) -> bool:
        return self.inner_product_violations == 0 and self.max_cosine_deviation <= 1e-9


def check_identity_pairs(codes: HashCodeMatrix, i: np.ndarray, j: np.ndarray) -> IdentityReport:
    signs = codes.signs()
    mask = _valid_mask(codes.b)
    dist = _popcount_xor(codes.words[i], codes.words[j], mask)
    inner = np.einsum("ij,ij->i", signs[i], signs[j])
    b = codes.b
    # integers throughout: 2*dist == b - inner
    violations = int(np.count_nonzero(2 * dist != b - inner))
    norms = np.sqrt(float(b))
    cos = inner / (norms * norms)
    dev = np.abs(dist - 0.5 * b * (1.0 - cos))
    return IdentityReport(len(i), violations, float(dev.max()) if len(dev) else 0.0)


def verify_identities(codes: HashCodeMatrix, sample_pairs: int | None = None, seed=0,
                      exhaustive: bool = False) -> IdentityReport:
    """Check ``d_H = (b - <h, h'>)/2`` and ``d_H = (b/2)(1 - cos)`` on code pairs.

    ``exhaustive`` covers every pair ``i <= j`` (self-pairs included);
    otherwise ``sample_pairs`` pairs are drawn uniformly with replacement.
    """
    if codes.n < 2:
        raise ShapeError("need at least two codes")
    if exhaustive:
        i, j = np.triu_indices(codes.n)
    else:
        rng = np.random.default_rng(seed)
        m = int(sample_pairs or 1000)
        i = rng.integers(0, codes.n, m)
        j = rng.integers(0, codes.n, m)
    return check_identity_pairs(codes, i, j)


# -- quantization bound --------------------------------------------------------

@dataclass
class BoundReport:
    itq_error: np.ndarray
    bound_rhs: np.ndarray
    identity_lhs: np.ndarray
    exact_rhs: np.ndarray
    violated: np.ndarray

    @property
    def violation_rate(self) -> float:
        return float(np.mean(self.violated)) if len(self.violated) else 0.0

    def rows(self):
        for k in range(len(self.itq_error)):
            yield (k, self.itq_error[k], self.bound_rhs[k], self.identity_lhs[k],
                   self.exact_rhs[k], bool(self.violated[k]))


def quantization_bound_report(U, tol: float = 1e-9) -> BoundReport:
    """Per-row ITQ error against ``2b - 2b cos(|u|, 1)``.

    Violations of the inequality are recorded, not raised: it only holds
    when ``||u||^2 = b``. The two exact identities behind it are asserted
    and raise :class:`VerificationError` if they ever fail.
    """
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    if not np.all(np.isfinite(U)) or np.any(np.abs(U) > 1.0):
        raise InputError("embeddings must be finite and lie in [-1, 1]")
    b = U.shape[1]
    signs = np.where(U > 0, 1.0, -1.0)
    itq = np.sum((U - signs) ** 2, axis=1)
    qc = quant_cosine(U)
    bound = 2.0 * b - 2.0 * b * qc
    lhs = np.sum((np.abs(U) - 1.0) ** 2, axis=1)
    norm = np.linalg.norm(U, axis=1)
    # cos is guarded at zero norm, where norm * cos is 0 either way
    exact = norm ** 2 + b - 2.0 * np.sqrt(b) * norm * qc * (norm >= EPS)
    if np.any(np.abs(itq - lhs) > tol):
        raise VerificationError("||u - sgn(u)||^2 != || |u| - 1 ||^2")
    if np.any(np.abs(lhs - exact) > tol):
        raise VerificationError("|| |u| - 1 ||^2 != ||u||^2 + b - 2 sqrt(b) ||u|| cos(|u|, 1)")
    return BoundReport(itq, bound, lhs, exact, itq > bound + tol)


# -- code files ---------------------------------------------------------------

def dumps_codes(codes: HashCodeMatrix) -> bytes:
    return _HEADER.pack(CODE_MAGIC, CODE_VERSION, codes.n, codes.b) + codes.words.astype("<u8").tobytes()


def loads_codes(data: bytes, path=None) -> HashCodeMatrix:
    if len(data) < _HEADER.size:
        raise ParseError("truncated code file header", path)
    magic, version, n, b = _HEADER.unpack_from(data)
    if magic != CODE_MAGIC:
        raise ParseError("bad magic bytes, expected CHNB", path)
    if version != CODE_VERSION:
        raise ParseError(f"unsupported code file version {version}", path)
    expected = _HEADER.size + n * n_words(b) * 8
    if len(data) != expected:
        raise ParseError(f"expected {expected} bytes, found {len(data)}", path)
    words = np.frombuffer(data, dtype="<u8", offset=_HEADER.size).reshape(n, n_words(b))
    try:
        return HashCodeMatrix(words.copy(), b)
    except ShapeError as exc:
        raise ParseError(str(exc), path) from None


def save_codes(path, codes: HashCodeMatrix) -> None:
    Path(path).write_bytes(dumps_codes(codes))


def load_codes(path) -> HashCodeMatrix:
    return loads_codes(Path(path).read_bytes(), path=str(path))
