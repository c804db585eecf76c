"""Discrete output spaces, their vector encodings and uniform reference samplers.

Three spaces are supported:

* ``binary``: label sets encoded as ``{0,1}^k``.
* ``permutahedron``: rankings encoded as a permutation of ``(1, ..., k)``;
  entry ``i`` is the rank of item ``i`` and rank ``k`` is the top.
* ``birkhoff``: the same rankings as ``k x k`` permutation matrices, flattened
  row-major, with ``P[i, rank_i - 1] = 1``.

The reference measure ``q`` is the uniform *probability* distribution, so
every log-partition computed here is ``log E_q exp(g)`` and differs from the
counting-measure value ``log sum exp(g)`` by ``-log |Y|``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import CapExceeded, NotAPermutation, ShapeMismatch

BINARY = "binary"
PERMUTAHEDRON = "permutahedron"
BIRKHOFF = "birkhoff"
KINDS = (BINARY, PERMUTAHEDRON, BIRKHOFF)

HUGE = math.inf
_HUGE_THRESHOLD = 2**63

DEFAULT_CAP = 1 << 16


@dataclass(frozen=True)
class OutputSpace:
    kind: str
    k: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown output space kind {self.kind!r}")
        if self.k < 1:
            raise ValueError("k must be positive")

    @property
    def encoding_dim(self) -> int:
        return self.k * self.k if self.kind == BIRKHOFF else self.k

    @property
    def is_permutation(self) -> bool:
        return self.kind != BINARY

    @property
    def cardinality(self):
        """``2**k`` or ``k!``; :data:`HUGE` once it exceeds ``2**63``."""
        n = 2**self.k if self.kind == BINARY else math.factorial(self.k)
        return HUGE if n > _HUGE_THRESHOLD else n

    @property
    def log_cardinality(self) -> float:
        if self.kind == BINARY:
            return self.k * math.log(2.0)
        return math.lgamma(self.k + 1)

    def __str__(self):
        return f"{self.kind}(k={self.k})"


def binary_vectors(k):
    return OutputSpace(BINARY, k)


def permutation_vectors(k):
    return OutputSpace(PERMUTAHEDRON, k)


def permutation_matrices(k):
    return OutputSpace(BIRKHOFF, k)


def uniform_mass(space: OutputSpace) -> float:
    """Per-point probability ``1/|Y|`` of the uniform reference distribution."""
    return math.exp(-space.log_cardinality)


def _shape(size):
    if size is None:
        return ()
    if isinstance(size, (int, np.integer)):
        return (int(size),)
    return tuple(size)


def sample_uniform(space: OutputSpace, rng: np.random.Generator, size=None) -> np.ndarray:
    """Draw uniform outputs, returned as float arrays of shape ``size + (encoding_dim,)``."""
    shape = _shape(size)
    n = math.prod(shape)
    k = space.k
    if space.kind == BINARY:
        nbytes = (k + 7) // 8
        raw = np.frombuffer(rng.bytes(n * nbytes), dtype=np.uint8).reshape(n, nbytes)
        bits = np.unpackbits(raw, axis=-1, count=k, bitorder="little")
        return bits.astype(np.float64).reshape(shape + (k,))
    ranks = np.tile(np.arange(1, k + 1, dtype=np.float64), (n, 1))
    ranks = rng.permuted(ranks, axis=1)
    if space.kind == PERMUTAHEDRON:
        return ranks.reshape(shape + (k,))
    return perm_vector_to_matrix(ranks).reshape(shape + (k * k,))


def enumerate_space(space: OutputSpace, cap: int = DEFAULT_CAP) -> np.ndarray:
    """All elements of the space as an ``(|Y|, encoding_dim)`` array, each exactly once."""
    card = space.cardinality
    if card > cap:
        raise CapExceeded(f"{space} has {card} elements, cap is {cap}")
    k = space.k
    if space.kind == BINARY:
        return np.array(list(itertools.product((0.0, 1.0), repeat=k)))
    perms = np.array(list(itertools.permutations(range(1, k + 1))), dtype=np.float64)
    if space.kind == PERMUTAHEDRON:
        return perms
    return perm_vector_to_matrix(perms)


def is_enumerable(space: OutputSpace, cap: int = DEFAULT_CAP) -> bool:
    return space.cardinality <= cap


def perm_vector_to_matrix(ranks: np.ndarray) -> np.ndarray:
    """Rank vectors ``(..., k)`` to flattened permutation matrices ``(..., k*k)``."""
    ranks = np.asarray(ranks)
    k = ranks.shape[-1]
    cols = ranks.astype(np.int64) - 1
    eye = np.eye(k)
    return eye[cols].reshape(ranks.shape[:-1] + (k * k,))


def perm_matrix_to_vector(mats: np.ndarray) -> np.ndarray:
    mats = np.asarray(mats, dtype=np.float64)
    k = math.isqrt(mats.shape[-1])
    if k * k != mats.shape[-1]:
        raise ShapeMismatch(f"last axis {mats.shape[-1]} is not a square")
    m = mats.reshape(mats.shape[:-1] + (k, k))
    return (np.argmax(m, axis=-1) + 1).astype(np.float64)


def contains(space: OutputSpace, ys: np.ndarray) -> np.ndarray:
    """Boolean mask telling which rows of ``ys`` are valid encodings."""
    ys = np.asarray(ys, dtype=np.float64)
    if ys.shape[-1] != space.encoding_dim:
        return np.zeros(ys.shape[:-1], dtype=bool)
    k = space.k
    if space.kind == BINARY:
        return np.all((ys == 0) | (ys == 1), axis=-1)
    if space.kind == PERMUTAHEDRON:
        return np.all(np.sort(ys, axis=-1) == np.arange(1, k + 1), axis=-1)
    m = ys.reshape(ys.shape[:-1] + (k, k))
    binary = np.all((m == 0) | (m == 1), axis=(-1, -2))
    rows = np.all(m.sum(axis=-1) == 1, axis=-1)
    cols = np.all(m.sum(axis=-2) == 1, axis=-1)
    return binary & rows & cols


def check_outputs(space: OutputSpace, ys: np.ndarray) -> np.ndarray:
    ys = np.atleast_2d(np.asarray(ys, dtype=np.float64))
    ok = contains(space, ys)
    if not np.all(ok):
        bad = int(np.flatnonzero(~ok)[0])
        exc = NotAPermutation if space.is_permutation else ShapeMismatch
        raise exc(f"row {bad} is not a valid element of {space}: {ys[bad]}")
    return ys
