"""Datasets: libsvm multilabel files, label-ranking CSV, synthetic tasks, splits."""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .errors import LabelOutOfRange, NotAPermutation, ParseError
from .inference import mode_permutahedron
from .spaces import (
    BIRKHOFF,
    PERMUTAHEDRON,
    OutputSpace,
    binary_vectors,
    check_outputs,
    perm_vector_to_matrix,
)


@dataclass
class Dataset:
    xs: np.ndarray
    ys: np.ndarray
    space: OutputSpace
    name: str = ""

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=np.float64)
        self.ys = np.asarray(self.ys, dtype=np.float64)
        if self.xs.ndim != 2 or self.ys.ndim != 2 or len(self.xs) != len(self.ys):
            raise ValueError("xs and ys must be 2-d with the same number of rows")
        if len(self.ys):
            check_outputs(self.space, self.ys)
        if not np.all(np.isfinite(self.xs)):
            raise ValueError("features must be finite")

    def __len__(self):
        return len(self.xs)

    @property
    def n_features(self):
        return self.xs.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, xs=self.xs[idx], ys=self.ys[idx])


@dataclass
class Split:
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray


def _parse_labels(field, lineno, base):
    labels = []
    for tok in field.split(","):
        tok = tok.strip()
        if not tok:
            continue
        try:
            lab = int(tok)
        except ValueError:
            raise ParseError(f"bad label {tok!r}", lineno) from None
        if lab < base:
            raise LabelOutOfRange(f"label {lab} below base {base}", lineno)
        labels.append(lab - base)
    return labels


def parse_libsvm_multilabel(path, k=None, n_features=None, label_base=1, name=None) -> Dataset:
    """Read ``l1,l2,... i1:v1 i2:v2 ...`` lines into a dense binary-label dataset.

    Feature indices are 1-based; missing features are 0. Labels are
    ``label_base``-based (1 by default; many public multilabel files use 0).
    ``k`` defaults to the largest label seen, ``n_features`` to the largest
    feature index.
    """
    rows, label_rows = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].rstrip("\n")
            if not line.strip():
                continue
            tokens = line.split()
            labels = []
            if ":" not in tokens[0] and not line[0].isspace():
                labels = _parse_labels(tokens[0], lineno, label_base)
                tokens = tokens[1:]
            feats = {}
            for tok in tokens:
                idx, sep, val = tok.partition(":")
                if not sep:
                    raise ParseError(f"expected index:value, got {tok!r}", lineno)
                try:
                    i, v = int(idx), float(val)
                except ValueError:
                    raise ParseError(f"bad feature {tok!r}", lineno) from None
                if i < 1:
                    raise ParseError(f"feature index {i} must be >= 1", lineno)
                feats[i - 1] = v
            rows.append((lineno, feats))
            label_rows.append((lineno, labels))
    n_labels = max((max(ls) + 1 for _, ls in label_rows if ls), default=0)
    if k is None:
        k = max(n_labels, 1)
    d = max((max(f) + 1 for _, f in rows if f), default=0)
    if n_features is None:
        n_features = d
    xs = np.zeros((len(rows), n_features))
    ys = np.zeros((len(rows), k))
    for r, ((lineno, feats), (_, labels)) in enumerate(zip(rows, label_rows)):
        for i, v in feats.items():
            if i >= n_features:
                raise ParseError(f"feature index {i + 1} exceeds n_features={n_features}", lineno)
            xs[r, i] = v
        for lab in labels:
            if lab >= k:
                raise LabelOutOfRange(f"label {lab + label_base} exceeds k={k}", lineno)
            ys[r, lab] = 1.0
    return Dataset(xs, ys, binary_vectors(k), name or str(path))


def write_libsvm_multilabel(path, dataset: Dataset, label_base=1):
    with open(path, "w") as fh:
        for x, y in zip(dataset.xs, dataset.ys):
            labels = ",".join(str(j + label_base) for j in np.flatnonzero(y))
            feats = " ".join(f"{i + 1}:{float(x[i])!r}" for i in np.flatnonzero(x))
            fh.write(f"{labels} {feats}".rstrip() + "\n")


def parse_label_ranking_csv(path, k=None, representation=PERMUTAHEDRON, name=None) -> Dataset:
    """Read a label-ranking CSV: a header, then feature columns followed by ``k`` rank columns.

    Without ``k`` the rank columns are the header names starting with
    ``rank``. Each row's ranks must be a permutation of ``1..k``
    (rank ``k`` = most preferred).
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", 1) from None
        if k is None:
            k = sum(1 for h in header if h.strip().lower().startswith("rank"))
            if k == 0:
                raise ParseError("cannot tell rank columns apart; pass k", 1)
        d = len(header) - k
        if d < 0:
            raise ParseError(f"header has {len(header)} columns, fewer than k={k}", 1)
        xs, ys = [], []
        for lineno, row in enumerate(reader, 2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != d + k:
                raise ParseError(f"expected {d + k} columns, got {len(row)}", lineno)
            try:
                vals = [float(c) for c in row]
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            ranks = np.array(vals[d:])
            if not np.array_equal(np.sort(ranks), np.arange(1, k + 1)):
                raise NotAPermutation(f"ranks {ranks.tolist()} are not a permutation of 1..{k}", lineno)
            xs.append(vals[:d])
            ys.append(ranks)
    xs = np.array(xs, dtype=np.float64).reshape(-1, d)
    ys = np.array(ys, dtype=np.float64).reshape(-1, k)
    if representation == BIRKHOFF:
        ys = perm_vector_to_matrix(ys).reshape(-1, k * k)
    return Dataset(xs, ys, OutputSpace(representation, k), name or str(path))


def write_label_ranking_csv(path, xs, ranks):
    xs = np.asarray(xs)
    ranks = np.asarray(ranks)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(xs.shape[1])] + [f"rank{j}" for j in range(ranks.shape[1])])
        for x, r in zip(xs, ranks):
            w.writerow([repr(float(v)) for v in x] + [int(v) for v in r])


def to_birkhoff(dataset: Dataset) -> Dataset:
    if dataset.space.kind != PERMUTAHEDRON:
        raise ValueError("only rank-vector datasets can be converted")
    k = dataset.space.k
    return Dataset(dataset.xs, perm_vector_to_matrix(dataset.ys), OutputSpace(BIRKHOFF, k), dataset.name)


def synth_multilabel(n, d, k, noise=0.0, seed=0) -> Dataset:
    """Gaussian inputs labelled by thresholding a hidden linear map plus noise."""
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(k, d)) / np.sqrt(d)
    xs = rng.normal(size=(n, d))
    scores = xs @ W.T + noise * rng.normal(size=(n, k))
    ys = (scores >= 0).astype(np.float64)
    return Dataset(xs, ys, binary_vectors(k), f"synth_multilabel(n={n},d={d},k={k},noise={noise},seed={seed})")


def synth_label_ranking(n, d, k, noise=0.0, seed=0, representation=PERMUTAHEDRON) -> Dataset:
    """Gaussian inputs ranked by the scores of a hidden linear map."""
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(k, d)) / np.sqrt(d)
    xs = rng.normal(size=(n, d))
    scores = xs @ W.T + noise * rng.normal(size=(n, k))
    ys = mode_permutahedron(scores) if n else np.zeros((0, k))
    ds = Dataset(xs, ys, OutputSpace(PERMUTAHEDRON, k), f"synth_label_ranking(n={n},d={d},k={k},seed={seed})")
    return to_birkhoff(ds) if representation == BIRKHOFF else ds


def split(n, fractions=(0.6, 0.2, 0.2), seed=0) -> Split:
    """Deterministic shuffled train/val/test split of ``range(n)``."""
    if isinstance(n, Dataset):
        n = len(n)
    fractions = tuple(fractions) + (0.0,) * (3 - len(fractions))
    if any(f < 0 for f in fractions) or sum(fractions) > 1 + 1e-12:
        raise ValueError("fractions must be nonnegative and sum to at most 1")
    perm = np.random.default_rng(seed).permutation(n)
    sizes, used = [], 0
    for f in fractions:
        s = min(int(round(f * n)), n - used)
        sizes.append(s)
        used += s
    a, b = sizes[0], sizes[0] + sizes[1]
    return Split(perm[:a], perm[a:b], perm[b:b + sizes[2]])


def standardize(xs, ref_idx=None):
    """Per-column z-scores using statistics of the ``ref_idx`` rows.

    Returns ``(scaled, mean, std)``; constant columns get ``std = 1``.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ref = xs if ref_idx is None else xs[np.asarray(ref_idx, dtype=np.int64)]
    if len(ref) == 0:
        mean, std = np.zeros(xs.shape[1]), np.ones(xs.shape[1])
    else:
        mean = ref.mean(axis=0)
        std = ref.std(axis=0)
        std = np.where(std > 0, std, 1.0)
    return (xs - mean) / std, mean, std
