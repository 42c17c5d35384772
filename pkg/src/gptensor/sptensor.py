"""Sparse tensors in coordinate form, file ingestion, and entry sampling.

The text format is self-describing: a header line "K d_1 ... d_K" followed
by one entry per line, "i_1 ... i_K value", with 0-based indices. Lines
starting with '#' are comments. All containers here are frozen after
construction and safe to share across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import IO, Iterable

import numpy as np

# Enumerating the zero space beats rejection sampling once the observed
# cells dominate; 50% is the crossover the sampler switches at.
_ENUMERATE_FRACTION = 0.5


class FormatError(ValueError):
    """Malformed tensor file; the message carries the offending line number."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SparseTensor:
    """K-mode tensor as (multi-index, value) records over dims d_1..d_K."""

    dims: tuple[int, ...]
    indices: np.ndarray  # (nnz, K) int64
    values: np.ndarray  # (nnz,) float64

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) < 2:
            raise ValueError("a tensor needs at least 2 modes")
        if any(d <= 0 for d in dims):
            raise ValueError("all mode dimensions must be positive")
        idx = np.ascontiguousarray(np.atleast_2d(self.indices), dtype=np.int64)
        if idx.size == 0:
            idx = idx.reshape(0, len(dims))
        vals = np.ascontiguousarray(self.values, dtype=np.float64).reshape(-1)
        if idx.shape[0] != vals.shape[0] or idx.shape[1] != len(dims):
            raise ValueError("indices and values shapes disagree")
        if idx.shape[0]:
            if idx.min() < 0 or np.any(idx >= np.asarray(dims, dtype=np.int64)):
                raise ValueError("index out of range for tensor dims")
            flat = np.ravel_multi_index(idx.T, dims)
            if np.unique(flat).shape[0] != flat.shape[0]:
                raise ValueError("duplicate multi-indices in entries")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "indices", _freeze(idx))
        object.__setattr__(self, "values", _freeze(vals))

    @property
    def num_modes(self) -> int:
        return len(self.dims)

    @property
    def num_entries(self) -> int:
        return self.values.shape[0]

    @property
    def num_cells(self) -> int:
        return math.prod(self.dims)

    def flat_ids(self) -> np.ndarray:
        if self.num_entries == 0:
            return np.zeros(0, dtype=np.int64)
        return np.ravel_multi_index(self.indices.T, self.dims)


@dataclass(frozen=True)
class EntryBatch:
    """A set of tensor cells with their training targets."""

    indices: np.ndarray  # (N, K) int64
    targets: np.ndarray  # (N,) float64

    def __post_init__(self):
        idx = np.ascontiguousarray(np.atleast_2d(self.indices), dtype=np.int64)
        tgt = np.ascontiguousarray(self.targets, dtype=np.float64).reshape(-1)
        if idx.size == 0:
            idx = idx.reshape(0, idx.shape[-1])
        if idx.shape[0] != tgt.shape[0]:
            raise ValueError("indices and targets must have equal length")
        object.__setattr__(self, "indices", _freeze(idx))
        object.__setattr__(self, "targets", _freeze(tgt))

    def __len__(self) -> int:
        return self.targets.shape[0]

    def is_binary(self) -> bool:
        return bool(np.all((self.targets == 0.0) | (self.targets == 1.0)))

    def slice(self, lo: int, hi: int) -> "EntryBatch":
        return EntryBatch(self.indices[lo:hi], self.targets[lo:hi])


@dataclass(frozen=True)
class FoldSplit:
    train: EntryBatch
    test: EntryBatch
    seed: int


def parse_coo(stream: IO[str] | Iterable[str]) -> SparseTensor:
    """Read the COO text format, reporting errors with their line number."""
    dims: tuple[int, ...] | None = None
    k = 0
    rows: list[list[int]] = []
    vals: list[float] = []
    seen: set[int] = set()
    seen_lines: dict[int, int] = {}
    for lineno, raw in enumerate(stream, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if dims is None:
            try:
                k = int(parts[0])
                dims = tuple(int(x) for x in parts[1:])
            except ValueError:
                raise FormatError(f"line {lineno}: malformed header {line!r}") from None
            if k < 2:
                raise FormatError(f"line {lineno}: K must be at least 2, got {k}")
            if len(dims) != k:
                raise FormatError(
                    f"line {lineno}: header declares {k} modes but lists {len(dims)} dims"
                )
            if any(d <= 0 for d in dims):
                raise FormatError(f"line {lineno}: non-positive dimension in header")
            continue
        if len(parts) != k + 1:
            raise FormatError(
                f"line {lineno}: expected {k} indices and a value, got {len(parts)} fields"
            )
        try:
            idx = [int(x) for x in parts[:k]]
            val = float(parts[k])
        except ValueError:
            raise FormatError(f"line {lineno}: malformed entry {line!r}") from None
        for mode, (i, d) in enumerate(zip(idx, dims), start=1):
            if i < 0 or i >= d:
                raise FormatError(
                    f"line {lineno}: index {i} out of range for mode {mode} (dim {d})"
                )
        flat = int(np.ravel_multi_index(idx, dims))
        if flat in seen:
            raise FormatError(
                f"line {lineno}: duplicate index {tuple(idx)} (first at line {seen_lines[flat]})"
            )
        seen.add(flat)
        seen_lines[flat] = lineno
        rows.append(idx)
        vals.append(val)
    if dims is None:
        raise FormatError("line 1: missing header")
    idx_arr = np.asarray(rows, dtype=np.int64).reshape(len(rows), k)
    return SparseTensor(dims=dims, indices=idx_arr, values=np.asarray(vals))


def write_coo(tensor: SparseTensor, stream: IO[str]) -> None:
    """Serialize in the same format parse_coo reads; entry order preserved."""
    dims = " ".join(str(d) for d in tensor.dims)
    stream.write(f"{tensor.num_modes} {dims}\n")
    for idx, val in zip(tensor.indices, tensor.values):
        stream.write(" ".join(str(int(i)) for i in idx) + f" {float(val)!r}\n")


def _excluded_flat(dims: tuple[int, ...], excluded) -> np.ndarray:
    if excluded is None:
        return np.zeros(0, dtype=np.int64)
    rows = [tuple(int(i) for i in e) for e in excluded]
    if not rows:
        return np.zeros(0, dtype=np.int64)
    arr = np.asarray(rows, dtype=np.int64)
    if arr.shape[1] != len(dims):
        raise ValueError("excluded indices have wrong arity")
    return np.ravel_multi_index(arr.T, dims)


def sample_zero_cells(
    dims: tuple[int, ...], forbidden_flat: np.ndarray, count: int, rng: np.random.Generator
) -> np.ndarray:
    """Uniformly sample `count` distinct cells outside the forbidden set.

    Rejection sampling in the sparse regime, explicit enumeration of the
    complement when forbidden cells exceed half the tensor.
    """
    total = math.prod(dims)
    forbidden = set(int(f) for f in forbidden_flat)
    free = total - len(forbidden)
    if count > free:
        raise ValueError(
            f"zero space has {free} cells, cannot sample {count}; reduce the nonzero set"
        )
    if count == 0:
        return np.zeros((0, len(dims)), dtype=np.int64)
    if len(forbidden) / total > _ENUMERATE_FRACTION:
        pool = np.setdiff1d(
            np.arange(total, dtype=np.int64), np.asarray(sorted(forbidden), dtype=np.int64)
        )
        chosen = rng.choice(pool, size=count, replace=False)
    else:
        picked: list[int] = []
        taken = set(forbidden)
        while len(picked) < count:
            draw = rng.integers(0, total, size=max(64, 2 * (count - len(picked))))
            for cand in draw:
                c = int(cand)
                if c in taken:
                    continue
                taken.add(c)
                picked.append(c)
                if len(picked) == count:
                    break
        chosen = np.asarray(picked, dtype=np.int64)
    return np.stack(np.unravel_index(chosen, dims), axis=1).astype(np.int64)


def _targets(values: np.ndarray, binary: bool) -> np.ndarray:
    if binary:
        return (values != 0.0).astype(np.float64)
    return values.astype(np.float64)


def balanced_sample(
    tensor: SparseTensor,
    excluded=None,
    seed: int = 0,
    binary: bool = False,
) -> EntryBatch:
    """All nonzero entries plus an equal count of sampled zero cells.

    Sampled zeros carry target 0 and never collide with observed entries or
    the excluded set. Deterministic for a fixed seed.
    """
    rng = np.random.default_rng(seed)
    nz_mask = tensor.values != 0.0
    nz_idx = tensor.indices[nz_mask]
    nz_val = _targets(tensor.values[nz_mask], binary)
    forbidden = np.concatenate([tensor.flat_ids(), _excluded_flat(tensor.dims, excluded)])
    zeros = sample_zero_cells(tensor.dims, forbidden, nz_idx.shape[0], rng)
    indices = np.concatenate([nz_idx, zeros], axis=0)
    targets = np.concatenate([nz_val, np.zeros(zeros.shape[0])])
    return EntryBatch(indices=indices, targets=targets)


def split_folds(
    tensor: SparseTensor,
    num_folds: int,
    zero_test_count: int,
    seed: int = 0,
    binary: bool = False,
) -> list[FoldSplit]:
    """Partition nonzeros into folds; each fold tests on its nonzero group
    plus zero_test_count sampled zeros and trains balanced on the rest."""
    if num_folds < 2:
        raise ValueError("num_folds must be at least 2")
    nz_mask = tensor.values != 0.0
    nz_idx = tensor.indices[nz_mask]
    nz_val = _targets(tensor.values[nz_mask], binary)
    nnz = nz_idx.shape[0]
    if nnz < num_folds:
        raise ValueError(f"need at least {num_folds} nonzero entries, have {nnz}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(nnz)
    groups = np.array_split(order, num_folds)
    observed = tensor.flat_ids()
    folds = []
    for group in groups:
        in_test = np.zeros(nnz, dtype=bool)
        in_test[group] = True
        test_zeros = sample_zero_cells(tensor.dims, observed, zero_test_count, rng)
        test = EntryBatch(
            indices=np.concatenate([nz_idx[in_test], test_zeros], axis=0),
            targets=np.concatenate([nz_val[in_test], np.zeros(zero_test_count)]),
        )
        train_nz_idx = nz_idx[~in_test]
        test_zero_flat = (
            np.ravel_multi_index(test_zeros.T, tensor.dims)
            if test_zeros.shape[0]
            else np.zeros(0, dtype=np.int64)
        )
        forbidden = np.concatenate([observed, test_zero_flat])
        train_zeros = sample_zero_cells(tensor.dims, forbidden, train_nz_idx.shape[0], rng)
        train = EntryBatch(
            indices=np.concatenate([train_nz_idx, train_zeros], axis=0),
            targets=np.concatenate([nz_val[~in_test], np.zeros(train_zeros.shape[0])]),
        )
        folds.append(FoldSplit(train=train, test=test, seed=seed))
    return folds


__all__ = [
    "FormatError",
    "SparseTensor",
    "EntryBatch",
    "FoldSplit",
    "parse_coo",
    "write_coo",
    "sample_zero_cells",
    "balanced_sample",
    "split_folds",
]
