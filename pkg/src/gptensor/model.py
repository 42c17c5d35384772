"""Trainable state: latent factors, inducing points, kernel and likelihood
parameters, with flat packing for optimizers and a binary checkpoint format.

The GP input of a tensor cell is the concatenation of that cell's factor
rows across modes, so the input dimension is the sum of the per-mode latent
ranks. The binary-mode dual coefficient vector is deliberately left out of
the flat vector: it is resolved by its own fixed-point inner loop rather
than by the outer optimizer.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from typing import BinaryIO

import numpy as np

from .kernel import KernelParams

CONTINUOUS = "continuous"
BINARY = "binary"

_MAGIC = b"GPTENSR1"


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LatentFactors:
    """One factor matrix per mode; matrix k has shape (d_k, r_k)."""

    matrices: tuple[np.ndarray, ...]

    def __post_init__(self):
        mats = tuple(
            _freeze(np.ascontiguousarray(m, dtype=np.float64)) for m in self.matrices
        )
        if any(m.ndim != 2 for m in mats):
            raise ValueError("factor matrices must be 2-D")
        object.__setattr__(self, "matrices", mats)

    @property
    def num_modes(self) -> int:
        return len(self.matrices)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(m.shape[0] for m in self.matrices)

    @property
    def ranks(self) -> tuple[int, ...]:
        return tuple(m.shape[1] for m in self.matrices)

    @property
    def input_dim(self) -> int:
        return sum(self.ranks)

    def squared_norm(self) -> float:
        return float(sum(np.sum(m * m) for m in self.matrices))


@dataclass(frozen=True)
class InducingSet:
    """Pseudo-input locations in the concatenated factor space; their latent
    targets are integrated out analytically and never stored."""

    points: np.ndarray  # (p, D)

    def __post_init__(self):
        pts = np.ascontiguousarray(np.atleast_2d(self.points), dtype=np.float64)
        if pts.shape[0] < 1:
            raise ValueError("need at least one inducing point")
        object.__setattr__(self, "points", _freeze(pts))

    @property
    def count(self) -> int:
        return self.points.shape[0]

    @property
    def input_dim(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class ModelState:
    factors: LatentFactors
    inducing: InducingSet
    kernel: KernelParams
    mode: str
    log_noise_precision: float | None = None  # continuous only
    dual_coef: np.ndarray | None = None  # binary only

    def __post_init__(self):
        if self.mode not in (CONTINUOUS, BINARY):
            raise ValueError(f"unknown mode {self.mode!r}")
        d = self.factors.input_dim
        if self.inducing.input_dim != d or self.kernel.input_dim != d:
            raise ValueError("inducing points / kernel dimension must match factors")
        if self.mode == CONTINUOUS:
            if self.log_noise_precision is None or self.dual_coef is not None:
                raise ValueError("continuous mode carries log_noise_precision only")
        else:
            if self.dual_coef is None or self.log_noise_precision is not None:
                raise ValueError("binary mode carries dual_coef only")
            dc = np.ascontiguousarray(self.dual_coef, dtype=np.float64).reshape(-1)
            if dc.shape[0] != self.inducing.count:
                raise ValueError("dual_coef length must equal the inducing count")
            object.__setattr__(self, "dual_coef", _freeze(dc))

    @property
    def noise_precision(self) -> float:
        assert self.log_noise_precision is not None
        return float(np.exp(self.log_noise_precision))

    def with_dual_coef(self, dual_coef: np.ndarray) -> "ModelState":
        return replace(self, dual_coef=dual_coef)


@dataclass(frozen=True)
class FlatLayout:
    """Segment map of the flat parameter vector.

    Order: factor matrices per mode, inducing points, log amplitude, log
    lengthscales, then log noise precision in continuous mode.
    """

    dims: tuple[int, ...]
    ranks: tuple[int, ...]
    num_inducing: int
    mode: str

    @property
    def input_dim(self) -> int:
        return sum(self.ranks)

    @property
    def factor_sizes(self) -> tuple[int, ...]:
        return tuple(d * r for d, r in zip(self.dims, self.ranks))

    @property
    def factor_offsets(self) -> tuple[int, ...]:
        offs = []
        off = 0
        for size in self.factor_sizes:
            offs.append(off)
            off += size
        return tuple(offs)

    @property
    def inducing_offset(self) -> int:
        return sum(self.factor_sizes)

    @property
    def kernel_offset(self) -> int:
        return self.inducing_offset + self.num_inducing * self.input_dim

    @property
    def noise_offset(self) -> int:
        return self.kernel_offset + 1 + self.input_dim

    @property
    def size(self) -> int:
        n = self.noise_offset
        return n + 1 if self.mode == CONTINUOUS else n

    def factor_slice(self, mode_k: int) -> slice:
        off = self.factor_offsets[mode_k]
        return slice(off, off + self.factor_sizes[mode_k])

    def inducing_slice(self) -> slice:
        return slice(self.inducing_offset, self.kernel_offset)

    def log_amplitude_index(self) -> int:
        return self.kernel_offset

    def log_lengthscales_slice(self) -> slice:
        return slice(self.kernel_offset + 1, self.kernel_offset + 1 + self.input_dim)


@dataclass(frozen=True)
class FlatParams:
    values: np.ndarray
    layout: FlatLayout

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64).reshape(-1)
        if v.shape[0] != self.layout.size:
            raise ValueError(
                f"flat vector has length {v.shape[0]}, layout expects {self.layout.size}"
            )
        object.__setattr__(self, "values", v)


def layout_of(state: ModelState) -> FlatLayout:
    return FlatLayout(
        dims=state.factors.dims,
        ranks=state.factors.ranks,
        num_inducing=state.inducing.count,
        mode=state.mode,
    )


def pack(state: ModelState) -> FlatParams:
    """Flatten everything the outer optimizer moves. Exact round-trip with
    unpack; the binary dual coefficients are not included."""
    layout = layout_of(state)
    pieces = [m.ravel() for m in state.factors.matrices]
    pieces.append(state.inducing.points.ravel())
    pieces.append(np.array([state.kernel.log_amplitude]))
    pieces.append(state.kernel.log_lengthscales)
    if state.mode == CONTINUOUS:
        pieces.append(np.array([state.log_noise_precision]))
    return FlatParams(values=np.concatenate(pieces), layout=layout)


def unpack(
    values: np.ndarray, layout: FlatLayout, dual_coef: np.ndarray | None = None
) -> ModelState:
    """Rebuild a ModelState from a flat vector. Binary mode needs the current
    dual coefficients passed alongside, since they are not packed."""
    v = np.ascontiguousarray(values, dtype=np.float64).reshape(-1)
    if v.shape[0] != layout.size:
        raise ValueError(f"flat vector has length {v.shape[0]}, expected {layout.size}")
    mats = []
    for k, (d, r) in enumerate(zip(layout.dims, layout.ranks)):
        mats.append(v[layout.factor_slice(k)].reshape(d, r).copy())
    points = v[layout.inducing_slice()].reshape(layout.num_inducing, layout.input_dim).copy()
    kernel = KernelParams(
        log_amplitude=float(v[layout.log_amplitude_index()]),
        log_lengthscales=v[layout.log_lengthscales_slice()].copy(),
    )
    if layout.mode == CONTINUOUS:
        return ModelState(
            factors=LatentFactors(tuple(mats)),
            inducing=InducingSet(points),
            kernel=kernel,
            mode=CONTINUOUS,
            log_noise_precision=float(v[layout.noise_offset]),
        )
    if dual_coef is None:
        dual_coef = np.zeros(layout.num_inducing)
    return ModelState(
        factors=LatentFactors(tuple(mats)),
        inducing=InducingSet(points),
        kernel=kernel,
        mode=BINARY,
        dual_coef=dual_coef,
    )


def assemble_input(factors: LatentFactors, index) -> np.ndarray:
    """GP input of one cell: its factor rows concatenated in mode order."""
    idx = tuple(int(i) for i in index)
    if len(idx) != factors.num_modes:
        raise IndexError(f"index has {len(idx)} components, tensor has {factors.num_modes}")
    for k, (i, d) in enumerate(zip(idx, factors.dims)):
        if i < 0 or i >= d:
            raise IndexError(f"index {i} out of range for mode {k + 1} (dim {d})")
    return np.concatenate([factors.matrices[k][i] for k, i in enumerate(idx)])


def assemble_inputs(factors: LatentFactors, indices: np.ndarray) -> np.ndarray:
    """Vectorized assemble_input over an (N, K) index array."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape[0] == 0:
        return np.zeros((0, factors.input_dim))
    if idx.min() < 0:  # fancy indexing would silently wrap
        raise IndexError("negative tensor index")
    cols = [factors.matrices[k][idx[:, k]] for k in range(factors.num_modes)]
    return np.ascontiguousarray(np.concatenate(cols, axis=1))


def init_state(
    dims,
    ranks,
    num_inducing: int,
    mode: str,
    seed: int = 0,
    factor_scale: float = 0.1,
    inducing_noise: float = 0.01,
) -> ModelState:
    """Deterministic random initialization.

    Factors are small Gaussians; inducing points start at the assembled
    inputs of distinct random cells plus a little noise, so the initial
    cross-covariances are informative. Kernel and noise logs start at zero.
    """
    dims = tuple(int(d) for d in dims)
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != len(dims):
        raise ValueError("ranks must list one latent dimension per mode")
    if num_inducing < 1:
        raise ValueError("need at least one inducing point")
    rng = np.random.default_rng(seed)
    mats = tuple(rng.normal(0.0, factor_scale, size=(d, r)) for d, r in zip(dims, ranks))
    factors = LatentFactors(mats)
    total = math.prod(dims)
    cells: list[int] = []
    taken: set[int] = set()
    while len(cells) < num_inducing:
        draw = rng.integers(0, total, size=max(64, 2 * (num_inducing - len(cells))))
        for cand in draw:
            c = int(cand)
            if c in taken:
                continue
            taken.add(c)
            cells.append(c)
            if len(cells) == num_inducing:
                break
    cell_idx = np.stack(np.unravel_index(np.asarray(cells, dtype=np.int64), dims), axis=1)
    points = assemble_inputs(factors, cell_idx)
    points = points + rng.normal(0.0, inducing_noise, size=points.shape)
    d_total = factors.input_dim
    kernel = KernelParams(log_amplitude=0.0, log_lengthscales=np.zeros(d_total))
    if mode == CONTINUOUS:
        return ModelState(
            factors=factors,
            inducing=InducingSet(points),
            kernel=kernel,
            mode=CONTINUOUS,
            log_noise_precision=0.0,
        )
    return ModelState(
        factors=factors,
        inducing=InducingSet(points),
        kernel=kernel,
        mode=BINARY,
        dual_coef=np.zeros(num_inducing),
    )


def save_checkpoint(stream: BinaryIO, state: ModelState) -> None:
    """Versioned little-endian checkpoint; exact float64 round-trip."""
    layout = layout_of(state)
    flat = pack(state)
    stream.write(_MAGIC)
    head = [1 if state.mode == BINARY else 0, len(layout.dims)]
    head.extend(layout.dims)
    head.extend(layout.ranks)
    head.append(layout.num_inducing)
    stream.write(struct.pack(f"<{len(head)}q", *head))
    stream.write(flat.values.astype("<f8").tobytes())
    if state.mode == BINARY:
        stream.write(np.asarray(state.dual_coef).astype("<f8").tobytes())


def load_checkpoint(stream: BinaryIO) -> ModelState:
    magic = stream.read(len(_MAGIC))
    if magic != _MAGIC:
        raise ValueError("not a gptensor checkpoint (bad magic)")

    def read_ints(n: int) -> tuple[int, ...]:
        raw = stream.read(8 * n)
        if len(raw) != 8 * n:
            raise ValueError("truncated checkpoint header")
        return struct.unpack(f"<{n}q", raw)

    mode_flag, k = read_ints(2)
    dims = read_ints(k)
    ranks = read_ints(k)
    (p,) = read_ints(1)
    mode = BINARY if mode_flag else CONTINUOUS
    layout = FlatLayout(dims=dims, ranks=ranks, num_inducing=p, mode=mode)
    flat_raw = stream.read(8 * layout.size)
    if len(flat_raw) != 8 * layout.size:
        raise ValueError("truncated checkpoint parameters")
    values = np.frombuffer(flat_raw, dtype="<f8").astype(np.float64)
    dual = None
    if mode == BINARY:
        dual_raw = stream.read(8 * p)
        if len(dual_raw) != 8 * p:
            raise ValueError("truncated checkpoint dual coefficients")
        dual = np.frombuffer(dual_raw, dtype="<f8").astype(np.float64)
    return unpack(values, layout, dual_coef=dual)


__all__ = [
    "CONTINUOUS",
    "BINARY",
    "LatentFactors",
    "InducingSet",
    "ModelState",
    "FlatLayout",
    "FlatParams",
    "layout_of",
    "pack",
    "unpack",
    "assemble_input",
    "assemble_inputs",
    "init_state",
    "save_checkpoint",
    "load_checkpoint",
]
