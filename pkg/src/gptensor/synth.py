"""Synthetic tensors drawn from the model's own generative process.

Ground-truth factors come from the standard-normal prior, latent function
values from one joint GP draw over every emitted cell, and observations add
Gaussian noise (continuous) or pass through the thresholded unit-noise
augmentation (binary). Every emitted cell carries its sampled value, so the
written data is realizable by the model and a dense GP given the true
inputs bounds what any factorization can achieve on it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kernel import KernelParams, cross_cov
from .model import BINARY, CONTINUOUS, LatentFactors, assemble_inputs
from .sptensor import SparseTensor

_GP_SAMPLE_JITTER = 1e-9
_LABEL_BALANCE = (0.2, 0.8)
_MAX_RESEED = 20


@dataclass(frozen=True)
class SynthResult:
    train: SparseTensor
    test: SparseTensor
    manifest: dict = field(repr=False)


def _distinct_cells(dims, count: int, rng: np.random.Generator) -> np.ndarray:
    total = math.prod(dims)
    if count > total:
        raise ValueError(f"cannot draw {count} distinct cells from {total}")
    if count * 2 >= total:
        flat = rng.choice(total, size=count, replace=False)
    else:
        picked: list[int] = []
        taken: set[int] = set()
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
        flat = np.asarray(picked, dtype=np.int64)
    return np.stack(np.unravel_index(flat, dims), axis=1).astype(np.int64)


def _sample_once(dims, ranks, mode, n_train, n_test, beta, kernel, seed):
    rng = np.random.default_rng(seed)
    factors = LatentFactors(
        tuple(rng.normal(0.0, 1.0, size=(d, r)) for d, r in zip(dims, ranks))
    )
    cells = _distinct_cells(dims, n_train + n_test, rng)
    x = assemble_inputs(factors, cells)
    cov = cross_cov(x, x, kernel)
    cov[np.diag_indices_from(cov)] += _GP_SAMPLE_JITTER * kernel.amplitude
    f = np.linalg.cholesky(cov) @ rng.normal(size=cells.shape[0])
    if mode == CONTINUOUS:
        values = f + rng.normal(0.0, 1.0 / math.sqrt(beta), size=f.shape)
    else:
        values = (f + rng.normal(0.0, 1.0, size=f.shape) > 0.0).astype(np.float64)
    return factors, cells, values


def generate(
    dims,
    ranks,
    mode: str,
    density: float,
    n_test: int,
    seed: int = 0,
    beta: float = 100.0,
    log_amplitude: float | None = None,
    log_lengthscale: float | None = None,
) -> SynthResult:
    """Draw a ground-truth model and emit train/test tensors plus a manifest.

    The training tensor holds twice the density-determined nonzero count
    (the designated cells plus an equal balancing share), all carrying their
    sampled values. Binary draws whose label proportions fall outside
    (20%, 80%) are re-seeded deterministically and the reseed count is
    recorded in the manifest.
    """
    dims = tuple(int(d) for d in dims)
    ranks = tuple(int(r) for r in ranks)
    if mode not in (CONTINUOUS, BINARY):
        raise ValueError(f"unknown mode {mode!r}")
    d_total = sum(ranks)
    # Defaults chosen so binary labels are nearly noise-free and factor scale
    # of one sits inside a lengthscale.
    if log_amplitude is None:
        log_amplitude = math.log(16.0) if mode == BINARY else 0.0
    if log_lengthscale is None:
        log_lengthscale = 0.5 * math.log(float(d_total) / 2.0)
    kernel = KernelParams(
        log_amplitude=log_amplitude,
        log_lengthscales=np.full(d_total, log_lengthscale),
    )
    n_nonzero = int(round(density * math.prod(dims)))
    if n_nonzero < 1:
        raise ValueError("density too small: no nonzero cells")
    n_train = 2 * n_nonzero

    used_seed = seed
    reseeds = 0
    while True:
        factors, cells, values = _sample_once(
            dims, ranks, mode, n_train, n_test, beta, kernel, used_seed
        )
        if mode == CONTINUOUS:
            break
        frac = float(np.mean(values))
        if _LABEL_BALANCE[0] < frac < _LABEL_BALANCE[1]:
            break
        reseeds += 1
        if reseeds > _MAX_RESEED:
            raise RuntimeError("could not draw balanced binary labels")
        used_seed = used_seed + 1

    train = SparseTensor(dims=dims, indices=cells[:n_train], values=values[:n_train])
    test = SparseTensor(dims=dims, indices=cells[n_train:], values=values[n_train:])
    manifest = {
        "seed": seed,
        "effective_seed": used_seed,
        "reseeds": reseeds,
        "mode": mode,
        "dims": list(dims),
        "ranks": list(ranks),
        "density": density,
        "n_nonzero": n_nonzero,
        "n_train": n_train,
        "n_test": n_test,
        "beta": beta,
        "log_amplitude": kernel.log_amplitude,
        "log_lengthscales": kernel.log_lengthscales.tolist(),
        "factors": [m.tolist() for m in factors.matrices],
    }
    return SynthResult(train=train, test=test, manifest=manifest)


def true_inputs(manifest: dict, indices: np.ndarray) -> np.ndarray:
    """Assemble GP inputs from the manifest's ground-truth factors."""
    factors = LatentFactors(tuple(np.asarray(m) for m in manifest["factors"]))
    return assemble_inputs(factors, np.asarray(indices, dtype=np.int64))


def manifest_kernel(manifest: dict) -> KernelParams:
    return KernelParams(
        log_amplitude=manifest["log_amplitude"],
        log_lengthscales=np.asarray(manifest["log_lengthscales"]),
    )


__all__ = ["SynthResult", "generate", "true_inputs", "manifest_kernel"]
