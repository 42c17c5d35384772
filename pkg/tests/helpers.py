"""Shared instance builders and oracles for the test suite."""

from __future__ import annotations

import numpy as np

from gptensor.kernel import KernelParams, cross_cov
from gptensor.model import (
    BINARY,
    CONTINUOUS,
    InducingSet,
    LatentFactors,
    ModelState,
    assemble_inputs,
)
from gptensor.sptensor import EntryBatch


def random_instance(
    seed: int,
    mode: str = CONTINUOUS,
    n: int = 20,
    p: int = 4,
    dims: tuple[int, ...] = (6, 7),
    ranks: tuple[int, ...] = (2, 2),
    tie_inducing: bool = False,
    factor_scale: float = 1.0,
    hyper_scale: float = 0.3,
) -> tuple[EntryBatch, ModelState]:
    """A random model state plus a batch of distinct observed cells.

    With tie_inducing=True the inducing points sit exactly on the batch
    inputs (and p is forced to n), the regime where the continuous bound is
    tight.
    """
    rng = np.random.default_rng(seed)
    factors = LatentFactors(
        tuple(rng.normal(0.0, factor_scale, size=(d, r)) for d, r in zip(dims, ranks))
    )
    total = int(np.prod(dims))
    if n > total:
        raise ValueError(f"cannot place {n} distinct cells on a {dims} grid")
    flat = rng.permutation(total)[:n]
    idx = np.ascontiguousarray(np.stack(np.unravel_index(flat, dims), axis=1))
    d_total = sum(ranks)
    kernel = KernelParams(
        log_amplitude=float(rng.uniform(-hyper_scale, hyper_scale)),
        log_lengthscales=rng.uniform(-hyper_scale, hyper_scale, size=d_total),
    )
    if tie_inducing:
        points = assemble_inputs(factors, idx)
    else:
        points = rng.normal(0.0, factor_scale, size=(p, d_total))
    if mode == CONTINUOUS:
        targets = rng.normal(size=n)
        state = ModelState(
            factors=factors,
            inducing=InducingSet(points),
            kernel=kernel,
            mode=CONTINUOUS,
            log_noise_precision=float(rng.uniform(-hyper_scale, hyper_scale)),
        )
    else:
        targets = rng.integers(0, 2, size=n).astype(np.float64)
        state = ModelState(
            factors=factors,
            inducing=InducingSet(points),
            kernel=kernel,
            mode=BINARY,
            dual_coef=rng.normal(0.0, 0.3, size=points.shape[0]),
        )
    return EntryBatch(indices=idx, targets=targets), state


def dense_evidence(batch: EntryBatch, state: ModelState) -> float:
    """Exact log evidence of the continuous model plus the factor log-prior,
    computed densely. Independent of the inducing-point code path."""
    X = assemble_inputs(state.factors, batch.indices)
    K = cross_cov(X, X, state.kernel)
    K = 0.5 * (K + K.T)
    C = K + np.eye(len(batch)) / state.noise_precision
    L = np.linalg.cholesky(C)
    half = np.linalg.solve(L, batch.targets)
    n = len(batch)
    return float(
        -0.5 * half @ half
        - np.sum(np.log(np.diag(L)))
        - 0.5 * n * np.log(2.0 * np.pi)
        - 0.5 * state.factors.squared_norm()
    )


def central_difference(f, x0: np.ndarray, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xp[i] += h
        xm = x0.copy()
        xm[i] -= h
        grad[i] = (f(xp) - f(xm)) / (2.0 * h)
    return grad


def assert_gradients_close(analytic: np.ndarray, numeric: np.ndarray, rtol: float) -> None:
    """Per-component relative comparison plus an absolute term for the
    finite-difference noise floor (roughly eps * |objective| / h), so
    components that are numerically zero cannot trip the ratio while any
    component-scale error is still caught."""
    scale = max(1.0, float(np.max(np.abs(analytic))))
    noise_floor = 1e-8 * scale
    err = np.abs(analytic - numeric)
    bound = rtol * np.maximum(np.abs(analytic), np.abs(numeric)) + noise_floor
    worst = float(np.max(err - bound))
    assert worst <= 0.0, (
        f"gradient mismatch: component error exceeds rtol {rtol:.1e} "
        f"plus noise floor {noise_floor:.1e} by {worst:.3e}"
    )
