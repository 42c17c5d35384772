"""ARD squared-exponential covariance over concatenated factor inputs.

All hyperparameters live in log space so unconstrained optimizers can move
them freely. Gram matrices are regularized with a jitter proportional to the
amplitude; Cholesky factorizations escalate the jitter on failure before
giving up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.linalg import cho_solve

DEFAULT_JITTER = 1e-6
MAX_JITTER = 1e-2


class FactorizationError(RuntimeError):
    """Cholesky failed even after jitter escalation."""


@dataclass(frozen=True)
class KernelParams:
    """ARD-RBF hyperparameters: log amplitude (log sigma^2) and per-coordinate
    log lengthscales."""

    log_amplitude: float
    log_lengthscales: np.ndarray

    def __post_init__(self):
        ls = np.ascontiguousarray(self.log_lengthscales, dtype=np.float64)
        if ls.ndim != 1:
            raise ValueError("log_lengthscales must be a vector")
        object.__setattr__(self, "log_amplitude", float(self.log_amplitude))
        object.__setattr__(self, "log_lengthscales", ls)

    @property
    def input_dim(self) -> int:
        return self.log_lengthscales.shape[0]

    @property
    def amplitude(self) -> float:
        """sigma^2, the kernel value at zero distance."""
        return math.exp(self.log_amplitude)

    @property
    def lengthscales(self) -> np.ndarray:
        return np.exp(self.log_lengthscales)

    @property
    def inv_sq_lengthscales(self) -> np.ndarray:
        return np.exp(-2.0 * self.log_lengthscales)


class KernelGrads(NamedTuple):
    d_x: np.ndarray
    d_x2: np.ndarray
    d_log_amplitude: float
    d_log_lengthscales: np.ndarray


def _check_dim(v: np.ndarray, params: KernelParams, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != params.input_dim:
        raise ValueError(
            f"{name} has dimension {v.shape[-1]}, kernel expects {params.input_dim}"
        )
    return v


def kernel_eval(x: np.ndarray, x2: np.ndarray, params: KernelParams) -> float:
    """Evaluate sigma^2 * exp(-1/2 sum_d (x_d - x2_d)^2 / ell_d^2)."""
    x = _check_dim(x, params, "x")
    x2 = _check_dim(x2, params, "x2")
    d2 = np.sum((x - x2) ** 2 * params.inv_sq_lengthscales)
    return params.amplitude * math.exp(-0.5 * d2)


def cross_cov(a: np.ndarray, b: np.ndarray, params: KernelParams) -> np.ndarray:
    """Covariance matrix between two point sets: element (i, j) = k(a_i, b_j)."""
    a = _check_dim(np.atleast_2d(a), params, "a")
    b = _check_dim(np.atleast_2d(b), params, "b")
    from .backends import get_backend

    return get_backend().cross_cov(
        np.ascontiguousarray(a),
        np.ascontiguousarray(b),
        params.amplitude,
        params.inv_sq_lengthscales,
    )


def gram(points: np.ndarray, params: KernelParams, jitter: float = DEFAULT_JITTER) -> np.ndarray:
    """Symmetric Gram matrix with jitter * sigma^2 added to the diagonal."""
    if jitter < 0:
        raise ValueError("jitter must be non-negative")
    k = cross_cov(points, points, params)
    k = 0.5 * (k + k.T)
    if jitter > 0:
        k[np.diag_indices_from(k)] += jitter * params.amplitude
    return k


def gram_cholesky(
    points: np.ndarray, params: KernelParams, jitter: float = DEFAULT_JITTER
) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of the jittered Gram matrix.

    On failure the jitter is multiplied by 10 until MAX_JITTER, then a
    FactorizationError is raised. Returns (L, jitter_used).
    """
    base = gram(points, params, jitter=0.0)
    j = jitter
    while True:
        k = base.copy()
        if j > 0:
            k[np.diag_indices_from(k)] += j * params.amplitude
        try:
            return np.linalg.cholesky(k), j
        except np.linalg.LinAlgError:
            j = DEFAULT_JITTER if j == 0 else 10.0 * j
            if j > MAX_JITTER:
                raise FactorizationError(
                    f"Gram matrix not positive definite at jitter {MAX_JITTER}"
                ) from None


def chol_of(matrix: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of an SPD matrix already carrying any jitter."""
    try:
        return np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(str(exc)) from None


def chol_solve(chol_lower: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    return cho_solve((chol_lower, True), rhs, check_finite=False)


def chol_logdet(chol_lower: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(chol_lower))))


def chol_inverse(chol_lower: np.ndarray) -> np.ndarray:
    """Explicit inverse via triangular solves; symmetrized."""
    inv = cho_solve((chol_lower, True), np.eye(chol_lower.shape[0]), check_finite=False)
    return 0.5 * (inv + inv.T)


def kernel_grads(x: np.ndarray, x2: np.ndarray, params: KernelParams) -> KernelGrads:
    """Exact partials of kernel_eval with respect to inputs and log-space
    hyperparameters. d_x = -d_x2 by stationarity of the squared distance."""
    x = _check_dim(x, params, "x")
    x2 = _check_dim(x2, params, "x2")
    inv_ls2 = params.inv_sq_lengthscales
    diff = x - x2
    k = params.amplitude * math.exp(-0.5 * np.sum(diff**2 * inv_ls2))
    d_x = -k * diff * inv_ls2
    return KernelGrads(
        d_x=d_x,
        d_x2=-d_x,
        d_log_amplitude=k,
        d_log_lengthscales=k * diff**2 * inv_ls2,
    )


__all__ = [
    "DEFAULT_JITTER",
    "MAX_JITTER",
    "FactorizationError",
    "KernelParams",
    "KernelGrads",
    "kernel_eval",
    "cross_cov",
    "gram",
    "gram_cholesky",
    "chol_of",
    "chol_solve",
    "chol_logdet",
    "chol_inverse",
    "kernel_grads",
]
