"""Pure-numpy reference implementations of the per-entry kernels.

Every function here has a numba twin in _numba.py with identical signature
and semantics. These are the readable versions and the fallback path; the
vectorized forms lean on BLAS instead of explicit loops.
"""

from __future__ import annotations

import numpy as np
from scipy.special import log_ndtr

LOG_2PI = float(np.log(2.0 * np.pi))


def cross_cov(a: np.ndarray, b: np.ndarray, amp2: float, inv_ls2: np.ndarray) -> np.ndarray:
    """ARD-RBF covariance between row sets a (m,D) and b (n,D)."""
    scale = np.sqrt(inv_ls2)
    sa = a * scale
    sb = b * scale
    d2 = (
        np.sum(sa * sa, axis=1)[:, None]
        + np.sum(sb * sb, axis=1)[None, :]
        - 2.0 * (sa @ sb.T)
    )
    np.maximum(d2, 0.0, out=d2)
    return amp2 * np.exp(-0.5 * d2)


def probit_weights(eta: np.ndarray, signs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Stable w = sign * pdf(eta) / cdf(sign * eta) and log cdf(sign * eta).

    Evaluated as exp(log pdf - log cdf) so extreme eta never produces 0/0.
    """
    log_cdf = log_ndtr(signs * eta)
    log_pdf = -0.5 * eta * eta - 0.5 * LOG_2PI
    w = signs * np.exp(log_pdf - log_cdf)
    return w, log_cdf


def stats_continuous(
    X: np.ndarray, y: np.ndarray, B: np.ndarray, amp2: float, inv_ls2: np.ndarray
) -> tuple[np.ndarray, float, float, np.ndarray]:
    """Entry sums for continuous data: outer-product matrix, sum of squared
    targets, summed prior variances, target-weighted feature sum."""
    kbx = cross_cov(B, X, amp2, inv_ls2)
    cov_outer = kbx @ kbx.T
    cov_outer = 0.5 * (cov_outer + cov_outer.T)
    sq_targets = float(y @ y)
    var_diag = X.shape[0] * amp2
    cov_targets = kbx @ y
    return cov_outer, sq_targets, var_diag, cov_targets


def stats_binary(
    X: np.ndarray,
    y: np.ndarray,
    B: np.ndarray,
    dual_coef: np.ndarray,
    amp2: float,
    inv_ls2: np.ndarray,
) -> tuple[np.ndarray, float, np.ndarray, float]:
    """Entry sums for binary data plus the summed probit log-likelihood."""
    kbx = cross_cov(B, X, amp2, inv_ls2)
    cov_outer = kbx @ kbx.T
    cov_outer = 0.5 * (cov_outer + cov_outer.T)
    var_diag = X.shape[0] * amp2
    signs = 2.0 * y - 1.0
    eta = kbx.T @ dual_coef
    w, log_cdf = probit_weights(eta, signs)
    cov_probit = kbx @ w
    return cov_outer, var_diag, cov_probit, float(np.sum(log_cdf))


def binary_shift_sums(
    X: np.ndarray,
    y: np.ndarray,
    B: np.ndarray,
    dual_coef: np.ndarray,
    amp2: float,
    inv_ls2: np.ndarray,
) -> tuple[np.ndarray, float]:
    """cov_probit and the probit log-likelihood sum at the given dual_coef.

    Used by the fixed-point sweeps, which only need the dual-dependent sums.
    """
    kbx = cross_cov(B, X, amp2, inv_ls2)
    signs = 2.0 * y - 1.0
    eta = kbx.T @ dual_coef
    w, log_cdf = probit_weights(eta, signs)
    return kbx @ w, float(np.sum(log_cdf))


def _chain_tail(
    E: np.ndarray, X: np.ndarray, B: np.ndarray, inv_ls2: np.ndarray
) -> tuple[np.ndarray, np.ndarray, float, np.ndarray]:
    """Accumulate input, inducing-point, and log-hyperparameter gradients
    from the elementwise weight matrix E (p, n)."""
    col = E.sum(axis=0)
    row = E.sum(axis=1)
    ex = E @ X
    g_x = (E.T @ B - col[:, None] * X) * inv_ls2[None, :]
    g_B = -(row[:, None] * B - ex) * inv_ls2[None, :]
    g_log_amp = float(E.sum())
    g_log_ls = inv_ls2 * (
        (row[:, None] * B * B).sum(axis=0)
        - 2.0 * (B * ex).sum(axis=0)
        + (col[:, None] * X * X).sum(axis=0)
    )
    return g_x, g_B, g_log_amp, g_log_ls


def chain_continuous(
    X: np.ndarray,
    y: np.ndarray,
    B: np.ndarray,
    amp2: float,
    inv_ls2: np.ndarray,
    coef_outer2: np.ndarray,
    coef_targets: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, float, np.ndarray]:
    """Per-entry gradient chain for continuous data.

    coef_outer2 is twice the bound's derivative with respect to the
    outer-product sum; coef_targets is its derivative with respect to the
    target-weighted sum.
    """
    kbx = cross_cov(B, X, amp2, inv_ls2)
    C = coef_outer2 @ kbx + np.outer(coef_targets, y)
    return _chain_tail(C * kbx, X, B, inv_ls2)


def chain_binary(
    X: np.ndarray,
    y: np.ndarray,
    B: np.ndarray,
    dual_coef: np.ndarray,
    amp2: float,
    inv_ls2: np.ndarray,
    coef_outer2: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, float, np.ndarray]:
    """Per-entry gradient chain for binary data (probit term included)."""
    kbx = cross_cov(B, X, amp2, inv_ls2)
    signs = 2.0 * y - 1.0
    eta = kbx.T @ dual_coef
    w, _ = probit_weights(eta, signs)
    C = coef_outer2 @ kbx + np.outer(dual_coef, w)
    return _chain_tail(C * kbx, X, B, inv_ls2)


def scatter_rows(acc: np.ndarray, rows: np.ndarray, vals: np.ndarray) -> None:
    """acc[rows[j]] += vals[j], with repeated rows accumulating."""
    np.add.at(acc, rows, vals)
