"""Numba twins of the _numpy kernels.

All kernels are compiled with nogil=True so independent map tasks scale
across threads, and cache=True so the compile cost is paid once per machine.
The loops avoid BLAS on purpose: each task then owns exactly one core and
thread-level scaling stays predictable.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

LOG_2PI = math.log(2.0 * math.pi)
_SQRT2 = math.sqrt(2.0)


@njit(cache=True, nogil=True)
def _log_ndtr(x):
    # erfc is accurate and free of underflow down to about x = -12; below
    # that switch to the standard asymptotic expansion of the normal tail.
    if x > -12.0:
        return math.log(0.5 * math.erfc(-x / _SQRT2))
    z = x * x
    series = 1.0 - 1.0 / z + 3.0 / (z * z) - 15.0 / (z * z * z) + 105.0 / (z * z * z * z)
    return -0.5 * z - math.log(-x) - 0.5 * LOG_2PI + math.log(series)


@njit(cache=True, nogil=True)
def cross_cov(a, b, amp2, inv_ls2):
    m, D = a.shape
    n = b.shape[0]
    out = np.empty((m, n))
    for i in range(m):
        for j in range(n):
            d2 = 0.0
            for d in range(D):
                diff = a[i, d] - b[j, d]
                d2 += diff * diff * inv_ls2[d]
            out[i, j] = amp2 * math.exp(-0.5 * d2)
    return out


@njit(cache=True, nogil=True)
def _kbx_row(X, B, inv_ls2, amp2, j, out):
    p, D = B.shape
    for a in range(p):
        d2 = 0.0
        for d in range(D):
            diff = B[a, d] - X[j, d]
            d2 += diff * diff * inv_ls2[d]
        out[a] = amp2 * math.exp(-0.5 * d2)


@njit(cache=True, nogil=True)
def stats_continuous(X, y, B, amp2, inv_ls2):
    n = X.shape[0]
    p = B.shape[0]
    cov_outer = np.zeros((p, p))
    cov_targets = np.zeros(p)
    sq_targets = 0.0
    kj = np.empty(p)
    for j in range(n):
        _kbx_row(X, B, inv_ls2, amp2, j, kj)
        yj = y[j]
        sq_targets += yj * yj
        for a in range(p):
            ka = kj[a]
            cov_targets[a] += ka * yj
            for b in range(a, p):
                cov_outer[a, b] += ka * kj[b]
    for a in range(p):
        for b in range(a + 1, p):
            cov_outer[b, a] = cov_outer[a, b]
    var_diag = n * amp2
    return cov_outer, sq_targets, var_diag, cov_targets


@njit(cache=True, nogil=True)
def stats_binary(X, y, B, dual_coef, amp2, inv_ls2):
    n = X.shape[0]
    p = B.shape[0]
    cov_outer = np.zeros((p, p))
    cov_probit = np.zeros(p)
    log_cdf_sum = 0.0
    kj = np.empty(p)
    for j in range(n):
        _kbx_row(X, B, inv_ls2, amp2, j, kj)
        eta = 0.0
        for a in range(p):
            eta += kj[a] * dual_coef[a]
        s = 2.0 * y[j] - 1.0
        log_cdf = _log_ndtr(s * eta)
        log_cdf_sum += log_cdf
        w = s * math.exp(-0.5 * eta * eta - 0.5 * LOG_2PI - log_cdf)
        for a in range(p):
            ka = kj[a]
            cov_probit[a] += ka * w
            for b in range(a, p):
                cov_outer[a, b] += ka * kj[b]
    for a in range(p):
        for b in range(a + 1, p):
            cov_outer[b, a] = cov_outer[a, b]
    var_diag = n * amp2
    return cov_outer, var_diag, cov_probit, log_cdf_sum


@njit(cache=True, nogil=True)
def binary_shift_sums(X, y, B, dual_coef, amp2, inv_ls2):
    n = X.shape[0]
    p = B.shape[0]
    cov_probit = np.zeros(p)
    log_cdf_sum = 0.0
    kj = np.empty(p)
    for j in range(n):
        _kbx_row(X, B, inv_ls2, amp2, j, kj)
        eta = 0.0
        for a in range(p):
            eta += kj[a] * dual_coef[a]
        s = 2.0 * y[j] - 1.0
        log_cdf = _log_ndtr(s * eta)
        log_cdf_sum += log_cdf
        w = s * math.exp(-0.5 * eta * eta - 0.5 * LOG_2PI - log_cdf)
        for a in range(p):
            cov_probit[a] += kj[a] * w
    return cov_probit, log_cdf_sum


@njit(cache=True, nogil=True)
def _chain_entry(X, B, inv_ls2, j, kj, cj, g_x, g_B, g_log_ls):
    p, D = B.shape
    g_log_amp = 0.0
    for a in range(p):
        e = cj[a] * kj[a]
        g_log_amp += e
        for d in range(D):
            diff = B[a, d] - X[j, d]
            t = e * diff * inv_ls2[d]
            g_x[j, d] += t
            g_B[a, d] -= t
            g_log_ls[d] += t * diff
    return g_log_amp


@njit(cache=True, nogil=True)
def chain_continuous(X, y, B, amp2, inv_ls2, coef_outer2, coef_targets):
    n, D = X.shape
    p = B.shape[0]
    g_x = np.zeros((n, D))
    g_B = np.zeros((p, D))
    g_log_ls = np.zeros(D)
    g_log_amp = 0.0
    kj = np.empty(p)
    cj = np.empty(p)
    for j in range(n):
        _kbx_row(X, B, inv_ls2, amp2, j, kj)
        yj = y[j]
        for a in range(p):
            acc = coef_targets[a] * yj
            for b in range(p):
                acc += coef_outer2[a, b] * kj[b]
            cj[a] = acc
        g_log_amp += _chain_entry(X, B, inv_ls2, j, kj, cj, g_x, g_B, g_log_ls)
    return g_x, g_B, g_log_amp, g_log_ls


@njit(cache=True, nogil=True)
def chain_binary(X, y, B, dual_coef, amp2, inv_ls2, coef_outer2):
    n, D = X.shape
    p = B.shape[0]
    g_x = np.zeros((n, D))
    g_B = np.zeros((p, D))
    g_log_ls = np.zeros(D)
    g_log_amp = 0.0
    kj = np.empty(p)
    cj = np.empty(p)
    for j in range(n):
        _kbx_row(X, B, inv_ls2, amp2, j, kj)
        eta = 0.0
        for a in range(p):
            eta += kj[a] * dual_coef[a]
        s = 2.0 * y[j] - 1.0
        w = s * math.exp(-0.5 * eta * eta - 0.5 * LOG_2PI - _log_ndtr(s * eta))
        for a in range(p):
            acc = dual_coef[a] * w
            for b in range(p):
                acc += coef_outer2[a, b] * kj[b]
            cj[a] = acc
        g_log_amp += _chain_entry(X, B, inv_ls2, j, kj, cj, g_x, g_B, g_log_ls)
    return g_x, g_B, g_log_amp, g_log_ls


@njit(cache=True, nogil=True)
def scatter_rows(acc, rows, vals):
    n, r = vals.shape
    for j in range(n):
        row = rows[j]
        for t in range(r):
            acc[row, t] += vals[j, t]


def warmup() -> None:
    """Trigger compilation of every kernel on tiny inputs."""
    X = np.zeros((2, 3))
    y = np.array([0.0, 1.0])
    B = np.zeros((2, 3))
    lam = np.zeros(2)
    inv_ls2 = np.ones(3)
    coef = np.zeros((2, 2))
    cross_cov(X, B, 1.0, inv_ls2)
    stats_continuous(X, y, B, 1.0, inv_ls2)
    stats_binary(X, y, B, lam, 1.0, inv_ls2)
    binary_shift_sums(X, y, B, lam, 1.0, inv_ls2)
    chain_continuous(X, y, B, 1.0, inv_ls2, coef, lam)
    chain_binary(X, y, B, lam, 1.0, inv_ls2, coef)
    scatter_rows(np.zeros((2, 2)), np.array([0, 1]), np.zeros((2, 2)))
