"""Evidence lower bounds, gradients, and the binary fixed-point update.

Two collapsed bounds are implemented, one per likelihood. Both are sums of
a handful of entry-additive statistics plus global terms built from small
(p x p) factorizations, which is what makes the map/reduce engine in
`parallel` possible: workers sum the statistics, a coordinator closes the
formula.

The dense per-posterior bounds (`dense_elbo_continuous`,
`dense_elbo_binary`) exist for testing only: they evaluate the uncollapsed
objective at an explicit variational posterior, and must agree with the
collapsed forms at the analytic optimum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import backends
from .kernel import (
    DEFAULT_JITTER,
    chol_inverse,
    chol_logdet,
    chol_of,
    chol_solve,
    cross_cov,
    gram_cholesky,
)
from .model import BINARY, CONTINUOUS, FlatLayout, ModelState, assemble_inputs, layout_of

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class SufficientStats:
    """Entry-additive sums the bounds are built from.

    cov_outer  (p, p)  sum of k(B, x_j) outer products
    sq_targets         sum of squared targets (continuous)
    var_diag           sum of prior variances k(x_j, x_j)
    cov_targets (p,)   sum of k(B, x_j) * y_j (continuous)
    cov_probit  (p,)   probit-weighted feature sum (binary, dual-dependent)
    count              number of entries
    """

    cov_outer: np.ndarray
    var_diag: float
    count: int
    sq_targets: float | None = None
    cov_targets: np.ndarray | None = None
    cov_probit: np.ndarray | None = None

    def __add__(self, other: "SufficientStats") -> "SufficientStats":
        def opt(a, b):
            if a is None and b is None:
                return None
            if a is None or b is None:
                raise ValueError("cannot add stats from different modes")
            return a + b

        return SufficientStats(
            cov_outer=self.cov_outer + other.cov_outer,
            var_diag=self.var_diag + other.var_diag,
            count=self.count + other.count,
            sq_targets=opt(self.sq_targets, other.sq_targets),
            cov_targets=opt(self.cov_targets, other.cov_targets),
            cov_probit=opt(self.cov_probit, other.cov_probit),
        )

    @classmethod
    def zeros(cls, num_inducing: int, mode: str) -> "SufficientStats":
        if mode == CONTINUOUS:
            return cls(
                cov_outer=np.zeros((num_inducing, num_inducing)),
                var_diag=0.0,
                count=0,
                sq_targets=0.0,
                cov_targets=np.zeros(num_inducing),
            )
        return cls(
            cov_outer=np.zeros((num_inducing, num_inducing)),
            var_diag=0.0,
            count=0,
            cov_probit=np.zeros(num_inducing),
        )


@dataclass(frozen=True)
class InducingPosterior:
    """Gaussian posterior over the inducing targets."""

    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True)
class TruncatedNormalMoments:
    """First moment and probit weight of the optimal augmentation posterior.

    mean = eta + weight componentwise, with eta the truncation location.
    """

    mean: np.ndarray
    weight: np.ndarray


@dataclass(frozen=True)
class FixedPointResult:
    dual_coef: np.ndarray
    iterations: int
    converged: bool


def _inputs(state: ModelState, indices: np.ndarray) -> np.ndarray:
    return assemble_inputs(state.factors, indices)


def compute_stats(batch, state: ModelState, backend: str | None = None) -> SufficientStats:
    """Entry sums over a batch. Binary stats use the state's current dual
    coefficients, so they must be recomputed after every dual update."""
    be = backends.get_backend(backend)
    X = _inputs(state, batch.indices)
    y = np.ascontiguousarray(batch.targets)
    B = state.inducing.points
    amp2 = state.kernel.amplitude
    inv_ls2 = state.kernel.inv_sq_lengthscales
    if state.mode == CONTINUOUS:
        if X.shape[0] == 0:
            return SufficientStats.zeros(state.inducing.count, CONTINUOUS)
        cov_outer, sq_targets, var_diag, cov_targets = be.stats_continuous(
            X, y, B, amp2, inv_ls2
        )
        return SufficientStats(
            cov_outer=cov_outer,
            var_diag=var_diag,
            count=X.shape[0],
            sq_targets=sq_targets,
            cov_targets=cov_targets,
        )
    if X.shape[0] == 0:
        return SufficientStats.zeros(state.inducing.count, BINARY)
    cov_outer, var_diag, cov_probit, _ = be.stats_binary(
        X, y, B, state.dual_coef, amp2, inv_ls2
    )
    return SufficientStats(
        cov_outer=cov_outer, var_diag=var_diag, count=X.shape[0], cov_probit=cov_probit
    )


@dataclass(frozen=True)
class _Factorized:
    """Shared p x p solves used by both the bound value and its gradient."""

    kbb: np.ndarray
    chol_kbb: np.ndarray
    chol_shifted: np.ndarray  # kbb + scale * cov_outer, scale = beta or 1
    logdet_kbb: float
    logdet_shifted: float
    trace_kinv_outer: float


def _factorize(stats: SufficientStats, state: ModelState, jitter: float) -> _Factorized:
    chol_kbb, used = gram_cholesky(state.inducing.points, state.kernel, jitter)
    kbb = chol_kbb @ chol_kbb.T
    scale = state.noise_precision if state.mode == CONTINUOUS else 1.0
    shifted = kbb + scale * stats.cov_outer
    chol_shifted = chol_of(0.5 * (shifted + shifted.T))
    return _Factorized(
        kbb=kbb,
        chol_kbb=chol_kbb,
        chol_shifted=chol_shifted,
        logdet_kbb=chol_logdet(chol_kbb),
        logdet_shifted=chol_logdet(chol_shifted),
        trace_kinv_outer=float(np.trace(chol_solve(chol_kbb, stats.cov_outer))),
    )


def _entry_elbo_continuous(
    sq_targets: float, var_diag: float, count: int, beta: float
) -> float:
    return (
        -0.5 * beta * sq_targets
        - 0.5 * beta * var_diag
        + 0.5 * count * (math.log(beta) - LOG_2PI)
    )


def _global_elbo_continuous(f: _Factorized, stats: SufficientStats, state: ModelState) -> float:
    beta = state.noise_precision
    m4 = chol_solve(f.chol_shifted, stats.cov_targets)
    quad = float(stats.cov_targets @ m4)
    return (
        0.5 * f.logdet_kbb
        - 0.5 * f.logdet_shifted
        + 0.5 * beta * f.trace_kinv_outer
        - 0.5 * state.factors.squared_norm()
        + 0.5 * beta * beta * quad
    )


def _global_elbo_binary(f: _Factorized, stats: SufficientStats, state: ModelState) -> float:
    lam = state.dual_coef
    return (
        0.5 * f.logdet_kbb
        - 0.5 * f.logdet_shifted
        + 0.5 * f.trace_kinv_outer
        - 0.5 * float(lam @ (f.kbb @ lam))
        - 0.5 * state.factors.squared_norm()
    )


def tight_elbo_continuous(
    stats: SufficientStats, state: ModelState, jitter: float = DEFAULT_JITTER
) -> float:
    """Collapsed bound for Gaussian likelihoods, a function of the entry sums
    alone. Equals the dense evidence plus the factor log-prior when the
    inducing points coincide with the training inputs."""
    if state.mode != CONTINUOUS:
        raise ValueError("continuous-mode state required")
    f = _factorize(stats, state, jitter)
    beta = state.noise_precision
    return _global_elbo_continuous(f, stats, state) + _entry_elbo_continuous(
        stats.sq_targets, stats.var_diag, stats.count, beta
    )


def tight_elbo_binary(
    stats: SufficientStats,
    batch,
    state: ModelState,
    jitter: float = DEFAULT_JITTER,
    backend: str | None = None,
) -> float:
    """Collapsed bound for probit likelihoods at the state's dual
    coefficients. The probit log-likelihood sum is re-evaluated from the
    batch; everything else comes from the entry sums."""
    if state.mode != BINARY:
        raise ValueError("binary-mode state required")
    be = backends.get_backend(backend)
    f = _factorize(stats, state, jitter)
    if len(batch) == 0:
        log_cdf_sum = 0.0
    else:
        X = _inputs(state, batch.indices)
        _, log_cdf_sum = be.binary_shift_sums(
            X,
            np.ascontiguousarray(batch.targets),
            state.inducing.points,
            state.dual_coef,
            state.kernel.amplitude,
            state.kernel.inv_sq_lengthscales,
        )
    return _global_elbo_binary(f, stats, state) - 0.5 * stats.var_diag + log_cdf_sum


@dataclass(frozen=True)
class GradientCoefficients:
    """Derivatives of the bound with respect to the kernel-built blocks.

    coef_kbb weights dK_BB; coef_outer2 is twice the derivative against the
    outer-product sum (it multiplies per-entry features symmetrically);
    coef_targets weights the target-weighted sum; coef_var weights the
    summed prior variances; g_log_beta is the full log-precision partial.
    """

    coef_kbb: np.ndarray
    coef_outer2: np.ndarray
    coef_targets: np.ndarray | None
    coef_var: float
    g_log_beta: float | None


def _gradient_coefficients(
    f: _Factorized, stats: SufficientStats, state: ModelState
) -> GradientCoefficients:
    kinv = chol_inverse(f.chol_kbb)
    sinv = chol_inverse(f.chol_shifted)
    kinv_outer_kinv = kinv @ stats.cov_outer @ kinv
    kinv_outer_kinv = 0.5 * (kinv_outer_kinv + kinv_outer_kinv.T)
    if state.mode == CONTINUOUS:
        beta = state.noise_precision
        m4 = sinv @ stats.cov_targets
        m4_outer = np.outer(m4, m4)
        coef_kbb = (
            0.5 * (kinv - sinv) - 0.5 * beta * kinv_outer_kinv - 0.5 * beta * beta * m4_outer
        )
        coef_outer2 = beta * (kinv - sinv) - beta**3 * m4_outer
        coef_targets = beta * beta * m4
        quad = float(stats.cov_targets @ m4)
        g_log_beta = (
            0.5 * stats.count
            - 0.5 * beta * float(np.sum(sinv * stats.cov_outer))
            - 0.5 * beta * stats.sq_targets
            - 0.5 * beta * stats.var_diag
            + 0.5 * beta * f.trace_kinv_outer
            + beta * beta * quad
            - 0.5 * beta**3 * float(m4 @ (stats.cov_outer @ m4))
        )
        return GradientCoefficients(
            coef_kbb=coef_kbb,
            coef_outer2=coef_outer2,
            coef_targets=coef_targets,
            coef_var=-0.5 * beta,
            g_log_beta=g_log_beta,
        )
    lam = state.dual_coef
    coef_kbb = 0.5 * (kinv - sinv) - 0.5 * kinv_outer_kinv - 0.5 * np.outer(lam, lam)
    coef_outer2 = kinv - sinv
    return GradientCoefficients(
        coef_kbb=coef_kbb,
        coef_outer2=coef_outer2,
        coef_targets=None,
        coef_var=-0.5,
        g_log_beta=None,
    )


def entry_gradient(
    batch,
    state: ModelState,
    coeffs: GradientCoefficients,
    layout: FlatLayout | None = None,
    backend: str | None = None,
) -> np.ndarray:
    """Full-length gradient vector carrying only this batch's entry-sum
    contributions. Shared factor rows accumulate; untouched slots stay zero."""
    be = backends.get_backend(backend)
    layout = layout or layout_of(state)
    grad = np.zeros(layout.size)
    if len(batch) == 0:
        return grad
    X = _inputs(state, batch.indices)
    y = np.ascontiguousarray(batch.targets)
    B = state.inducing.points
    amp2 = state.kernel.amplitude
    inv_ls2 = state.kernel.inv_sq_lengthscales
    if state.mode == CONTINUOUS:
        g_x, g_B, g_log_amp, g_log_ls = be.chain_continuous(
            X, y, B, amp2, inv_ls2, coeffs.coef_outer2, coeffs.coef_targets
        )
    else:
        g_x, g_B, g_log_amp, g_log_ls = be.chain_binary(
            X, y, B, state.dual_coef, amp2, inv_ls2, coeffs.coef_outer2
        )
    off = 0
    idx = batch.indices
    for k, (d, r) in enumerate(zip(layout.dims, layout.ranks)):
        acc = np.zeros((d, r))
        be.scatter_rows(acc, np.ascontiguousarray(idx[:, k]), np.ascontiguousarray(g_x[:, off : off + r]))
        grad[layout.factor_slice(k)] = acc.ravel()
        off += r
    grad[layout.inducing_slice()] = g_B.ravel()
    # Each entry's prior variance k(x_j, x_j) moves only with the amplitude.
    grad[layout.log_amplitude_index()] = g_log_amp + coeffs.coef_var * len(batch) * amp2
    grad[layout.log_lengthscales_slice()] = g_log_ls
    return grad


def global_gradient(
    state: ModelState,
    coeffs: GradientCoefficients,
    f: _Factorized,
    layout: FlatLayout | None = None,
) -> np.ndarray:
    """Gradient terms that need the reduced statistics: the Gram-matrix
    chain, the factor prior, and the noise-precision partial."""
    layout = layout or layout_of(state)
    grad = np.zeros(layout.size)
    for k, mat in enumerate(state.factors.matrices):
        grad[layout.factor_slice(k)] = -mat.ravel()
    B = state.inducing.points
    inv_ls2 = state.kernel.inv_sq_lengthscales
    W = coeffs.coef_kbb * f.kbb
    row = W.sum(axis=1)
    wb = W @ B
    grad[layout.inducing_slice()] = (-2.0 * inv_ls2[None, :] * (row[:, None] * B - wb)).ravel()
    grad[layout.log_amplitude_index()] = float(W.sum())
    grad[layout.log_lengthscales_slice()] = inv_ls2 * (
        2.0 * (row[:, None] * B * B).sum(axis=0) - 2.0 * (B * wb).sum(axis=0)
    )
    if state.mode == CONTINUOUS:
        grad[layout.noise_offset] = coeffs.g_log_beta
    return grad


def grad_continuous(
    batch, state: ModelState, jitter: float = DEFAULT_JITTER, backend: str | None = None
) -> np.ndarray:
    """Exact gradient of tight_elbo_continuous over the flat parameters,
    including the log noise precision."""
    if state.mode != CONTINUOUS:
        raise ValueError("continuous-mode state required")
    stats = compute_stats(batch, state, backend=backend)
    f = _factorize(stats, state, jitter)
    coeffs = _gradient_coefficients(f, stats, state)
    layout = layout_of(state)
    return entry_gradient(batch, state, coeffs, layout, backend) + global_gradient(
        state, coeffs, f, layout
    )


def grad_binary(
    batch, state: ModelState, jitter: float = DEFAULT_JITTER, backend: str | None = None
) -> np.ndarray:
    """Exact gradient of tight_elbo_binary at the state's dual coefficients,
    which are treated as constants (they sit at their own inner optimum)."""
    if state.mode != BINARY:
        raise ValueError("binary-mode state required")
    stats = compute_stats(batch, state, backend=backend)
    f = _factorize(stats, state, jitter)
    coeffs = _gradient_coefficients(f, stats, state)
    layout = layout_of(state)
    return entry_gradient(batch, state, coeffs, layout, backend) + global_gradient(
        state, coeffs, f, layout
    )


def fixed_point_step(
    dual_coef: np.ndarray,
    stats: SufficientStats,
    state: ModelState,
    jitter: float = DEFAULT_JITTER,
) -> np.ndarray:
    """One dual-coefficient update; never decreases the binary bound.

    The stats must have been computed at `dual_coef`, since the probit sum
    depends on it.
    """
    chol_kbb, _ = gram_cholesky(state.inducing.points, state.kernel, jitter)
    kbb = chol_kbb @ chol_kbb.T
    shifted = kbb + stats.cov_outer
    chol_shifted = chol_of(0.5 * (shifted + shifted.T))
    rhs = stats.cov_outer @ dual_coef + stats.cov_probit
    return chol_solve(chol_shifted, rhs)


def fixed_point_solve(
    state: ModelState,
    stats_fn: Callable[[np.ndarray], SufficientStats],
    tol: float = 1e-8,
    max_iter: int = 100,
    jitter: float = DEFAULT_JITTER,
) -> FixedPointResult:
    """Iterate the dual update until the sup-norm change drops below tol.

    Hitting max_iter is not an error; the best iterate is returned with
    converged=False.
    """
    if state.mode != BINARY:
        raise ValueError("binary-mode state required")
    dual = np.array(state.dual_coef, dtype=np.float64)
    for it in range(1, max_iter + 1):
        stats = stats_fn(dual)
        nxt = fixed_point_step(dual, stats, state, jitter)
        delta = float(np.max(np.abs(nxt - dual))) if dual.size else 0.0
        dual = nxt
        if delta < tol:
            return FixedPointResult(dual_coef=dual, iterations=it, converged=True)
    return FixedPointResult(dual_coef=dual, iterations=max_iter, converged=False)


def solve_dual(
    batch,
    state: ModelState,
    tol: float = 1e-8,
    max_iter: int = 100,
    jitter: float = DEFAULT_JITTER,
    backend: str | None = None,
) -> FixedPointResult:
    """fixed_point_solve against a batch, recomputing stats per sweep."""

    def stats_fn(dual: np.ndarray) -> SufficientStats:
        return compute_stats(batch, state.with_dual_coef(dual), backend=backend)

    return fixed_point_solve(state, stats_fn, tol=tol, max_iter=max_iter, jitter=jitter)


def dual_gradient(
    stats: SufficientStats, state: ModelState, jitter: float = DEFAULT_JITTER
) -> np.ndarray:
    """Partial of the binary bound with respect to the dual coefficients;
    zero exactly at a fixed point."""
    chol_kbb, _ = gram_cholesky(state.inducing.points, state.kernel, jitter)
    return stats.cov_probit - (chol_kbb @ (chol_kbb.T @ state.dual_coef))


def optimal_inducing_posterior(
    stats: SufficientStats, state: ModelState, jitter: float = DEFAULT_JITTER
) -> InducingPosterior:
    """The Gaussian posterior over inducing targets that attains the
    collapsed continuous bound."""
    if state.mode != CONTINUOUS:
        raise ValueError("continuous-mode state required")
    f = _factorize(stats, state, jitter)
    beta = state.noise_precision
    mean = beta * (f.kbb @ chol_solve(f.chol_shifted, stats.cov_targets))
    cov = f.kbb @ chol_solve(f.chol_shifted, f.kbb)
    return InducingPosterior(mean=mean, cov=0.5 * (cov + cov.T))


def dense_elbo_continuous(
    batch,
    state: ModelState,
    posterior: InducingPosterior,
    jitter: float = DEFAULT_JITTER,
) -> float:
    """Uncollapsed continuous bound at an explicit inducing posterior.

    Small-scale test oracle: maximized over the posterior it must reproduce
    tight_elbo_continuous.
    """
    if state.mode != CONTINUOUS:
        raise ValueError("continuous-mode state required")
    beta = state.noise_precision
    chol_kbb, _ = gram_cholesky(state.inducing.points, state.kernel, jitter)
    p = state.inducing.count
    mu, cov = posterior.mean, posterior.cov
    n = len(batch)
    data_term = 0.0
    if n:
        X = _inputs(state, batch.indices)
        kbx = cross_cov(state.inducing.points, X, state.kernel)
        V = chol_solve(chol_kbb, kbx)  # K_BB^-1 k(B, x_j) per column
        resid_var = np.maximum(state.kernel.amplitude - np.sum(kbx * V, axis=0), 0.0)
        pred_mean = V.T @ mu
        pred_var = np.sum(V * (cov @ V), axis=0)
        resid = batch.targets - pred_mean
        data_term = float(
            -0.5 * n * (LOG_2PI - math.log(beta))
            - 0.5 * beta * np.sum(resid**2 + pred_var + resid_var)
        )
    chol_cov = chol_of(cov)
    kl = 0.5 * (
        float(np.trace(chol_solve(chol_kbb, cov)))
        + float(mu @ chol_solve(chol_kbb, mu))
        - p
        + chol_logdet(chol_kbb)
        - chol_logdet(chol_cov)
    )
    return data_term - kl - 0.5 * state.factors.squared_norm()


def truncated_normal_moments(eta: np.ndarray, targets: np.ndarray) -> TruncatedNormalMoments:
    """Moments of a unit-variance normal at eta truncated to the half-line
    selected by each binary target."""
    from .backends import _numpy as ref

    signs = 2.0 * np.asarray(targets, dtype=np.float64) - 1.0
    w, _ = ref.probit_weights(np.asarray(eta, dtype=np.float64), signs)
    return TruncatedNormalMoments(mean=eta + w, weight=w)


def dense_elbo_binary(
    batch,
    state: ModelState,
    jitter: float = DEFAULT_JITTER,
) -> float:
    """Decoupled binary bound evaluated at the analytic optimal augmentation
    posterior for the state's dual coefficients. Test oracle: must equal
    tight_elbo_binary."""
    from .backends import _numpy as ref

    if state.mode != BINARY:
        raise ValueError("binary-mode state required")
    stats = compute_stats(batch, state, backend="numpy")
    f = _factorize(stats, state, jitter)
    lam = state.dual_coef
    n = len(batch)
    entry_term = 0.0
    if n:
        X = _inputs(state, batch.indices)
        kbx = cross_cov(state.inducing.points, X, state.kernel)
        eta = kbx.T @ lam
        signs = 2.0 * batch.targets - 1.0
        w, log_cdf = ref.probit_weights(eta, signs)
        z_mean = eta + w
        z_sq = 1.0 + eta * eta + eta * w
        entropy = 0.5 * LOG_2PI + 0.5 * (1.0 - eta * w) + log_cdf
        entry_term = float(
            np.sum(-0.5 * z_sq + eta * z_mean + entropy) - 0.5 * n * LOG_2PI
        )
    shifted_quad = float(lam @ (f.kbb @ lam)) + float(lam @ (stats.cov_outer @ lam))
    return (
        0.5 * f.logdet_kbb
        - 0.5 * f.logdet_shifted
        - 0.5 * stats.var_diag
        + 0.5 * f.trace_kinv_outer
        - 0.5 * shifted_quad
        + entry_term
        - 0.5 * state.factors.squared_norm()
    )


def quadratic_conjugate_bound(
    E: np.ndarray, eta: np.ndarray, lam: np.ndarray
) -> tuple[float, float]:
    """Both sides of eta' E^-1 eta >= 2 lam' eta - lam' E lam for SPD E.

    Equality holds at lam = E^-1 eta.
    """
    E = np.asarray(E, dtype=np.float64)
    chol = chol_of(E)
    lhs = float(eta @ chol_solve(chol, eta))
    rhs = float(2.0 * (lam @ eta) - lam @ (E @ lam))
    return lhs, rhs


__all__ = [
    "SufficientStats",
    "InducingPosterior",
    "TruncatedNormalMoments",
    "FixedPointResult",
    "GradientCoefficients",
    "compute_stats",
    "tight_elbo_continuous",
    "tight_elbo_binary",
    "entry_gradient",
    "global_gradient",
    "grad_continuous",
    "grad_binary",
    "fixed_point_step",
    "fixed_point_solve",
    "solve_dual",
    "dual_gradient",
    "optimal_inducing_posterior",
    "dense_elbo_continuous",
    "truncated_normal_moments",
    "dense_elbo_binary",
    "quadratic_conjugate_bound",
]
