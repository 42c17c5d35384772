"""Key-value-free map/reduce over tensor entries.

A batch is cut into contiguous partitions; each map task emits a LocalResult
whose gradient is always full length, so reduction is a plain componentwise
sum in partition order with no key matching or sorting. Global bound terms
(log determinants, the factor prior, the noise partial, the Gram chain) need
the reduced statistics, so the coordinator computes them between the two map
passes and broadcasts the small coefficient matrices read-only.

Map tasks share the model state read-only and own their LocalResult; the
only synchronization point is the reduce.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import backends
from .elbo import (
    GradientCoefficients,
    SufficientStats,
    _entry_elbo_continuous,
    _factorize,
    _global_elbo_binary,
    _global_elbo_continuous,
    _gradient_coefficients,
    entry_gradient,
    global_gradient,
)
from .kernel import DEFAULT_JITTER, chol_of, chol_solve, gram_cholesky
from .model import BINARY, CONTINUOUS, FlatLayout, ModelState, assemble_inputs, layout_of
from .sptensor import EntryBatch

TASKS_ENV_VAR = "GPTENSOR_TASKS"


def default_task_count() -> int:
    env = os.environ.get(TASKS_ENV_VAR, "").strip()
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass(frozen=True)
class Partition:
    """Contiguous slice of a batch in its canonical entry order."""

    batch: EntryBatch
    partition_id: int


@dataclass(frozen=True)
class LocalResult:
    """One map task's contribution: entry sums, a full-length gradient
    vector, and this partition's additive share of the bound."""

    stats: SufficientStats
    gradient: np.ndarray
    elbo_partial: float
    partition_id: int


@dataclass(frozen=True)
class ObjectiveResult:
    elbo: float
    gradient: np.ndarray
    layout: FlatLayout
    stats: SufficientStats
    dual_coef: np.ndarray | None = None
    dual_iterations: int = 0
    dual_converged: bool = True


def partition(batch: EntryBatch, num_tasks: int) -> list[Partition]:
    """Contiguous slices with sizes differing by at most one; concatenated in
    id order they reproduce the batch exactly."""
    if num_tasks < 1:
        raise ValueError("num_tasks must be at least 1")
    n = len(batch)
    base, rem = divmod(n, num_tasks)
    parts = []
    lo = 0
    for t in range(num_tasks):
        hi = lo + base + (1 if t < rem else 0)
        parts.append(Partition(batch=batch.slice(lo, hi), partition_id=t))
        lo = hi
    return parts


def map_task(
    part: Partition,
    state: ModelState,
    coeffs: GradientCoefficients | None = None,
    layout: FlatLayout | None = None,
    backend: str | None = None,
) -> LocalResult:
    """Statistics pass when coeffs is None, gradient pass otherwise.

    Either way the result only reflects this partition's entries; slots its
    entries never touch stay exactly zero.
    """
    layout = layout or layout_of(state)
    if coeffs is None:
        stats, partial = _stats_and_partial(part.batch, state, backend)
        return LocalResult(
            stats=stats,
            gradient=np.zeros(layout.size),
            elbo_partial=partial,
            partition_id=part.partition_id,
        )
    grad = entry_gradient(part.batch, state, coeffs, layout, backend)
    return LocalResult(
        stats=SufficientStats.zeros(state.inducing.count, state.mode),
        gradient=grad,
        elbo_partial=0.0,
        partition_id=part.partition_id,
    )


def reduce(results: list[LocalResult]) -> tuple[float, np.ndarray, SufficientStats]:
    """Componentwise sums in ascending partition id. No keys, no sorting of
    anything but the fixed ids, so the result is reproducible bit for bit."""
    if not results:
        raise ValueError("reduce needs at least one result")
    ordered = sorted(results, key=lambda r: r.partition_id)
    size = ordered[0].gradient.shape[0]
    if any(r.gradient.shape[0] != size for r in ordered):
        raise ValueError("gradient lengths disagree across results")
    elbo = 0.0
    grad = np.zeros(size)
    stats = ordered[0].stats
    grad += ordered[0].gradient
    elbo += ordered[0].elbo_partial
    for r in ordered[1:]:
        stats = stats + r.stats
        grad += r.gradient
        elbo += r.elbo_partial
    return elbo, grad, stats


def _stats_and_partial(
    batch: EntryBatch, state: ModelState, backend: str | None
) -> tuple[SufficientStats, float]:
    be = backends.get_backend(backend)
    p = state.inducing.count
    if len(batch) == 0:
        return SufficientStats.zeros(p, state.mode), 0.0
    X = assemble_inputs(state.factors, batch.indices)
    y = np.ascontiguousarray(batch.targets)
    amp2 = state.kernel.amplitude
    inv_ls2 = state.kernel.inv_sq_lengthscales
    if state.mode == CONTINUOUS:
        cov_outer, sq_targets, var_diag, cov_targets = be.stats_continuous(
            X, y, state.inducing.points, amp2, inv_ls2
        )
        stats = SufficientStats(
            cov_outer=cov_outer,
            var_diag=var_diag,
            count=len(batch),
            sq_targets=sq_targets,
            cov_targets=cov_targets,
        )
        partial = _entry_elbo_continuous(
            sq_targets, var_diag, len(batch), state.noise_precision
        )
        return stats, partial
    cov_outer, var_diag, cov_probit, log_cdf_sum = be.stats_binary(
        X, y, state.inducing.points, state.dual_coef, amp2, inv_ls2
    )
    stats = SufficientStats(
        cov_outer=cov_outer, var_diag=var_diag, count=len(batch), cov_probit=cov_probit
    )
    return stats, -0.5 * var_diag + log_cdf_sum


def _run_tasks(pool: ThreadPoolExecutor | None, fn, parts: list[Partition]) -> list:
    if pool is None:
        return [fn(part) for part in parts]
    return list(pool.map(fn, parts))


def _converge_dual(
    parts: list[Partition],
    state: ModelState,
    pool: ThreadPoolExecutor | None,
    tol: float,
    max_iter: int,
    jitter: float,
    backend: str | None,
    stationarity_tol: float = 1e-6,
) -> tuple[ModelState, list[LocalResult], int, bool]:
    """Fixed-point inner loop where every sweep is itself a map/reduce.

    The outer-product sum is independent of the dual coefficients, so it is
    reduced once and its Cholesky factor reused; each sweep only re-maps the
    dual-dependent probit sums. A sweep converges on a small dual update or
    on a small dual gradient: with large entry counts the update size hits a
    solver noise floor long after the gradient is numerically zero, so the
    stationarity test is what actually terminates big instances. Returns
    the state at the converged dual plus per-partition LocalResults there.
    """
    be = backends.get_backend(backend)
    amp2 = state.kernel.amplitude
    inv_ls2 = state.kernel.inv_sq_lengthscales
    B = state.inducing.points
    p = B.shape[0]
    first = _run_tasks(
        pool,
        lambda part: _stats_and_partial(part.batch, state, backend),
        parts,
    )
    if max_iter == 0:  # evaluate at the state's dual as-is
        locals_ = [
            LocalResult(stats=s, gradient=np.zeros(0), elbo_partial=partial, partition_id=part.partition_id)
            for (s, partial), part in zip(first, parts)
        ]
        return state, locals_, 0, True
    inputs = _run_tasks(
        pool, lambda part: assemble_inputs(state.factors, part.batch.indices), parts
    )
    part_stats = [s for s, _ in first]
    cov_outer = part_stats[0].cov_outer.copy()
    for s in part_stats[1:]:
        cov_outer += s.cov_outer
    chol_kbb, _ = gram_cholesky(B, state.kernel, jitter)
    kbb = chol_kbb @ chol_kbb.T
    shifted = kbb + cov_outer
    chol_shifted = chol_of(0.5 * (shifted + shifted.T))

    def sweep(dual: np.ndarray) -> list[tuple[np.ndarray, float]]:
        def task(i_part):
            i, part = i_part
            if len(part.batch) == 0:
                return np.zeros(p), 0.0
            return be.binary_shift_sums(
                inputs[i], np.ascontiguousarray(part.batch.targets), B, dual, amp2, inv_ls2
            )

        return _run_tasks(pool, task, list(enumerate(parts)))

    dual = np.array(state.dual_coef, dtype=np.float64)
    part_sums = [(s.cov_probit, 0.0) for s in part_stats]
    cov_probit = np.zeros(p)
    for cp, _ in part_sums:
        cov_probit += cp
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        nxt = chol_solve(chol_shifted, cov_outer @ dual + cov_probit)
        delta = float(np.max(np.abs(nxt - dual)))
        dual = nxt
        part_sums = sweep(dual)
        cov_probit = np.zeros(p)
        for cp, _ in part_sums:
            cov_probit += cp
        residual = float(np.max(np.abs(cov_probit - kbb @ dual)))
        if delta < tol or residual <= stationarity_tol:
            converged = True
            break

    def final_result(i: int, part: Partition) -> LocalResult:
        base = part_stats[i]
        cp, lc = part_sums[i]
        stats = SufficientStats(
            cov_outer=base.cov_outer,
            var_diag=base.var_diag,
            count=base.count,
            cov_probit=cp,
        )
        return LocalResult(
            stats=stats,
            gradient=np.zeros(0),
            elbo_partial=-0.5 * base.var_diag + lc,
            partition_id=part.partition_id,
        )

    locals_ = [final_result(i, part) for i, part in enumerate(parts)]
    return state.with_dual_coef(dual), locals_, iterations, converged


def parallel_objective(
    batch: EntryBatch,
    state: ModelState,
    num_tasks: int | None = None,
    jitter: float = DEFAULT_JITTER,
    dual_tol: float = 1e-8,
    dual_grad_tol: float = 1e-6,
    dual_max_iter: int = 100,
    backend: str | None = None,
) -> ObjectiveResult:
    """Bound value and full gradient via two map/reduce passes.

    Binary mode first converges the dual coefficients (spawning one
    map/reduce per fixed-point sweep) and differentiates at the optimum;
    dual_max_iter=0 skips the inner loop and evaluates at the state's dual
    as-is. The result matches the single-task computation up to float
    reassociation for any task count.
    """
    num_tasks = num_tasks or default_task_count()
    if dual_max_iter < 0:
        raise ValueError("dual_max_iter must be non-negative")
    layout = layout_of(state)
    parts = partition(batch, num_tasks)
    pool = ThreadPoolExecutor(max_workers=num_tasks) if num_tasks > 1 else None
    try:
        dual_iters = 0
        dual_ok = True
        if state.mode == BINARY:
            state, results, dual_iters, dual_ok = _converge_dual(
                parts,
                state,
                pool,
                dual_tol,
                dual_max_iter,
                jitter,
                backend,
                stationarity_tol=dual_grad_tol,
            )
            results = [
                LocalResult(
                    stats=r.stats,
                    gradient=np.zeros(layout.size),
                    elbo_partial=r.elbo_partial,
                    partition_id=r.partition_id,
                )
                for r in results
            ]
        else:
            results = _run_tasks(
                pool, lambda part: map_task(part, state, backend=backend), parts
            )
        partial_elbo, _, stats = reduce(results)
        f = _factorize(stats, state, jitter)
        if state.mode == CONTINUOUS:
            elbo = _global_elbo_continuous(f, stats, state) + partial_elbo
        else:
            elbo = _global_elbo_binary(f, stats, state) + partial_elbo
        coeffs = _gradient_coefficients(f, stats, state)
        grad_results = _run_tasks(
            pool,
            lambda part: map_task(part, state, coeffs=coeffs, layout=layout, backend=backend),
            parts,
        )
        _, grad, _ = reduce(grad_results)
        grad += global_gradient(state, coeffs, f, layout)
        return ObjectiveResult(
            elbo=float(elbo),
            gradient=grad,
            layout=layout,
            stats=stats,
            dual_coef=state.dual_coef if state.mode == BINARY else None,
            dual_iterations=dual_iters,
            dual_converged=dual_ok,
        )
    finally:
        if pool is not None:
            pool.shutdown(wait=True)


__all__ = [
    "TASKS_ENV_VAR",
    "default_task_count",
    "Partition",
    "LocalResult",
    "ObjectiveResult",
    "partition",
    "map_task",
    "reduce",
    "parallel_objective",
]
