import numpy as np
import pytest
from helpers import assert_gradients_close, central_difference, random_instance

from gptensor.elbo import (
    compute_stats,
    grad_binary,
    grad_continuous,
    solve_dual,
    tight_elbo_binary,
    tight_elbo_continuous,
)
from gptensor.model import BINARY, layout_of, pack, unpack
from gptensor.sptensor import EntryBatch


def continuous_value(batch, layout):
    def f(x):
        st = unpack(x, layout)
        return tight_elbo_continuous(compute_stats(batch, st), st)

    return f


def binary_value(batch, layout, dual):
    def f(x):
        st = unpack(x, layout, dual_coef=dual)
        return tight_elbo_binary(compute_stats(batch, st), batch, st)

    return f


class TestContinuousGradient:
    def test_matches_finite_differences(self):
        for seed in range(10):
            batch, state = random_instance(seed, n=12, p=3, dims=(4, 5))
            layout = layout_of(state)
            analytic = grad_continuous(batch, state)
            numeric = central_difference(continuous_value(batch, layout), pack(state).values)
            assert_gradients_close(analytic, numeric, rtol=1e-4)

    def test_untouched_rows_get_prior_only(self):
        batch, state = random_instance(30, n=8, p=3, dims=(10, 10))
        layout = layout_of(state)
        grad = grad_continuous(batch, state)
        touched = set(batch.indices[:, 0].tolist())
        free = next(i for i in range(10) if i not in touched)
        seg = grad[layout.factor_slice(0)].reshape(10, 2)
        np.testing.assert_allclose(seg[free], -state.factors.matrices[0][free], rtol=1e-12)

    def test_empty_batch_prior_only(self):
        _, state = random_instance(31, n=5, p=3)
        layout = layout_of(state)
        batch = EntryBatch(indices=np.zeros((0, 2), dtype=int), targets=np.zeros(0))
        grad = grad_continuous(batch, state)
        for k, mat in enumerate(state.factors.matrices):
            np.testing.assert_allclose(
                grad[layout.factor_slice(k)], -mat.ravel(), atol=1e-12
            )
        np.testing.assert_allclose(grad[layout.inducing_slice()], 0.0, atol=1e-12)
        assert grad[layout.log_amplitude_index()] == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(grad[layout.log_lengthscales_slice()], 0.0, atol=1e-12)
        assert grad[layout.noise_offset] == pytest.approx(0.0, abs=1e-12)


class TestBinaryGradient:
    def test_matches_finite_differences_at_fixed_dual(self):
        for seed in range(10):
            batch, state = random_instance(seed, mode=BINARY, n=12, p=3, dims=(4, 5))
            layout = layout_of(state)
            analytic = grad_binary(batch, state)
            numeric = central_difference(
                binary_value(batch, layout, state.dual_coef), pack(state).values
            )
            assert_gradients_close(analytic, numeric, rtol=1e-4)

    def test_label_flip_moves_only_that_entrys_probit_chain(self):
        batch, state = random_instance(50, mode=BINARY, n=9, p=3)
        j = 4
        flipped_targets = batch.targets.copy()
        flipped_targets[j] = 1.0 - flipped_targets[j]
        flipped = EntryBatch(indices=batch.indices, targets=flipped_targets)
        full_diff = grad_binary(flipped, state) - grad_binary(batch, state)
        single = EntryBatch(indices=batch.indices[j : j + 1], targets=batch.targets[j : j + 1])
        single_flip = EntryBatch(
            indices=batch.indices[j : j + 1], targets=flipped_targets[j : j + 1]
        )
        lone_diff = grad_binary(single_flip, state) - grad_binary(single, state)
        np.testing.assert_allclose(full_diff, lone_diff, atol=1e-10)

    def test_untouched_rows_get_prior_only(self):
        batch, state = random_instance(51, mode=BINARY, n=8, p=3, dims=(10, 10))
        layout = layout_of(state)
        grad = grad_binary(batch, state)
        touched = set(batch.indices[:, 1].tolist())
        free = next(i for i in range(10) if i not in touched)
        seg = grad[layout.factor_slice(1)].reshape(10, 2)
        np.testing.assert_allclose(seg[free], -state.factors.matrices[1][free], rtol=1e-12)

    def test_gradient_at_converged_dual_is_envelope_gradient(self):
        # The dual sits at an inner optimum, so nudging it must not move the
        # bound to first order; the outer gradient is valid at fixed dual.
        batch, state = random_instance(52, mode=BINARY, n=14, p=4)
        res = solve_dual(batch, state, tol=1e-12, max_iter=500)
        state_star = state.with_dual_coef(res.dual_coef)
        base = tight_elbo_binary(compute_stats(batch, state_star), batch, state_star)
        rng = np.random.default_rng(0)
        eps = 1e-6 * rng.normal(size=4)
        nudged = state.with_dual_coef(res.dual_coef + eps)
        moved = tight_elbo_binary(compute_stats(batch, nudged), batch, nudged)
        assert abs(moved - base) < 1e-9
