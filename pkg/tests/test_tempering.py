"""Tests for ESS, the adaptive variance solve, and termination logic."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tempersmc.errors import DegenerateWeightsError
from tempersmc.models import make_linear_model, simulate
from tempersmc.particle_filter import incremental_logweight, run_bpf
from tempersmc.tempering import (
    TemperingConfig,
    TemperingState,
    ess,
    should_terminate,
    solve_lambda,
    solve_lambda_from_increments,
)


class TestEss:
    def test_equal_weights_give_n(self):
        assert ess(np.zeros(7)) == pytest.approx(7.0, abs=1e-12)
        assert ess(np.full(5, -3.2)) == pytest.approx(5.0, abs=1e-12)

    def test_single_dominant_weight(self):
        logw = np.array([0.0, -1e6, -1e6])
        assert ess(logw) == pytest.approx(1.0, abs=1e-9)

    def test_known_two_point_value(self):
        # weights (1, 3): ESS = (1+3)^2 / (1+9) = 1.6
        assert ess(np.log(np.array([1.0, 3.0]))) == pytest.approx(1.6, abs=1e-12)

    def test_all_minus_inf_raises(self):
        with pytest.raises(DegenerateWeightsError):
            ess(np.full(3, -np.inf))

    def test_ignores_minus_inf_entries(self):
        assert ess(np.array([0.0, 0.0, -np.inf])) == pytest.approx(2.0, abs=1e-12)

    @settings(deadline=None, max_examples=50)
    @given(
        arrays(np.float64, st.integers(1, 20), elements=st.floats(-50, 50)),
        st.floats(-100, 100),
    )
    def test_shift_invariant_and_bounded(self, logw, shift):
        base = ess(logw)
        assert 1.0 - 1e-9 <= base <= len(logw) + 1e-9
        assert ess(logw + shift) == pytest.approx(base, rel=1e-9)


class TestConfigValidation:
    def test_alpha_range(self):
        with pytest.raises(ValueError):
            TemperingConfig(alpha=0.0)
        with pytest.raises(ValueError):
            TemperingConfig(alpha=1.0)

    def test_lambda_ordering(self):
        with pytest.raises(ValueError):
            TemperingConfig(lambda0=-1.0)
        with pytest.raises(ValueError):
            TemperingConfig(lambda0=0.5, lambda_target=0.5)


def _spread_increments(n=40, rate=2.0):
    """Synthetic increments whose ESS decays smoothly as lam drops below 1."""
    scores = np.linspace(0.0, 1.0, n)

    def increment_fn(lam):
        if lam <= 0:
            raise ValueError("lam must be > 0")
        return -rate * (1.0 / lam - 1.0) * scores

    return increment_fn


class TestSolver:
    def test_hits_target_within_tolerance(self):
        cfg = TemperingConfig(alpha=0.5, lambda0=1.0, lambda_target=1e-3)
        fn = _spread_increments()
        lam, ess_at, fb = solve_lambda_from_increments(fn, 1.0, 40, cfg)
        assert not fb
        assert 1e-3 < lam < 1.0
        assert abs(ess_at - 20.0) / 20.0 <= cfg.ess_tol

    def test_reevaluation_is_bit_exact(self):
        cfg = TemperingConfig(alpha=0.4, lambda0=1.0, lambda_target=1e-3)
        fn = _spread_increments()
        lam, ess_at, _ = solve_lambda_from_increments(fn, 1.0, 40, cfg)
        assert ess(fn(lam)) == ess_at

    def test_homogeneous_population_jumps_to_target(self):
        cfg = TemperingConfig(alpha=0.5, lambda0=1.0, lambda_target=0.05)

        def fn(lam):
            return np.full(10, math.log(lam))  # constant shift: ESS stays N

        lam, ess_at, fb = solve_lambda_from_increments(fn, 1.0, 10, cfg)
        assert lam == 0.05
        assert ess_at == pytest.approx(10.0, abs=1e-9)
        assert not fb

    def test_fallback_on_unbracketable_crossing(self):
        cfg = TemperingConfig(alpha=0.5, lambda0=1.0, lambda_target=1e-3)

        def fn(lam):
            # ESS ~ 1 at every lam: the crossing cannot be bracketed.
            return np.array([0.0] + [-1e9] * 9)

        lam, ess_at, fb = solve_lambda_from_increments(fn, 1.0, 10, cfg)
        assert fb
        assert lam == pytest.approx(0.95, abs=1e-12)

    def test_result_strictly_decreases(self):
        cfg = TemperingConfig(alpha=0.5, lambda0=1.0, lambda_target=1e-3)
        for rate in (0.5, 2.0, 10.0):
            lam, _, _ = solve_lambda_from_increments(_spread_increments(rate=rate), 1.0, 40, cfg)
            assert lam < 1.0

    def test_hint_matches_unhinted_solution(self):
        cfg = TemperingConfig(alpha=0.5, lambda0=1.0, lambda_target=1e-3)
        fn = _spread_increments()
        lam_plain, _, _ = solve_lambda_from_increments(fn, 1.0, 40, cfg)
        for hint in (lam_plain, lam_plain * 0.5, lam_plain * 1.5, 2.0, -1.0):
            lam_h, ess_h, fb = solve_lambda_from_increments(fn, 1.0, 40, cfg, hint=hint)
            assert not fb
            assert abs(ess_h - 20.0) / 20.0 <= cfg.ess_tol
            # Both solutions satisfy the same tolerance band around the target.
            assert abs(math.log(lam_h / lam_plain)) < 0.5

    def test_zero_target_allowed(self):
        cfg = TemperingConfig(alpha=0.5, lambda0=1.0, lambda_target=0.0)
        lam, _, _ = solve_lambda_from_increments(_spread_increments(), 1.0, 40, cfg)
        assert lam > 0


class TestSolveLambdaBundles:
    def test_matches_per_bundle_reevaluation(self):
        model = make_linear_model()
        theta = np.array([0.8, -1.0])
        data = simulate(model, theta, 30, seed=3)
        bundles = [
            run_bpf(model, theta, 10.0, data, 40, np.random.default_rng(k)).bundle
            for k in range(25)
        ]
        cfg = TemperingConfig(alpha=0.5, lambda0=10.0, lambda_target=1e-2)
        lam, ess_at, fb = solve_lambda(bundles, 10.0, cfg)
        assert not fb
        inc = np.array(
            [incremental_logweight(b, theta, lam, 10.0) for b in bundles]
        )
        assert ess(inc) == ess_at
        assert abs(ess_at - 12.5) / 12.5 <= cfg.ess_tol

    def test_rejects_lam_prev_at_or_below_target(self):
        model = make_linear_model()
        data = simulate(model, np.array([0.8, -1.0]), 5, seed=0)
        b = run_bpf(model, np.array([0.8, -1.0]), 1.0, data, 10, np.random.default_rng(0)).bundle
        cfg = TemperingConfig(alpha=0.5, lambda0=1.0, lambda_target=1e-2)
        with pytest.raises(ValueError):
            solve_lambda([b], 1e-2, cfg)


class TestShouldTerminate:
    def _cfg(self):
        return TemperingConfig(
            alpha=0.5, lambda0=1.0, lambda_target=0.1, accept_floor=0.05, p_max=10
        )

    def test_fresh_state_continues(self):
        state = TemperingState(p=0, lam=1.0, mh_accept_rate=1.0)
        done, reasons = should_terminate(state, self._cfg())
        assert not done and reasons == []

    def test_target_reached(self):
        state = TemperingState(p=3, lam=0.1, mh_accept_rate=0.5)
        done, reasons = should_terminate(state, self._cfg())
        assert done and reasons == ["target-reached"]

    def test_acceptance_floor(self):
        state = TemperingState(p=3, lam=0.5, mh_accept_rate=0.01)
        done, reasons = should_terminate(state, self._cfg())
        assert done and reasons == ["acceptance-floor"]

    def test_step_cap(self):
        state = TemperingState(p=10, lam=0.5, mh_accept_rate=0.5)
        done, reasons = should_terminate(state, self._cfg())
        assert done and reasons == ["step-cap"]

    def test_multiple_reasons(self):
        state = TemperingState(p=10, lam=0.05, mh_accept_rate=0.01)
        done, reasons = should_terminate(state, self._cfg())
        assert done
        assert set(reasons) == {"target-reached", "acceptance-floor", "step-cap"}
