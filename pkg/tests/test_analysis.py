"""Monte Carlo estimators: strong error, order fits, moments, Lyapunov
exponents and explosion statistics."""

import math

import numpy as np
import pytest

from sdde_lab.analysis import (derive_seed, endpoint_lyapunov, estimate_lyapunov, estimate_strong_error,
                               estimate_sup_moment, explosion_probability, fit_order,
                               geometric_growth_audit, map_paths, mean_se, normal_ci,
                               reference_self_difference, stability_experiment, worker_count)
from sdde_lab.errors import DegenerateFit, ExplodedTrajectory, InsufficientTail
from sdde_lab.integrate import integrate_adaptive
from sdde_lab.model import DelaySystem, InitialSegment, evaluate_drift
from sdde_lab.noise import NoiseStream

from conftest import assert_close, const_ctrl, zero_system


def _decay_system():
    return DelaySystem.from_expressions(["-x1"], [["0"]], tau=1.0, name="decay")


# -- aggregation helpers ---------------------------------------------------------

def test_mean_se_skips_nonfinite():
    mu, se, n = mean_se([1.0, 2.0, 3.0, math.nan, math.inf])
    assert (mu, n) == (2.0, 3)
    assert_close(se, math.sqrt(1.0 / 3))


def test_mean_is_permutation_invariant():
    rng = np.random.default_rng(1)
    v = rng.lognormal(0, 3, 1000)
    assert mean_se(v)[0] == mean_se(rng.permutation(v))[0]


def test_normal_ci_clipped():
    assert normal_ci(1.0, 1000) == (1.0, 1.0)
    lo, hi = normal_ci(0.5, 100)
    assert_close([lo, hi], [0.5 - 1.959963984540054 * 0.05, 0.5 + 1.959963984540054 * 0.05])


def test_worker_cap(monkeypatch):
    monkeypatch.setenv("SDDE_LAB_THREADS", "2")
    assert worker_count(8) == 2
    monkeypatch.delenv("SDDE_LAB_THREADS")
    assert worker_count(3) == 3


def test_map_paths_keeps_order():
    out = map_paths(lambda idx: [i * i for i in idx], 100, workers=4, chunk=7)
    assert out == [i * i for i in range(100)]


def test_derived_seeds_distinct():
    assert len({derive_seed(5, k) for k in range(100)}) == 100
    assert derive_seed(5, 0) == derive_seed(5, 0)


# -- order fit ---------------------------------------------------------------------

def test_fit_exact_power_law():
    pairs = [(2.0 ** -k, 3.0 * (2.0 ** -k) ** 1.0) for k in range(3, 8)]   # E|.|^2 ~ delta -> slope 0.5
    slope, icpt, r2 = fit_order(pairs, p=2)
    assert_close(slope, 0.5)
    assert_close(icpt, 0.5 * math.log2(3.0))
    assert_close(r2, 1.0)


def test_fit_needs_points_and_spread():
    with pytest.raises(ValueError):
        fit_order([(0.1, 1.0), (0.05, 0.5)])
    assert fit_order([(0.1, 1.0), (0.05, 0.5)], min_points=2)[0] == pytest.approx(0.5)
    with pytest.raises(DegenerateFit):
        fit_order([(0.1, 1.0), (0.1, 0.5), (0.1, 0.2)])
    with pytest.raises(ValueError):
        fit_order([(0.1, 0.0), (0.05, 0.5), (0.02, 0.1)])


# -- strong error ------------------------------------------------------------------

def test_strong_error_zero_system():
    ctrls = [const_ctrl(2.0 ** -k, delta=2.0 ** -k) for k in (2, 3, 4)]
    res = estimate_strong_error(zero_system(), ctrls, InitialSegment.constant(1.0, 1.0), M=4,
                                dt_ref=2.0 ** -8, T=1.0)
    assert np.all(res.mean == 0.0) and np.all(res.n_failed == 0)


def test_strong_error_coupling_is_exact_at_reference_step(linear):
    # a constant step equal to dt_ref reproduces the reference exactly
    ctrl = const_ctrl(2.0 ** -8, delta=0.25)
    res = estimate_strong_error(linear.system, [ctrl], linear.segment, M=6, dt_ref=2.0 ** -8, T=1.0)
    assert np.all(res.errors == 0.0)


def test_deterministic_error_decreases():
    sys, xi = _decay_system(), InitialSegment.constant(1.0, 1.0)
    errs = []
    for k in range(3, 7):
        tr = integrate_adaptive(sys, const_ctrl(2.0 ** -k, delta=2.0 ** -k), xi, NoiseStream(0), 1.0)
        errs.append(float(np.max(np.abs(tr.states[:, 0] - np.exp(-tr.times)))))
    assert all(a > b for a, b in zip(errs, errs[1:]))
    ctrls = [const_ctrl(2.0 ** -k, delta=2.0 ** -k) for k in range(3, 7)]
    res = estimate_strong_error(sys, ctrls, xi, M=2, dt_ref=2.0 ** -10, T=1.0)
    assert np.all(np.diff(res.mean) < 0)


def test_strong_error_counts_and_report(linear):
    ctrls = [linear.controller(2.0 ** -k) for k in (3, 4, 5)]
    res = estimate_strong_error(linear.system, ctrls, linear.segment, M=8, dt_ref=2.0 ** -9, T=1.0,
                                master_seed=2)
    assert np.all(res.n_ok + res.n_failed == 8)
    rep = res.report()
    assert rep.kind == "converge" and len(rep.rows) == 3
    assert set(rep.summary) >= {"slope", "intercept", "r2"}
    assert res.metadata["dt_ref_ratio"] >= 1.0


def test_strong_error_worker_independent(linear):
    ctrls = [linear.controller(2.0 ** -k) for k in (3, 4)]
    a = estimate_strong_error(linear.system, ctrls, linear.segment, M=40, dt_ref=2.0 ** -8, workers=1)
    b = estimate_strong_error(linear.system, ctrls, linear.segment, M=40, dt_ref=2.0 ** -8, workers=4)
    np.testing.assert_array_equal(a.errors, b.errors)
    np.testing.assert_array_equal(a.mean, b.mean)


def test_reference_self_difference_shrinks(linear):
    a, _ = reference_self_difference(linear.system, linear.segment, 1.0, 2.0 ** -6, M=20)
    b, _ = reference_self_difference(linear.system, linear.segment, 1.0, 2.0 ** -9, M=20)
    assert b < a


# -- moments ------------------------------------------------------------------------

def test_moment_of_zero_system():
    res = estimate_sup_moment(zero_system(), const_ctrl(0.1), InitialSegment.constant(-3.0, 1.0), p=3,
                              M=5, T=1.0)
    np.testing.assert_array_equal(res.mean, np.full(20, 27.0))
    assert res.sup_mean == 27.0 and res.n_ok == 5


def test_moment_engines_agree(linear):
    kw = dict(p=2, M=20, T=2.0, master_seed=4)
    a = estimate_sup_moment(linear.system, linear.controller(0.05), linear.segment, engine="python", **kw)
    b = estimate_sup_moment(linear.system, linear.controller(0.05), linear.segment, engine="compiled", **kw)
    assert_close(a.mean, b.mean, rel=1e-9)
    assert_close(a.sup_mean, b.sup_mean, rel=1e-9)


def test_moment_worker_independent(counterexample):
    kw = dict(p=2, M=40, T=2.0, master_seed=9)
    ctrl = counterexample.controller(0.1)
    a = estimate_sup_moment(counterexample.system, ctrl, counterexample.segment, workers=1, **kw)
    b = estimate_sup_moment(counterexample.system, ctrl, counterexample.segment, workers=3, **kw)
    np.testing.assert_array_equal(a.mean, b.mean)
    assert a.n_ok + a.n_exploded == 40


# -- Lyapunov ---------------------------------------------------------------------------

def test_lyapunov_of_exponential():
    t = np.linspace(0, 10, 101)
    assert_close(estimate_lyapunov((t, np.exp(-t)[:, None])), -1.0, rel=1e-9)
    assert_close(estimate_lyapunov((t, np.full((101, 1), 4.0))), 0.0, abs_=1e-12)
    assert_close(endpoint_lyapunov((t, np.exp(-2 * t)[:, None])), -2.0, rel=1e-12)


def test_lyapunov_scale_invariant():
    t = np.linspace(0, 5, 60)
    x = np.exp(-0.7 * t + 0.1 * np.sin(t))[:, None]
    assert_close(estimate_lyapunov((t, 1e6 * x)), estimate_lyapunov((t, x)), rel=1e-9)


def test_lyapunov_zero_state_is_floored():
    t = np.linspace(0, 1, 20)
    assert math.isfinite(estimate_lyapunov((t, np.zeros((20, 1)))))


def test_lyapunov_errors():
    t = np.linspace(0, 1, 20)
    with pytest.raises(InsufficientTail):
        estimate_lyapunov((t[:5], np.ones((5, 1))))
    with pytest.raises(ExplodedTrajectory):
        estimate_lyapunov((t, np.full((20, 1), np.inf)))
    with pytest.raises(ValueError):
        estimate_lyapunov((t, np.ones((20, 1))), tail_fraction=0.0)


def test_stability_experiment_small(counterexample):
    res = stability_experiment(counterexample.system, counterexample.controller(0.1), counterexample.segment,
                               T=5.0, M=8, master_seed=3)
    assert not res.exploded.any()
    assert np.all(res.lyapunov < 0)
    assert res.head_steps.shape == (8, 10)
    assert res.report().summary["n_exploded"] == 0


# -- explosion -----------------------------------------------------------------------------

def test_zero_system_never_explodes():
    res = explosion_probability(zero_system(), 2e-3, InitialSegment.constant(100.0, 1.0), M=100, K_steps=20)
    assert res.n_exploded == 0 and res.fraction == 0.0


def test_hand_built_geometric_growth(counterexample):
    dt = 2e-3
    root = math.sqrt(dt)
    for k in range(6):
        x = 2.0 ** (k + 3) / root
        for y in (-100.0, 0.0, 100.0, x):
            x_next = x + evaluate_drift(counterexample.system, [x], [y])[0] * dt
            assert abs(x_next) >= 2.0 ** (k + 4) / root


def test_audit_on_path_entering_regime(counterexample):
    dt = 2e-3
    res = explosion_probability(counterexample.system, dt, counterexample.segment, M=100, K_steps=60,
                                master_seed=7, force_first=16 / math.sqrt(dt), keep_paths=3)
    assert res.audit_checked > 0 and res.audit_violations == 0
    a = geometric_growth_audit(res.paths[0], np.zeros((60, 1)), dt)
    assert a.first_regime_step == 1


def test_audit_flags_a_violation():
    dt = 1e-2
    states = np.array([[0.0], [161.0], [1.0]])      # X_1 >= 2^4/0.1, then X_2 collapses
    a = geometric_growth_audit(states, np.zeros((2, 1)), dt)
    assert a.violations == [1] and not a.passed


def test_explosion_needs_paths(counterexample):
    with pytest.raises(ValueError):
        explosion_probability(counterexample.system, 2e-3, counterexample.segment, M=10)
    res = explosion_probability(counterexample.system, 2e-3, counterexample.segment, M=10, min_paths=1)
    assert res.M == 10 and len(res.explosion_step) == 10
