"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the verdict lines.
Seeds are fixed, so every number below is reproducible.
"""

import json
import math
import random
import time

import numpy as np
import pytest

from sdde_lab import expr as E
from sdde_lab.analysis import (derive_seed, estimate_strong_error, estimate_sup_moment, explosion_probability,
                               stability_experiment)
from sdde_lab._kernel import run_compiled
from sdde_lab.cli import main
from sdde_lab.integrate import (HistoryBuffer, delayed_value, integrate_adaptive, integrate_clamped,
                                interpolate)
from sdde_lab.model import InitialSegment, segment_value
from sdde_lab.noise import FinePath, NoiseStream
from sdde_lab.report import read_csv

from test_expr import ReferenceEvaluator, _same, random_ast

pytestmark = pytest.mark.slow


def verdict(n, ok, detail):
    print(f"[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
    return ok


@pytest.fixture(scope="module")
def strong_error(linear_module):
    prob = linear_module
    deltas = [2.0 ** -k for k in range(3, 8)]
    ctrls = [prob.controller(d, 2.0) for d in deltas]
    t0 = time.perf_counter()
    res = estimate_strong_error(prob.system, ctrls, prob.segment, p=2, M=500, dt_ref=2.0 ** -13, T=2.0,
                                master_seed=5)
    return res, time.perf_counter() - t0


@pytest.fixture(scope="module")
def linear_module():
    from sdde_lab.problems import get_problem
    return get_problem("linear-sdde")


def test_criterion_1_strong_order(strong_error):
    res, runtime = strong_error
    rep = res.report()
    slope, r2 = rep.summary["slope"], rep.summary["r2"]
    ok = 0.35 <= slope <= 0.65 and r2 >= 0.95 and runtime <= 300
    verdict(1, ok, f"slope={slope:.4f} (need [0.35, 0.65]), r2={r2:.4f} (need >= 0.95), "
                   f"runtime={runtime:.1f}s, RMS errors={np.round(res.root_error, 6).tolist()}")
    assert 0.35 <= slope <= 0.65
    assert r2 >= 0.95
    assert runtime <= 300


def test_criterion_2_strong_convergence(strong_error):
    res, _ = strong_error
    order = np.argsort(-res.deltas)
    m = res.mean[order]
    decreasing = bool(np.all(np.diff(m) < 0))
    ratio = float(m[-1] / m[0])
    ok = decreasing and ratio < 0.25 and int(res.n_failed.sum()) == 0
    verdict(2, ok, f"errors={m.tolist()}, strictly decreasing={decreasing}, "
                   f"smallest/largest={ratio:.4f} (need < 0.25), failed paths={int(res.n_failed.sum())}")
    assert decreasing and ratio < 0.25


def test_criterion_3_moment_bound(counterexample):
    S = np.linspace(0.0, 50.0, 20)
    t0 = time.perf_counter()
    results = []
    for k, delta in enumerate([0.1, 0.05, 0.025]):
        results.append(estimate_sup_moment(counterexample.system, counterexample.controller(delta, 50.0),
                                           counterexample.segment, p=2, M=200, T=50.0, sample_times=S,
                                           master_seed=derive_seed(3, k)))
    runtime = time.perf_counter() - t0
    peak = max(float(np.max(r.mean)) for r in results)
    worst_z = 0.0
    for a in range(3):
        for b in range(a + 1, 3):
            ra, rb = results[a], results[b]
            se = np.sqrt(ra.se ** 2 + rb.se ** 2)
            diff = np.abs(ra.mean - rb.mean)
            z = np.where(se > 0, diff / np.where(se > 0, se, 1.0), np.where(diff > 0, np.inf, 0.0))
            worst_z = max(worst_z, float(np.max(z)))
    explosions = sum(r.n_exploded for r in results)
    ok = peak <= 1e4 and worst_z <= 3.0 and explosions == 0 and runtime <= 120
    verdict(3, ok, f"max E|X_t|^2={peak:.6g} (need <= 1e4), worst pairwise z={worst_z:.3f} (need <= 3), "
                   f"explosions={explosions}, runtime={runtime:.1f}s")
    assert peak <= 1e4
    assert worst_z <= 3.0
    assert explosions == 0
    assert runtime <= 120


def test_criterion_4_em_blowup(counterexample):
    dt = 2e-3
    free = explosion_probability(counterexample.system, dt, counterexample.segment, M=1000, K_steps=100,
                                 master_seed=7)
    forced = explosion_probability(counterexample.system, dt, counterexample.segment, M=1000, K_steps=100,
                                   master_seed=8, force_first=2.0 ** 4 / math.sqrt(dt))
    bound = math.exp(-4 * math.exp(-2 / math.sqrt(dt)))
    violations = free.audit_violations + forced.audit_violations
    ok = free.ci[0] >= 0.05 and forced.fraction >= 0.95 and violations == 0
    verdict(4, ok, f"fraction={free.fraction:.3f} CI=({free.ci[0]:.3f}, {free.ci[1]:.3f}); "
                   f"forced fraction={forced.fraction:.3f} (bound {bound:.6f}); audit checks="
                   f"{free.audit_checked + forced.audit_checked}, violations={violations}")
    assert free.ci[0] >= 0.05
    assert forced.fraction >= 0.95
    assert violations == 0


def test_criterion_5_adaptive_stability(counterexample):
    delta, T = 0.1, 20.0
    ctrl = counterexample.controller(delta, T)
    res = stability_experiment(counterexample.system, ctrl, counterexample.segment, T=T, M=100,
                               tail_fraction=0.5, threshold=-0.05, master_seed=11)
    n_exp = int(res.exploded.sum())
    decayed = int(np.count_nonzero(res.final_norm < 1.0))
    first_steps_small = bool(np.all(res.head_steps < 1e-6))
    last = [run_compiled(counterexample.system, ctrl, counterexample.segment, NoiseStream(11, i), T,
                         record_from=T - 1.0).tail_steps[-1] for i in range(5)]
    grown = all(h == ctrl.h_max for h in last)
    ok = n_exp == 0 and res.n_below >= 99 and decayed >= 99 and first_steps_small and grown
    verdict(5, ok, f"explosions={n_exp}, paths with exponent <= -0.05: {res.n_below}/100 "
                   f"(max {np.nanmax(res.lyapunov):.3f}), |X_T|<1 on {decayed}/100, "
                   f"first 10 steps < 1e-6: {first_steps_small}, final step = delta/25: {grown}")
    assert n_exp == 0
    assert res.n_below >= 99
    assert decayed >= 99
    assert first_steps_small and grown


def test_criterion_6_step_condition(tmp_path, counterexample):
    cfg = tmp_path / "check.json"
    cfg.write_text(json.dumps({"problem": "counterexample-sdde", "deltas": [0.1], "check_box": [-50, 50],
                               "check_mode": "stability"}))
    code = main(["check", "--config", str(cfg), "--out", str(tmp_path / "out")])
    _, cols, rows = read_csv(tmp_path / "out" / "check.csv")
    row = dict(zip(cols, rows[0]))
    hmax_ok = "2*alpha2*exp(2*alpha1*h_max) < alpha1=True" in row["analytic"]
    margin = float(row["worst_margin"])
    ok = code == 0 and row["passed"] == "true" and margin >= 0 and hmax_ok
    verdict(6, ok, f"exit={code}, passed={row['passed']}, worst margin={margin!r} at "
                   f"x={row['worst_x_1']}, y={row['worst_y_1']}, h_max condition={hmax_ok}")
    assert code == 0 and row["passed"] == "true"
    assert margin >= 0
    assert hmax_ok


def test_criterion_7_oracle_equivalences(counterexample):
    small = InitialSegment.constant(0.5, 1.0)
    sys, ctrl = counterexample.system, counterexample.controller(0.1)
    checks = {}

    a = integrate_adaptive(sys, ctrl, small, NoiseStream(1), 2.0)
    b = integrate_clamped(sys, ctrl, small, NoiseStream(1), 2.0, 1e9)
    checks["clamp never binds"] = np.array_equal(a.states, b.states) and np.array_equal(a.times, b.times)

    path = FinePath(3.0, 2.0 ** -10, NoiseStream(2))
    tr = integrate_adaptive(sys, ctrl, small, path, 2.0)
    checks["interpolant at nodes"] = all(np.array_equal(interpolate(tr, sys, path, float(t)), x)
                                         for t, x in zip(tr.times, tr.states))

    rng = np.random.default_rng(3)
    worst = 0.0
    for seed in range(100):
        fp = FinePath(1.0, 2.0 ** -6, NoiseStream(seed))
        cuts = np.concatenate([[0.0], np.sort(rng.uniform(0, 1, 200)), [1.0]])
        total = math.fsum(fp.increment(u, v)[0] for u, v in zip(cuts[:-1], cuts[1:]))
        worst = max(worst, abs(total - fp.values[-1, 0]))
    checks["bridge telescoping"] = worst <= 1e-12

    seg = InitialSegment.from_table([-1.0, 0.0], [0.0, 1.0])
    agree = True
    for _ in range(10_000):
        grid = np.concatenate([[0.0], np.cumsum(rng.uniform(0.01, 0.5, int(rng.integers(1, 30))))])
        h = HistoryBuffer(seg)
        for k, t in enumerate(grid[1:], start=1):
            h.append(t, np.array([float(k)]))
        t, tau = float(rng.uniform(0, grid[-1])), float(rng.uniform(0.05, 1.0))
        s = t - tau
        if s < 0:
            expected = segment_value(seg, s)[0]
        else:
            k = max(k for k, g in enumerate(grid) if g <= s)
            expected = 1.0 if k == 0 else float(k)          # node 0 holds xi(0) = 1
        agree &= delayed_value(h, t, tau)[0] == expected
    checks["delayed lookup vs linear scan"] = bool(agree)

    prng = random.Random(20240611)
    bad = 0
    for _ in range(10_000):
        text = E.to_text(random_ast(prng, prng.randint(1, 5)))
        x = np.array([prng.uniform(-3, 3), prng.uniform(-3, 3)])
        y = np.array([prng.uniform(-3, 3), prng.uniform(-3, 3)])
        bad += not _same(E.evaluate(E.parse(text, 2), x, y), ReferenceEvaluator(text, x, y).run())
    checks["expression differential"] = bad == 0

    ok = all(checks.values())
    verdict(7, ok, ", ".join(f"{k}={v}" for k, v in checks.items()) + f" (telescoping max err {worst:.2e})")
    assert ok, checks


def test_criterion_8_replay(tmp_path):
    runs = {
        "converge": {"problem": "linear-sdde", "deltas": [0.25, 0.125, 0.0625], "T": 1.0, "paths": 48,
                     "dt_ref": 2.0 ** -9, "master_seed": 12},
        "moments": {"problem": "counterexample-sdde", "deltas": [0.1, 0.05], "T": 3.0, "paths": 48,
                    "master_seed": 13},
        "stability": {"problem": "counterexample-sdde", "T": 4.0, "paths": 24, "master_seed": 14},
        "explode": {"problem": "counterexample-sdde", "dt": 2e-3, "paths": 100, "master_seed": 15},
        "simulate": {"problem": "dissipative-sde", "T": 2.0, "paths": 2, "master_seed": 16},
    }
    mismatched = []
    for mode, cfg in runs.items():
        first = tmp_path / mode / "a"
        cfg_path = tmp_path / f"{mode}.json"
        cfg_path.write_text(json.dumps(dict(cfg, workers=1)))
        assert main([mode, "--config", str(cfg_path), "--out", str(first)]) == 0
        manifest = json.loads((first / "manifest.json").read_text())
        manifest["config"]["workers"] = 4
        replay_cfg = tmp_path / f"{mode}_manifest.json"
        replay_cfg.write_text(json.dumps(manifest))
        assert main([mode, "--config", str(replay_cfg), "--out", str(tmp_path / mode / "b")]) == 0
        for f in manifest["files"]:
            if (first / f).read_bytes() != (tmp_path / mode / "b" / f).read_bytes():
                mismatched.append(f"{mode}/{f}")
    ok = not mismatched
    verdict(8, ok, f"modes={list(runs)}, replayed via manifest with workers 1 -> 4, "
                   f"mismatched files={mismatched}")
    assert ok
