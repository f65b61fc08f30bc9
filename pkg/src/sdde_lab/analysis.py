"""Monte Carlo experiments on top of the schemes.

Every estimator takes a ``master_seed``; path ``i`` always draws from
``NoiseStream(master_seed, i)``, paths are processed in chunks by a thread
pool (size capped by ``SDDE_LAB_THREADS``), and results are reduced in path
index order with :func:`math.fsum`, so statistics do not depend on the
worker count or completion order.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from ._kernel import compiled_available, run_compiled
from .errors import DegenerateFit, ExplodedTrajectory, InsufficientTail
from .integrate import (Status, integrate_adaptive, integrate_fixed_em_batch,
                        interpolate_many)
from .model import DelaySystem, InitialSegment, StepController
from .noise import FinePath, NoiseStream, splitmix64

__all__ = [
    "ExperimentReport", "StrongErrorResult", "MomentResult", "StabilityResult",
    "ExplosionResult", "AuditReport", "worker_count", "map_paths", "mean_se", "derive_seed",
    "estimate_strong_error", "calibrate_reference", "reference_self_difference", "fit_order",
    "estimate_sup_moment", "estimate_lyapunov", "endpoint_lyapunov", "stability_experiment",
    "explosion_probability", "geometric_growth_audit", "normal_ci",
]


# -- plumbing ----------------------------------------------------------------

def worker_count(requested: int | None = None) -> int:
    """Thread count: `requested` or the CPU count, capped by SDDE_LAB_THREADS."""
    n = requested or os.cpu_count() or 1
    cap = os.environ.get("SDDE_LAB_THREADS")
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


def map_paths(fn: Callable[[list[int]], list], n_paths: int, workers: int | None = None,
              chunk: int = 16) -> list:
    """Apply `fn` to index chunks of ``range(n_paths)``; results in index order."""
    chunks = [list(range(i, min(i + chunk, n_paths))) for i in range(0, n_paths, chunk)]
    w = worker_count(workers)
    if w == 1 or len(chunks) <= 1:
        parts = [fn(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=w) as pool:
            parts = list(pool.map(fn, chunks))
    return [r for part in parts for r in part]


def mean_se(values) -> tuple[float, float, int]:
    """Mean, standard error and count of the finite entries (path order kept)."""
    v = [float(a) for a in np.ravel(values) if math.isfinite(a)]
    n = len(v)
    if n == 0:
        return math.nan, math.nan, 0
    mu = math.fsum(v) / n
    if n == 1:
        return mu, math.nan, 1
    var = math.fsum((a - mu) ** 2 for a in v) / (n - 1)
    return mu, math.sqrt(var / n), n


def normal_ci(p_hat: float, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    """95% normal-approximation interval for a proportion, clipped to [0, 1]."""
    half = z * math.sqrt(max(p_hat * (1.0 - p_hat), 0.0) / n)
    return max(0.0, p_hat - half), min(1.0, p_hat + half)


def derive_seed(master_seed: int, k: int) -> int:
    """Independent sub-seed ``k`` of `master_seed` (used per step-size level)."""
    return splitmix64((int(master_seed) ^ splitmix64(k + 1)) & ((1 << 64) - 1))


@dataclass
class ExperimentReport:
    """Tabular result of one experiment plus summary values and metadata."""

    kind: str
    columns: list[str]
    rows: list[list]
    summary: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)


# -- strong error ------------------------------------------------------------

@dataclass
class StrongErrorResult:
    """``E sup_t |X_t - Y_t|^p`` per step-size level.

    ``errors[i, k]`` is the sup error of path ``i`` at level ``k`` (NaN for a
    failed path); ``n_ok + n_failed == M`` for every level.
    """

    deltas: np.ndarray
    p: float
    mean: np.ndarray
    se: np.ndarray
    n_ok: np.ndarray
    n_failed: np.ndarray
    errors: np.ndarray
    dt_ref: float
    metadata: dict = field(default_factory=dict)

    @property
    def root_error(self) -> np.ndarray:
        """``(E sup |X - Y|^p)^(1/p)``."""
        return self.mean ** (1.0 / self.p)

    def report(self) -> ExperimentReport:
        slope, icpt, r2 = fit_order(list(zip(self.deltas, self.mean)), p=self.p)
        rows = [[float(d), float(mu), float(se), float(mu) ** (1.0 / self.p), int(ok), int(nf)]
                for d, mu, se, ok, nf in zip(self.deltas, self.mean, self.se, self.n_ok, self.n_failed)]
        return ExperimentReport(
            kind="converge",
            columns=["delta", "mean_sup_error_p", "std_error", "root_error", "n_ok", "n_failed"],
            rows=rows, summary={"slope": slope, "intercept": icpt, "r2": r2, "p": self.p},
            metadata=dict(self.metadata, dt_ref=self.dt_ref))


def _fine_horizon(T: float, ctrls: Sequence[StepController], dt_ref: float) -> tuple[float, int]:
    n_ref = T / dt_ref
    K = int(round(n_ref))
    if K < 1 or abs(n_ref - K) > 1e-9 * n_ref:
        raise ValueError("T must be an integer multiple of dt_ref")
    extra = max(c.ceiling for c in ctrls)
    cells = K + int(math.ceil(extra / dt_ref)) + 1
    return cells * dt_ref, K


def estimate_strong_error(sys: DelaySystem, ctrls: Sequence[StepController], xi: InitialSegment,
                          p: float = 2.0, M: int = 100, dt_ref: float = 2.0 ** -13,
                          T: float = 1.0, master_seed: int = 0,
                          workers: int | None = None) -> StrongErrorResult:
    """Strong sup-error of adaptive EM against a fine fixed-step reference.

    For each path one :class:`FinePath` on spacing `dt_ref` drives both the
    reference (fixed EM on the grid) and, through bridge increments, the
    adaptive runs of every level.  The error is the maximum over the
    reference grid in ``[0, T]`` of ``|X_adaptive(t) - X_ref(t)|^p``, with the
    adaptive solution evaluated by its continuous interpolant.  Paths where
    either scheme fails are counted in ``n_failed`` and excluded.
    """
    if M < 2:
        raise ValueError("need M >= 2 paths")
    if p <= 0:
        raise ValueError("p must be positive")
    ctrls = list(ctrls)
    H, K = _fine_horizon(T, ctrls, dt_ref)
    d = sys.noise_dim
    t0 = time.perf_counter()

    def chunk(idx: list[int]) -> list:
        fps = [FinePath(H, dt_ref, NoiseStream(master_seed, i, d)) for i in idx]
        dW = np.stack([fp.grid_increments(K) for fp in fps])
        Xref, bad = integrate_fixed_em_batch(sys, dt_ref, xi, dW)
        ts = fps[0].grid[:K + 1]
        out = []
        for r, fp in enumerate(fps):
            row = np.full(len(ctrls), np.nan)
            min_h = math.inf
            if not bad[r]:
                for k, ctrl in enumerate(ctrls):
                    tr = integrate_adaptive(sys, ctrl, xi, fp, T, keep_coefficients=True)
                    if tr.status is not Status.REACHED_HORIZON:
                        continue
                    min_h = min(min_h, float(tr.steps.min()))
                    Xa = interpolate_many(tr, ts, fp.values[:K + 1])
                    with np.errstate(all="ignore"):
                        row[k] = float(np.max(np.linalg.norm(Xa - Xref[r], axis=1) ** p))
            out.append((row, min_h))
        return out

    res = map_paths(chunk, M, workers)
    errors = np.array([r for r, _ in res]).reshape(M, len(ctrls))
    stats_ = [mean_se(errors[:, k]) for k in range(len(ctrls))]
    n_ok = np.array([s[2] for s in stats_])
    min_step = min(h for _, h in res)
    return StrongErrorResult(
        deltas=np.array([c.delta for c in ctrls]), p=float(p),
        mean=np.array([s[0] for s in stats_]), se=np.array([s[1] for s in stats_]),
        n_ok=n_ok, n_failed=M - n_ok, errors=errors, dt_ref=float(dt_ref),
        metadata={"M": M, "master_seed": master_seed, "T": T, "min_adaptive_step": min_step,
                  "dt_ref_ratio": min_step / dt_ref, "runtime_s": time.perf_counter() - t0})


def reference_self_difference(sys: DelaySystem, xi: InitialSegment, T: float, dt_ref: float,
                              p: float = 2.0, M: int = 50, master_seed: int = 1) -> tuple[float, float]:
    """``E sup |Y^{dt_ref} - Y^{dt_ref/2}|^p`` on shared fresh paths (mean, se).

    The sup runs over the coarse grid; coarse increments are sums of fine ones.
    """
    K = int(round(T / dt_ref))
    d = sys.noise_dim
    fine = np.stack([FinePath(T, dt_ref / 2, NoiseStream(master_seed, i, d)).grid_increments()
                     for i in range(M)])
    coarse = fine[:, 0::2] + fine[:, 1::2]
    Xc, bc = integrate_fixed_em_batch(sys, dt_ref, xi, coarse)
    Xf, bf = integrate_fixed_em_batch(sys, dt_ref / 2, xi, fine)
    ok = ~(bc | bf)
    diff = np.linalg.norm(Xc[ok] - Xf[ok][:, ::2], axis=2)[:, :K + 1]
    mu, se, _ = mean_se(np.max(diff ** p, axis=1))
    return mu, se


def calibrate_reference(sys: DelaySystem, xi: InitialSegment, T: float, target_error: float,
                        dt_start: float = 2.0 ** -8, p: float = 2.0, M: int = 50,
                        master_seed: int = 1, max_halvings: int = 8):
    """Halve ``dt_ref`` until the reference self-difference is below
    ``0.1 * target_error``.  Returns ``(dt_ref, [(dt, self_difference), ...])``."""
    dt = dt_start
    history = []
    for _ in range(max_halvings + 1):
        mu, _ = reference_self_difference(sys, xi, T, dt, p, M, master_seed)
        history.append((dt, mu))
        if mu <= 0.1 * target_error:
            return dt, history
        dt /= 2
    return dt * 2, history


def fit_order(pairs, p: float = 2.0, min_points: int = 3) -> tuple[float, float, float]:
    """Least-squares line through ``(log2 delta, log2 error^(1/p))``.

    Returns ``(slope, intercept, r2)``.  The slope estimates the strong order
    in terms of ``delta``.
    """
    pairs = [(float(a), float(b)) for a, b in pairs]
    if len(pairs) < min_points:
        raise ValueError(f"need at least {min_points} (delta, error) pairs")
    if any(not (a > 0 and b > 0) for a, b in pairs):
        raise ValueError("deltas and errors must be positive")
    x = np.log2([a for a, _ in pairs])
    y = np.log2([b for _, b in pairs]) / p
    if np.ptp(x) == 0:
        raise DegenerateFit("all deltas are equal")
    fit = stats.linregress(x, y)
    r2 = float(fit.rvalue ** 2) if np.ptp(y) > 0 else 1.0
    return float(fit.slope), float(fit.intercept), r2


# -- moments -------------------------------------------------------------------

@dataclass
class MomentResult:
    """``E|X_t|^p`` at sample times and ``E sup_n |X_{t_n}|^p``."""

    times: np.ndarray
    p: float
    mean: np.ndarray
    se: np.ndarray
    sup_mean: float
    sup_se: float
    n_ok: int
    n_exploded: int
    delta: float
    metadata: dict = field(default_factory=dict)

    def report(self) -> ExperimentReport:
        rows = [[float(t), float(m), float(s), self.n_ok] for t, m, s in zip(self.times, self.mean, self.se)]
        return ExperimentReport(
            kind="moments", columns=["t", "mean_abs_x_p", "std_error", "n_ok"], rows=rows,
            summary={"delta": self.delta, "p": self.p, "sup_mean": self.sup_mean,
                     "sup_se": self.sup_se, "n_exploded": self.n_exploded},
            metadata=self.metadata)


def _run_path(sys, ctrl, xi, stream, T, sample_times, record_from, n_head, engine):
    """One forward-noise adaptive run, compiled when possible.

    Returns a dict with status, final values, samples, running sup, head and tail.
    """
    if engine == "compiled" or (engine == "auto" and compiled_available(sys, ctrl)):
        r = run_compiled(sys, ctrl, xi, stream, T, sample_times=sample_times,
                         record_from=record_from, n_head=n_head)
        return r
    tr = integrate_adaptive(sys, ctrl, xi, stream, T, sample_times=sample_times, long_horizon=True)
    from ._kernel import CompiledRun
    keep = tr.times[1:] >= record_from
    sup = tr.running_sup()[-1] if tr.status is not Status.EXPLODED else math.inf
    return CompiledRun(
        status=tr.status, steps_taken=tr.steps_taken, final_time=tr.final_time,
        final_state=tr.final_state.copy(), explosion_step=tr.explosion_step, running_sup=float(sup),
        sample_times=tr.sample_times, sample_values=tr.sample_values,
        head_times=tr.times[:n_head + 1].copy(), head_steps=tr.steps[:n_head].copy(),
        head_states=tr.states[:n_head + 1].copy(), tail_times=tr.times[1:][keep],
        tail_steps=tr.steps[keep], tail_states=tr.states[1:][keep])


def estimate_sup_moment(sys: DelaySystem, ctrl: StepController, xi: InitialSegment, p: float = 2.0,
                        M: int = 100, T: float = 1.0, sample_times=None, master_seed: int = 0,
                        workers: int | None = None, engine: str = "auto") -> MomentResult:
    """Monte Carlo estimate of the moment curve and the discrete sup moment.

    ``E|X_t|^p`` uses the continuous interpolant at `sample_times` (default:
    20 equispaced times in ``[0, T]``); ``E sup_n |X_{t_n}|^p`` uses the
    grid nodes.  Forward noise; exploded paths are counted and excluded.
    `engine` is ``"auto"``, ``"compiled"`` or ``"python"``.
    """
    if M < 2:
        raise ValueError("need M >= 2 paths")
    S = np.linspace(0.0, T, 20) if sample_times is None else np.asarray(sample_times, dtype=np.float64)
    if np.any(S < 0) or np.any(S > T):
        raise ValueError("sample_times must lie in [0, T]")
    t0 = time.perf_counter()
    d = sys.noise_dim

    def chunk(idx):
        return [_run_path(sys, ctrl, xi, NoiseStream(master_seed, i, d), T, S, math.inf, 0, engine)
                for i in idx]

    runs = map_paths(chunk, M, workers)
    ok = [r for r in runs if r.status is Status.REACHED_HORIZON]
    vals = np.array([np.linalg.norm(r.sample_values, axis=1) ** p for r in ok]).reshape(len(ok), len(S))
    curve = [mean_se(vals[:, k]) for k in range(len(S))]
    sup_mu, sup_se, _ = mean_se([r.running_sup ** p for r in ok])
    return MomentResult(
        times=S, p=float(p), mean=np.array([c[0] for c in curve]), se=np.array([c[1] for c in curve]),
        sup_mean=sup_mu, sup_se=sup_se, n_ok=len(ok),
        n_exploded=sum(r.status is Status.EXPLODED for r in runs), delta=ctrl.delta,
        metadata={"M": M, "master_seed": master_seed, "T": T,
                  "steps_total": int(sum(r.steps_taken for r in runs)),
                  "runtime_s": time.perf_counter() - t0})


# -- Lyapunov exponents ------------------------------------------------------

def _nodes(traj) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(traj, "tail_times"):
        return traj.tail_times, traj.tail_states
    if hasattr(traj, "times"):
        return np.asarray(traj.times), np.asarray(traj.states)
    times, states = traj
    return np.asarray(times, dtype=np.float64), np.asarray(states, dtype=np.float64)


def _log_norm(states: np.ndarray) -> np.ndarray:
    s = states.reshape(len(states), -1)
    return np.log(np.maximum(np.linalg.norm(s, axis=1), 1e-300))


def estimate_lyapunov(traj, tail_fraction: float = 0.5) -> float:
    """Least-squares slope of ``log|X_{t_n}|`` against ``t_n`` over the tail.

    The tail is the set of nodes with ``t_n >= (1 - tail_fraction) t_N``.
    `traj` is an AdaptiveTrajectory, a compiled run (its recorded tail is
    used) or a ``(times, states)`` pair.  Zero states are floored at 1e-300.
    """
    if not 0.0 < tail_fraction <= 1.0:
        raise ValueError("tail_fraction must lie in (0, 1]")
    if getattr(traj, "status", None) is Status.EXPLODED:
        raise ExplodedTrajectory("trajectory exploded")
    times, states = _nodes(traj)
    if len(times) and not np.all(np.isfinite(states)):
        raise ExplodedTrajectory("trajectory has non-finite states")
    if len(times) == 0:
        raise InsufficientTail("no nodes recorded")
    keep = times >= (1.0 - tail_fraction) * times[-1]
    if np.count_nonzero(keep) < 10:
        raise InsufficientTail(f"only {np.count_nonzero(keep)} nodes in the tail window")
    t, lg = times[keep], _log_norm(states[keep])
    tc = t - t.mean()
    denom = float(np.dot(tc, tc))
    if denom == 0.0:
        raise InsufficientTail("tail window has a single time")
    return float(np.dot(tc, lg - lg.mean()) / denom)


def endpoint_lyapunov(traj) -> float:
    """``log|X_{t_N}| / t_N``."""
    if getattr(traj, "status", None) is Status.EXPLODED:
        raise ExplodedTrajectory("trajectory exploded")
    times, states = _nodes(traj)
    return float(_log_norm(states[-1:])[0] / times[-1])


@dataclass
class StabilityResult:
    """Per-path exponents and step-size heads of an adaptive stability run."""

    lyapunov: np.ndarray
    endpoint: np.ndarray
    exploded: np.ndarray
    final_norm: np.ndarray
    steps_taken: np.ndarray
    head_steps: np.ndarray
    head_times: np.ndarray
    threshold: float
    delta: float
    metadata: dict = field(default_factory=dict)

    @property
    def n_below(self) -> int:
        return int(np.count_nonzero(self.lyapunov <= self.threshold))

    def report(self) -> ExperimentReport:
        rows = [[i, float(l), float(e), bool(x), float(fn), int(n)] for i, (l, e, x, fn, n) in
                enumerate(zip(self.lyapunov, self.endpoint, self.exploded, self.final_norm, self.steps_taken))]
        return ExperimentReport(
            kind="stability",
            columns=["path", "lyapunov_tail", "lyapunov_endpoint", "exploded", "final_norm", "steps"],
            rows=rows,
            summary={"delta": self.delta, "threshold": self.threshold, "n_below": self.n_below,
                     "n_exploded": int(self.exploded.sum()), "M": len(self.lyapunov)},
            metadata=self.metadata)


def stability_experiment(sys: DelaySystem, ctrl: StepController, xi: InitialSegment, T: float,
                         M: int = 100, tail_fraction: float = 0.5, threshold: float = -0.05,
                         n_head: int = 10, master_seed: int = 0, workers: int | None = None,
                         engine: str = "auto") -> StabilityResult:
    """Run `M` adaptive paths and estimate each path's Lyapunov exponent."""
    t0 = time.perf_counter()
    d = sys.noise_dim
    rec_from = (1.0 - tail_fraction) * T

    def chunk(idx):
        return [_run_path(sys, ctrl, xi, NoiseStream(master_seed, i, d), T, None, rec_from, n_head, engine)
                for i in idx]

    runs = map_paths(chunk, M, workers)
    lyap, endp = np.full(M, np.nan), np.full(M, np.nan)
    for i, r in enumerate(runs):
        if r.status is Status.REACHED_HORIZON:
            lyap[i] = estimate_lyapunov(r, tail_fraction)
            endp[i] = endpoint_lyapunov(r)
    heads = np.full((M, n_head), np.nan)
    head_t = np.full((M, n_head + 1), np.nan)
    for i, r in enumerate(runs):
        heads[i, :len(r.head_steps)] = r.head_steps
        head_t[i, :len(r.head_times)] = r.head_times
    return StabilityResult(
        lyapunov=lyap, endpoint=endp, exploded=np.array([r.exploded for r in runs]),
        final_norm=np.array([float(np.linalg.norm(r.final_state)) for r in runs]),
        steps_taken=np.array([r.steps_taken for r in runs]), head_steps=heads, head_times=head_t,
        threshold=threshold, delta=ctrl.delta,
        metadata={"M": M, "master_seed": master_seed, "T": T, "tail_fraction": tail_fraction,
                  "runtime_s": time.perf_counter() - t0})


# -- explosion of fixed-step EM --------------------------------------------

@dataclass
class AuditReport:
    """Checks of ``|X_k| >= 2^(k+3)/sqrt(dt), |dW_k| <= 2^k  =>  |X_{k+1}| >= 2^(k+4)/sqrt(dt)``.

    ``n_checked`` counts indices where the hypothesis held and ``X_{k+1}`` was
    finite; ``violations`` lists the indices where the conclusion failed.
    """

    n_checked: int
    violations: list[int]
    first_regime_step: int | None

    @property
    def passed(self) -> bool:
        return not self.violations


def geometric_growth_audit(states, dW, dt: float) -> AuditReport:
    """Audit the geometric-growth implication along one fixed-step path.

    `states` holds ``X_0..X_K`` and `dW` the increments ``dW_0..dW_{K-1}``.
    Checking stops at the first non-finite state (IEEE overflow).
    """
    with np.errstate(all="ignore"):
        X = np.linalg.norm(np.asarray(states, dtype=np.float64).reshape(len(states), -1), axis=1)
        W = np.linalg.norm(np.asarray(dW, dtype=np.float64).reshape(len(dW), -1), axis=1)
    root = math.sqrt(dt)
    checked, bad, first = 0, [], None
    for k in range(min(len(W), len(X) - 1)):
        if not (math.isfinite(X[k]) and math.isfinite(X[k + 1])):
            break
        if X[k] >= 2.0 ** (k + 3) / root and W[k] <= 2.0 ** k:
            if first is None:
                first = k
            checked += 1
            if not X[k + 1] >= 2.0 ** (k + 4) / root:
                bad.append(k)
    return AuditReport(n_checked=checked, violations=bad, first_regime_step=first)


@dataclass
class ExplosionResult:
    """Fraction of fixed-step paths that exploded within ``K_steps`` steps."""

    fraction: float
    ci: tuple[float, float]
    n_exploded: int
    M: int
    dt: float
    K_steps: int
    explosion_step: np.ndarray
    audit_checked: int
    audit_violations: int
    paths: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def report(self) -> ExperimentReport:
        rows = [[i, int(k) if k >= 0 else "", k >= 0] for i, k in enumerate(self.explosion_step)]
        return ExperimentReport(
            kind="explode", columns=["path", "explosion_step", "exploded"], rows=rows,
            summary={"fraction": self.fraction, "ci_low": self.ci[0], "ci_high": self.ci[1],
                     "n_exploded": self.n_exploded, "M": self.M, "dt": self.dt,
                     "K_steps": self.K_steps, "audit_checked": self.audit_checked,
                     "audit_violations": self.audit_violations},
            metadata=self.metadata)


def explosion_probability(sys: DelaySystem, dt: float, xi: InitialSegment, M: int = 1000,
                          K_steps: int = 100, master_seed: int = 0, force_first=None,
                          audit: bool = True, keep_paths: int = 0,
                          min_paths: int = 100) -> ExplosionResult:
    """Fixed-step EM on `M` paths; fraction exploded within `K_steps` steps.

    `force_first` overwrites ``X_1`` on every path (conditional experiment).
    With `audit` every path is passed through :func:`geometric_growth_audit`.
    The first `keep_paths` state sequences are returned for plotting.
    `min_paths` guards against uninformative fractions (lower it only for
    illustration runs).
    """
    if M < min_paths:
        raise ValueError(f"need M >= {min_paths} paths")
    t0 = time.perf_counter()
    d = sys.noise_dim
    root = math.sqrt(dt)
    dW = np.stack([root * NoiseStream(master_seed, i, d).normals(K_steps * d).reshape(K_steps, d)
                   for i in range(M)])
    force = None if force_first is None else {1: force_first}
    X, bad = integrate_fixed_em_batch(sys, dt, xi, dW, force=force)
    with np.errstate(all="ignore"):
        norms = np.linalg.norm(X, axis=2)
    over = ~np.isfinite(norms) | (norms > 1e154)
    step = np.where(over.any(axis=1), np.argmax(over, axis=1) - 1, -1)
    step = np.where(bad & (step < 0), K_steps - 1, step)
    n_exp = int(np.count_nonzero(step >= 0))
    checked = violations = 0
    if audit:
        for i in range(M):
            a = geometric_growth_audit(X[i], dW[i], dt)
            checked += a.n_checked
            violations += len(a.violations)
    frac = n_exp / M
    return ExplosionResult(
        fraction=frac, ci=normal_ci(frac, M), n_exploded=n_exp, M=M, dt=float(dt), K_steps=K_steps,
        explosion_step=step, audit_checked=checked, audit_violations=violations,
        paths=X[:keep_paths].copy() if keep_paths else None,
        metadata={"master_seed": master_seed, "forced_X1": force_first,
                  "runtime_s": time.perf_counter() - t0})
