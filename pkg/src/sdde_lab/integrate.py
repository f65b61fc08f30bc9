"""Euler-Maruyama schemes for SDDEs: adaptive, clamped, fixed-step, and the
piecewise continuous interpolant between adaptive nodes.

The delayed argument is read from the step process: at time ``t_n`` the
scheme uses the state at the largest grid time ``<= t_n - tau`` (left-closed
intervals), or the initial segment when ``t_n - tau < 0``.
"""

from __future__ import annotations

import bisect
import enum
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import CoefficientOverflow, DomainError, InvalidClampBound, NonCommensurateDelay, StepFunctionError
from .model import (DelaySystem, InitialSegment, StepController, as_state, evaluate_diffusion,
                    evaluate_drift, propose_step, segment_value)
from .noise import FinePath

__all__ = [
    "EXPLOSION_BOUND", "Status", "HistoryBuffer", "AdaptiveTrajectory", "delayed_value",
    "adaptive_em_step", "integrate_adaptive", "integrate_clamped", "integrate_fixed_em",
    "integrate_fixed_em_batch", "clamp_phi", "interpolate", "interpolate_many", "is_exploded",
]

# |X| above this counts as explosion; its square is still finite
EXPLOSION_BOUND = 1e154


class Status(str, enum.Enum):
    REACHED_HORIZON = "reached_horizon"
    MAX_STEPS_EXCEEDED = "max_steps_exceeded"
    EXPLODED = "exploded"
    STEP_FUNCTION_ERROR = "step_function_error"


def is_exploded(x: np.ndarray) -> bool:
    return not bool(np.all(np.isfinite(x))) or float(np.linalg.norm(x)) > EXPLOSION_BOUND


class HistoryBuffer:
    """Grid times and states of a running scheme, backed by the initial segment.

    With ``prune=True`` entries that can no longer be reached by a delayed
    lookup are dropped (long-horizon runs).
    """

    def __init__(self, segment: InitialSegment, prune: bool = False):
        self.segment = segment
        self.times: list[float] = [0.0]
        self.states: list[np.ndarray] = [segment_value(segment, 0.0)]
        self.prune = prune

    def __len__(self) -> int:
        return len(self.times)

    def append(self, t: float, x: np.ndarray) -> None:
        if not t > self.times[-1]:
            raise ValueError("history times must be strictly increasing")
        self.times.append(t)
        self.states.append(x)

    def lookup(self, s: float) -> np.ndarray:
        """Step-process value at time `s`: ``xi(s)`` for ``s < 0``."""
        if s < 0.0:
            return segment_value(self.segment, s)
        k = bisect.bisect_right(self.times, s) - 1
        if k < 0:
            raise DomainError(f"time {s} precedes the retained history")
        return self.states[k]

    def discard_before(self, s: float) -> None:
        """Drop entries strictly older than the one covering time `s`."""
        k = bisect.bisect_right(self.times, s) - 1
        if k > 1024:
            del self.times[:k]
            del self.states[:k]


def delayed_value(hist: HistoryBuffer, t: float, tau: float) -> np.ndarray:
    """``X_bar(t - tau)``: segment value for negative arguments, otherwise the
    state at the largest grid time ``<= t - tau``."""
    s = t - tau
    if s < -tau:
        raise DomainError(f"t - tau = {s} is below -tau")
    return hist.lookup(s)


@dataclass
class AdaptiveTrajectory:
    """Outcome of one scheme run.

    ``times[n+1] == times[n] + steps[n]`` holds exactly for every stored step.
    ``delayed[n]`` is the delayed argument used on step ``n``.
    """

    times: np.ndarray
    steps: np.ndarray
    states: np.ndarray
    status: Status
    dW: np.ndarray
    delayed: np.ndarray
    horizon: float
    explosion_step: int | None = None
    drift: np.ndarray | None = None
    diffusion: np.ndarray | None = None
    w_nodes: np.ndarray | None = None
    sample_times: np.ndarray | None = None
    sample_values: np.ndarray | None = None
    clamp_K: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def steps_taken(self) -> int:
        return len(self.steps)

    @property
    def final_time(self) -> float:
        return float(self.times[-1])

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    @property
    def exploded(self) -> bool:
        return self.status is Status.EXPLODED

    def running_sup(self) -> np.ndarray:
        return np.maximum.accumulate(np.linalg.norm(self.states, axis=1))


def _gdw(G: np.ndarray, dW: np.ndarray, acc: np.ndarray) -> np.ndarray:
    # column-by-column accumulation; the compiled engine uses the same order
    for j in range(dW.shape[0]):
        acc = acc + G[:, j] * dW[j]
    return acc


def adaptive_em_step(sys: DelaySystem, ctrl: StepController, hist: HistoryBuffer, t_n: float,
                     x_n, noise, dW=None):
    """One adaptive EM step from ``(t_n, x_n)``; appends the new node to `hist`.

    Returns ``(t_next, x_next, h, dW)``.  `noise` needs an ``increment(a, b)``
    method (NoiseStream or FinePath); an explicit `dW` overrides it.
    """
    x_n = as_state(x_n, sys.state_dim)
    h = propose_step(ctrl, x_n)
    y = delayed_value(hist, t_n, sys.tau)
    f = evaluate_drift(sys, x_n, y)
    G = evaluate_diffusion(sys, x_n, y)
    t_next = t_n + h
    dW = noise.increment(t_n, t_next) if dW is None else as_state(dW, sys.noise_dim)
    x_next = _gdw(G, dW, x_n + f * h)
    hist.append(t_next, x_next)
    return t_next, x_next, h, dW


def clamp_phi(x, K: float) -> np.ndarray:
    """Radial projection ``min(1, K/|x|) x``; returns `x` itself when ``|x| <= K``."""
    if not K > 0:
        raise ValueError("K must be positive")
    x = np.asarray(x, dtype=np.float64)
    r = float(np.linalg.norm(x))
    if r <= K:
        return x
    y = x * (K / r)
    while float(np.linalg.norm(y)) > K:
        y = y * np.nextafter(1.0, 0.0)
    return y


def _check_segment(sys: DelaySystem, xi: InitialSegment) -> None:
    if xi.tau < sys.tau:
        raise ValueError(f"initial segment covers [-{xi.tau}, 0] but the delay is {sys.tau}")
    if xi.state_dim != sys.state_dim:
        raise ValueError("initial segment and system dimensions differ")


def _run_adaptive(sys, ctrl, xi, noise, T, clamp_K=None, sample_times=None,
                  keep_coefficients=False, long_horizon=False) -> AdaptiveTrajectory:
    _check_segment(sys, xi)
    if not T > 0:
        raise ValueError("horizon T must be positive")
    fine = isinstance(noise, FinePath)
    m, d = sys.state_dim, sys.noise_dim
    hist = HistoryBuffer(xi, prune=long_horizon)
    x = hist.states[0]
    t = 0.0
    times, steps, states, dWs, ys = [t], [], [x], [], []
    fs, gs = [], []
    w_nodes = [noise.value(0.0)] if fine else None
    S = np.asarray([] if sample_times is None else sample_times, dtype=np.float64)
    if np.any(np.diff(S) < 0) or np.any(S < 0):
        raise ValueError("sample_times must be sorted and nonnegative")
    svals = np.full((len(S), m), np.nan)
    si = 0
    status = Status.REACHED_HORIZON
    explosion = None
    n = 0
    with np.errstate(all="ignore"):
        while t < T:
            if n >= ctrl.max_steps:
                status = Status.MAX_STEPS_EXCEEDED
                break
            try:
                h = propose_step(ctrl, x)
            except StepFunctionError:
                status = Status.STEP_FUNCTION_ERROR
                break
            y = hist.lookup(t - sys.tau)
            try:
                f = evaluate_drift(sys, x, y)
                G = evaluate_diffusion(sys, x, y)
            except CoefficientOverflow:
                status, explosion = Status.EXPLODED, n
                break
            t_next = t + h
            if fine:
                wa = w_nodes[-1]
                wb = noise.value(t_next)
                dW = wb - wa
                w_nodes.append(wb)
            else:
                dW = noise.increment(t, t_next)
            x_new = _gdw(G, dW, x + f * h)
            # interpolant at sample times inside [t, t_next)
            a, w_rel = t, np.zeros(d)
            while si < len(S) and S[si] < t_next:
                s = S[si]
                if s <= t:
                    val = x
                else:
                    if fine:
                        w_rel = noise.value(s) - wa
                    else:
                        frac = (s - a) / (t_next - a)
                        sd = math.sqrt((s - a) * (t_next - s) / (t_next - a))
                        w_rel = w_rel + frac * (dW - w_rel) + sd * noise.normals(d)
                        a = s
                    val = _gdw(G, w_rel, x + f * (s - t))
                svals[si] = val if clamp_K is None else clamp_phi(val, clamp_K)
                si += 1
            if clamp_K is not None:
                x_new = clamp_phi(x_new, clamp_K)
            times.append(t_next)
            steps.append(h)
            states.append(x_new)
            dWs.append(dW)
            ys.append(y)
            if keep_coefficients:
                fs.append(f)
                gs.append(G)
            t, x = t_next, x_new
            n += 1
            if is_exploded(x):
                status, explosion = Status.EXPLODED, n - 1
                break
            hist.append(t, x)
            if long_horizon:
                hist.discard_before(t - sys.tau)
    while si < len(S) and S[si] <= t and status is Status.REACHED_HORIZON:
        svals[si] = x
        si += 1
    return AdaptiveTrajectory(
        times=np.asarray(times), steps=np.asarray(steps, dtype=np.float64),
        states=np.asarray(states).reshape(-1, m), status=status,
        dW=np.asarray(dWs, dtype=np.float64).reshape(-1, d),
        delayed=np.asarray(ys, dtype=np.float64).reshape(-1, m), horizon=float(T),
        explosion_step=explosion,
        drift=np.asarray(fs).reshape(-1, m) if keep_coefficients else None,
        diffusion=np.asarray(gs).reshape(-1, m, d) if keep_coefficients else None,
        w_nodes=np.asarray(w_nodes).reshape(-1, d) if fine else None,
        sample_times=S if sample_times is not None else None,
        sample_values=svals if sample_times is not None else None,
        clamp_K=clamp_K,
    )


def integrate_adaptive(sys: DelaySystem, ctrl: StepController, xi: InitialSegment, noise,
                       T: float, *, sample_times=None, keep_coefficients: bool = False,
                       long_horizon: bool = False) -> AdaptiveTrajectory:
    """Run adaptive EM until ``t_n >= T``, `max_steps`, or explosion.

    Parameters
    ----------
    noise : NoiseStream or FinePath
        Forward increments, or a shared fine path (bridge-coupled increments).
    sample_times : array_like, optional
        Sorted times at which the continuous interpolant is recorded during
        the run (``sample_values``); with forward noise the bridge samples are
        drawn right after each step's increment.
    keep_coefficients : bool
        Store per-step drift and diffusion values (needed by interpolate_many).
    long_horizon : bool
        Prune the delay history to the reachable window.
    """
    return _run_adaptive(sys, ctrl, xi, noise, T, sample_times=sample_times,
                         keep_coefficients=keep_coefficients, long_horizon=long_horizon)


def integrate_clamped(sys: DelaySystem, ctrl: StepController, xi: InitialSegment, noise,
                      T: float, K: float, **kw) -> AdaptiveTrajectory:
    """Adaptive EM with the radial clamp ``Phi_K`` applied after every step."""
    if not K > xi.sup_norm:
        raise InvalidClampBound(f"K={K} must exceed sup|xi|={xi.sup_norm}")
    return _run_adaptive(sys, ctrl, xi, noise, T, clamp_K=K, **kw)


def _delay_lag(sys: DelaySystem, dt: float) -> int:
    lag = sys.tau / dt
    lag_int = int(round(lag))
    if lag_int < 1 or abs(lag - lag_int) > 1e-9 * lag:
        raise NonCommensurateDelay(f"tau/dt = {lag} is not an integer")
    return lag_int


def _fixed_history(sys, xi, dt, lag):
    return [segment_value(xi, max(k * dt, -xi.tau)) for k in range(-lag, 0)]


def integrate_fixed_em(sys: DelaySystem, dt: float, xi: InitialSegment, noise, T: float, *,
                       force: Mapping[int, object] | None = None) -> AdaptiveTrajectory:
    """Standard EM on the uniform grid ``k*dt`` with delayed value ``X_{k-lag}``.

    ``lag = tau/dt`` must be an integer (NonCommensurateDelay otherwise) unless
    the coefficients ignore the delayed state.  `force` maps step indices to
    states that overwrite the computed ``X_k`` (conditional experiments).
    """
    _check_segment(sys, xi)
    if not dt > 0:
        raise ValueError("dt must be positive")
    m, d = sys.state_dim, sys.noise_dim
    lag = _delay_lag(sys, dt) if sys.uses_delay else 0
    n_steps = int(math.ceil(T / dt - 1e-9))
    pre = _fixed_history(sys, xi, dt, lag) if lag else []
    x = segment_value(xi, 0.0)
    states, dWs, ys = [x], [], []
    status, explosion = Status.REACHED_HORIZON, None
    force = dict(force or {})
    with np.errstate(all="ignore"):
        for k in range(n_steps):
            if lag:
                y = states[k - lag] if k >= lag else pre[k]
            else:
                y = x
            try:
                f = evaluate_drift(sys, x, y)
                G = evaluate_diffusion(sys, x, y)
            except CoefficientOverflow:
                status, explosion = Status.EXPLODED, k
                break
            dW = noise.increment(k * dt, (k + 1) * dt)
            x = _gdw(G, dW, x + f * dt)
            if k + 1 in force:
                x = as_state(force[k + 1], m)
            states.append(x)
            dWs.append(dW)
            ys.append(y)
            if is_exploded(x):
                status, explosion = Status.EXPLODED, k
                break
    n = len(states)
    return AdaptiveTrajectory(
        times=np.arange(n, dtype=np.float64) * dt, steps=np.full(n - 1, float(dt)),
        states=np.asarray(states).reshape(-1, m), status=status,
        dW=np.asarray(dWs, dtype=np.float64).reshape(-1, d),
        delayed=np.asarray(ys, dtype=np.float64).reshape(-1, m), horizon=float(T),
        explosion_step=explosion, meta={"dt": float(dt), "lag": lag},
    )


def integrate_fixed_em_batch(sys: DelaySystem, dt: float, xi: InitialSegment, dW: np.ndarray,
                             force: Mapping[int, object] | None = None):
    """Fixed-step EM for a batch of paths sharing ``xi``.

    Parameters
    ----------
    dW : ndarray, shape (P, K, d)
        Increments per path and step.
    force : mapping, optional
        Step index -> state overwriting ``X_k`` on every path.

    Returns
    -------
    states : ndarray, shape (P, K+1, m)
        Paths; entries after a path's explosion are not meaningful.
    exploded : ndarray of bool, shape (P,)
    """
    _check_segment(sys, xi)
    P, K, d = dW.shape
    m = sys.state_dim
    lag = _delay_lag(sys, dt) if sys.uses_delay else 0
    pre = _fixed_history(sys, xi, dt, lag) if lag else []
    X = np.empty((P, K + 1, m))
    X[:, 0] = segment_value(xi, 0.0)
    bad = np.zeros(P, dtype=bool)
    with np.errstate(all="ignore"):
        for k in range(K):
            x = X[:, k]
            if lag:
                y = X[:, k - lag] if k >= lag else np.broadcast_to(pre[k], (P, m))
            else:
                y = x
            f = np.asarray(sys.drift(x, y))
            G = np.asarray(sys.diffusion(x, y))
            bad |= ~np.all(np.isfinite(f), axis=1) | ~np.all(np.isfinite(G), axis=(1, 2))
            acc = x + f * dt
            for j in range(d):
                acc = acc + G[:, :, j] * dW[:, k, j][:, None]
            if force and k + 1 in force:
                acc = np.broadcast_to(as_state(force[k + 1], m), (P, m))
            X[:, k + 1] = acc
            bad |= ~np.all(np.isfinite(acc), axis=1) | (np.linalg.norm(acc, axis=1) > EXPLOSION_BOUND)
    return X, bad


def _node_index(traj: AdaptiveTrajectory, t) -> np.ndarray:
    return np.searchsorted(traj.times, t, side="right") - 1


def interpolate(traj: AdaptiveTrajectory, sys: DelaySystem, path: FinePath, t: float,
                hist: HistoryBuffer | None = None) -> np.ndarray:
    """Continuous interpolant at time `t` in ``[0, t_N]``.

    With ``t_ = max{t_n <= t}`` and the delayed argument frozen over the step:
    ``X_t = X_{t_} + f(X_{t_}, y)(t - t_) + g(X_{t_}, y)(W_t - W_{t_})``.
    Grid nodes return the stored state itself.
    """
    if not (0.0 <= t <= traj.final_time):
        raise DomainError(f"t={t} outside [0, {traj.final_time}]")
    n = int(_node_index(traj, t))
    x = traj.states[n]
    if traj.times[n] == t:
        return x
    y = delayed_value(hist, traj.times[n], sys.tau) if hist is not None else traj.delayed[n]
    with np.errstate(all="ignore"):
        f = evaluate_drift(sys, x, y)
        G = evaluate_diffusion(sys, x, y)
        dw = path.value(t) - path.value(traj.times[n])
        val = _gdw(G, dw, x + f * (t - traj.times[n]))
    return val if traj.clamp_K is None else clamp_phi(val, traj.clamp_K)


def interpolate_many(traj: AdaptiveTrajectory, ts: np.ndarray, w_ts: np.ndarray) -> np.ndarray:
    """Vectorized interpolant at sorted times `ts` given ``W`` there (`w_ts`).

    Needs a trajectory run on a FinePath with ``keep_coefficients=True``.
    Agrees bitwise with :func:`interpolate`.
    """
    if traj.drift is None or traj.w_nodes is None:
        raise ValueError("trajectory lacks stored coefficients or node Brownian values")
    ts = np.asarray(ts, dtype=np.float64)
    if ts.size and (ts[0] < 0 or ts[-1] > traj.final_time):
        raise DomainError("interpolation times outside the trajectory")
    n = _node_index(traj, ts)
    node = traj.times[n] == ts
    k = np.minimum(n, traj.steps_taken - 1)
    dt = (ts - traj.times[n])[:, None]
    dw = w_ts - traj.w_nodes[n]
    with np.errstate(all="ignore"):
        acc = traj.states[n] + traj.drift[k] * dt
        for j in range(dw.shape[1]):
            acc = acc + traj.diffusion[k][:, :, j] * dw[:, j][:, None]
    out = np.where(node[:, None], traj.states[n], acc)
    if traj.clamp_K is not None:
        out = np.array([clamp_phi(v, traj.clamp_K) if not nd else v for v, nd in zip(out, node)])
    return out
