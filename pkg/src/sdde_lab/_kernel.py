"""Compiled single-path engine for long adaptive runs.

The kernel reproduces :func:`sdde_lab.integrate.integrate_adaptive` with a
forward :class:`~sdde_lab.noise.NoiseStream`: same operation order, same
consumption of normals (the step increment first, then bridge samples for
sample times inside the step).  It is resumable: when it runs out of
normals, history slots or record slots it returns a code and the Python
driver refills or grows the buffers before calling it again.  Instead of the
whole trajectory it keeps the first few steps, the nodes after a given
time, the running sup of ``|X|`` and the interpolant at sample times.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .integrate import EXPLOSION_BOUND, Status
from .model import DelaySystem, InitialSegment, StepController, segment_value
from .noise import NoiseStream

__all__ = ["CompiledRun", "run_compiled", "compiled_available"]

_DONE, _NEED_NORMALS, _HIST_FULL, _REC_FULL = 0, 1, 2, 3
_STATUS = (Status.REACHED_HORIZON, Status.MAX_STEPS_EXCEEDED, Status.EXPLODED,
           Status.STEP_FUNCTION_ERROR)
# ist slots
_N, _HLEN, _PTR, _NPOS, _SI, _RLEN, _STAT, _EXPL, _HEADLEN, _NEED = range(10)


def compiled_available(sys: DelaySystem, ctrl: StepController) -> bool:
    return sys.kernel_drift is not None and sys.kernel_diffusion is not None \
        and ctrl.kernel_step is not None


_JIT_CACHE: dict = {}


def _jit(fn):
    key = id(fn)
    hit = _JIT_CACHE.get(key)
    if hit is None or hit[0] is not fn:
        hit = (fn, numba.njit(nogil=True, error_model="numpy")(fn))
        _JIT_CACHE[key] = hit
    return hit[1]


@numba.njit(nogil=True, error_model="numpy")
def _segment_value(th, vals, theta, out):
    # same formula as model._table_lookup
    n = th.shape[0]
    if theta >= th[n - 1]:
        out[:] = vals[n - 1]
        return
    i = np.searchsorted(th, theta, side="right") - 1
    if i < 0:
        i = 0
    w = (theta - th[i]) / (th[i + 1] - th[i])
    for k in range(out.shape[0]):
        out[k] = vals[i, k] + w * (vals[i + 1, k] - vals[i, k])


@numba.njit(nogil=True, error_model="numpy")
def _advance(drift, diffusion, step, params, tau, h_min, ceiling, max_steps, T,
             seg_th, seg_vals, normals, S, svals, fst, ist, x, f, G, acc, y, dW, wrel,
             hist_t, hist_x, rec_from, rec_t, rec_h, rec_x, head_t, head_h, head_x):
    m = x.shape[0]
    d = dW.shape[0]
    nS = S.shape[0]
    n = ist[_N]
    npos = ist[_NPOS]
    si = ist[_SI]
    ptr = ist[_PTR]
    t = fst[0]
    code = _DONE
    while t < T:
        if n >= max_steps:
            ist[_STAT] = 1
            break
        raw = step(x, params)
        if not math.isfinite(raw):
            ist[_STAT] = 3
            break
        h = min(max(raw, h_min), ceiling)
        t_next = t + h
        if ist[_HLEN] == hist_t.shape[0]:
            code = _HIST_FULL
            break
        if t_next >= rec_from and ist[_RLEN] == rec_t.shape[0]:
            code = _REC_FULL
            break
        k = 0
        j = si
        while j < nS and S[j] < t_next:
            if S[j] > t:
                k += 1
            j += 1
        need = d * (1 + k)
        if npos + need > normals.shape[0]:
            ist[_NEED] = need
            code = _NEED_NORMALS
            break
        # delayed argument from the step process
        s = t - tau
        if s < 0.0:
            _segment_value(seg_th, seg_vals, s, y)
        else:
            while ptr + 1 < ist[_HLEN] and hist_t[ptr + 1] <= s:
                ptr += 1
            for i in range(m):
                y[i] = hist_x[ptr, i]
        drift(x, y, f)
        diffusion(x, y, G)
        ok = True
        for i in range(m):
            if not math.isfinite(f[i]):
                ok = False
            for jj in range(d):
                if not math.isfinite(G[i, jj]):
                    ok = False
        if not ok:
            ist[_STAT] = 2
            ist[_EXPL] = n
            break
        sq = math.sqrt(h)
        for jj in range(d):
            dW[jj] = sq * normals[npos + jj]
        npos += d
        for i in range(m):
            acc[i] = x[i] + f[i] * h
        for jj in range(d):
            for i in range(m):
                acc[i] = acc[i] + G[i, jj] * dW[jj]
        # interpolant at sample times inside [t, t_next)
        a = t
        for jj in range(d):
            wrel[jj] = 0.0
        while si < nS and S[si] < t_next:
            s = S[si]
            if s <= t:
                for i in range(m):
                    svals[si, i] = x[i]
            else:
                frac = (s - a) / (t_next - a)
                sd = math.sqrt((s - a) * (t_next - s) / (t_next - a))
                for jj in range(d):
                    wrel[jj] = wrel[jj] + frac * (dW[jj] - wrel[jj]) + sd * normals[npos + jj]
                npos += d
                a = s
                for i in range(m):
                    v = x[i] + f[i] * (s - t)
                    for jj in range(d):
                        v = v + G[i, jj] * wrel[jj]
                    svals[si, i] = v
            si += 1
        n += 1
        t = t_next
        sq_norm = 0.0
        for i in range(m):
            x[i] = acc[i]
            sq_norm += acc[i] * acc[i]
        norm = math.sqrt(sq_norm)
        hl = ist[_HEADLEN]
        if hl < head_t.shape[0]:
            head_t[hl] = t
            head_h[hl - 1] = h
            for i in range(m):
                head_x[hl, i] = x[i]
            ist[_HEADLEN] = hl + 1
        if t >= rec_from:
            r = ist[_RLEN]
            rec_t[r] = t
            rec_h[r] = h
            for i in range(m):
                rec_x[r, i] = x[i]
            ist[_RLEN] = r + 1
        if not (norm <= 1e154):
            ist[_STAT] = 2
            ist[_EXPL] = n - 1
            fst[1] = math.inf
            break
        if norm > fst[1]:
            fst[1] = norm
        hl = ist[_HLEN]
        hist_t[hl] = t
        for i in range(m):
            hist_x[hl, i] = x[i]
        ist[_HLEN] = hl + 1
    ist[_N] = n
    ist[_NPOS] = npos
    ist[_SI] = si
    ist[_PTR] = ptr
    fst[0] = t
    return code


assert EXPLOSION_BOUND == 1e154


@dataclass
class CompiledRun:
    """Summary of one compiled adaptive run.

    ``head_*`` hold the first nodes (``head_times[0] == 0``); ``tail_*`` hold
    every node with ``t >= record_from`` (excluding the initial node).
    ``running_sup`` is ``max_n |X_{t_n}|`` (inf after explosion).
    """

    status: Status
    steps_taken: int
    final_time: float
    final_state: np.ndarray
    explosion_step: int | None
    running_sup: float
    sample_times: np.ndarray
    sample_values: np.ndarray
    head_times: np.ndarray
    head_steps: np.ndarray
    head_states: np.ndarray
    tail_times: np.ndarray
    tail_steps: np.ndarray
    tail_states: np.ndarray

    @property
    def exploded(self) -> bool:
        return self.status is Status.EXPLODED


def run_compiled(sys: DelaySystem, ctrl: StepController, xi: InitialSegment,
                 stream: NoiseStream, T: float, *, sample_times=None,
                 record_from: float = math.inf, n_head: int = 0) -> CompiledRun:
    """Adaptive EM with forward noise in the compiled engine.

    Parameters
    ----------
    sample_times : array_like, optional
        Sorted times where the continuous interpolant is recorded.
    record_from : float
        Keep every node with ``t_n >= record_from``.
    n_head : int
        Keep the first `n_head` steps.
    """
    if not compiled_available(sys, ctrl):
        raise ValueError("system or controller has no compilable kernel functions")
    if xi.tau < sys.tau:
        raise ValueError("initial segment shorter than the delay")
    m, d = sys.state_dim, sys.noise_dim
    drift, diffusion, step = _jit(sys.kernel_drift), _jit(sys.kernel_diffusion), _jit(ctrl.kernel_step)
    params = np.asarray(ctrl.kernel_params, dtype=np.float64)
    seg_th, seg_vals = xi.as_table()
    seg_th = np.ascontiguousarray(seg_th, dtype=np.float64)
    seg_vals = np.ascontiguousarray(np.asarray(seg_vals, dtype=np.float64).reshape(len(seg_th), m))
    S = np.ascontiguousarray(np.asarray([] if sample_times is None else sample_times, dtype=np.float64))
    if np.any(np.diff(S) < 0) or np.any(S < 0):
        raise ValueError("sample_times must be sorted and nonnegative")
    svals = np.full((len(S), m), np.nan)
    x = segment_value(xi, 0.0).copy()
    fst = np.array([0.0, float(np.linalg.norm(x))])
    ist = np.zeros(10, dtype=np.int64)
    ist[_HLEN] = 1
    ist[_HEADLEN] = 1
    hist_t = np.empty(1024)
    hist_x = np.empty((1024, m))
    hist_t[0] = 0.0
    hist_x[0] = x
    rcap = 0 if math.isinf(record_from) else 1024
    rec_t, rec_h, rec_x = np.empty(rcap), np.empty(rcap), np.empty((rcap, m))
    head_t, head_h, head_x = np.empty(n_head + 1), np.empty(max(n_head, 1)), np.empty((n_head + 1, m))
    head_t[0] = 0.0
    head_x[0] = x
    f, G, acc, y = np.empty(m), np.empty((m, d)), np.empty(m), np.empty(m)
    dW, wrel = np.empty(d), np.empty(d)
    stream.refill(d)
    ist[_NPOS] = stream.pos
    while True:
        code = _advance(drift, diffusion, step, params, float(sys.tau), float(ctrl.h_min),
                        float(ctrl.ceiling), int(ctrl.max_steps), float(T), seg_th, seg_vals,
                        stream.buffer, S, svals, fst, ist, x, f, G, acc, y, dW, wrel,
                        hist_t, hist_x, float(record_from), rec_t, rec_h, rec_x,
                        head_t, head_h, head_x)
        stream.pos = int(ist[_NPOS])
        if code == _DONE:
            break
        if code == _NEED_NORMALS:
            stream.refill(int(ist[_NEED]))
            ist[_NPOS] = stream.pos
        elif code == _HIST_FULL:
            ptr, L = int(ist[_PTR]), int(ist[_HLEN])
            keep = L - ptr
            if keep > len(hist_t) // 2:
                new_t, new_x = np.empty(2 * len(hist_t)), np.empty((2 * len(hist_t), m))
            else:
                new_t, new_x = hist_t, hist_x
            new_t[:keep] = hist_t[ptr:L]
            new_x[:keep] = hist_x[ptr:L]
            hist_t, hist_x = new_t, new_x
            ist[_HLEN], ist[_PTR] = keep, 0
        elif code == _REC_FULL:
            r = len(rec_t)
            rec_t = np.concatenate([rec_t, np.empty(r)])
            rec_h = np.concatenate([rec_h, np.empty(r)])
            rec_x = np.concatenate([rec_x, np.empty((r, m))])
    status = _STATUS[int(ist[_STAT])]
    # samples at or before the final node of a completed run
    si = int(ist[_SI])
    if status is Status.REACHED_HORIZON:
        while si < len(S) and S[si] <= fst[0]:
            svals[si] = x
            si += 1
    hl, rl = int(ist[_HEADLEN]), int(ist[_RLEN])
    return CompiledRun(
        status=status, steps_taken=int(ist[_N]), final_time=float(fst[0]), final_state=x.copy(),
        explosion_step=int(ist[_EXPL]) if status is Status.EXPLODED else None,
        running_sup=float(fst[1]), sample_times=S, sample_values=svals,
        head_times=head_t[:hl].copy(), head_steps=head_h[:hl - 1].copy(),
        head_states=head_x[:hl].copy(), tail_times=rec_t[:rl].copy(),
        tail_steps=rec_h[:rl].copy(), tail_states=rec_x[:rl].copy(),
    )
