"""Core SDDE model types: the delay system, initial segment, step controller
and growth constants, plus numerical verification of step-size conditions.

A system ``dY = f(Y_t, Y_{t-tau}) dt + g(Y_t, Y_{t-tau}) dW`` is described by
vectorized callables: ``drift(x, y)`` returns shape ``(..., m)`` and
``diffusion(x, y)`` returns ``(..., m, d)`` for inputs of shape ``(..., m)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import qmc

from . import expr as _expr
from .errors import CoefficientOverflow, DomainError, StepFunctionError

__all__ = [
    "as_state", "DelaySystem", "InitialSegment", "StepController", "GrowthConstants",
    "ConditionReport", "evaluate_drift", "evaluate_diffusion", "segment_value",
    "propose_step", "check_step_condition",
]


def as_state(v, m: int | None = None) -> np.ndarray:
    """Coerce `v` to a 1-D float64 state vector (scalars become length 1)."""
    arr = np.atleast_1d(np.asarray(v, dtype=np.float64))
    if arr.ndim != 1:
        raise ValueError(f"state must be a vector, got shape {arr.shape}")
    if m is not None and arr.shape[0] != m:
        raise ValueError(f"state has length {arr.shape[0]}, expected {m}")
    return arr


# -- system ------------------------------------------------------------------

def _scalar_source_fn(name: str, exprs, shape, extra_names=None):
    """Generate a numba-compatible ``name(x, y, out)`` writing `exprs` into out."""
    lines = [f"def {name}(x, y, out):"]
    for flat, e in enumerate(exprs):
        idx = ", ".join(str(i) for i in np.unravel_index(flat, shape))
        lines.append(f"    out[{idx}] = {_expr.to_source(e, 'scalar', extra_names)}")
    ns: dict = {"np": np}
    exec("\n".join(lines), ns)
    return ns[name]


@dataclass(frozen=True)
class DelaySystem:
    """Coefficients, delay and dimensions of an SDDE.

    Parameters
    ----------
    drift, diffusion : callable
        Vectorized coefficient maps (see module docstring).
    tau : float
        Delay, strictly positive.
    state_dim, noise_dim : int
        ``m`` and ``d``.
    uses_delay : bool
        False when the coefficients ignore ``y`` (plain SDE); fixed-step EM
        then skips the commensurability check.
    kernel_drift, kernel_diffusion : callable, optional
        Scalar ``fn(x, y, out)`` versions that numba can compile; enables the
        compiled batch engine.
    """

    drift: Callable
    diffusion: Callable
    tau: float
    state_dim: int = 1
    noise_dim: int = 1
    name: str = "custom"
    uses_delay: bool = True
    kernel_drift: Callable | None = field(default=None, compare=False, repr=False)
    kernel_diffusion: Callable | None = field(default=None, compare=False, repr=False)
    source: dict | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise ValueError(f"delay tau must be positive and finite, got {self.tau}")
        if self.state_dim < 1 or self.noise_dim < 1:
            raise ValueError("state and noise dimensions must be positive")

    @classmethod
    def from_expressions(cls, drift: Sequence[str], diffusion, tau: float,
                         noise_dim: int | None = None, name: str = "custom") -> "DelaySystem":
        """Build a system from expression strings.

        `drift` has one entry per state component; `diffusion` is an ``m x d``
        nested list (a flat list is read as a single noise column).
        """
        m = len(drift)
        rows = [list(r) if isinstance(r, (list, tuple)) else [r] for r in diffusion]
        if len(rows) != m:
            raise ValueError(f"diffusion has {len(rows)} rows, expected {m}")
        d = len(rows[0])
        if any(len(r) != d for r in rows) or (noise_dim is not None and d != noise_dim):
            raise ValueError("diffusion rows must all have noise_dim entries")
        f_ast = [_expr.parse(s, m) for s in drift]
        g_ast = [_expr.parse(s, m) for r in rows for s in r]
        used = set().union(*(_expr.variables(e) for e in f_ast + g_ast))
        return cls(
            drift=_expr.compile_numpy(f_ast, (m,)),
            diffusion=_expr.compile_numpy(g_ast, (m, d)),
            tau=float(tau), state_dim=m, noise_dim=d, name=name,
            uses_delay=any(v.startswith("y") for v in used),
            kernel_drift=_scalar_source_fn("drift", f_ast, (m,)),
            kernel_diffusion=_scalar_source_fn("diffusion", g_ast, (m, d)),
            source={"drift": list(drift), "diffusion": [list(r) for r in rows]},
        )


def evaluate_drift(sys: DelaySystem, x, y) -> np.ndarray:
    """Return ``f(x, y)``; raises CoefficientOverflow on non-finite output."""
    with np.errstate(all="ignore"):
        out = np.asarray(sys.drift(x, y), dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise CoefficientOverflow(f"drift of {sys.name} is not finite")
    return out


def evaluate_diffusion(sys: DelaySystem, x, y) -> np.ndarray:
    """Return ``g(x, y)`` with shape ``(m, d)``; raises on non-finite output."""
    with np.errstate(all="ignore"):
        out = np.asarray(sys.diffusion(x, y), dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise CoefficientOverflow(f"diffusion of {sys.name} is not finite")
    return out


# -- initial segment ---------------------------------------------------------

@dataclass(frozen=True)
class InitialSegment:
    """History ``xi`` on ``[-tau, 0]``.

    Table-backed segments (``constant``, ``from_table``) are evaluated by
    piecewise-linear interpolation with a formula shared with the compiled
    engine, so both engines see bitwise-identical history values.
    """

    value: Callable[[float], np.ndarray]
    tau: float
    holder_constant: float = 0.0
    holder_exponent: float = 1.0
    table: tuple[np.ndarray, np.ndarray] | None = field(default=None, compare=False, repr=False)
    continuity_tol: float | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.holder_constant < 0 or self.holder_exponent <= 0:
            raise ValueError("Holder constant must be >= 0 and exponent > 0")
        grid = np.linspace(-self.tau, 0.0, 1000)
        vals = np.array([as_state(self.value(float(s))) for s in grid])
        if not np.all(np.isfinite(vals)):
            raise ValueError("initial segment must be finite on [-tau, 0]")
        tol = self.continuity_tol
        if tol is None:
            tol = 0.05 * (1.0 + float(np.max(np.abs(vals))))
        jump = float(np.max(np.linalg.norm(np.diff(vals, axis=0), axis=1))) if len(vals) > 1 else 0.0
        if jump > tol:
            raise ValueError(f"initial segment looks discontinuous (max grid jump {jump:.3g} > {tol:.3g})")
        object.__setattr__(self, "_grid_sup", float(np.max(np.linalg.norm(vals, axis=1))))

    @property
    def state_dim(self) -> int:
        return as_state(self.value(0.0)).shape[0]

    @property
    def sup_norm(self) -> float:
        """``||xi|| = sup |xi(theta)|`` (exact for tables, 10^3-grid otherwise)."""
        if self.table is not None:
            return float(np.max(np.linalg.norm(self.table[1], axis=1)))
        return self._grid_sup

    @classmethod
    def constant(cls, c, tau: float) -> "InitialSegment":
        c = as_state(c)
        return cls.from_table([-tau, 0.0], [c, c])

    @classmethod
    def from_table(cls, thetas, values, holder_constant: float | None = None) -> "InitialSegment":
        """Piecewise-linear segment through ``(thetas[i], values[i])``."""
        th = np.asarray(thetas, dtype=np.float64)
        vals = np.asarray(values, dtype=np.float64)
        if vals.ndim == 1:
            vals = vals[:, None]
        if th.ndim != 1 or len(th) < 2 or np.any(np.diff(th) <= 0) or th[-1] != 0.0:
            raise ValueError("thetas must be strictly increasing and end at 0")
        if len(vals) != len(th):
            raise ValueError("thetas and values differ in length")
        tau = -float(th[0])
        if holder_constant is None:
            slopes = np.linalg.norm(np.diff(vals, axis=0), axis=1) / np.diff(th)
            holder_constant = float(np.max(slopes))

        def value(theta, th=th, vals=vals):
            return _table_lookup(th, vals, theta)

        return cls(value=value, tau=tau, holder_constant=holder_constant,
                   holder_exponent=1.0, table=(th, vals))

    @classmethod
    def from_function(cls, fn: Callable, tau: float, holder_constant: float = 0.0,
                      holder_exponent: float = 1.0, **kw) -> "InitialSegment":
        return cls(value=lambda th: as_state(fn(th)), tau=tau, holder_constant=holder_constant,
                   holder_exponent=holder_exponent, **kw)

    def as_table(self, n: int = 4097) -> tuple[np.ndarray, np.ndarray]:
        """Table representation for the compiled engine (sampled if needed)."""
        if self.table is not None:
            return self.table
        th = np.linspace(-self.tau, 0.0, n)
        th[-1] = 0.0
        return th, np.array([as_state(self.value(float(s))) for s in th])


def _table_lookup(th: np.ndarray, vals: np.ndarray, theta: float) -> np.ndarray:
    # keep in sync with _kernel._segment_value
    n = len(th)
    if theta >= th[n - 1]:
        return vals[n - 1].copy()
    i = int(np.searchsorted(th, theta, side="right")) - 1
    if i < 0:
        i = 0
    w = (theta - th[i]) / (th[i + 1] - th[i])
    return vals[i] + w * (vals[i + 1] - vals[i])


def segment_value(xi: InitialSegment, theta: float) -> np.ndarray:
    """Return ``xi(theta)`` for ``theta`` in ``[-tau, 0]``."""
    if not (-xi.tau <= theta <= 0.0):
        raise DomainError(f"theta={theta} outside [{-xi.tau}, 0]")
    return as_state(xi.value(float(theta)))


# -- step control ------------------------------------------------------------

@dataclass(frozen=True)
class StepController:
    """Adaptive step-size rule ``h^delta`` with hard clamping.

    ``kernel_step(x, params)`` is a plain function numba can compile;
    `step_fn` defaults to ``kernel_step(x, kernel_params)``.  In finite-horizon
    mode the ceiling is ``min(h_max, delta * horizon)``.
    """

    delta: float
    h_max: float
    h_min: float = 1e-12
    horizon: float | None = None
    max_steps: int = 10_000_000
    step_fn: Callable | None = None
    kernel_step: Callable | None = field(default=None, compare=False, repr=False)
    kernel_params: tuple = ()
    finite_horizon: bool = True
    label: str = ""

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if not 0.0 < self.h_min <= self.h_max:
            raise ValueError("need 0 < h_min <= h_max")
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")
        if self.finite_horizon and self.horizon is not None and self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.step_fn is None:
            if self.kernel_step is None:
                raise ValueError("a step function is required")
            ks, params = self.kernel_step, np.asarray(self.kernel_params, dtype=np.float64)
            object.__setattr__(self, "step_fn", lambda x: ks(x, params))

    @property
    def ceiling(self) -> float:
        if self.finite_horizon and self.horizon is not None:
            return min(self.h_max, self.delta * self.horizon)
        return self.h_max

    @classmethod
    def constant(cls, h: float, delta: float | None = None, **kw) -> "StepController":
        """Controller returning `h` everywhere (``delta`` defaults to 0.5)."""
        kw.setdefault("h_min", min(1e-12, h))
        return cls(delta=0.5 if delta is None else delta, h_max=h,
                   kernel_step=_constant_step, kernel_params=(h,), **kw)

    @classmethod
    def from_expression(cls, text: str, state_dim: int, delta: float, h_max: float,
                        **kw) -> "StepController":
        """Controller from an expression in ``x1..xm`` and ``delta``."""
        ast = _expr.parse(text, state_dim, allow_y=False, extra=("delta",))
        src = _expr.to_source(ast, "scalar", {"delta": "params[0]"})
        ns: dict = {"np": np}
        exec(f"def step(x, params):\n    return {src}", ns)
        kw.setdefault("label", text)
        return cls(delta=delta, h_max=h_max, kernel_step=ns["step"], kernel_params=(delta,), **kw)


def _constant_step(x, params):
    return params[0]


def propose_step(ctrl: StepController, x) -> float:
    """``clamp(h(x), h_min, ceiling)``; StepFunctionError on non-finite h(x)."""
    with np.errstate(all="ignore"):
        raw = float(ctrl.step_fn(x))
    if not math.isfinite(raw):
        raise StepFunctionError(f"step function returned {raw} at x={x}")
    return min(max(raw, ctrl.h_min), ctrl.ceiling)


# -- growth constants and condition checks ----------------------------------

@dataclass(frozen=True)
class GrowthConstants:
    """Constants of the growth, dissipativity and polynomial-Lipschitz conditions.

    ``mode="stability"`` requires ``alpha1 > 2*alpha2``; ``mode="infinite"``
    requires ``alpha1 > alpha2``.
    """

    alpha: float = 0.0
    beta: float = 0.0
    alpha1: float = 0.0
    alpha2: float = 0.0
    lipschitz: float = 0.0
    poly_gamma: float = 0.0
    poly_exponent: float = 0.0
    poly_lambda: float = 0.0
    decay_rate: float = 0.0
    mode: str | None = None

    def __post_init__(self):
        for name in ("alpha", "beta", "alpha1", "alpha2", "lipschitz", "poly_gamma",
                     "poly_exponent", "poly_lambda", "decay_rate"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.mode == "stability" and not self.alpha1 > 2 * self.alpha2:
            raise ValueError("stability mode requires alpha1 > 2*alpha2")
        if self.mode == "infinite" and not self.alpha1 > self.alpha2:
            raise ValueError("infinite-horizon mode requires alpha1 > alpha2")
        if self.mode not in (None, "finite", "infinite", "stability"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class ConditionReport:
    mode: str
    passed: bool
    worst_margin: float
    worst_x: np.ndarray
    worst_y: np.ndarray
    n_points: int
    analytic: dict[str, bool]

    @property
    def sampled_ok(self) -> bool:
        return self.worst_margin >= 0.0


def _box_points(box, dim: int, n: int) -> np.ndarray:
    box = np.asarray(box, dtype=np.float64)
    if box.shape == (2,):
        box = np.tile(box, (dim, 1))
    if box.shape != (dim, 2) or np.any(box[:, 0] > box[:, 1]):
        raise ValueError(f"sample_box must be (lo, hi) or {dim} (lo, hi) pairs")
    lo, hi = box[:, 0], box[:, 1]
    unit = [qmc.Halton(d=dim, scramble=False).random(n)]
    if dim <= 10:
        unit.append(np.array(np.meshgrid(*[[0.0, 1.0]] * dim, indexing="ij")).reshape(dim, -1).T)
    out = [lo + np.vstack(unit) * (hi - lo), ((lo + hi) / 2)[None]]
    if np.all(lo <= 0) and np.all(hi >= 0):
        out.append(np.zeros((1, dim)))
    return np.vstack(out)


def check_step_condition(sys: DelaySystem, ctrl: StepController, constants: GrowthConstants,
                         mode: str, sample_box, n_samples: int = 4096) -> ConditionReport:
    """Check the step-size inequality of `mode` on a deterministic point set.

    Modes
    -----
    finite
        ``<x,f> + h(x)|f|^2/2 <= alpha(|x|^2+|y|^2) + beta``
    infinite
        ``<x,f> + h(x)|f|^2/2 <= -alpha1|x|^2 + alpha2|y|^2 + beta``
    stability
        ``<x,f> + h(x)|f|^2/2 + d/2 ||g||^2
        <= -alpha1|x|^2 + alpha2 min(h(y),h(x))/h(x) |y|^2``
        plus the analytic ceiling condition
        ``2 alpha2 exp(2 alpha1 h_max) < alpha1`` and ``h_min < h_max < 1``.

    The point set is an unscrambled Halton sequence over `sample_box` plus the
    centre, the corners and the origin (when inside the box).  The margin is
    RHS minus LHS; a negative worst margin fails the check.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if mode not in ("finite", "infinite", "stability"):
        raise ValueError(f"unknown mode {mode!r}")
    m, d = sys.state_dim, sys.noise_dim
    pts = _box_points(sample_box, 2 * m, n_samples)
    x, y = pts[:, :m], pts[:, m:]
    c = constants
    with np.errstate(all="ignore"):
        f = np.asarray(sys.drift(x, y), dtype=np.float64)
        hx = np.array([propose_step(ctrl, xi) for xi in x])
        xx = np.sum(x * x, axis=1)
        yy = np.sum(y * y, axis=1)
        lhs = np.sum(x * f, axis=1) + 0.5 * hx * np.sum(f * f, axis=1)
        if mode == "finite":
            rhs = c.alpha * (xx + yy) + c.beta
        elif mode == "infinite":
            rhs = -c.alpha1 * xx + c.alpha2 * yy + c.beta
        else:
            g = np.asarray(sys.diffusion(x, y), dtype=np.float64)
            lhs = lhs + 0.5 * d * np.sum(g * g, axis=(1, 2))
            hy = np.array([propose_step(ctrl, yi) for yi in y])
            rhs = -c.alpha1 * xx + c.alpha2 * (np.minimum(hy, hx) / hx) * yy
        margin = rhs - lhs
    margin = np.where(np.isnan(margin), -np.inf, margin)
    k = int(np.argmin(margin))
    analytic: dict[str, bool] = {}
    if mode == "finite" and ctrl.horizon is not None:
        analytic["h_max <= delta*T"] = ctrl.ceiling <= ctrl.delta * ctrl.horizon
    if mode == "infinite":
        analytic["alpha1 > alpha2"] = c.alpha1 > c.alpha2
    if mode == "stability":
        hmax = ctrl.ceiling
        analytic["alpha1 > 2*alpha2"] = c.alpha1 > 2 * c.alpha2
        analytic["2*alpha2*exp(2*alpha1*h_max) < alpha1"] = 2 * c.alpha2 * math.exp(2 * c.alpha1 * hmax) < c.alpha1
        analytic["h_min < h_max < 1"] = ctrl.h_min < hmax < 1.0
    worst = float(margin[k])
    return ConditionReport(mode=mode, passed=bool(worst >= 0.0 and all(analytic.values())),
                           worst_margin=worst, worst_x=x[k].copy(), worst_y=y[k].copy(),
                           n_points=len(pts), analytic=analytic)
