"""Built-in test problems.

``counterexample-sdde``
    ``dY = (-2Y - Y^3 + Y sin(Y_{t-1}) / 2) dt + sqrt(2) Y cos(Y_{t-1}) dW``
    with history ``xi = 100``: fixed-step EM explodes with positive
    probability while the adaptive scheme is almost surely stable.
``linear-sdde``
    ``dY = (-4Y + Y_{t-1}) dt + (0.5 Y + 0.2 Y_{t-1}) dW``, ``xi = 1``; the
    benchmark for strong-convergence studies.
``dissipative-sde``
    ``dY = (-Y - Y^3) dt + 0.5 Y dW``: a delay-free system (the delay slot
    is present but unused).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from .model import DelaySystem, GrowthConstants, InitialSegment, StepController

__all__ = ["Problem", "BUILTINS", "get_problem", "counterexample_step", "linear_step",
           "dissipative_step", "counterexample_majorant"]


def counterexample_majorant(a):
    """y-free bound ``F(x) >= sup_y |f(x, y)|`` for the counterexample drift."""
    return 2.0 * a + a ** 3 + 0.5 * a


def counterexample_step(x, params):
    """``delta * (1/25 if |x| < 1 else 0.25 x^2 / max(1, F(x)^2))``."""
    delta = params[0]
    a = abs(x[0])
    if a < 1.0:
        return delta / 25.0
    F = 2.0 * a + a ** 3 + 0.5 * a
    return delta * 0.25 * a * a / max(1.0, F * F)


def linear_step(x, params):
    """``delta * max(1, |x|) / max(1, 5|x|)``: between ``delta/5`` and ``delta``."""
    delta = params[0]
    a = abs(x[0])
    return delta * max(1.0, a) / max(1.0, 5.0 * a)


def dissipative_step(x, params):
    """Same shape as the counterexample rule with ``F(x) = |x| + |x|^3``."""
    delta = params[0]
    a = abs(x[0])
    if a < 1.0:
        return delta / 25.0
    F = a + a ** 3
    return delta * 0.25 * a * a / max(1.0, F * F)


@dataclass(frozen=True)
class Problem:
    """A system with its history, step rule and known constants.

    ``h_max_factor * delta`` is the natural ceiling of the step rule.
    """

    name: str
    system: DelaySystem
    segment: InitialSegment
    step_kernel: Callable
    h_max_factor: float
    constants: GrowthConstants
    check_box: tuple = (-50.0, 50.0)
    description: str = ""
    step_text: str = ""
    extra: dict = field(default_factory=dict)

    def controller(self, delta: float, horizon: float | None = None, *,
                   finite_horizon: bool = True, h_min: float = 1e-12,
                   max_steps: int = 10_000_000) -> StepController:
        return StepController(delta=delta, h_max=self.h_max_factor * delta, h_min=h_min,
                              horizon=horizon, max_steps=max_steps,
                              kernel_step=self.step_kernel, kernel_params=(delta,),
                              finite_horizon=finite_horizon, label=self.step_text)


def _counterexample() -> Problem:
    sys = DelaySystem.from_expressions(["-2*x1 - x1^3 + 0.5*x1*sin(y1)"],
                                       [["sqrt(2)*x1*cos(y1)"]], tau=1.0,
                                       name="counterexample-sdde")
    return Problem(
        name=sys.name, system=sys, segment=InitialSegment.constant(100.0, 1.0),
        step_kernel=counterexample_step, h_max_factor=1.0 / 25.0,
        constants=GrowthConstants(alpha1=0.3, alpha2=0.0, beta=0.0, mode="stability"),
        description="superlinear drift; fixed-step EM explodes, adaptive EM is stable",
        step_text="delta*(1/25 if |x|<1 else 0.25*x^2/max(1,F(x)^2)), F(x)=2|x|+|x|^3+|x|/2",
    )


def _linear() -> Problem:
    sys = DelaySystem.from_expressions(["-4*x1 + y1"], [["0.5*x1 + 0.2*y1"]], tau=1.0,
                                       name="linear-sdde")
    return Problem(
        name=sys.name, system=sys, segment=InitialSegment.constant(1.0, 1.0),
        step_kernel=linear_step, h_max_factor=1.0,
        constants=GrowthConstants(alpha=1.0, beta=0.0),
        check_box=(-10.0, 10.0),
        description="linear benchmark for strong-error studies",
        step_text="delta*max(1,|x|)/max(1,5|x|)",
    )


def _dissipative() -> Problem:
    sys = DelaySystem.from_expressions(["-x1 - x1^3"], [["0.5*x1"]], tau=1.0,
                                       name="dissipative-sde")
    return Problem(
        name=sys.name, system=sys, segment=InitialSegment.constant(2.0, 1.0),
        step_kernel=dissipative_step, h_max_factor=1.0 / 25.0,
        constants=GrowthConstants(alpha1=0.5, alpha2=0.0, beta=0.0, mode="stability"),
        check_box=(-50.0, 50.0),
        description="delay-free dissipative SDE",
        step_text="delta*(1/25 if |x|<1 else 0.25*x^2/max(1,F(x)^2)), F(x)=|x|+|x|^3",
    )


BUILTINS: dict[str, Callable[[], Problem]] = {
    "counterexample-sdde": _counterexample,
    "linear-sdde": _linear,
    "dissipative-sde": _dissipative,
}


def get_problem(name: str) -> Problem:
    try:
        return BUILTINS[name]()
    except KeyError:
        raise KeyError(f"unknown problem {name!r}; choose from {sorted(BUILTINS)}") from None
