"""Adaptive Euler-Maruyama for stochastic differential delay equations.

Modules
-------
expr
    Coefficient expression language (parse, evaluate, print, compile).
model
    Systems, initial segments, step controllers, growth constants and the
    step-condition checker.
noise
    Per-path counter-based normal streams and bridge-refinable Wiener paths.
integrate
    Adaptive, clamped and fixed-step EM schemes and the continuous interpolant.
analysis
    Monte Carlo estimators: strong error and order, moments, Lyapunov
    exponents, explosion statistics.
problems
    Built-in test problems.
report, cli
    CSV/manifest/SVG output and the ``sdde-lab`` command.
"""

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .model import (DelaySystem, GrowthConstants, InitialSegment, StepController,  # noqa: F401
                    check_step_condition, evaluate_diffusion, evaluate_drift, propose_step,
                    segment_value)
from .noise import FinePath, NoiseStream, bridge_sample, gaussian_increment, increment_between  # noqa: F401
from .integrate import (AdaptiveTrajectory, HistoryBuffer, Status, adaptive_em_step,  # noqa: F401
                        clamp_phi, delayed_value, integrate_adaptive, integrate_clamped,
                        integrate_fixed_em, interpolate)
from .problems import get_problem  # noqa: F401
