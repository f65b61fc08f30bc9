"""Checking the step-size condition behind the stability result.

The checker samples the box, evaluates

    <x, f(x,y)> + h(x)/2 |f(x,y)|^2 + d/2 |g(x,y)|^2   vs   -alpha1 |x|^2 + alpha2 |y|^2

and reports the worst margin.  The counterexample controller passes; a plain
constant step on a stiff linear delay equation does not.

    python3 demos/step_condition.py
"""

from sdde_lab import DelaySystem, GrowthConstants, StepController, check_step_condition, get_problem

prob = get_problem("counterexample-sdde")
rep = check_step_condition(prob.system, prob.controller(0.1), prob.constants, "stability", (-50, 50))
print(f"counterexample, delta=0.1: passed={rep.passed}, worst margin={rep.worst_margin:.3g} "
      f"at x={rep.worst_x[0]:.3g}, y={rep.worst_y[0]:.3g}; analytic: {rep.analytic}")

lin = DelaySystem.from_expressions(["-4*x1 + y1"], [["0.5*x1"]], tau=1.0)
rep = check_step_condition(lin, StepController.constant(0.1, delta=0.1),
                           GrowthConstants(alpha1=3.0, alpha2=1.0, mode="stability"), "stability", (-10, 10))
print(f"linear, h=0.1, alpha1=3, alpha2=1: passed={rep.passed}, worst margin={rep.worst_margin:.3g} "
      f"at x={rep.worst_x[0]:.3g}, y={rep.worst_y[0]:.3g}; analytic: {rep.analytic}")
print("the margin there is the indefinite form 0.075x^2 - 0.6xy + 0.95y^2, negative near y = 0.32x")
