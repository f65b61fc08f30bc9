"""Command-line experiment runner.

Usage::

    sdde-lab <mode> --config <file> [--out <dir>] [--seed <u64>] [--paths <n>]

Modes: simulate, converge, moments, stability, explode, check.  The config is
a JSON document (see ``docs/config.md``); a ``manifest.json`` written by a
previous run is accepted too and replays that run exactly.  Exit codes:
0 success, 2 invalid configuration, 3 runtime failure.  Failures print one
line ``error: <kind>: <detail>`` to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import re
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (derive_seed, estimate_strong_error, estimate_sup_moment, explosion_probability,
                       stability_experiment)
from .errors import ConfigError
from .expr import ExprError
from .model import DelaySystem, GrowthConstants, InitialSegment, StepController, check_step_condition
from .noise import NoiseStream
from .problems import BUILTINS, Problem, get_problem
from .report import config_hash, trajectory_rows, write_csv, write_manifest, write_svg_plot

MODES = ("simulate", "converge", "moments", "stability", "explode", "check")
EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3

DEFAULTS = {
    "T": 1.0, "deltas": [0.1], "p": 2.0, "paths": 100, "master_seed": 0, "dt_ref": 2.0 ** -13,
    "dt": 2e-3, "K_steps": 100, "force_first": None, "tail_fraction": 0.5, "threshold": -0.05,
    "n_samples": 20, "n_head": 10, "n_traj": 6, "max_rows": 100_000, "check_box": None,
    "check_mode": None, "n_check": 4096, "svg": False, "workers": None, "h_min": 1e-12,
}
# execution settings that never change results; left out of the config hash
EXECUTION_KEYS = ("workers",)


# -- configuration -------------------------------------------------------------

def load_config(path: str) -> dict:
    """Read a JSON config (or the ``config`` entry of a manifest)."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}:1:1: top level must be an object")
    if "config" in doc and "config_hash" in doc:
        doc = doc["config"]
    return doc


def resolve_config(raw: dict, mode: str, seed=None, paths=None, out=None) -> dict:
    """Merge defaults, the document and command-line overrides."""
    unknown = set(raw) - set(DEFAULTS) - {"problem", "tau", "mode", "out", "constants", "sample_times"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "mode" in raw and raw["mode"] != mode:
        raise ConfigError(f"config is for mode {raw['mode']!r}, not {mode!r}")
    cfg = dict(DEFAULTS)
    cfg.update(raw)
    cfg["mode"] = mode
    if seed is not None:
        cfg["master_seed"] = seed
    if paths is not None:
        cfg["paths"] = paths
    cfg.pop("out", None)
    if "problem" not in cfg:
        raise ConfigError("missing key 'problem'")
    return cfg


def _num(cfg, key, lo=None, hi=None, integer=False, open_lo=True):
    v = cfg[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or (integer and not isinstance(v, int)):
        raise ConfigError(f"{key} must be {'an integer' if integer else 'a number'}, got {v!r}")
    if not math.isfinite(v):
        raise ConfigError(f"{key} must be finite")
    if lo is not None and (v <= lo if open_lo else v < lo):
        raise ConfigError(f"{key} must be {'>' if open_lo else '>='} {lo}, got {v}")
    if hi is not None and v >= hi:
        raise ConfigError(f"{key} must be < {hi}, got {v}")
    return v


def _inline_problem(spec: dict, tau_override) -> Problem:
    for key in ("drift", "diffusion", "step"):
        if key not in spec:
            raise ConfigError(f"inline problem needs '{key}'")
    tau = float(tau_override if tau_override is not None else spec.get("tau", 1.0))
    sys_ = DelaySystem.from_expressions(list(spec["drift"]), spec["diffusion"], tau,
                                        name=str(spec.get("name", "inline")))
    step_text = str(spec["step"])
    if "majorant" in spec:
        step_text = re.sub(r"\bF\b", f"({spec['majorant']})", step_text)
    probe = StepController.from_expression(step_text, sys_.state_dim, 0.5, 1.0)
    init = spec.get("initial", 1.0)
    init = [init] * sys_.state_dim if np.ndim(init) == 0 else init
    consts = GrowthConstants(**spec.get("constants", {}))
    return Problem(name=sys_.name, system=sys_, segment=InitialSegment.constant(init, tau),
                   step_kernel=probe.kernel_step, h_max_factor=float(spec.get("h_max_factor", 1.0)),
                   constants=consts, check_box=tuple(spec.get("check_box", (-10.0, 10.0))),
                   step_text=step_text)


def build_problem(cfg: dict) -> Problem:
    spec = cfg["problem"]
    if isinstance(spec, str):
        if spec not in BUILTINS:
            raise ConfigError(f"unknown problem {spec!r}; builtins: {sorted(BUILTINS)}")
        prob = get_problem(spec)
        if cfg.get("tau") is not None and cfg["tau"] != prob.system.tau:
            tau = float(cfg["tau"])
            if not tau > 0:
                raise ConfigError("tau must be positive")
            x0 = prob.segment.value(0.0)
            prob = dataclasses.replace(prob, system=dataclasses.replace(prob.system, tau=tau),
                                       segment=InitialSegment.constant(x0, tau))
    elif isinstance(spec, dict):
        prob = _inline_problem(spec, cfg.get("tau"))
    else:
        raise ConfigError("problem must be a builtin name or an object")
    if cfg.get("constants"):
        prob = dataclasses.replace(prob, constants=GrowthConstants(**cfg["constants"]))
    return prob


def validate(cfg: dict) -> Problem:
    """Check every field before any simulation; returns the problem."""
    mode = cfg["mode"]
    _num(cfg, "T", 0)
    _num(cfg, "p", 0)
    _num(cfg, "paths", 0, integer=True)
    _num(cfg, "master_seed", 0, integer=True, open_lo=False)
    if cfg["master_seed"] >= 2 ** 64:
        raise ConfigError("master_seed must fit in 64 bits")
    deltas = cfg["deltas"]
    if not isinstance(deltas, list) or not deltas:
        raise ConfigError("deltas must be a nonempty list")
    for d in deltas:
        if isinstance(d, bool) or not isinstance(d, (int, float)) or not 0 < d < 1:
            raise ConfigError(f"every delta must lie in (0, 1), got {d!r}")
    if mode in ("converge", "moments") and cfg["paths"] < 2:
        raise ConfigError(f"mode {mode} needs paths >= 2")
    if mode == "converge":
        _num(cfg, "dt_ref", 0)
        if len(deltas) < 3:
            raise ConfigError("converge needs at least 3 deltas")
    if mode == "explode":
        _num(cfg, "dt", 0)
        _num(cfg, "K_steps", 0, integer=True)
    if mode == "stability":
        _num(cfg, "tail_fraction", 0)
        if cfg["tail_fraction"] > 1:
            raise ConfigError("tail_fraction must lie in (0, 1]")
    try:
        prob = build_problem(cfg)
    except (ExprError, ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"problem: {exc}") from None
    if mode == "check":
        c = prob.constants
        cm = cfg["check_mode"] or c.mode or "finite"
        if cm == "stability" and not c.alpha1 > 2 * c.alpha2:
            raise ConfigError("stability check requires alpha1 > 2*alpha2")
    _sweep_step_function(prob, cfg)
    return prob


def _sweep_step_function(prob: Problem, cfg: dict) -> None:
    """Reject step rules that are non-finite or nonpositive on a sample sweep.

    Values above ``h_max`` are legal: the controller clamps them.
    """
    m = prob.system.state_dim
    box = cfg["check_box"] or prob.check_box
    lo, hi = float(box[0]), float(box[1])
    pts = np.linspace(lo, hi, 257)
    grid = np.concatenate([pts, [0.0, 1.0, -1.0, 1e-8, 1e6, -1e6]])
    for delta in cfg["deltas"]:
        ctrl = prob.controller(delta, cfg["T"], h_min=cfg["h_min"])
        params = np.asarray(ctrl.kernel_params, dtype=np.float64)
        for v in grid:
            x = np.full(m, v)
            with np.errstate(all="ignore"):
                raw = float(ctrl.kernel_step(x, params))
            if not (math.isfinite(raw) and raw > 0):
                raise ConfigError(f"step function gives {raw} at x={v} for delta={delta} "
                                  f"(must be finite and positive)")


# -- modes ---------------------------------------------------------------------

def _sample_times(cfg):
    if cfg.get("sample_times") is not None:
        return np.asarray(cfg["sample_times"], dtype=np.float64)
    return np.linspace(0.0, cfg["T"], int(cfg["n_samples"]))


def _summary(out: Path, rows: list, chash: str, files: list):
    files.append(write_csv(out / "summary.csv", ["key", "value"], rows, chash))


def run_simulate(prob, cfg, out, chash, files):
    from .analysis import _run_path
    T, n_head = cfg["T"], int(cfg["n_head"])
    heads = []
    for k, delta in enumerate(cfg["deltas"]):
        ctrl = prob.controller(delta, T, h_min=cfg["h_min"])
        for i in range(min(int(cfg["paths"]), int(cfg["n_traj"]))):
            seed = derive_seed(cfg["master_seed"], k)
            r = _run_path(prob.system, ctrl, prob.segment, NoiseStream(seed, i, prob.system.noise_dim),
                          T, None, 0.0, n_head, "auto")
            times = np.concatenate([[0.0], r.tail_times])
            states = np.concatenate([r.head_states[:1], r.tail_states])
            n = len(times)
            stride = max(1, math.ceil(n / int(cfg["max_rows"])))
            keep = sorted({j for j in range(n) if j <= n_head or j % stride == 0 or j == n - 1})
            cols = ["step", "t", "h"] + [f"x_{j + 1}" for j in range(prob.system.state_dim)]
            files.append(write_csv(out / f"trajectory_d{k}_p{i}.csv", cols,
                                   trajectory_rows(times, r.tail_steps, states, keep), chash))
            for j, (t, h) in enumerate(zip(r.head_times[1:], r.head_steps)):
                heads.append([float(delta), i, j + 1, float(t), float(h)])
            if cfg["svg"]:
                files.append(write_svg_plot(out / f"trajectory_d{k}_p{i}.svg",
                                            [(times[keep], np.abs(states[keep, 0]), "|x_1|")],
                                            title=f"{prob.name} delta={delta} path {i}", xlabel="t",
                                            ylabel="|x_1|", logy=True))
    files.append(write_csv(out / "steps_head.csv", ["delta", "path", "step", "t", "h"], heads, chash))
    return [["problem", prob.name], ["trajectories", len(heads) // max(n_head, 1)]]


def run_converge(prob, cfg, out, chash, files):
    ctrls = [prob.controller(d, cfg["T"], h_min=cfg["h_min"]) for d in cfg["deltas"]]
    res = estimate_strong_error(prob.system, ctrls, prob.segment, cfg["p"], int(cfg["paths"]),
                                cfg["dt_ref"], cfg["T"], cfg["master_seed"], cfg["workers"])
    rep = res.report()
    files.append(write_csv(out / "converge.csv", rep.columns, rep.rows, chash))
    if cfg["svg"]:
        files.append(write_svg_plot(out / "converge.svg", [(res.deltas, res.root_error, "RMS sup error")],
                                    title="strong error", xlabel="delta", ylabel="error",
                                    logx=True, logy=True))
    s = rep.summary
    decreasing = bool(np.all(np.diff(res.mean[np.argsort(-res.deltas)]) < 0))
    return [["slope", s["slope"]], ["intercept", s["intercept"]], ["r2", s["r2"]], ["p", s["p"]],
            ["strictly_decreasing", decreasing], ["dt_ref", res.dt_ref],
            ["n_failed_total", int(res.n_failed.sum())]]


def run_moments(prob, cfg, out, chash, files):
    S = _sample_times(cfg)
    rows, results = [], []
    for k, delta in enumerate(cfg["deltas"]):
        ctrl = prob.controller(delta, cfg["T"], h_min=cfg["h_min"])
        r = estimate_sup_moment(prob.system, ctrl, prob.segment, cfg["p"], int(cfg["paths"]), cfg["T"], S,
                                derive_seed(cfg["master_seed"], k), cfg["workers"])
        results.append(r)
        rows += [[float(delta), float(t), float(mu), float(se), r.n_ok, r.n_exploded]
                 for t, mu, se in zip(r.times, r.mean, r.se)]
    files.append(write_csv(out / "moments.csv",
                           ["delta", "t", "mean_abs_x_p", "std_error", "n_ok", "n_exploded"], rows, chash))
    if cfg["svg"]:
        files.append(write_svg_plot(out / "moments.svg", [(r.times, r.mean, f"delta={r.delta}") for r in results],
                                    title="moment curve", xlabel="t", ylabel="E|X_t|^p", logy=True))
    summ = [["max_moment", max(float(np.nanmax(r.mean)) for r in results)]]
    summ += [[f"sup_moment_delta_{r.delta}", r.sup_mean] for r in results]
    return summ


def run_stability(prob, cfg, out, chash, files):
    delta = cfg["deltas"][0]
    ctrl = prob.controller(delta, cfg["T"], h_min=cfg["h_min"])
    r = stability_experiment(prob.system, ctrl, prob.segment, cfg["T"], int(cfg["paths"]),
                             cfg["tail_fraction"], cfg["threshold"], int(cfg["n_head"]),
                             cfg["master_seed"], cfg["workers"])
    rep = r.report()
    files.append(write_csv(out / "lyapunov.csv", rep.columns, rep.rows, chash))
    heads = [[i, j + 1, float(r.head_times[i, j + 1]), float(h)]
             for i in range(len(r.lyapunov)) for j, h in enumerate(r.head_steps[i]) if math.isfinite(h)]
    files.append(write_csv(out / "steps_head.csv", ["path", "step", "t", "h"], heads, chash))
    if cfg["svg"]:
        n = r.head_steps.shape[1]
        files.append(write_svg_plot(out / "steps_head.svg",
                                    [(np.arange(1, n + 1), r.head_steps[i], "") for i in range(min(6, len(r.lyapunov)))],
                                    title="first adaptive steps", xlabel="step", ylabel="h", logy=True))
    return [[k, v] for k, v in rep.summary.items()]


def run_explode(prob, cfg, out, chash, files):
    M = int(cfg["paths"])
    n_traj = min(M, int(cfg["n_traj"]))
    r = explosion_probability(prob.system, cfg["dt"], prob.segment, M, int(cfg["K_steps"]),
                              cfg["master_seed"], cfg["force_first"], keep_paths=n_traj, min_paths=1)
    rep = r.report()
    files.append(write_csv(out / "explode.csv", rep.columns, rep.rows, chash))
    dt = cfg["dt"]
    for i in range(n_traj):
        X = r.paths[i]
        times = np.arange(len(X)) * dt
        files.append(write_csv(out / f"trajectory_p{i}.csv",
                               ["step", "t", "h"] + [f"x_{j + 1}" for j in range(X.shape[1])],
                               trajectory_rows(times, np.full(len(X) - 1, dt), X), chash))
    if cfg["svg"] and n_traj:
        with np.errstate(all="ignore"):
            series = [(np.arange(r.paths.shape[1]), np.log10(np.abs(r.paths[i, :, 0])), f"sim {i + 1}")
                      for i in range(n_traj)]
        files.append(write_svg_plot(out / "explode.svg", series, title="fixed-step EM",
                                    xlabel="k", ylabel="log10|X_k|"))
    summ = [[k, v] for k, v in rep.summary.items()]
    summ.append(["below_recommended_paths", M < 100])
    return summ


def run_check(prob, cfg, out, chash, files):
    c = prob.constants
    cm = cfg["check_mode"] or c.mode or "finite"
    box = cfg["check_box"] or prob.check_box
    rows = []
    for delta in cfg["deltas"]:
        ctrl = prob.controller(delta, cfg["T"], h_min=cfg["h_min"])
        rep = check_step_condition(prob.system, ctrl, c, cm, box, int(cfg["n_check"]))
        rows.append([float(delta), cm, rep.passed, rep.worst_margin, *map(float, rep.worst_x),
                     *map(float, rep.worst_y), rep.n_points,
                     ";".join(f"{k}={v}" for k, v in rep.analytic.items())])
    m = prob.system.state_dim
    cols = (["delta", "mode", "passed", "worst_margin"] + [f"worst_x_{i + 1}" for i in range(m)]
            + [f"worst_y_{i + 1}" for i in range(m)] + ["n_points", "analytic"])
    files.append(write_csv(out / "check.csv", cols, rows, chash))
    return [["passed", all(r[2] for r in rows)], ["mode", cm], ["box", json.dumps(box)]]


RUNNERS = {"simulate": run_simulate, "converge": run_converge, "moments": run_moments,
           "stability": run_stability, "explode": run_explode, "check": run_check}


def run(mode: str, cfg: dict, out: Path) -> dict:
    """Validate `cfg` and execute `mode`, writing reports into `out`."""
    prob = validate(cfg)
    chash = config_hash({k: v for k, v in cfg.items() if k not in EXECUTION_KEYS})
    out.mkdir(parents=True, exist_ok=True)
    files: list = []
    t0 = time.perf_counter()
    summary = RUNNERS[mode](prob, cfg, out, chash, files)
    _summary(out, summary, chash, files)
    manifest = {
        "tool": "sdde-lab", "version": __version__, "mode": mode, "config": cfg,
        "config_hash": chash, "master_seed": cfg["master_seed"],
        "derived_seeds": [derive_seed(cfg["master_seed"], k) for k in range(len(cfg["deltas"]))],
        "runtime_s": time.perf_counter() - t0,
        "files": sorted(Path(f).name for f in files),
    }
    write_manifest(out / "manifest.json", manifest)
    return manifest


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error: usage: {' '.join(message.split())}", file=sys.stderr)
        raise SystemExit(EXIT_INVALID)


def _parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="sdde-lab", description="Adaptive Euler-Maruyama experiments for SDDEs.")
    ap.add_argument("mode", choices=MODES)
    ap.add_argument("--config", required=True, help="JSON config or manifest.json of an earlier run")
    ap.add_argument("--out", default=None, help="output directory (default: sdde_out)")
    ap.add_argument("--seed", type=int, default=None, help="master seed (u64), overrides the config")
    ap.add_argument("--paths", type=int, default=None, help="number of Monte Carlo paths, overrides the config")
    return ap


def _fail(kind: str, detail: str, code: int) -> int:
    detail = " ".join(str(detail).split())
    print(f"error: {kind}: {detail}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    ap = _parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    try:
        raw = load_config(args.config)
        cfg = resolve_config(raw, args.mode, args.seed, args.paths)
        out = Path(args.out or raw.get("out") or "sdde_out")
        prob = validate(cfg)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_INVALID)
    try:
        manifest = run(args.mode, cfg, out)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_INVALID)
    except Exception as exc:  # runtime failure of the experiment itself
        return _fail("runtime", f"{type(exc).__name__}: {exc}", EXIT_RUNTIME)
    print(f"ok: {args.mode} {prob.name} -> {out} ({len(manifest['files'])} files)")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
