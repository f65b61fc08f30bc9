"""Output writers: CSV tables, trajectory dumps, run manifests and SVG plots.

Every CSV begins with a ``# config_hash=<hex>`` comment line followed by a
header row.  Floats are written with :func:`repr` so values round-trip
exactly and reruns produce byte-identical files.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = ["config_hash", "format_cell", "write_csv", "read_csv", "trajectory_rows",
           "write_trajectory_csv", "write_manifest", "write_svg_plot"]


def config_hash(config: dict) -> str:
    """SHA-256 of the canonical JSON form of `config` (first 16 hex digits)."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def format_cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return "" if v is None else str(v)


def write_csv(path, columns: Sequence[str], rows: Iterable[Sequence], chash: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={chash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(columns))
        for row in rows:
            w.writerow([format_cell(v) for v in row])
    return path


def read_csv(path) -> tuple[str, list[str], list[list[str]]]:
    """Return ``(config_hash, columns, rows)`` of a file written by :func:`write_csv`."""
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if not first.startswith("# config_hash="):
            raise ValueError(f"{path}: missing config hash header")
        rows = list(csv.reader(fh))
    return first.split("=", 1)[1], rows[0], rows[1:]


def trajectory_rows(times, steps, states, keep=None) -> list[list]:
    """Rows ``step, t, h, x_1..x_m``; node 0 has an empty ``h``.

    ``h`` on row ``n`` is the step that produced node ``n``.  `keep` selects
    node indices (all by default).
    """
    states = np.asarray(states).reshape(len(times), -1)
    idx = range(len(times)) if keep is None else keep
    return [[int(n), float(times[n]), (float(steps[n - 1]) if n > 0 else None),
             *map(float, states[n])] for n in idx]


def write_trajectory_csv(path, traj, chash: str, keep=None) -> Path:
    m = np.asarray(traj.states).reshape(len(traj.times), -1).shape[1]
    cols = ["step", "t", "h"] + [f"x_{i + 1}" for i in range(m)]
    return write_csv(path, cols, trajectory_rows(traj.times, traj.steps, traj.states, keep), chash)


def write_manifest(path, manifest: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _ticks(lo: float, hi: float) -> list[float]:
    if hi <= lo:
        return [lo]
    return [lo + (hi - lo) * k / 4 for k in range(5)]


def write_svg_plot(path, series: Sequence[tuple], title: str = "", xlabel: str = "",
                   ylabel: str = "", logx: bool = False, logy: bool = False,
                   width: int = 640, height: int = 400) -> Path:
    """Minimal line plot; `series` holds ``(xs, ys, label)`` triples.

    Non-finite points (and non-positive ones on log axes) are skipped.
    """
    tx = (lambda v: math.log10(v)) if logx else (lambda v: v)
    ty = (lambda v: math.log10(v)) if logy else (lambda v: v)
    pts = []
    for xs, ys, label in series:
        seg = [(tx(float(a)), ty(float(b))) for a, b in zip(xs, ys)
               if math.isfinite(a) and math.isfinite(b) and (not logx or a > 0) and (not logy or b > 0)]
        pts.append((seg, label))
    allx = [p[0] for s, _ in pts for p in s] or [0.0, 1.0]
    ally = [p[1] for s, _ in pts for p in s] or [0.0, 1.0]
    x0, x1, y0, y1 = min(allx), max(allx), min(ally), max(ally)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    L, R, Tm, B = 70, 20, 40, 50
    sx = lambda v: L + (v - x0) / (x1 - x0) * (width - L - R)
    sy = lambda v: height - B - (v - y0) / (y1 - y0) * (height - Tm - B)
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
           f'<line x1="{L}" y1="{height - B}" x2="{width - R}" y2="{height - B}" stroke="black"/>',
           f'<line x1="{L}" y1="{Tm}" x2="{L}" y2="{height - B}" stroke="black"/>']
    fmt = lambda v, log: (f"1e{v:.1f}" if log else f"{v:.3g}")
    for v in _ticks(x0, x1):
        out.append(f'<text x="{sx(v):.1f}" y="{height - B + 15}" text-anchor="middle">{fmt(v, logx)}</text>')
    for v in _ticks(y0, y1):
        out.append(f'<text x="{L - 5}" y="{sy(v) + 4:.1f}" text-anchor="end">{fmt(v, logy)}</text>')
    out.append(f'<text x="{width / 2:.1f}" y="{height - 12}" text-anchor="middle">{xlabel}</text>')
    out.append(f'<text x="15" y="{height / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 15 {height / 2:.1f})">{ylabel}</text>')
    for k, (seg, label) in enumerate(pts):
        if not seg:
            continue
        c = colors[k % len(colors)]
        coords = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in seg)
        out.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.2" points="{coords}"/>')
        if label:
            out.append(f'<text x="{width - R - 5}" y="{Tm + 14 * (k + 1)}" text-anchor="end" fill="{c}">{label}</text>')
    out.append("</svg>")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(out) + "\n")
    return path
