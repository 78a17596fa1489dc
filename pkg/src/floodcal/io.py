"""CSV readers/writers and dependency-free SVG plots."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .calibration import CalibrationReport, ObservationSet


def fmt(x) -> str:
    """Float with 17 significant digits; ints unchanged."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, int, np.floating, np.integer)) else v
                        for v in row])
    return path


def trajectory_rows(times, states, cells=None):
    states = np.asarray(states)
    cells = range(states.shape[1]) if cells is None else cells
    for k, t in enumerate(times):
        for c in cells:
            yield (float(t), int(c), float(states[k, c]))


def write_trajectory(path, times, states, cells=None) -> Path:
    return write_csv(path, ["time_s", "cell_id", "depth_m"], trajectory_rows(times, states, cells))


def write_observations(path: Path, obs: ObservationSet) -> list[Path]:
    rows = ((float(t), int(c), float(obs.values[k, j]))
            for k, t in enumerate(obs.times) for j, c in enumerate(obs.points))
    csv_path = write_csv(path, ["time_s", "cell_id", "depth_m"], rows)
    meta = dict(obs.meta)
    meta["gamma"] = obs.gamma
    side = Path(path).with_suffix(".meta.json")
    side.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return [csv_path, side]


def read_observations(path: Path) -> ObservationSet:
    path = Path(path)
    rows = list(csv.DictReader(io.StringIO(path.read_text())))
    times = sorted({float(r["time_s"]) for r in rows})
    points: list[int] = []
    for r in rows:
        c = int(r["cell_id"])
        if c not in points:
            points.append(c)
    ti = {t: k for k, t in enumerate(times)}
    pj = {c: j for j, c in enumerate(points)}
    vals = np.full((len(times), len(points)), np.nan)
    for r in rows:
        vals[ti[float(r["time_s"])], pj[int(r["cell_id"])]] = float(r["depth_m"])
    if np.isnan(vals).any():
        raise ValueError(f"{path}: observation table is not a full time x point grid")
    side = path.with_suffix(".meta.json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    gamma = float(meta.get("gamma", 1e-3))
    return ObservationSet(np.array(times), np.array(points), vals, gamma, meta)


def write_sensitivity_diagnostics(path, times, G) -> Path:
    """Per time and group: cell-sum of the sensitivity and its largest magnitude."""
    G = np.asarray(G)
    tot = G.sum(axis=1)
    mx = np.abs(G).max(axis=1) if G.shape[1] else np.zeros_like(tot)
    rows = ((float(t), s, float(tot[k, s]), float(mx[k, s]))
            for k, t in enumerate(times) for s in range(G.shape[2]))
    return write_csv(path, ["time_s", "group", "total_gradient", "max_abs_gradient"], rows)


def write_gradient_snapshots(path, times, G, cells=None, groups=None) -> Path:
    G = np.asarray(G)
    cells = range(G.shape[1]) if cells is None else cells
    groups = range(G.shape[2]) if groups is None else groups
    rows = ((float(t), int(c), int(s), float(G[k, c, s]))
            for k, t in enumerate(times) for c in cells for s in groups)
    return write_csv(path, ["time_s", "cell_id", "group", "value"], rows)


def write_report(path: Path, report: CalibrationReport) -> Path:
    w = len(report.estimate)
    header = ["epoch", "loss"] + [f"z_{k}" for k in range(w)]
    rows = [[e, report.losses[e]] + [float(v) for v in report.iterates[e]]
            for e in range(len(report.losses))]
    return write_csv(path, header, rows)


def report_summary(report: CalibrationReport, **extra) -> dict:
    out = {
        "estimate": [float(v) for v in report.estimate],
        "estimate_source": report.estimate_source,
        "converged": report.converged,
        "converged_epoch": report.converged_epoch,
        "epochs_run": len(report.losses),
        "initial_loss": report.losses[0] if report.losses else None,
        "final_loss": report.losses[-1] if report.losses else None,
        "rmse": report.rmse,
        "error": report.error,
    }
    out.update(extra)
    return out


# --------------------------------------------------------------------------
# SVG

_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
           "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]


def line_plot_svg(series: dict[str, tuple[Sequence[float], Sequence[float]]], title: str = "",
                  xlabel: str = "", ylabel: str = "", logy: bool = False,
                  width: int = 640, height: int = 400, legend: bool = True) -> str:
    """Minimal multi-series line chart."""
    ml, mr, mt, mb = 70, 20, 30, 45
    pw, ph = width - ml - mr, height - mt - mb
    xs = np.concatenate([np.asarray(x, float) for x, _ in series.values()]) if series else np.zeros(1)
    ys = np.concatenate([np.asarray(y, float) for _, y in series.values()]) if series else np.zeros(1)
    if xs.size == 0:  # nothing to draw, but keep the axes
        xs, ys = np.zeros(1), np.zeros(1)
    if logy:
        ys = np.log10(np.clip(ys, 1e-300, None))
    x0, x1 = float(np.min(xs)), float(np.max(xs))
    y0, y1 = float(np.min(ys)), float(np.max(ys))
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1

    def px(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def py(y):
        return mt + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{title}</text>',
           f'<text x="{ml + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">{xlabel}</text>',
           f'<text x="14" y="{mt + ph / 2:.1f}" text-anchor="middle" '
           f'transform="rotate(-90 14 {mt + ph / 2:.1f})">{ylabel}</text>']
    for k in range(5):
        xv = x0 + (x1 - x0) * k / 4
        yv = y0 + (y1 - y0) * k / 4
        ylab = f"1e{yv:.1f}" if logy else f"{yv:.3g}"
        out.append(f'<text x="{px(xv):.1f}" y="{mt + ph + 15}" text-anchor="middle">{xv:.3g}</text>')
        out.append(f'<text x="{ml - 5}" y="{py(yv) + 4:.1f}" text-anchor="end">{ylab}</text>')
    for k, (name, (x, y)) in enumerate(series.items()):
        y = np.asarray(y, float)
        if logy:
            y = np.log10(np.clip(y, 1e-300, None))
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(np.asarray(x, float), y))
        color = _COLORS[k % len(_COLORS)]
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        if legend and len(series) <= 12:
            ly = mt + 12 + 14 * k
            out.append(f'<line x1="{ml + pw - 110}" y1="{ly - 4}" x2="{ml + pw - 90}" '
                       f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
            out.append(f'<text x="{ml + pw - 86}" y="{ly}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def depth_field_svg(depth: np.ndarray, title: str = "", cell_px: int = 8) -> str:
    """Raster heat map of a (rows, cols) depth array; NaN cells left blank."""
    rows, cols = depth.shape
    finite = depth[np.isfinite(depth)]
    vmax = float(finite.max()) if finite.size and finite.max() > 0 else 1.0
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{cols * cell_px}" '
           f'height="{rows * cell_px + 20}" font-family="sans-serif" font-size="11">',
           f'<text x="2" y="13">{title} (max {vmax:.4g} m)</text>']
    for r in range(rows):
        for c in range(cols):
            v = depth[r, c]
            if not np.isfinite(v):
                continue
            level = int(255 * (1 - min(max(v / vmax, 0.0), 1.0)))
            out.append(f'<rect x="{c * cell_px}" y="{r * cell_px + 20}" width="{cell_px}" '
                       f'height="{cell_px}" fill="rgb({level},{level},255)"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
