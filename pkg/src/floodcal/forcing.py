"""Rainfall hyetographs, infiltration and boundary inflow."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import integrate

INFILTRATION_GATE = 1e-4  # m, depth below which infiltration is scaled down linearly


@dataclass(frozen=True)
class IdfParams:
    """Storm-intensity curve i(t_d) = A / (t_d + B)^n.

    ``A`` in mm/h * min^n, ``B`` in minutes.
    """

    A: float = 3600.0
    B: float = 10.0
    n: float = 0.8


@dataclass(frozen=True)
class Hyetograph:
    kind: str  # "uniform" | "chicago"
    duration: float  # s
    depth: float  # m
    r: Optional[float] = None
    idf: Optional[IdfParams] = None
    scale: float = 1.0  # renormalization factor for the chicago shape

    def intensity(self, t):
        """Rainfall intensity in m/s (vectorized over ``t``)."""
        t = np.asarray(t, dtype=float)
        if self.kind == "uniform":
            out = np.where((t >= 0) & (t <= self.duration), self.depth / self.duration, 0.0)
        else:
            out = np.where((t >= 0) & (t <= self.duration), self.scale * _chicago_shape(self, t), 0.0)
        return out if out.ndim else float(out)

    def cumulative_depth(self, t0: float = 0.0, t1: Optional[float] = None) -> float:
        """Rain depth (m) falling over [t0, t1]."""
        t1 = self.duration if t1 is None else t1
        a, b = max(t0, 0.0), min(t1, self.duration)
        if b <= a:
            return 0.0
        if self.kind == "uniform":
            return self.depth / self.duration * (b - a)
        return self.scale * _chicago_integral(self, a, b)


def intensity_at(hyeto: Hyetograph, t: float) -> float:
    return float(hyeto.intensity(t))


def uniform_hyetograph(depth: float, duration: float) -> Hyetograph:
    if duration <= 0:
        raise ValueError(f"duration must be positive, got {duration}")
    if depth < 0:
        raise ValueError(f"depth must be nonnegative, got {depth}")
    return Hyetograph("uniform", float(duration), float(depth))


def _chicago_shape(h: Hyetograph, t):
    """Unscaled Chicago intensity in mm/h at time t (s)."""
    idf = h.idf
    T = h.duration / 60.0
    tp = h.r * T
    tm = np.asarray(t, dtype=float) / 60.0
    before = tm <= tp
    # time from peak, normalised by the branch fraction
    tau = np.where(before, (tp - tm) / h.r, (tm - tp) / (1.0 - h.r))
    num = idf.A * ((1.0 - idf.n) * tau + idf.B)
    den = (tau + idf.B) ** (1.0 + idf.n)
    return num / den


def _chicago_integral(h: Hyetograph, a: float, b: float) -> float:
    tp = h.r * h.duration
    pts = [p for p in (tp,) if a < p < b]
    val, _ = integrate.quad(lambda s: float(_chicago_shape(h, s)), a, b,
                            points=pts or None, epsabs=0.0, epsrel=1e-13, limit=200)
    return val


def chicago_hyetograph(depth: float, duration: float, r: float,
                       idf: IdfParams | None = None) -> Hyetograph:
    """Chicago design storm peaking at ``r * duration``, rescaled to ``depth``.

    Each branch integrates to the IDF depth A*t_d/(t_d+B)^n over its share of
    the storm, so the raw shape is only fixed up to the final rescaling.
    """
    if not 0.0 < r < 1.0:
        raise ValueError(f"peak coefficient r must lie in (0, 1), got {r}")
    if duration <= 0:
        raise ValueError(f"duration must be positive, got {duration}")
    idf = idf or IdfParams()
    if idf.A <= 0 or idf.B <= 0 or idf.n <= 0:
        raise ValueError("IDF parameters must be positive")
    raw = Hyetograph("chicago", float(duration), float(depth), float(r), idf, 1.0)
    total = _chicago_integral(raw, 0.0, duration)
    return Hyetograph("chicago", float(duration), float(depth), float(r), idf,
                      float(depth) / total if total > 0 else 0.0)


@dataclass(frozen=True)
class InflowSeries:
    """Piecewise-constant boundary inflow per cell (m/s), right-continuous."""

    times: np.ndarray  # (T,) ascending
    cells: np.ndarray  # (C,)
    rates: np.ndarray  # (T, C)

    def at(self, t: float, n_cells: int) -> np.ndarray:
        out = np.zeros(n_cells)
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        if k >= 0:
            out[self.cells] = self.rates[k]
        return out


def load_inflow_csv(text: str) -> InflowSeries:
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        raise ValueError("inflow CSV has no rows")
    times = sorted({float(r["time_s"]) for r in rows})
    cells = sorted({int(r["cell_id"]) for r in rows})
    ti = {t: k for k, t in enumerate(times)}
    ci = {c: k for k, c in enumerate(cells)}
    rates = np.zeros((len(times), len(cells)))
    for r in rows:
        rates[ti[float(r["time_s"])], ci[int(r["cell_id"])]] = float(r["rate_m_per_s"])
    # hold each cell's last given rate forward
    return InflowSeries(np.array(times), np.array(cells, dtype=np.int64), rates)


@dataclass(frozen=True)
class ForcingSpec:
    rainfall: Hyetograph
    infiltration_capacity: float = 0.0  # m/s, 0 = none
    inflow: InflowSeries | None = field(default=None)

    @property
    def has_infiltration(self) -> bool:
        return self.infiltration_capacity > 0.0

    def rain(self, t: float) -> float:
        return float(self.rainfall.intensity(t))

    def infiltration(self, h: np.ndarray) -> np.ndarray:
        return infiltration_rate(self.infiltration_capacity, h)

    def infiltration_deriv(self, h: np.ndarray) -> np.ndarray:
        fc = self.infiltration_capacity
        if fc <= 0:
            return np.zeros_like(h)
        return np.where((h > 0) & (h < INFILTRATION_GATE), fc / INFILTRATION_GATE, 0.0)

    def boundary_inflow(self, t: float, n_cells: int) -> np.ndarray | None:
        if self.inflow is None:
            return None
        return self.inflow.at(t, n_cells)


def infiltration_rate(capacity: float, h):
    """Gated constant-capacity infiltration: ``f_c * clip(h / h_gate, 0, 1)``."""
    h = np.asarray(h, dtype=float)
    if capacity <= 0:
        out = np.zeros_like(h)
    else:
        out = capacity * np.clip(h / INFILTRATION_GATE, 0.0, 1.0)
    return out if out.ndim else float(out)
