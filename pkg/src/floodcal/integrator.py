"""Adaptive Dormand-Prince 5(4) integrator with dense output."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

# Dormand & Prince (1980) tableau
C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# 5th minus 4th order weights
E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])
# Shampine's 4th-order continuous extension, y(t0 + x h) = y0 + h K^T P [x, x^2, x^3, x^4]
P = np.array([
    [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0.0, 0.0, 0.0, 0.0],
    [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0
MIN_STEP = 1e-12


class IntegrationError(RuntimeError):
    def __init__(self, message: str, t_last: float):
        super().__init__(f"{message} (last good time t = {t_last:.9g} s)")
        self.t_last = t_last


@dataclass
class IntegratorConfig:
    rtol: float = 1e-6
    atol: float = 1e-9
    atol_sens: float = 1e-9
    h_init: float | None = None  # None selects a first step automatically
    h_max: float = math.inf
    max_steps: int = 200_000

    def __post_init__(self):
        if self.rtol <= 0 or self.atol <= 0 or self.atol_sens <= 0:
            raise ValueError("tolerances must be positive")
        if self.h_init is not None and not 0 < self.h_init <= self.h_max:
            raise ValueError("need 0 < h_init <= h_max")


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (len(times), n)
    stats: dict = field(default_factory=dict)


def _combine(coefs, K: np.ndarray) -> np.ndarray:
    """sum_s coefs[s] * K[s], accumulated elementwise.

    Unlike a BLAS dot this gives the same bits for a component no matter how
    long the state vector is.
    """
    out = None
    for c, k in zip(coefs, K):
        if c == 0.0:
            continue
        out = c * k if out is None else out + c * k
    return np.zeros(K.shape[1]) if out is None else out


def _rms(v: np.ndarray) -> float:
    return math.sqrt(float(np.mean(v * v))) if v.size else 0.0


def _initial_step(fun, t0, y0, f0, direction_span, scale, ctrl=slice(None), order=4):
    d0 = _rms(y0[ctrl] / scale[ctrl])
    d1 = _rms(f0[ctrl] / scale[ctrl])
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, direction_span)
    y1 = y0 + h0 * f0
    f1 = np.asarray(fun(t0 + h0, y1), dtype=float)
    d2 = _rms((f1 - f0)[ctrl] / scale[ctrl]) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / (order + 1))
    return min(100 * h0, h1, direction_span)


def integrate(fun: Callable[[float, np.ndarray], np.ndarray], y0, t_span, sample_times,
              config: IntegratorConfig | None = None, atol=None) -> Trajectory:
    """Integrate ``dy/dt = fun(t, y)`` and return ``y`` at ``sample_times``.

    ``atol`` may be a per-component array overriding ``config.atol``;
    components with an infinite entry are carried along but left out of
    the error norm.
    Samples come from the dense-output interpolant; steps never snap to them.
    A sample equal to ``t_span[0]`` returns ``y0`` itself.
    """
    cfg = config or IntegratorConfig()
    t0, tf = float(t_span[0]), float(t_span[1])
    y = np.array(y0, dtype=float)
    samples = np.asarray(sample_times, dtype=float)
    if samples.size and (np.any(np.diff(samples) < 0) or samples[0] < t0 or samples[-1] > tf):
        raise ValueError("sample_times must be ascending and inside t_span")
    atol_v = cfg.atol if atol is None else np.asarray(atol, dtype=float)
    ctrl = slice(None)
    if np.ndim(atol_v) and not np.all(np.isfinite(atol_v)):
        ctrl = np.flatnonzero(np.isfinite(atol_v))
    out = np.empty((samples.size, y.size))
    n_out = 0
    while n_out < samples.size and samples[n_out] <= t0:
        out[n_out] = y
        n_out += 1

    n = y.size
    K = np.empty((7, n))
    f = np.asarray(fun(t0, y), dtype=float)
    nfev = 1
    span = tf - t0
    if cfg.h_init is not None:
        h = cfg.h_init
    elif span > 0:
        h = _initial_step(fun, t0, y, f, span,
                          np.broadcast_to(atol_v + cfg.rtol * np.abs(y), y.shape), ctrl)
        nfev += 1
    else:
        h = 0.0
    h = min(h, cfg.h_max)
    t = t0
    accepted = rejected = 0
    just_rejected = False
    while t < tf:
        if accepted + rejected >= cfg.max_steps:
            raise IntegrationError(f"max_steps={cfg.max_steps} exceeded", t)
        if h < MIN_STEP:
            raise IntegrationError(
                f"step size underflow (h = {h:.3g} s); try a smaller h_max", t)
        h = min(h, tf - t)
        t_new = t + h
        K[0] = f
        for s in range(1, 6):
            K[s] = fun(t + C[s] * h, y + h * _combine(A[s], K[:s]))
        y_new = y + h * _combine(B5[:6], K[:6])
        f_new = np.asarray(fun(t_new, y_new), dtype=float)
        K[6] = f_new
        nfev += 6
        err = h * _combine(E, K)
        scale = atol_v + cfg.rtol * np.maximum(np.abs(y), np.abs(y_new))
        norm = _rms((err / scale)[ctrl])
        if not math.isfinite(norm):
            rejected += 1
            just_rejected = True
            h *= MIN_FACTOR
            continue
        if norm <= 1.0:
            factor = MAX_FACTOR if norm == 0 else min(MAX_FACTOR, SAFETY * norm ** -0.2)
            if just_rejected:
                factor = min(factor, 1.0)
            just_rejected = False
            # dense output for samples in (t, t_new]
            while n_out < samples.size and samples[n_out] <= t_new:
                ts = samples[n_out]
                if ts == t_new:
                    out[n_out] = y_new
                else:
                    out[n_out] = dense_eval(K, y, h, (ts - t) / h)
                n_out += 1
            t, y, f = t_new, y_new, f_new
            accepted += 1
            h = min(h * factor, cfg.h_max)
        else:
            rejected += 1
            just_rejected = True
            h *= max(MIN_FACTOR, SAFETY * norm ** -0.2)
    stats = {"accepted": accepted, "rejected": rejected, "nfev": nfev}
    return Trajectory(samples.copy(), out, stats)


def dense_eval(K: np.ndarray, y: np.ndarray, h: float, x: float) -> np.ndarray:
    """Evaluate the continuous extension of one step at fraction ``x``."""
    # at x = 1 the weights reduce to B5; use them directly so the endpoint is exact
    w = B5 if x == 1.0 else P @ np.array([x, x * x, x ** 3, x ** 4])
    return y + h * _combine(w, K)


def step(fun, t: float, y: np.ndarray, h: float):
    """Take one unconditional Dormand-Prince step; returns (y_new, err, K)."""
    y = np.asarray(y, dtype=float)
    K = np.empty((7, y.size))
    K[0] = fun(t, y)
    for s in range(1, 7):
        K[s] = fun(t + C[s] * h, y + h * _combine(A[s], K[:s]))
    y_new = y + h * _combine(B5[:6], K[:6])
    return y_new, h * _combine(E, K), K
