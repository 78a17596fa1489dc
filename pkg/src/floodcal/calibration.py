"""MAP calibration of latent values against water-depth observations."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .forcing import ForcingSpec
from .grid import CellField, LatentLayout, LocalizationMask
from .integrator import IntegratorConfig
from .model import FloodModel, FluxParams, simulate
from .sensitivity import CoupledSystem, integrate_coupled, observation_gradient

log = logging.getLogger(__name__)


@dataclass
class ObservationSet:
    times: np.ndarray  # (K,)
    points: np.ndarray  # (J,) cell ids
    values: np.ndarray  # (K, J) depths in m
    gamma: float = 1e-3  # noise variance, m^2
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.points = np.asarray(self.points, dtype=np.int64)
        self.values = np.ascontiguousarray(self.values, dtype=float).reshape(
            len(self.times), len(self.points))
        if np.any(np.diff(self.times) <= 0) or (self.times.size and self.times[0] <= 0):
            raise ValueError("observation times must be positive and strictly increasing")
        if self.gamma <= 0:
            raise ValueError("noise variance must be positive")

    @property
    def horizon(self) -> float:
        return float(self.times[-1])


@dataclass(frozen=True)
class PriorSpec:
    kind: str = "nonnegative-uniform"  # or "none"

    def penalty(self, z) -> float:
        return 0.0

    def gradient(self, z) -> np.ndarray:
        return np.zeros_like(np.asarray(z, dtype=float))


@dataclass
class CalibrationConfig:
    optimizer: str = "adagrad"
    lr: float = 0.2
    epochs: int = 40
    adagrad_eps: float = 1e-10
    rmsprop_alpha: float = 0.99
    rmsprop_eps: float = 1e-8
    convergence: Optional[float] = None  # relative loss change; None runs all epochs
    tail_window: Optional[tuple[int, int]] = None  # inclusive epoch range for averaging

    def __post_init__(self):
        if self.optimizer not in ("adagrad", "rmsprop"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr <= 0 or self.epochs < 1:
            raise ValueError("need lr > 0 and epochs >= 1")
        if not 0 < self.rmsprop_alpha < 1:
            raise ValueError("rmsprop_alpha must lie in (0, 1)")


@dataclass
class CalibrationReport:
    losses: list[float]
    iterates: list[np.ndarray]  # z used at each evaluated epoch, plus the final update
    gradients: list[np.ndarray]
    estimate: np.ndarray
    converged: bool
    converged_epoch: Optional[int]
    estimate_source: str  # "final" | "converged" | "tail-average"
    rmse: dict = field(default_factory=dict)
    error: Optional[str] = None
    wall_time: float = 0.0


# --------------------------------------------------------------------------
# optimizers

def adagrad_step(acc, z, g, lr, eps=1e-10):
    """Adagrad: acc += g^2; z -= lr * g / sqrt(acc + eps)."""
    acc = np.asarray(acc, dtype=float) + np.square(g)
    return acc, np.asarray(z, dtype=float) - lr * np.asarray(g) / np.sqrt(acc + eps)


def rmsprop_step(avg, z, g, lr, alpha=0.99, eps=1e-8):
    """RMSprop: avg = alpha*avg + (1-alpha)*g^2; z -= lr * g / sqrt(avg + eps)."""
    avg = alpha * np.asarray(avg, dtype=float) + (1.0 - alpha) * np.square(g)
    return avg, np.asarray(z, dtype=float) - lr * np.asarray(g) / np.sqrt(avg + eps)


def project_feasible(z, prior: PriorSpec = PriorSpec()):
    z = np.asarray(z, dtype=float)
    if prior.kind == "nonnegative-uniform":
        return np.maximum(z, 0.0)
    return z.copy()


# --------------------------------------------------------------------------
# objective

class CalibrationProblem:
    """Observations plus everything needed to run the model at a given ``z``."""

    def __init__(self, field: CellField, layout: LatentLayout, forcing: ForcingSpec,
                 observations: ObservationSet, prior: PriorSpec = PriorSpec(),
                 integrator: IntegratorConfig | None = None,
                 params: FluxParams = FluxParams(), mask: LocalizationMask | None = None):
        self.field = field
        self.layout = layout
        self.forcing = forcing
        self.obs = observations
        self.prior = prior
        self.integrator = integrator or IntegratorConfig()
        self.params = params
        self.mask = mask
        self.model = FloodModel(field, layout, forcing, params)
        if np.any(observations.points >= field.n_cells) or np.any(observations.points < 0):
            raise IndexError("observation point outside the field")

    def predict(self, z) -> np.ndarray:
        res = simulate(self.field, self.layout, z, self.forcing, (0.0, self.obs.horizon),
                       self.obs.times, self.integrator, model=self.model)
        return res.trajectory.states[:, self.obs.points]

    def data_misfit(self, z) -> float:
        r = self.obs.values - self.predict(z)
        return 0.5 * float(np.sum(r * r)) / self.obs.gamma

    def objective(self, z) -> float:
        return self.data_misfit(z) + self.prior.penalty(z)

    def objective_and_gradient(self, z):
        """One coupled solve -> (objective, gradient, stats)."""
        system = CoupledSystem(self.model, z, self.mask)
        st = integrate_coupled(system, (0.0, self.obs.horizon), self.obs.times, self.integrator)
        pred = st.h[:, self.obs.points]
        r = self.obs.values - pred
        loss = 0.5 * float(np.sum(r * r)) / self.obs.gamma + self.prior.penalty(z)
        dpred = observation_gradient(st.G, self.obs.points)  # (K, J, groups)
        grad = -np.einsum("kjs,kj->s", dpred, r) / self.obs.gamma + self.prior.gradient(z)
        return loss, grad, st.stats

    def objective_gradient(self, z) -> np.ndarray:
        return self.objective_and_gradient(z)[1]


def _tail_average(iterates: Sequence[np.ndarray], window: tuple[int, int]) -> np.ndarray:
    lo, hi = window
    hi = min(hi, len(iterates) - 1)
    lo = min(lo, hi)
    return np.mean(np.stack(iterates[lo:hi + 1]), axis=0)


def calibrate(problem: CalibrationProblem, z0, config: CalibrationConfig = CalibrationConfig(),
              callback=None) -> CalibrationReport:
    """Projected Adagrad / RMSprop descent on the calibration objective.

    Epoch ``e`` evaluates loss and gradient at ``iterates[e]`` and produces
    ``iterates[e + 1]``. Stops early when the relative loss change drops
    below ``config.convergence``.
    """
    t_start = time.perf_counter()
    z = project_feasible(z0, problem.prior)
    if not np.allclose(z, np.asarray(z0, dtype=float)):
        raise ValueError("initial latent values must be feasible")
    state = np.zeros_like(z)
    losses: list[float] = []
    grads: list[np.ndarray] = []
    iterates = [z.copy()]
    converged, conv_epoch, error = False, None, None
    for epoch in range(config.epochs):
        try:
            loss, grad, stats = problem.objective_and_gradient(z)
        except Exception as exc:  # partial report on solver failure
            error = f"epoch {epoch}: {exc}"
            log.error("calibration aborted at %s", error)
            break
        losses.append(loss)
        grads.append(grad)
        log.info("epoch %d loss %.6g steps %s", epoch, loss, stats.get("accepted"))
        if callback is not None:
            callback(epoch, z, loss, grad)
        if config.convergence is not None and epoch > 0:
            prev = losses[-2]
            change = abs(loss - prev) / prev if prev > 0 else 0.0
            if change < config.convergence:
                converged, conv_epoch = True, epoch
                break
        if config.optimizer == "adagrad":
            state, z = adagrad_step(state, z, grad, config.lr, config.adagrad_eps)
        else:
            state, z = rmsprop_step(state, z, grad, config.lr, config.rmsprop_alpha,
                                    config.rmsprop_eps)
        z = project_feasible(z, problem.prior)
        iterates.append(z.copy())

    if error is not None:
        # the failing iterate stays in the history; report the last one that solved
        estimate, source = iterates[max(len(losses) - 1, 0)].copy(), "final"
    elif converged:
        estimate, source = iterates[conv_epoch].copy(), "converged"
    elif config.convergence is not None and config.tail_window is not None:
        estimate, source = _tail_average(iterates, config.tail_window), "tail-average"
    else:
        estimate, source = iterates[-1].copy(), "final"
    return CalibrationReport(losses, iterates, grads, estimate, converged, conv_epoch, source,
                             error=error, wall_time=time.perf_counter() - t_start)


# --------------------------------------------------------------------------
# twin observations and error metrics

@dataclass(frozen=True)
class ObservationScheme:
    name: str
    points: tuple[int, ...]
    interval: float


def synthesize_observations(true_z, field: CellField, layout: LatentLayout, forcing: ForcingSpec,
                            scheme: ObservationScheme, horizon: float, gamma: float = 1e-3,
                            seed: int = 0, noiseless: bool = True,
                            integrator: IntegratorConfig | None = None,
                            params: FluxParams = FluxParams(), times=None) -> ObservationSet:
    """Run the model at ``true_z`` and sample the scheme's points.

    Sample times default to every ``scheme.interval`` seconds up to
    ``horizon``; pass ``times`` to override.
    """
    if times is None:
        k = horizon / scheme.interval
        if abs(k - round(k)) > 1e-9 or round(k) < 1:
            raise ValueError(f"horizon {horizon} s is not a multiple of interval "
                             f"{scheme.interval} s")
        times = scheme.interval * np.arange(1, int(round(k)) + 1)
    times = np.asarray(times, dtype=float)
    if times.size == 0 or times[-1] > horizon:
        raise ValueError("observation times must be non-empty and within the horizon")
    res = simulate(field, layout, true_z, forcing, (0.0, horizon), times, integrator,
                   params=params)
    values = res.trajectory.states[:, list(scheme.points)]
    if not noiseless:
        rng = np.random.default_rng(seed)
        values = values + rng.normal(0.0, np.sqrt(gamma), size=values.shape)
    meta = {"scheme": scheme.name, "seed": seed, "noiseless": noiseless, "gamma": gamma}
    return ObservationSet(times, np.array(scheme.points), values, gamma, meta)


def rmse(truth, pred, conventional: bool = False) -> float:
    """Error between (K, J) arrays.

    Default: sqrt(sum of squares) / (K*J). ``conventional=True`` gives
    sqrt(mean of squares).
    """
    truth = np.asarray(truth, dtype=float)
    pred = np.asarray(pred, dtype=float)
    if truth.shape != pred.shape:
        raise ValueError(f"shape mismatch: {truth.shape} vs {pred.shape}")
    truth = truth.reshape(truth.shape[0], -1) if truth.ndim else truth.reshape(1, 1)
    pred = pred.reshape(truth.shape)
    sq = float(np.sum((truth - pred) ** 2))
    kj = truth.size
    if conventional:
        return float(np.sqrt(sq / kj))
    return float(np.sqrt(sq) / kj)


@dataclass
class GradientCheck:
    z: np.ndarray
    adjoint: np.ndarray
    finite_difference: np.ndarray
    rel_error: np.ndarray
    delta: float

    @property
    def max_rel_error(self) -> float:
        return float(np.max(self.rel_error)) if self.rel_error.size else 0.0


def gradient_check(problem: CalibrationProblem, z, delta: float = 1e-5,
                   components=None) -> GradientCheck:
    """Compare the sensitivity-based gradient with central differences.

    The step for component ``s`` is ``delta * max(|z_s|, 1)``. Relative
    error uses ``max(|fd|, |adjoint|)`` as denominator, floored at 1e-12
    times the largest gradient entry so exact zeros compare cleanly.
    """
    z = np.asarray(z, dtype=float)
    _, g, _ = problem.objective_and_gradient(z)
    comps = range(z.size) if components is None else list(components)
    fd = np.zeros(len(comps))
    for k, s in enumerate(comps):
        step = delta * max(abs(z[s]), 1.0)
        zp, zm = z.copy(), z.copy()
        zp[s] += step
        zm[s] -= step
        fd[k] = (problem.objective(zp) - problem.objective(zm)) / (2 * step)
    adj = g[list(comps)]
    floor = 1e-12 * max(float(np.max(np.abs(g))), 1e-300)
    rel = np.abs(adj - fd) / np.maximum(np.maximum(np.abs(fd), np.abs(adj)), floor)
    return GradientCheck(z, adj, fd, rel, delta)
