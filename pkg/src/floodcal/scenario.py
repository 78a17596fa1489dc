"""Scenario definitions: file format, built-in cases and realization.

A scenario is plain nested data (dicts, lists, numbers, strings) so it
round-trips through YAML unchanged. ``realize`` turns it into the numerical
objects used by the model and calibrator.
"""
from __future__ import annotations

import copy
import hashlib
import json
import re
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .calibration import (CalibrationConfig, CalibrationProblem, ObservationScheme,
                          ObservationSet, PriorSpec, synthesize_observations)
from .forcing import ForcingSpec, Hyetograph, IdfParams, chicago_hyetograph, uniform_hyetograph
from .grid import (CellField, LatentLayout, LocalizationMask, assign_latents, build_grid,
                   build_localization, hline_edges, load_dem_ascii, mask_edges,
                   region_boundary_edges, vline_edges)
from .integrator import IntegratorConfig
from .model import FluxParams


class ScenarioError(ValueError):
    pass


# --------------------------------------------------------------------------
# built-in cases

CASE1_POINTS = {
    # raster (row, col) of the four observation cells
    "1": [7, 7],
    "2": [7, 22],
    "3": [22, 7],
    "4": [22, 22],
}

CASE1_TABLE = ("C1T1", "C1T2", "C1T3", "C1T4", "C1T5", "C1T6", "C1T7", "C1T8")

CASE1_SCHEMES = {
    "C1T1": {"points": ["2", "3"], "interval": 60.0},
    "C1T2": {"points": ["1", "2"], "interval": 60.0},
    "C1T3": {"points": ["1", "2", "3"], "interval": 60.0},
    "C1T4": {"points": ["1", "2", "3", "4"], "interval": 60.0},
    "C1T5": {"points": ["2", "3"], "interval": 120.0},
    "C1T6": {"points": ["1", "2"], "interval": 120.0},
    "C1T7": {"points": ["1", "2", "3"], "interval": 120.0},
    "C1T8": {"points": ["1", "2", "3", "4"], "interval": 120.0},
    # two-point variants under explicit names: "a" watches points 1 and 2,
    # "b" points 1 and 3
    "C1T2a": {"points": ["1", "2"], "interval": 60.0},
    "C1T6a": {"points": ["1", "2"], "interval": 120.0},
    "C1T2b": {"points": ["1", "3"], "interval": 60.0},
    "C1T6b": {"points": ["1", "3"], "interval": 120.0},
}


def builtin_case1() -> dict:
    """30 x 30 cells of 10 m, four quadrants, 60 independent edge latents."""
    truth = [1.5] * 15 + [0.0] * 30 + [1.5] * 15
    idf = {"A": 3600.0, "B": 10.0, "n": 0.8}
    return {
        "name": "case1",
        "grid": {
            "rows": 30, "cols": 30, "spacing": 10.0,
            "elevation": {
                "default": 1.0,
                # quadrants: 1 top-left, 2 top-right, 3 bottom-left, 4 bottom-right
                "regions": [
                    {"label": 1, "rows": [0, 14], "cols": [0, 14], "value": 1.0},
                    {"label": 2, "rows": [0, 14], "cols": [15, 29], "value": 0.8},
                    {"label": 3, "rows": [15, 29], "cols": [0, 14], "value": 0.8},
                    {"label": 4, "rows": [15, 29], "cols": [15, 29], "value": 1.0},
                ],
            },
            "manning": {"default": 0.02},
        },
        "latents": {
            "selectors": ["vline r0..r29 @ c14|c15", "hline c0..c29 @ r14|r15"],
            "sharing": "none",
            "truth": truth,
            "prior": 1.0,
        },
        "forcing": {
            "rains": {
                "uniform_1": {"kind": "uniform", "depth_mm": 40.0, "duration_s": 600.0},
                "chicago_0.3": {"kind": "chicago", "depth_mm": 40.0, "duration_s": 600.0,
                                "r": 0.3, "idf": dict(idf)},
                "chicago_0.5": {"kind": "chicago", "depth_mm": 40.0, "duration_s": 600.0,
                                "r": 0.5, "idf": dict(idf)},
                "chicago_0.7": {"kind": "chicago", "depth_mm": 40.0, "duration_s": 600.0,
                                "r": 0.7, "idf": dict(idf)},
            },
            "train": "uniform_1",
            "test": ["chicago_0.3", "chicago_0.5", "chicago_0.7"],
            "infiltration_capacity": 0.0,
        },
        "observation": {
            "horizon": 600.0,
            "gamma": 0.001,
            "points": copy.deepcopy(CASE1_POINTS),
            "schemes": copy.deepcopy(CASE1_SCHEMES),
        },
        "calibration": {"optimizer": "adagrad", "lr": 0.2, "epochs": 40,
                        "convergence": None, "tail_window": None},
        "integrator": {"rtol": 1e-6, "atol": 1e-9, "atol_sens": 1e-9},
        "localization": {"halfwidth": None},
        "flux": {"convention": "dimensional", "eps_slope": 1e-4},
    }


def builtin_twin5() -> dict:
    """5 x 5 cells sloping west to east with four independent latents.

    Small enough for dense and finite-difference cross checks.
    """
    return {
        "name": "twin5",
        "grid": {
            "rows": 5, "cols": 5, "spacing": 10.0,
            "elevation": {
                "default": 1.0,
                "regions": [
                    {"label": 1, "rows": [0, 4], "cols": [0, 2], "value": 1.0},
                    {"label": 2, "rows": [0, 4], "cols": [3, 4], "value": 0.8},
                ],
            },
            "manning": {"default": 0.02},
        },
        "latents": {
            "selectors": ["vline r0..r3 @ c2|c3"],
            "sharing": "none",
            "truth": [1.5, 0.5, 0.0, 2.0],
            "prior": 1.0,
        },
        "forcing": {
            "rains": {"uniform_1": {"kind": "uniform", "depth_mm": 40.0, "duration_s": 600.0}},
            "train": "uniform_1",
            "test": [],
            "infiltration_capacity": 0.0,
        },
        "observation": {
            "horizon": 600.0,
            "gamma": 0.001,
            "points": {"a": [0, 4], "b": [2, 3], "c": [4, 0]},
            "schemes": {"abc": {"points": ["a", "b", "c"], "interval": 60.0}},
        },
        "calibration": {"optimizer": "adagrad", "lr": 0.2, "epochs": 40,
                        "convergence": None, "tail_window": None},
        "integrator": {"rtol": 1e-10, "atol": 1e-12, "atol_sens": 1e-12},
        "localization": {"halfwidth": None},
        "flux": {"convention": "dimensional", "eps_slope": 1e-4},
    }


DESK_SHAPE = (60, 120)
FULL_SHAPE = (483, 201)


def desk_road_mask(rows: int = 60, cols: int = 120, width: int = 4) -> np.ndarray:
    """Two crossing roads: one east-west, one north-south."""
    mask = np.zeros((rows, cols), dtype=bool)
    r0 = rows // 2 - width // 2
    c0 = cols // 2 - width // 2
    mask[r0:r0 + width, :] = True
    mask[:, c0:c0 + width] = True
    return mask


def street_grid_mask(rows: int = FULL_SHAPE[0], cols: int = FULL_SHAPE[1], block: int = 50,
                     width: int = 6, offset: int = 22) -> np.ndarray:
    """Regular street network: ``width``-cell roads repeating every ``block`` cells.

    Stand-in road mask for full-scale bookkeeping when no surveyed mask is at
    hand. The defaults give 100 m blocks and 12 m streets on 2 m cells.
    """
    if block <= width or width < 1:
        raise ScenarioError("need block > width >= 1")
    mask = np.zeros((rows, cols), dtype=bool)
    for k in range(offset % block, rows, block):
        mask[k:k + width, :] = True
    for k in range(offset % block, cols, block):
        mask[:, k:k + width] = True
    return mask


def desk_dem(rows: int = 60, cols: int = 120, spacing: float = 8.0,
             road: np.ndarray | None = None) -> np.ndarray:
    """Left-low-right-high surface with roads sunk below the kerb.

    A gentle cross-fall towards the roads keeps the surrounding blocks
    draining onto them.
    """
    road = desk_road_mask(rows, cols) if road is None else road
    x = np.arange(cols) * spacing
    y = np.arange(rows) * spacing
    X, Y = np.meshgrid(x, y)
    elev = 10.0 + 0.01 * X + 0.002 * np.sin(2 * np.pi * Y / (rows * spacing))
    # distance (in cells) to the nearest road cell along rows/cols
    rr, cc = np.nonzero(road)
    dist_r = np.min(np.abs(np.arange(rows)[:, None] - np.unique(rr)[None, :]), axis=1)
    dist_c = np.min(np.abs(np.arange(cols)[:, None] - np.unique(cc)[None, :]), axis=1)
    dist = np.minimum(dist_r[:, None], dist_c[None, :])
    elev = elev + 0.005 * dist * spacing
    elev[road] -= 0.15
    return elev


def desk_points(mask: np.ndarray, count: int) -> list[list[int]]:
    """Points spread evenly along the road centre lines."""
    rows, cols = mask.shape
    rr = np.flatnonzero(mask.all(axis=1))
    cc = np.flatnonzero(mask.all(axis=0))
    r_mid = int(rr[len(rr) // 2]) if rr.size else rows // 2
    c_mid = int(cc[len(cc) // 2]) if cc.size else cols // 2
    half = count // 2
    pts = []
    xs = np.linspace(4, cols - 5, half + 2)[1:-1]
    for x in xs:
        c = int(round(x))
        if abs(c - c_mid) < 4:
            c += 5
        pts.append([r_mid, c])
    ys = np.linspace(4, rows - 5, count - half + 2)[1:-1]
    for y in ys:
        r = int(round(y))
        if abs(r - r_mid) < 4:
            r += 5
        pts.append([r, c_mid])
    return pts


def builtin_case2_twin(scale: str = "desk", dem_path: str | None = None,
                       road_mask_path: str | None = None) -> dict:
    """Urban twin: one shared road latent, localized sensitivities."""
    if scale not in ("desk", "full"):
        raise ScenarioError(f"unknown case-2 scale {scale!r}")
    if scale == "full":
        if dem_path is None or road_mask_path is None:
            raise ScenarioError(
                "full-scale case 2 needs the 201 x 483 DEM (.asc) and a road mask (.asc, "
                "nonzero = road); pass dem_path= and road_mask_path=, or use scale='desk'")
        warnings.warn("full-scale case 2 solves ~97k cells per epoch; expect long runs")
        grid = {"dem": str(dem_path), "road_mask": str(road_mask_path),
                "manning": {"default": 0.05}}
        points18 = None
    else:
        rows, cols = DESK_SHAPE
        grid = {"rows": rows, "cols": cols, "spacing": 8.0,
                "elevation": {"generator": "desk-cross"},
                "road_mask": "desk-cross",
                "manning": {"default": 0.05}}
        mask = desk_road_mask(rows, cols)
        points18 = desk_points(mask, 18)
    obs_points = {}
    schemes = {}
    if points18 is not None:
        obs_points = {f"p{k}": p for k, p in enumerate(points18)}
        names18 = [f"p{k}" for k in range(len(points18))]
        names9 = names18[::2]
        schemes = {"pts18": {"points": names18, "interval": 60.0},
                   "pts9": {"points": names9, "interval": 60.0}}
    return {
        "name": f"case2-twin-{scale}",
        "grid": grid,
        "latents": {
            "selectors": ["road-edges"],
            "sharing": "all",
            "truth": [2.5],
            "prior": 1.0,
            "priors": [1.0, 4.0],
        },
        "forcing": {
            "rains": {"uniform_2": {"kind": "uniform", "depth_mm": 20.0, "duration_s": 240.0}},
            "train": "uniform_2",
            "test": [],
            "infiltration_capacity": 0.0,
        },
        "observation": {
            "horizon": 300.0,
            "times": [60.0, 120.0, 180.0, 240.0],
            "gamma": 0.001,
            "points": obs_points,
            "schemes": schemes,
        },
        "calibration": {"optimizer": "rmsprop", "lr": 0.1, "epochs": 40,
                        "convergence": 1e-5, "tail_window": [30, 40]},
        "integrator": {"rtol": 1e-6, "atol": 1e-9, "atol_sens": 1e-9},
        "localization": {"halfwidth": 4},
        "flux": {"convention": "dimensional", "eps_slope": 1e-4},
    }


def builtin(name: str) -> dict:
    if name == "case1":
        return builtin_case1()
    if name in ("case2-twin", "case2-twin-desk"):
        return builtin_case2_twin("desk")
    if name == "twin5":
        return builtin_twin5()
    raise ScenarioError(f"unknown builtin scenario {name!r}")


# --------------------------------------------------------------------------
# serialization

def dump_scenario(scn: dict) -> str:
    return yaml.safe_dump(scn, sort_keys=False, default_flow_style=None, width=100)


def parse_scenario(text: str) -> dict:
    data = yaml.safe_load(text)
    if not isinstance(data, dict) or "name" not in data:
        raise ScenarioError("scenario text must be a mapping with a 'name' entry")
    for section in ("grid", "latents", "forcing", "observation"):
        if section not in data:
            raise ScenarioError(f"scenario {data['name']!r} is missing section {section!r}")
    return data


def load_scenario(path: str | Path) -> dict:
    scn = parse_scenario(Path(path).read_text())
    scn.setdefault("_base_dir", str(Path(path).resolve().parent))
    return scn


def config_hash(*objs: Any) -> str:
    blob = json.dumps([_strip_private(o) for o in objs], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _strip_private(obj):
    if isinstance(obj, dict):
        return {k: _strip_private(v) for k, v in obj.items() if not str(k).startswith("_")}
    return obj


# --------------------------------------------------------------------------
# realization

@dataclass
class Realized:
    scenario: dict
    field: CellField
    layout: LatentLayout
    rains: dict[str, Hyetograph]
    road_mask: np.ndarray | None
    region_labels: np.ndarray | None

    def forcing(self, rain: str | None = None) -> ForcingSpec:
        name = rain or self.scenario["forcing"]["train"]
        if name not in self.rains:
            raise ScenarioError(f"unknown rain {name!r}; have {sorted(self.rains)}")
        cap = float(self.scenario["forcing"].get("infiltration_capacity", 0.0) or 0.0)
        return ForcingSpec(self.rains[name], infiltration_capacity=cap)

    @property
    def truth(self) -> np.ndarray:
        t = self.scenario["latents"].get("truth")
        if t is None:
            raise ScenarioError("scenario has no truth values for its latents")
        arr = np.asarray(t, dtype=float)
        if arr.size == 1 and self.layout.n_groups != 1:
            arr = np.full(self.layout.n_groups, float(arr))
        return arr

    def prior(self, value: float | None = None) -> np.ndarray:
        v = self.scenario["latents"].get("prior", 1.0) if value is None else value
        return np.full(self.layout.n_groups, float(v))

    def point_cells(self, names) -> tuple[int, ...]:
        pts = self.scenario["observation"]["points"]
        out = []
        for nm in names:
            key = str(nm)
            if key not in pts:
                raise ScenarioError(f"unknown observation point {nm!r}")
            r, c = pts[key]
            out.append(self.field.cell(int(r), int(c)))
        return tuple(out)

    def scheme(self, name: str) -> ObservationScheme:
        schemes = self.scenario["observation"]["schemes"]
        if name not in schemes:
            raise ScenarioError(f"unknown scheme {name!r}; have {sorted(schemes)}")
        sc = schemes[name]
        return ObservationScheme(name, self.point_cells(sc["points"]), float(sc["interval"]))

    def observation_times(self, scheme: ObservationScheme) -> np.ndarray:
        obs = self.scenario["observation"]
        if obs.get("times"):
            return np.asarray(obs["times"], dtype=float)
        horizon = float(obs["horizon"])
        k = int(round(horizon / scheme.interval))
        return scheme.interval * np.arange(1, k + 1)

    def integrator(self) -> IntegratorConfig:
        cfg = self.scenario.get("integrator") or {}
        return IntegratorConfig(**{k: int(v) if k == "max_steps" else
                                   (None if v is None else float(v)) for k, v in cfg.items()})

    def flux_params(self) -> FluxParams:
        cfg = self.scenario.get("flux") or {}
        return FluxParams(eps_slope=float(cfg.get("eps_slope", 1e-8)),
                          convention=cfg.get("convention", "dimensional"))

    def calibration_config(self) -> CalibrationConfig:
        cfg = dict(self.scenario.get("calibration") or {})
        if cfg.get("tail_window") is not None:
            cfg["tail_window"] = tuple(int(x) for x in cfg["tail_window"])
        return CalibrationConfig(**cfg)

    def prior_spec(self) -> PriorSpec:
        return PriorSpec(self.scenario["latents"].get("prior_kind", "nonnegative-uniform"))

    def localization(self, halfwidth: int | None = None) -> LocalizationMask | None:
        hw = (self.scenario.get("localization") or {}).get("halfwidth") \
            if halfwidth is None else halfwidth
        if hw is None:
            return None
        return build_localization(self.layout, int(hw))

    def observations(self, scheme: str, rain: str | None = None, seed: int = 0,
                     noiseless: bool = True, z=None) -> ObservationSet:
        """Twin observations for a named scheme, generated at ``z`` (default: truth)."""
        sc = self.scheme(scheme)
        obs = self.scenario["observation"]
        return synthesize_observations(self.truth if z is None else z, self.field, self.layout,
                                       self.forcing(rain), sc, float(obs["horizon"]),
                                       float(obs.get("gamma", 1e-3)), seed=seed,
                                       noiseless=noiseless, integrator=self.integrator(),
                                       params=self.flux_params(),
                                       times=self.observation_times(sc))

    def problem(self, observations: ObservationSet, halfwidth: int | None = None,
                rain: str | None = None) -> CalibrationProblem:
        return CalibrationProblem(self.field, self.layout, self.forcing(rain), observations,
                                  self.prior_spec(), self.integrator(), self.flux_params(),
                                  self.localization(halfwidth))


def _resolve(scn: dict, path: str) -> Path:
    p = Path(path)
    if not p.is_absolute() and "_base_dir" in scn:
        p = Path(scn["_base_dir"]) / p
    return p


def _region_raster(spec: dict, rows: int, cols: int):
    elev = np.full((rows, cols), float(spec.get("default", 0.0)))
    labels = np.zeros((rows, cols), dtype=np.int64)
    for reg in spec.get("regions", []):
        r0, r1 = reg["rows"]
        c0, c1 = reg["cols"]
        elev[r0:r1 + 1, c0:c1 + 1] = float(reg["value"])
        labels[r0:r1 + 1, c0:c1 + 1] = int(reg.get("label", 0))
    return elev, labels


_RANGE = r"([rc])(\d+)\.\.[rc]?(\d+)"
_VLINE = re.compile(r"^vline\s+" + _RANGE + r"\s*@\s*c(\d+)\|c(\d+)$")
_HLINE = re.compile(r"^hline\s+" + _RANGE + r"\s*@\s*r(\d+)\|r(\d+)$")


def parse_selector(text: str, field: CellField, road_mask=None, labels=None):
    """Edge list for one selector string."""
    s = text.strip()
    m = _VLINE.match(s)
    if m:
        axis, a, b, c0, c1 = m.groups()
        if axis != "r" or int(c1) != int(c0) + 1:
            raise ScenarioError(f"bad vline selector {text!r}")
        return vline_edges(field, range(int(a), int(b) + 1), int(c0))
    m = _HLINE.match(s)
    if m:
        axis, a, b, r0, r1 = m.groups()
        if axis != "c" or int(r1) != int(r0) + 1:
            raise ScenarioError(f"bad hline selector {text!r}")
        return hline_edges(field, range(int(a), int(b) + 1), int(r0))
    if s == "region-boundary":
        if labels is None:
            raise ScenarioError("region-boundary selector needs elevation regions")
        return region_boundary_edges(field, labels)
    if s.startswith("road-edges"):
        if road_mask is None:
            raise ScenarioError("road-edges selector needs a road mask")
        return mask_edges(field, road_mask)
    raise ScenarioError(f"unknown edge selector {text!r}")


def realize(scn: dict) -> Realized:
    g = scn["grid"]
    labels = None
    road = None
    rm = g.get("road_mask")
    if "dem" in g:
        dem = load_dem_ascii(_resolve(scn, g["dem"]).read_text())
        rows, cols = dem.shape
        elev, spacing = dem.elevation, dem.cellsize
        if isinstance(rm, str) and rm != "desk-cross":
            road_dem = load_dem_ascii(_resolve(scn, rm).read_text())
            if road_dem.shape != dem.shape:
                raise ScenarioError("road mask and DEM differ in shape")
            road = np.nan_to_num(road_dem.elevation) != 0
    else:
        rows, cols, spacing = int(g["rows"]), int(g["cols"]), float(g["spacing"])
        espec = g.get("elevation", {})
        if rm == "desk-cross":
            road = desk_road_mask(rows, cols)
        if espec.get("generator") == "desk-cross":
            elev = desk_dem(rows, cols, spacing, road)
        else:
            elev, labels = _region_raster(espec, rows, cols)
    mspec = g.get("manning", {})
    manning = np.full((rows, cols), float(mspec.get("default", 0.02)))
    if road is not None and "road" in mspec:
        manning[road] = float(mspec["road"])
    field = build_grid(rows, cols, spacing, elev, manning)

    lat = scn["latents"]
    selected: list[tuple[int, int]] = []
    for sel in lat.get("selectors", []):
        selected.extend(parse_selector(sel, field, road, labels))
    sharing = lat.get("sharing", "none")
    if sharing == "none":
        groups = None
    elif sharing == "all":
        groups = [list(range(len(selected)))] if selected else []
    else:
        groups = sharing
    constants = {tuple(int(x) for x in k.split(",")): float(v)
                 for k, v in (lat.get("constants") or {}).items()}
    layout = assign_latents(field, selected, groups, constants)

    rains = {}
    for name, spec in scn["forcing"]["rains"].items():
        depth = float(spec["depth_mm"]) * 1e-3
        dur = float(spec["duration_s"])
        if spec["kind"] == "uniform":
            rains[name] = uniform_hyetograph(depth, dur)
        elif spec["kind"] == "chicago":
            idf = IdfParams(**{k: float(v) for k, v in (spec.get("idf") or {}).items()})
            rains[name] = chicago_hyetograph(depth, dur, float(spec["r"]), idf)
        else:
            raise ScenarioError(f"rain {name!r}: unknown kind {spec['kind']!r}")
    return Realized(scn, field, layout, rains, road, labels)
