"""Command-line entry point: simulate, observe, calibrate, gradcheck, report."""
from __future__ import annotations

import copy
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import click
import numpy as np

from . import io as fio
from .calibration import calibrate, gradient_check, rmse
from .integrator import IntegrationError
from .model import FloodModel, simulate
from .scenario import (Realized, ScenarioError, builtin, config_hash, dump_scenario,
                       load_scenario, realize)

log = logging.getLogger("floodcal")


@dataclass
class RunManifest:
    scenario: str
    command: str
    config_hash: str
    seed: int | None
    outputs: list[str] = field(default_factory=list)
    wall_clock: float = 0.0
    integrator_stats: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def add(self, *paths) -> None:
        for p in paths:
            self.outputs.append(str(p))

    def write(self, out_dir: Path) -> Path:
        path = Path(out_dir) / "manifest.json"
        missing = [p for p in self.outputs if not Path(p).exists()]
        if missing:
            raise RuntimeError(f"manifest lists missing outputs: {missing}")
        self.outputs.append(str(path))
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=_jsonable)
                        + "\n")
        return path


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    return str(o)


# --------------------------------------------------------------------------
# shared option handling

def _localization(value: str | None):
    if value is None:
        return None
    v = value.strip().lower()
    if v == "off":
        return "off"
    parts = v.replace("=", " ").split()
    if len(parts) == 2 and parts[0] == "halfwidth" and parts[1].isdigit():
        return int(parts[1])
    if v.isdigit():
        return int(v)
    raise click.BadParameter("use 'off' or 'halfwidth N'", param_hint="--localization")


def scenario_options(f):
    opts = [
        click.option("--scenario", "scenario_path", type=click.Path(exists=True, dir_okay=False),
                     help="Scenario file (YAML)."),
        click.option("--builtin", "builtin_name",
                     type=click.Choice(["case1", "case2-twin", "twin5"]),
                     help="Use a built-in scenario instead of a file."),
        click.option("--out-dir", type=click.Path(file_okay=False), default="runs/out",
                     show_default=True),
        click.option("--seed", type=int, default=0, show_default=True),
        click.option("--rtol", type=float, help="Integrator relative tolerance."),
        click.option("--atol", type=float, help="Integrator absolute tolerance."),
        click.option("--flux-convention", type=click.Choice(["dimensional", "paper-literal"])),
        click.option("--localization", help="'off' or 'halfwidth N'."),
    ]
    for opt in reversed(opts):
        f = opt(f)
    return f


def _load(scenario_path, builtin_name, rtol=None, atol=None, flux_convention=None,
          localization=None, **calib) -> tuple[dict, Realized]:
    if (scenario_path is None) == (builtin_name is None):
        raise click.UsageError("give exactly one of --scenario or --builtin")
    try:
        scn = load_scenario(scenario_path) if scenario_path else builtin(builtin_name)
    except (ScenarioError, OSError) as exc:
        raise click.ClickException(str(exc)) from exc
    scn = copy.deepcopy(scn)
    integ = scn.setdefault("integrator", {})
    if rtol is not None:
        integ["rtol"] = rtol
    if atol is not None:
        integ["atol"] = atol
        integ["atol_sens"] = atol
    if flux_convention is not None:
        scn.setdefault("flux", {})["convention"] = flux_convention
    loc = _localization(localization)
    if loc is not None:
        scn["localization"] = {"halfwidth": None if loc == "off" else loc}
    cal = scn.setdefault("calibration", {})
    for key, val in calib.items():
        if val is not None:
            cal[key] = val
    try:
        return scn, realize(scn)
    except (ScenarioError, OSError, ValueError) as exc:
        raise click.ClickException(str(exc)) from exc


def _out(out_dir) -> Path:
    p = Path(out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _scheme_name(R: Realized, scheme: str | None) -> str:
    schemes = R.scenario["observation"].get("schemes") or {}
    if scheme is None:
        if not schemes:
            raise click.UsageError("scenario defines no observation schemes")
        scheme = next(iter(schemes))
    return scheme


def _latents(R: Realized, spec: str) -> np.ndarray:
    if spec == "truth":
        return R.truth
    if spec == "prior":
        return R.prior()
    try:
        vals = [float(v) for v in spec.split(",")]
    except ValueError as exc:
        raise click.BadParameter("use truth, prior, or comma-separated values",
                                 param_hint="--latents") from exc
    z = np.asarray(vals)
    if z.size == 1:
        z = np.full(R.layout.n_groups, z[0])
    if z.size != R.layout.n_groups:
        raise click.BadParameter(f"need {R.layout.n_groups} values, got {z.size}",
                                 param_hint="--latents")
    return z


def _observations(R: Realized, scheme_name: str, seed: int, noiseless: bool, rain=None):
    try:
        return R.observations(scheme_name, rain, seed, noiseless)
    except IntegrationError as exc:
        raise click.ClickException(f"synthesizing observations failed: {exc}") from exc


def _depth_raster(R: Realized, h: np.ndarray) -> np.ndarray:
    out = np.full((R.field.rows, R.field.cols), np.nan)
    active = R.field.index_grid >= 0
    out[active] = h[R.field.index_grid[active]]
    return out


# --------------------------------------------------------------------------
# commands

@click.group()
@click.option("--log-level", default="warning", show_default=True,
              type=click.Choice(["debug", "info", "warning", "error"]))
def main(log_level):
    """Cell-based flood model with gradient-based edge calibration."""
    logging.basicConfig(level=getattr(logging, log_level.upper()),
                        format="%(levelname)s %(name)s: %(message)s")


@main.command("simulate")
@scenario_options
@click.option("--rain", help="Rain name from the scenario (default: training rain).")
@click.option("--latents", default="truth", show_default=True,
              help="truth, prior, or comma-separated values.")
@click.option("--interval", type=float, default=60.0, show_default=True,
              help="Output sampling interval in seconds.")
@click.option("--horizon", type=float, help="End time (default: scenario horizon).")
@click.option("--svg/--no-svg", default=False, help="Depth-field SVG at each sample time.")
def cmd_simulate(scenario_path, builtin_name, out_dir, seed, rtol, atol, flux_convention,
                 localization, rain, latents, interval, horizon, svg):
    """Forward solve; writes the depth trajectory and a volume balance."""
    t0 = time.perf_counter()
    scn, R = _load(scenario_path, builtin_name, rtol, atol, flux_convention, localization)
    out = _out(out_dir)
    z = _latents(R, latents)
    T = float(horizon or scn["observation"]["horizon"])
    times = interval * np.arange(1, int(np.floor(T / interval + 1e-9)) + 1)
    if times.size == 0 or times[-1] < T:
        times = np.append(times, T)
    forcing = R.forcing(rain)
    res = simulate(R.field, R.layout, z, forcing, (0.0, T), times, R.integrator(),
                   params=R.flux_params())
    man = RunManifest(scn["name"], "simulate", config_hash(scn, rain, latents, interval, T),
                      seed, integrator_stats=res.trajectory.stats)
    man.add(fio.write_trajectory(out / "trajectory.csv", res.trajectory.times,
                                 res.trajectory.states))
    balance = {
        "rain_volume_m3": res.rain_volume,
        "initial_volume_m3": res.initial_volume,
        "final_volume_m3": res.final_volume,
        "relative_balance_error": res.balance_error,
        "infiltration_capacity": float(scn["forcing"].get("infiltration_capacity") or 0.0),
        "end_time_s": T,
    }
    bpath = out / "volume_balance.json"
    bpath.write_text(json.dumps(balance, indent=2) + "\n")
    man.add(bpath)
    if svg:
        for k, t in enumerate(res.trajectory.times):
            p = out / f"depth_t{int(round(t)):06d}.svg"
            p.write_text(fio.depth_field_svg(_depth_raster(R, res.trajectory.states[k]),
                                             f"depth at t={t:g} s"))
            man.add(p)
    man.wall_clock = time.perf_counter() - t0
    man.write(out)
    click.echo(f"rain volume {res.rain_volume:.6g} m3, stored {res.final_volume:.6g} m3, "
               f"relative balance error {res.balance_error:.3e}")


@main.command("observe")
@scenario_options
@click.option("--scheme", help="Observation scheme name.")
@click.option("--rain", help="Rain name (default: training rain).")
@click.option("--noiseless/--noisy", default=True, show_default=True)
def cmd_observe(scenario_path, builtin_name, out_dir, seed, rtol, atol, flux_convention,
                localization, scheme, rain, noiseless):
    """Synthesize twin observations from the scenario's true latents."""
    t0 = time.perf_counter()
    scn, R = _load(scenario_path, builtin_name, rtol, atol, flux_convention, localization)
    out = _out(out_dir)
    name = _scheme_name(R, scheme)
    obs = _observations(R, name, seed, noiseless, rain)
    obs.meta.update({"scenario": scn["name"], "rain": rain or scn["forcing"]["train"]})
    man = RunManifest(scn["name"], "observe", config_hash(scn, name, rain, noiseless), seed)
    man.add(*fio.write_observations(out / "observations.csv", obs))
    man.wall_clock = time.perf_counter() - t0
    man.write(out)
    click.echo(f"{obs.values.size} observations ({len(obs.times)} times x "
               f"{len(obs.points)} points) -> {out / 'observations.csv'}")


@main.command("calibrate")
@scenario_options
@click.option("--scheme", help="Observation scheme name.")
@click.option("--observations", "obs_path", type=click.Path(exists=True, dir_okay=False),
              help="Observation CSV (default: synthesize from truth).")
@click.option("--noiseless/--noisy", default=True, show_default=True)
@click.option("--epochs", type=int)
@click.option("--lr", type=float)
@click.option("--optimizer", type=click.Choice(["adagrad", "rmsprop"]))
@click.option("--prior", "prior_value", type=float, help="Uniform starting value.")
def cmd_calibrate(scenario_path, builtin_name, out_dir, seed, rtol, atol, flux_convention,
                  localization, scheme, obs_path, noiseless, epochs, lr, optimizer, prior_value):
    """Fit the latent values to observations."""
    t0 = time.perf_counter()
    scn, R = _load(scenario_path, builtin_name, rtol, atol, flux_convention, localization,
                   epochs=epochs, lr=lr, optimizer=optimizer)
    out = _out(out_dir)
    name = _scheme_name(R, scheme)
    if obs_path:
        obs = fio.read_observations(Path(obs_path))
    else:
        obs = _observations(R, name, seed, noiseless)
    problem = R.problem(obs)
    z0 = R.prior(prior_value)

    def progress(epoch, z, loss, grad):
        click.echo(f"epoch {epoch:3d}  loss {loss:.6e}")

    report = calibrate(problem, z0, R.calibration_config(), callback=progress)
    truth = np.asarray(scn["latents"].get("truth") or [], dtype=float)
    extra = {"scheme": name, "prior": float(z0[0]) if z0.size else None,
             "n_points": int(len(obs.points))}
    if truth.size == report.estimate.size:
        extra["truth"] = truth.tolist()
        extra["relative_error"] = (np.abs(report.estimate - truth)
                                   / np.where(truth != 0, np.abs(truth), 1.0)).tolist()
    base_n = (scn["grid"].get("manning") or {}).get("default")
    if base_n is not None:
        extra["implied_manning"] = [float(base_n) / v if v > 0 else None
                                    for v in report.estimate]
    test_rains = scn["forcing"].get("test") or []
    if test_rains and truth.size == report.estimate.size:
        report.rmse = _test_rmse(R, obs, truth, report.estimate, test_rains)
        extra["test_rmse"] = report.rmse

    man = RunManifest(scn["name"], "calibrate",
                      config_hash(scn, name, obs_path, noiseless, prior_value), seed)
    man.add(fio.write_report(out / "report.csv", report))
    spath = out / "summary.json"
    spath.write_text(json.dumps(fio.report_summary(report, **extra), indent=2,
                                default=_jsonable) + "\n")
    man.add(spath)
    epochs_axis = np.arange(len(report.losses))
    lp = out / "loss.svg"
    lp.write_text(fio.line_plot_svg({"loss": (epochs_axis, report.losses)}, "training loss",
                                    "epoch", "loss", logy=True))
    its = np.stack(report.iterates)
    series = {f"z{s}": (np.arange(len(its)), its[:, s]) for s in range(its.shape[1])}
    zp = out / "latents.svg"
    zp.write_text(fio.line_plot_svg(series, "latent values", "epoch", "value",
                                    legend=its.shape[1] <= 12))
    man.add(lp, zp)
    man.wall_clock = time.perf_counter() - t0
    man.extra = {"estimate_source": report.estimate_source, "error": report.error}
    man.write(out)
    click.echo(f"estimate ({report.estimate_source}): "
               + ", ".join(f"{v:.6g}" for v in report.estimate[:12])
               + (" ..." if report.estimate.size > 12 else ""))
    if report.error:
        click.echo(f"calibration stopped early: {report.error}", err=True)
        sys.exit(2)


def _test_rmse(R: Realized, obs, truth, estimate, rains) -> dict:
    out = {}
    model_t = None
    for name in rains:
        forcing = R.forcing(name)
        model_t = FloodModel(R.field, R.layout, forcing, R.flux_params())
        ref = simulate(R.field, R.layout, truth, forcing, (0.0, obs.horizon), obs.times,
                       R.integrator(), model=model_t).trajectory.states
        est = simulate(R.field, R.layout, estimate, forcing, (0.0, obs.horizon), obs.times,
                       R.integrator(), model=model_t).trajectory.states
        out[name] = {"points": rmse(ref[:, obs.points], est[:, obs.points]),
                     "field": rmse(ref, est)}
    return out


@main.command("gradcheck")
@scenario_options
@click.option("--scheme", help="Observation scheme name.")
@click.option("--delta", type=float, default=1e-5, show_default=True,
              help="Relative finite-difference step.")
@click.option("--samples", type=int, default=0, show_default=True,
              help="Random components to check (0 = all).")
@click.option("--latents", default="random", show_default=True,
              help="random, truth, prior, or comma-separated values.")
@click.option("--tolerance", type=float, default=1e-3, show_default=True)
def cmd_gradcheck(scenario_path, builtin_name, out_dir, seed, rtol, atol, flux_convention,
                  localization, scheme, delta, samples, latents, tolerance):
    """Compare sensitivity gradients with central differences."""
    t0 = time.perf_counter()
    if scenario_path is None and builtin_name is None:
        builtin_name = "twin5"
    scn, R = _load(scenario_path, builtin_name, rtol, atol, flux_convention, localization)
    out = _out(out_dir)
    name = _scheme_name(R, scheme)
    obs = _observations(R, name, seed, True)
    problem = R.problem(obs)
    rng = np.random.default_rng(seed)
    w = R.layout.n_groups
    z = rng.uniform(0.3, 2.0, w) if latents == "random" else _latents(R, latents)
    comps = None
    if 0 < samples < w:
        comps = np.sort(rng.choice(w, samples, replace=False))
    gc = gradient_check(problem, z, delta, comps)
    idx = range(w) if comps is None else comps
    man = RunManifest(scn["name"], "gradcheck", config_hash(scn, name, delta, samples, latents),
                      seed)
    rows = [(int(s), float(z[s]), a, f, r) for s, a, f, r in
            zip(idx, gc.adjoint, gc.finite_difference, gc.rel_error)]
    man.add(fio.write_csv(out / "gradcheck.csv",
                          ["component", "z", "adjoint", "finite_difference", "rel_error"], rows))
    man.wall_clock = time.perf_counter() - t0
    man.extra = {"max_rel_error": gc.max_rel_error, "tolerance": tolerance}
    man.write(out)
    for row in rows:
        click.echo("z[%d]=%.4g  adjoint % .10e  fd % .10e  rel %.2e" % row)
    click.echo(f"max relative error {gc.max_rel_error:.3e} (tolerance {tolerance:g})")
    if not gc.max_rel_error <= tolerance:
        sys.exit(1)


@main.command("report")
@click.argument("run_dirs", nargs=-1, type=click.Path(exists=True, file_okay=False))
@click.option("--out-dir", type=click.Path(file_okay=False), default="runs/report",
              show_default=True)
def cmd_report(run_dirs, out_dir):
    """Tabulate estimates and relative errors across calibration runs."""
    t0 = time.perf_counter()
    if not run_dirs:
        raise click.UsageError("give at least one calibration run directory")
    out = _out(out_dir)
    rows = []
    for d in run_dirs:
        spath = Path(d) / "summary.json"
        if not spath.exists():
            raise click.ClickException(f"{d}: no summary.json (not a calibrate run?)")
        s = json.loads(spath.read_text())
        truth = s.get("truth") or [None] * len(s["estimate"])
        rel = s.get("relative_error") or [None] * len(s["estimate"])
        mann = s.get("implied_manning") or [None] * len(s["estimate"])
        for k, est in enumerate(s["estimate"]):
            rows.append([Path(d).name, s.get("scheme", ""), s.get("prior"), s.get("n_points"),
                         k, truth[k], est, rel[k], mann[k], s["estimate_source"]])
    header = ["run", "scheme", "prior", "points", "latent", "truth", "posterior",
              "relative_error", "manning", "estimate_source"]
    csv_rows = [["" if v is None else v for v in r] for r in rows]
    man = RunManifest("report", "report", config_hash(list(run_dirs)), None)
    man.add(fio.write_csv(out / "report.csv", header, csv_rows))
    man.wall_clock = time.perf_counter() - t0
    man.write(out)
    click.echo("  ".join(f"{h:>14s}" for h in header[1:]))
    for r in rows:
        cells = []
        for v in r[1:]:
            if isinstance(v, float):
                cells.append(f"{v:14.6g}")
            else:
                cells.append(f"{'' if v is None else v!s:>14s}")
        click.echo("  ".join(cells))


@main.command("show-scenario")
@click.option("--builtin", "builtin_name", required=True,
              type=click.Choice(["case1", "case2-twin", "twin5"]))
def cmd_show(builtin_name):
    """Print a built-in scenario as YAML (a starting point for custom files)."""
    click.echo(dump_scenario(builtin(builtin_name)), nl=False)


if __name__ == "__main__":
    main()
