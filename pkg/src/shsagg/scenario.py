"""
Batch demand-response experiments: configs, pipelines, comparisons, CSV.

A scenario is described by a single YAML file and runs the same
experiment through both pipelines: Monte Carlo over the sampled
population, and the weighted density solver over its clustered
reduction.  The two power series are then compared over a declared
window and everything lands in plot-ready CSV plus a JSON report.

Config schema (``schema_version: 1``), all keys optional unless noted::

    schema_version: 1
    name: setback-demo          # free-form label
    kind: setback               # setback | price | pev
    family: hvac                # hvac | pev
    n_loads: 2000               # population size N, >= 1
    n_clusters: 10              # cluster count for the density pipeline
    horizon: 8.0                # hours, > 0
    dt: 1.0e-3                  # Monte Carlo step, hours
    sample_dt: 5.0e-3           # power sampling period, hours
    output_dt: 5.0e-3           # density-solver power output period
    burn_in: 2.0                # start of the default comparison window
    window: [2.0, 8.0]          # comparison window; default [burn_in, horizon]
    events:                     # control signal: [time, value] pairs,
      - [3.0, 1.0]              # strictly increasing times inside
      - [6.0, 0.0]              # (0, horizon)
    seeds:
      sampling: 11              # parameter draws
      clustering: 12            # cluster seeding
      simulation: 13            # trajectory noise and initial states
    grid: {nx1: 160, nx2: 120}  # density-solver cells per block
    distribution:               # parameter population
      preset: default           # default (heterogeneous) | point
      spread: 0.2               # relative half-width on thermal constants
      setpoint_range: [70, 78]
      sigma0: 0.3               # temperature noise, degF/sqrt(h)
      overrides:                # per-coordinate Coordinate specs
        hazard_off: {kind: point, value: 0.0}
        u_set: {kind: uniform, lo: 70, hi: 78}
    init:                       # initial-state distribution
      kind: band_uniform        # band_uniform | uniform_box | point
      on_fraction: 0.5
    tolerances:
      rms_rel_err: 0.05
      mass_drift: 1.0e-3
      rebound_rel_err: 0.15
    out_dir: runs/setback       # optional; omit for in-memory runs

Unknown keys anywhere in the file are rejected by name.  Runs with
identical configs are reproducible down to the output bytes; the JSON
report additionally carries wall-clock runtimes, which are the one
intentionally non-deterministic record.
"""
from __future__ import annotations

import json
import math
import time as _time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from .model import HybridState, OFF, ON
from .mc import (ControlSchedule, PopulationResult, PopulationState,
                 PowerSeries, simulate_population)
from .hetero import (ClusterSet, Coordinate, ParameterDistribution,
                     default_hvac_distribution, kmeans, models_from_samples,
                     sample_parameters, save_clusters)
from .pde import (GridSpec, SolveResult, band_uniform_density,
                  box_uniform_density, cell_density, solve)

__all__ = [
    "ScenarioConfig", "ComparisonReport",
    "run_setback", "run_price_response", "run_pev", "run_scenario",
    "run_mc_pipeline", "run_pde_pipeline", "compare_series",
    "settling_values", "rebound_period",
    "write_power_csv", "write_states_csv", "write_density_csv",
    "write_report",
]

SCHEMA_VERSION = 1

_TOLERANCE_DEFAULTS = {
    "rms_rel_err": 0.05,
    "mass_drift": 1e-3,
    "rebound_rel_err": 0.15,
}

_SEED_DEFAULTS = {"sampling": 11, "clustering": 12, "simulation": 13}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _reject_unknown(mapping: dict, allowed, where: str):
    for key in mapping:
        if key not in allowed:
            raise ValueError(f"unknown config key {where}{key!r}")


def _parse_coordinate(name: str, spec) -> Coordinate:
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ValueError(f"override {name!r} must be a mapping with a 'kind'")
    kind = spec["kind"]
    if kind == "point":
        _reject_unknown(spec, {"kind", "value"}, f"distribution.overrides.{name}.")
        return Coordinate.point(float(spec["value"]))
    if kind == "uniform":
        _reject_unknown(spec, {"kind", "lo", "hi"}, f"distribution.overrides.{name}.")
        return Coordinate.uniform(float(spec["lo"]), float(spec["hi"]))
    if kind == "choice":
        _reject_unknown(spec, {"kind", "values"}, f"distribution.overrides.{name}.")
        return Coordinate.choice([float(v) for v in spec["values"]])
    raise ValueError(f"override {name!r} has unknown kind {kind!r}")


def _parse_distribution(spec: Optional[dict], family: str) -> ParameterDistribution:
    spec = dict(spec or {})
    _reject_unknown(spec, {"preset", "spread", "setpoint_range", "sigma0",
                           "overrides"}, "distribution.")
    preset = spec.get("preset", "default" if family == "hvac" else "point")
    if preset == "default" and family == "hvac":
        dist = default_hvac_distribution(
            spread=float(spec.get("spread", 0.2)),
            setpoint_range=tuple(spec.get("setpoint_range", (70.0, 78.0))),
            sigma0=float(spec.get("sigma0", 0.0)))
    elif preset == "point":
        coords = {}
        if "sigma0" in spec and family == "hvac":
            coords["sigma0"] = Coordinate.point(float(spec["sigma0"]))
        dist = ParameterDistribution(family, coords)
    else:
        raise ValueError(f"unknown config key distribution.preset={preset!r}")
    for name, ov in (spec.get("overrides") or {}).items():
        dist.coords[name] = _parse_coordinate(name, ov)
    # re-run the family/coordinate validation with the overrides in place
    return ParameterDistribution(dist.family, dist.coords)


_INIT_DEFAULTS = {
    "hvac": {"kind": "band_uniform", "on_fraction": 0.5},
    "pev": {"kind": "uniform_box", "mode": 0,
            "x1": [1.0, 3.0], "x2": [0.5, 1.5]},
}


def _validate_init(spec: dict, family: str) -> dict:
    kind = spec.get("kind")
    if kind == "band_uniform":
        if family != "hvac":
            raise ValueError("init.kind=band_uniform needs family hvac")
        _reject_unknown(spec, {"kind", "on_fraction"}, "init.")
        frac = float(spec.get("on_fraction", 0.5))
        if not 0.0 <= frac <= 1.0:
            raise ValueError(f"init.on_fraction={frac} outside [0, 1]")
        return {"kind": kind, "on_fraction": frac}
    if kind == "uniform_box":
        _reject_unknown(spec, {"kind", "mode", "x1", "x2"}, "init.")
        x1, x2 = [float(v) for v in spec["x1"]], [float(v) for v in spec["x2"]]
        if x1[1] <= x1[0] or x2[1] <= x2[0]:
            raise ValueError("init uniform_box ranges must be increasing")
        return {"kind": kind, "mode": int(spec.get("mode", 0)),
                "x1": x1, "x2": x2}
    if kind == "point":
        _reject_unknown(spec, {"kind", "mode", "x"}, "init.")
        return {"kind": kind, "mode": int(spec.get("mode", 0)),
                "x": [float(v) for v in spec["x"]]}
    raise ValueError(f"unknown config key init.kind={kind!r}")


@dataclass
class ScenarioConfig:
    """Validated description of one batch experiment."""
    name: str = "scenario"
    kind: str = "setback"
    family: str = "hvac"
    n_loads: int = 2000
    n_clusters: int = 10
    horizon: float = 8.0
    dt: float = 1e-3
    sample_dt: float = 5e-3
    output_dt: float = 5e-3
    burn_in: float = 2.0
    window: Optional[tuple] = None
    events: list = field(default_factory=list)
    seeds: dict = field(default_factory=lambda: dict(_SEED_DEFAULTS))
    grid: GridSpec = field(default_factory=GridSpec)
    distribution: ParameterDistribution = None
    init: dict = None
    tolerances: dict = field(default_factory=lambda: dict(_TOLERANCE_DEFAULTS))
    out_dir: Optional[str] = None

    def __post_init__(self):
        if self.distribution is None:
            self.distribution = _parse_distribution(None, self.family)
        if self.init is None:
            self.init = dict(_INIT_DEFAULTS[self.family])
        self.validate()

    def validate(self):
        if self.kind not in ("setback", "price", "pev"):
            raise ValueError(f"unknown config key kind={self.kind!r}")
        if self.family not in ("hvac", "pev"):
            raise ValueError(f"unknown config key family={self.family!r}")
        if self.horizon <= 0.0:
            raise ValueError(f"horizon={self.horizon} must be positive")
        if self.n_loads < 1:
            raise ValueError(f"n_loads={self.n_loads} must be >= 1")
        if self.n_clusters < 1:
            raise ValueError(f"n_clusters={self.n_clusters} must be >= 1")
        times = [t for t, _ in self.events]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("events must be strictly time-ordered")
        if any(not 0.0 < t < self.horizon for t in times):
            raise ValueError("event times must lie inside (0, horizon)")
        if self.window is not None:
            w0, w1 = self.window
            if not 0.0 <= w0 < w1 <= self.horizon:
                raise ValueError(f"window={self.window} outside the run span")
        for key in self.seeds:
            if key not in _SEED_DEFAULTS:
                raise ValueError(f"unknown config key seeds.{key!r}")
        for key in self.tolerances:
            if key not in _TOLERANCE_DEFAULTS:
                raise ValueError(f"unknown config key tolerances.{key!r}")
        self.init = _validate_init(self.init, self.family)

    @property
    def compare_window(self) -> tuple:
        return self.window if self.window is not None \
            else (min(self.burn_in, self.horizon / 2), self.horizon)

    @property
    def schedule(self) -> ControlSchedule:
        return ControlSchedule.from_events(self.events)

    @classmethod
    def from_dict(cls, raw: dict) -> "ScenarioConfig":
        raw = dict(raw)
        version = raw.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version={version}")
        allowed = {"name", "kind", "family", "n_loads", "n_clusters",
                   "horizon", "dt", "sample_dt", "output_dt", "burn_in",
                   "window", "events", "seeds", "grid", "distribution",
                   "init", "tolerances", "out_dir"}
        _reject_unknown(raw, allowed, "")
        kw = {}
        for key in ("name", "kind", "family", "out_dir"):
            if key in raw:
                kw[key] = raw[key]
        for key in ("n_loads", "n_clusters"):
            if key in raw:
                kw[key] = int(raw[key])
        for key in ("horizon", "dt", "sample_dt", "output_dt", "burn_in"):
            if key in raw:
                kw[key] = float(raw[key])
        if raw.get("window") is not None:
            kw["window"] = tuple(float(v) for v in raw["window"])
        if "events" in raw:
            kw["events"] = [(float(t), float(v)) for t, v in raw["events"]]
        if "seeds" in raw:
            seeds = dict(_SEED_DEFAULTS)
            seeds.update({k: int(v) for k, v in raw["seeds"].items()})
            kw["seeds"] = seeds
        if "grid" in raw:
            _reject_unknown(raw["grid"], {"nx1", "nx2"}, "grid.")
            kw["grid"] = GridSpec(**{k: int(v) for k, v in raw["grid"].items()})
        if "tolerances" in raw:
            tol = dict(_TOLERANCE_DEFAULTS)
            tol.update({k: float(v) for k, v in raw["tolerances"].items()})
            kw["tolerances"] = tol
        family = kw.get("family", "hvac")
        kw["distribution"] = _parse_distribution(raw.get("distribution"), family)
        if "init" in raw:
            kw["init"] = dict(raw["init"])
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "ScenarioConfig":
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
        if not isinstance(raw, dict):
            raise ValueError(f"config file {path} is not a mapping")
        return cls.from_dict(raw)

    def override_seeds(self, base: int):
        """Single-knob seed replacement: sampling, clustering, simulation
        become base, base+1, base+2."""
        self.seeds = {"sampling": base, "clustering": base + 1,
                      "simulation": base + 2}


# ---------------------------------------------------------------------------
# comparison metrics
# ---------------------------------------------------------------------------

@dataclass
class ComparisonReport:
    """Head-to-head summary of two power series plus run bookkeeping."""
    rms_relative_error: float
    max_relative_error: float
    window: tuple
    settling: list = field(default_factory=list)
    rebound: list = field(default_factory=list)
    mass_log: dict = field(default_factory=dict)
    runtime: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)
    passed: Optional[bool] = None

    def __post_init__(self):
        if self.rms_relative_error < 0.0 or self.max_relative_error < 0.0:
            raise ValueError("relative errors cannot be negative")

    def evaluate(self, tolerances: dict) -> bool:
        """Apply tolerances and set `passed`; honesty over optimism, any
        recorded breach fails the run even though the series exist."""
        self.tolerances = dict(tolerances)
        ok = self.rms_relative_error <= tolerances["rms_rel_err"]
        drift = self.mass_log.get("max_mass_drift", 0.0)
        ok = ok and drift <= tolerances["mass_drift"]
        for entry in self.rebound:
            if entry.get("rel_diff") is None:
                continue
            ok = ok and entry["rel_diff"] <= tolerances["rebound_rel_err"]
        self.passed = bool(ok)
        return self.passed

    def to_dict(self) -> dict:
        d = asdict(self)
        d["window"] = list(self.window)
        return _plain(d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    return obj


def compare_series(a: PowerSeries, b: PowerSeries, window=None,
                   floor_frac: float = 0.01) -> ComparisonReport:
    """Relative errors of `a` against the reference `b` over `window`.

    Both series are linearly resampled onto the coarser of the two time
    grids restricted to the window.  Denominators are floored at
    `floor_frac` of the reference's mean magnitude so near-zero
    reference samples cannot blow up the quotient.
    """
    lo = max(a.times[0], b.times[0])
    hi = min(a.times[-1], b.times[-1])
    if window is not None:
        lo, hi = max(lo, window[0]), min(hi, window[1])
    if hi <= lo:
        raise ValueError("empty comparison window")
    step_a = float(np.median(np.diff(a.times))) if len(a.times) > 1 else np.inf
    step_b = float(np.median(np.diff(b.times))) if len(b.times) > 1 else np.inf
    coarse = a if step_a >= step_b else b
    sel = (coarse.times >= lo - 1e-12) & (coarse.times <= hi + 1e-12)
    grid = coarse.times[sel]
    if len(grid) == 0:
        raise ValueError("empty comparison window")
    av = np.interp(grid, a.times, a.values)
    bv = np.interp(grid, b.times, b.values)
    floor = floor_frac * float(np.mean(np.abs(bv)))
    rel = (av - bv) / np.maximum(np.abs(bv), max(floor, 1e-300))
    return ComparisonReport(
        rms_relative_error=float(np.sqrt(np.mean(rel ** 2))),
        max_relative_error=float(np.max(np.abs(rel))),
        window=(float(lo), float(hi)))


def settling_values(series: PowerSeries, event_times: Sequence[float],
                    horizon: float, width: float = 0.5,
                    gap: float = 0.05) -> list:
    """Mean power over the tail of every inter-event segment.

    The averaging window ends `gap` before the next event (the series
    sample at an event instant already reflects the switch) and spans at
    most `width` hours.
    """
    bounds = [0.0] + [t for t in event_times if 0.0 < t < horizon] + [horizon]
    out = []
    for seg_a, seg_b in zip(bounds[:-1], bounds[1:]):
        w1 = seg_b - gap if seg_b < horizon else seg_b
        w0 = max(seg_a, w1 - width)
        if w1 <= w0:
            continue
        w = series.window(w0, w1)
        out.append({"segment": (float(seg_a), float(seg_b)),
                    "window": (float(w0), float(w1)),
                    "mean_kw": float(np.mean(w.values))})
    return out


def rebound_period(series: PowerSeries, t_start: float, t_end: float,
                   smooth: float = 0.06, min_corr: float = 0.1) -> Optional[float]:
    """Period of the damped power oscillation following an event.

    Measured as the lag of the first local maximum of the sample
    autocorrelation of the detrended, boxcar-smoothed window: peak
    picking on the raw curve is brittle once the ringing decays into
    sampling noise, while the autocorrelation pools every cycle in the
    window.  Returns None when no oscillation stands out (first
    autocorrelation maximum below `min_corr`).
    """
    from scipy.signal import find_peaks

    w = series.window(t_start, t_end)
    if len(w.times) < 8:
        raise ValueError("rebound window too short")
    step = float(np.median(np.diff(w.times)))
    n = max(1, int(round(smooth / step)))
    n += 1 - n % 2
    v = np.convolve(w.values, np.ones(n) / n, mode="same")
    margin = n // 2
    v = v[margin:len(v) - margin]
    if len(v) < 8 or v.max() <= v.min():
        return None
    # remove the relaxation trend so the correlation sees the ringing only
    k = max(3, 2 * n + 1)
    pad = np.concatenate([np.full(k // 2, v[0]), v, np.full(k // 2, v[-1])])
    trend = np.convolve(pad, np.ones(k) / k, mode="valid")
    r = v - trend
    if not np.any(r):
        return None
    acf = np.correlate(r, r, mode="full")[len(r) - 1:]
    acf /= acf[0]
    peaks, props = find_peaks(acf, height=min_corr)
    if len(peaks) == 0:
        return None
    return float(peaks[0] * step)


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------

def _draw_initial_states(cfg: ScenarioConfig, models: list) -> list:
    """Initial hybrid states, one per load, from the config's init spec.

    Draw order per load is fixed (continuous coordinates first, then the
    mode coin) so results never depend on dict ordering.
    """
    rng = np.random.default_rng(cfg.seeds["simulation"])
    spec = cfg.init
    inits = []
    for mdl in models:
        if spec["kind"] == "band_uniform":
            al = mdl.alpha
            lo, hi = al.u_set - al.deadband, al.u_set + al.deadband
            x = rng.uniform(lo, hi, size=2)
            q = ON if rng.random() < spec["on_fraction"] else OFF
            inits.append(HybridState(q, x))
        elif spec["kind"] == "uniform_box":
            x = np.array([rng.uniform(*spec["x1"]), rng.uniform(*spec["x2"])])
            inits.append(HybridState(spec["mode"], x))
        else:
            inits.append(HybridState(spec["mode"],
                                     np.array(spec["x"], dtype=float)))
    return inits


def _pde_init_builder(cfg: ScenarioConfig):
    spec = cfg.init
    if spec["kind"] == "band_uniform":
        return lambda g: band_uniform_density(g, spec["on_fraction"])
    if spec["kind"] == "uniform_box":
        return lambda g: box_uniform_density(g, spec["mode"],
                                             spec["x1"], spec["x2"])
    return lambda g: cell_density(g, spec["mode"], spec["x"])


def _is_point_mass(dist: ParameterDistribution) -> bool:
    return all(lo == hi for lo, hi in dist.support().values())


def run_mc_pipeline(cfg: ScenarioConfig):
    """Sample the population and simulate it; returns (series, result)."""
    t0 = _time.perf_counter()
    samples = sample_parameters(cfg.distribution, cfg.n_loads,
                                cfg.seeds["sampling"])
    models = models_from_samples(samples, cfg.family)
    inits = _draw_initial_states(cfg, models)
    result = simulate_population(
        models, inits, cfg.schedule, horizon=cfg.horizon, dt=cfg.dt,
        seed=cfg.seeds["simulation"], sample_dt=cfg.sample_dt,
        snapshot_times=(cfg.horizon,))
    elapsed = _time.perf_counter() - t0
    result.power.meta["runtime_s"] = elapsed
    return result.power, result


def _scaled(series: PowerSeries, n_loads: int) -> PowerSeries:
    meta = dict(series.meta)
    meta["n_loads"] = n_loads
    return PowerSeries(series.times.copy(), series.values * n_loads,
                       source=series.source, meta=meta)


def run_pde_pipeline(cfg: ScenarioConfig):
    """Cluster the sampled population and solve the density equations.

    Returns (series, solve_result, cluster_set); the series is scaled to
    the full population (kW of N loads) so it compares directly with the
    Monte Carlo output.  A point-mass parameter distribution collapses
    to a single cluster regardless of the configured count.
    """
    t0 = _time.perf_counter()
    init = _pde_init_builder(cfg)
    if cfg.family == "hvac":
        samples = sample_parameters(cfg.distribution, cfg.n_loads,
                                    cfg.seeds["sampling"])
        n_c = 1 if _is_point_mass(cfg.distribution) else cfg.n_clusters
        clusters = kmeans(samples, n_c, cfg.seeds["clustering"])
        res = solve(clusters, init, cfg.horizon, events=cfg.schedule,
                    grid_spec=cfg.grid, output_dt=cfg.output_dt,
                    tol_mass=cfg.tolerances["mass_drift"])
    else:
        if not _is_point_mass(cfg.distribution):
            raise ValueError(
                "the density pipeline needs a point-mass distribution for "
                "family 'pev'; clustering covers hvac populations only")
        clusters = None
        model = models_from_samples(
            sample_parameters(cfg.distribution, 1, cfg.seeds["sampling"]),
            cfg.family)[0]
        res = solve(model, init, cfg.horizon, events=cfg.schedule,
                    grid_spec=cfg.grid, output_dt=cfg.output_dt,
                    tol_mass=cfg.tolerances["mass_drift"])
    series = _scaled(res.power, cfg.n_loads)
    series.meta["runtime_s"] = _time.perf_counter() - t0
    return series, res, clusters


def _mass_log(res: SolveResult) -> dict:
    """Conservation bookkeeping of a solve, per cluster when applicable."""
    runs = res.per_cluster if res.per_cluster else [res]
    entries = []
    for k, r in enumerate(runs):
        d = r.diagnostics
        entries.append({
            "cluster": k,
            "n_steps": int(d["n_steps"]),
            "max_mass_drift": float(d["max_mass_drift"]),
            "escaped_mass": float(d["escaped"]),
            "completed_mass": float(d.get("completed", 0.0)),
            "clipped_mass": float(d["clipped"]),
        })
    return {
        "per_cluster": entries,
        "max_mass_drift": max(e["max_mass_drift"] for e in entries),
        "clipped_mass": max(e["clipped_mass"] for e in entries),
    }


def _run_comparison(cfg: ScenarioConfig, mc_series, pde_series,
                    pde_res) -> ComparisonReport:
    report = compare_series(pde_series, mc_series, cfg.compare_window)
    event_times = [t for t, _ in cfg.events]
    mc_settle = settling_values(mc_series, event_times, cfg.horizon)
    pde_settle = settling_values(pde_series, event_times, cfg.horizon)
    for m, p in zip(mc_settle, pde_settle):
        report.settling.append({
            "segment": m["segment"], "window": m["window"],
            "mc_kw": m["mean_kw"], "pde_kw": p["mean_kw"],
        })
    for t_ev in event_times:
        nxt = min([t for t in event_times if t > t_ev] + [cfg.horizon])
        t_end = min(t_ev + 2.5, nxt)
        per_mc = rebound_period(mc_series, t_ev, t_end)
        per_pde = rebound_period(pde_series, t_ev, t_end)
        rel = None
        if per_mc and per_pde:
            rel = abs(per_pde - per_mc) / per_mc
        report.rebound.append({
            "event_time": t_ev, "mc_period_h": per_mc,
            "pde_period_h": per_pde, "rel_diff": rel,
        })
    report.mass_log = _mass_log(pde_res)
    report.runtime = {
        "mc_s": float(mc_series.meta.get("runtime_s", 0.0)),
        "pde_s": float(pde_series.meta.get("runtime_s", 0.0)),
    }
    report.evaluate(cfg.tolerances)
    return report


def _write_outputs(cfg, out_dir, mc_series, mc_result, pde_series, pde_res,
                   clusters, report):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_power_csv(mc_series, out / "power_mc.csv")
    write_power_csv(pde_series, out / "power_pde.csv")
    write_compare_csv(mc_series, pde_series, cfg.compare_window,
                      out / "power_compare.csv")
    if mc_result.snapshots:
        write_states_csv(mc_result.snapshots[-1], out / "states_mc_final.csv")
    runs = pde_res.per_cluster if pde_res.per_cluster else [pde_res]
    for k, r in enumerate(runs):
        fld = r.diagnostics["final_field"]
        tag = f"_k{k}" if len(runs) > 1 else ""
        write_density_csv(fld, out / f"density_pde_final{tag}.csv")
        with open(out / f"grid_pde{tag}.json", "w", encoding="utf-8") as fh:
            json.dump(fld.grid.describe(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    if clusters is not None:
        save_clusters(clusters, out / "clusters.json")
    write_report(report, out / "report.json")


def run_setback(config: ScenarioConfig, out_dir=None):
    """Thermostat-setback experiment through both pipelines.

    The event values are setpoint shifts in degF applied to the whole
    population (the per-load signal map defaults to the identity).
    Returns (mc_series, pde_series, report); writes CSVs and the report
    when an output directory is configured.
    """
    if config.family != "hvac":
        raise ValueError("setback scenarios need family 'hvac'")
    mc_series, mc_result = run_mc_pipeline(config)
    pde_series, pde_res, clusters = run_pde_pipeline(config)
    report = _run_comparison(config, mc_series, pde_series, pde_res)
    target = out_dir if out_dir is not None else config.out_dir
    if target is not None:
        _write_outputs(config, target, mc_series, mc_result, pde_series,
                       pde_res, clusters, report)
    return mc_series, pde_series, report


def run_price_response(config: ScenarioConfig, out_dir=None):
    """Price-signal experiment: events carry price deviations, mapped to
    per-load setpoint shifts by each load's saturating gain.

    The distribution must declare the map parameters explicitly
    (`price_gain` and `price_cap` coordinates).
    """
    if config.family != "hvac":
        raise ValueError("price scenarios need family 'hvac'")
    for key in ("price_gain", "price_cap"):
        if key not in config.distribution.coords:
            raise ValueError(
                f"price scenarios must declare distribution.overrides.{key}")
    return run_setback(config, out_dir)


def run_pev(config: ScenarioConfig, out_dir=None):
    """Deferrable-charging cohort through both pipelines.

    Besides the power comparison the report carries the charged-through
    fraction (mode-2 mass) of both pipelines on a coarse probe grid.
    """
    if config.family != "pev":
        raise ValueError("pev scenarios need family 'pev'")
    probe_times = [float(t) for t in np.arange(0.5, config.horizon, 0.5)]
    t0 = _time.perf_counter()
    samples = sample_parameters(config.distribution, config.n_loads,
                                config.seeds["sampling"])
    models = models_from_samples(samples, "pev")
    inits = _draw_initial_states(config, models)
    mc_result = simulate_population(
        models, inits, config.schedule, horizon=config.horizon,
        dt=config.dt, seed=config.seeds["simulation"],
        sample_dt=config.sample_dt,
        snapshot_times=tuple(probe_times) + (config.horizon,))
    mc_series = mc_result.power
    mc_series.meta["runtime_s"] = _time.perf_counter() - t0

    if not _is_point_mass(config.distribution):
        raise ValueError(
            "the density pipeline needs a point-mass distribution for "
            "family 'pev'; clustering covers hvac populations only")
    t1 = _time.perf_counter()
    model = models_from_samples(
        sample_parameters(config.distribution, 1, config.seeds["sampling"]),
        "pev")[0]
    pde_res = solve(model, _pde_init_builder(config), config.horizon,
                    events=config.schedule, grid_spec=config.grid,
                    output_dt=config.output_dt,
                    tol_mass=config.tolerances["mass_drift"],
                    snapshot_times=probe_times)
    pde_series = _scaled(pde_res.power, config.n_loads)
    pde_series.meta["runtime_s"] = _time.perf_counter() - t1

    report = _run_comparison(config, mc_series, pde_series, pde_res)
    done = []
    for snap_mc, snap_pde in zip(mc_result.snapshots, pde_res.snapshots):
        done.append({
            "time_h": float(snap_mc.time),
            "mc_done": float(np.mean(snap_mc.modes == 2)),
            "pde_done": float(snap_pde.mode_mass(2)
                              + snap_pde.completed_mass),
        })
    report.extras["done_fraction"] = done
    target = out_dir if out_dir is not None else config.out_dir
    if target is not None:
        _write_outputs(config, target, mc_series, mc_result, pde_series,
                       pde_res, None, report)
    return mc_series, pde_series, report


def run_scenario(config: ScenarioConfig, out_dir=None):
    """Dispatch on the configured experiment kind."""
    runner = {"setback": run_setback, "price": run_price_response,
              "pev": run_pev}[config.kind]
    return runner(config, out_dir)


# ---------------------------------------------------------------------------
# writers
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{x:.6g}"


def write_power_csv(series: PowerSeries, path):
    lines = ["time_hours,power_kw,source"]
    for t, v in zip(series.times, series.values):
        lines.append(f"{_fmt(t)},{_fmt(v)},{series.source}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_power_csv(path) -> PowerSeries:
    times, values, source = [], [], ""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "time_hours,power_kw,source":
            raise ValueError(f"{path}: unexpected header {header!r}")
        for line in fh:
            t, v, source = line.strip().split(",")
            times.append(float(t))
            values.append(float(v))
    return PowerSeries(np.array(times), np.array(values), source=source)


def write_compare_csv(mc: PowerSeries, pde: PowerSeries, window, path):
    lo, hi = window
    sel = (mc.times >= lo - 1e-12) & (mc.times <= hi + 1e-12)
    grid = mc.times[sel]
    pv = np.interp(grid, pde.times, pde.values)
    lines = ["time_hours,mc_kw,pde_kw"]
    for t, a, b in zip(grid, mc.values[sel], pv):
        lines.append(f"{_fmt(t)},{_fmt(a)},{_fmt(b)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_states_csv(state: PopulationState, path):
    """One record per load: index, time, mode and state coordinates."""
    dim = state.states.shape[1]
    cols = ",".join(f"x{i + 1}" for i in range(dim))
    lines = [f"load_index,time_hours,mode,{cols}"]
    for i in range(len(state.modes)):
        xs = ",".join(_fmt(v) for v in state.states[i])
        lines.append(f"{i},{_fmt(state.time)},{int(state.modes[i])},{xs}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_density_csv(fld, path):
    """Cell-center density dump, one row per cell of every component."""
    grid = fld.grid
    lines = ["mode,component,x1,x2,p"]
    for q in grid.modes:
        for c, (_, i0, i1, j0, j1) in enumerate(grid.component_windows(q)):
            x1c = grid.x1_centers[q][i0:i1]
            x2c = grid.x2_centers[q][j0:j1]
            block = fld.data[q][i0:i1, j0:j1]
            for i, x1 in enumerate(x1c):
                for j, x2 in enumerate(x2c):
                    lines.append(f"{q},{c},{_fmt(x1)},{_fmt(x2)},"
                                 f"{_fmt(block[i, j])}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_report(report: ComparisonReport, path):
    Path(path).write_text(report.to_json(), encoding="utf-8")
