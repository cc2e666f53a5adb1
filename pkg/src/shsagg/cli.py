"""
Command-line front end for batch runs.

Every subcommand reads one YAML scenario config and writes CSV or JSON
into the output directory:

    python -m shsagg run-scenario --config cfg.yaml --out runs/demo
    python -m shsagg simulate-mc  --config cfg.yaml --out runs/demo
    python -m shsagg simulate-pde --config cfg.yaml --out runs/demo
    python -m shsagg cluster      --config cfg.yaml --out runs/demo
    python -m shsagg compare      --config cfg.yaml --out runs/demo

`compare` expects power_mc.csv and power_pde.csv already in the output
directory (as written by the simulate commands).  `--seed-override K`
replaces the three config seeds with K, K+1, K+2.  `--verify` re-reads
whatever the command wrote and checks the format invariants.  Exit
status is 0 only when every declared tolerance held.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .hetero import kmeans, sample_parameters, save_clusters
from .scenario import (ScenarioConfig, compare_series, read_power_csv,
                       run_mc_pipeline, run_pde_pipeline, run_scenario,
                       write_density_csv, write_power_csv, write_report,
                       write_states_csv)

EXIT_OK = 0
EXIT_TOLERANCE = 1
EXIT_CONFIG = 2
EXIT_VERIFY = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shsagg",
        description="aggregated-load experiments: Monte Carlo population "
                    "simulation vs the clustered density solver")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, doc in (
            ("simulate-mc", "Monte Carlo pipeline only"),
            ("simulate-pde", "clustered density pipeline only"),
            ("cluster", "sample parameters and write the cluster reduction"),
            ("compare", "compare previously written power series"),
            ("run-scenario", "both pipelines plus the comparison report")):
        p = sub.add_parser(name, help=doc)
        p.add_argument("--config", required=True, help="YAML scenario file")
        p.add_argument("--out", default=None,
                       help="output directory (overrides the config)")
        p.add_argument("--seed-override", type=int, default=None, metavar="K",
                       help="replace the config seeds with K, K+1, K+2")
        p.add_argument("--verify", action="store_true",
                       help="re-read the outputs and check their invariants")
    return parser


def _load_config(args) -> "tuple[ScenarioConfig, Path]":
    cfg = ScenarioConfig.from_file(args.config)
    if args.seed_override is not None:
        cfg.override_seeds(args.seed_override)
    out = args.out if args.out is not None else cfg.out_dir
    if out is None:
        raise ValueError("no output directory: set out_dir in the config "
                         "or pass --out")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def _verify_power_csv(path: Path):
    series = read_power_csv(path)
    if len(series.times) == 0:
        raise AssertionError(f"{path}: no samples")
    if np.any(np.diff(series.times) <= 0.0):
        raise AssertionError(f"{path}: time column not strictly increasing")
    if not np.all(np.isfinite(series.values)):
        raise AssertionError(f"{path}: non-finite power values")
    if np.any(series.values < 0.0):
        raise AssertionError(f"{path}: negative power values")


def _verify_outputs(out: Path):
    """Format invariants of whatever run artifacts are present."""
    checked = 0
    for name in ("power_mc.csv", "power_pde.csv"):
        p = out / name
        if p.exists():
            _verify_power_csv(p)
            checked += 1
    report = out / "report.json"
    if report.exists():
        payload = json.loads(report.read_text(encoding="utf-8"))
        for key in ("rms_relative_error", "max_relative_error", "window"):
            if key not in payload:
                raise AssertionError(f"report.json: missing {key}")
        if payload["rms_relative_error"] < 0.0:
            raise AssertionError("report.json: negative error")
        checked += 1
    if checked == 0:
        raise AssertionError(f"nothing to verify under {out}")


def _cmd_simulate_mc(cfg: ScenarioConfig, out: Path) -> int:
    series, result = run_mc_pipeline(cfg)
    write_power_csv(series, out / "power_mc.csv")
    if result.snapshots:
        write_states_csv(result.snapshots[-1], out / "states_mc_final.csv")
    return EXIT_OK


def _cmd_simulate_pde(cfg: ScenarioConfig, out: Path) -> int:
    series, res, clusters = run_pde_pipeline(cfg)
    write_power_csv(series, out / "power_pde.csv")
    runs = res.per_cluster if res.per_cluster else [res]
    worst = 0.0
    for k, r in enumerate(runs):
        fld = r.diagnostics["final_field"]
        tag = f"_k{k}" if len(runs) > 1 else ""
        write_density_csv(fld, out / f"density_pde_final{tag}.csv")
        with open(out / f"grid_pde{tag}.json", "w", encoding="utf-8") as fh:
            json.dump(fld.grid.describe(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        worst = max(worst, r.diagnostics["max_mass_drift"])
    if clusters is not None:
        save_clusters(clusters, out / "clusters.json")
    return EXIT_OK if worst <= cfg.tolerances["mass_drift"] else EXIT_TOLERANCE


def _cmd_cluster(cfg: ScenarioConfig, out: Path) -> int:
    if cfg.family != "hvac":
        raise ValueError("clustering covers hvac populations only")
    samples = sample_parameters(cfg.distribution, cfg.n_loads,
                                cfg.seeds["sampling"])
    clusters = kmeans(samples, cfg.n_clusters, cfg.seeds["clustering"])
    save_clusters(clusters, out / "clusters.json")
    return EXIT_OK


def _cmd_compare(cfg: ScenarioConfig, out: Path) -> int:
    mc = read_power_csv(out / "power_mc.csv")
    pde = read_power_csv(out / "power_pde.csv")
    report = compare_series(pde, mc, cfg.compare_window)
    report.evaluate(cfg.tolerances)
    write_report(report, out / "report.json")
    return EXIT_OK if report.passed else EXIT_TOLERANCE


def _cmd_run_scenario(cfg: ScenarioConfig, out: Path) -> int:
    _, _, report = run_scenario(cfg, out_dir=out)
    return EXIT_OK if report.passed else EXIT_TOLERANCE


_COMMANDS = {
    "simulate-mc": _cmd_simulate_mc,
    "simulate-pde": _cmd_simulate_pde,
    "cluster": _cmd_cluster,
    "compare": _cmd_compare,
    "run-scenario": _cmd_run_scenario,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg, out = _load_config(args)
    except (ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    status = _COMMANDS[args.command](cfg, out)
    if args.verify:
        try:
            _verify_outputs(out)
        except AssertionError as exc:
            print(f"verification failed: {exc}", file=sys.stderr)
            return EXIT_VERIFY
    return status


if __name__ == "__main__":
    sys.exit(main())
