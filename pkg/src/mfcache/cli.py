"""Batch front end: solve, simulate, and sweep subcommands plus preset listing.

Exit codes: 0 ok, 2 config error, 3 numeric failure (stability bound or
non-convergence), 4 missing dependency artifact.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import RunConfig, load_preset, preset_names
from .errors import (
    CflViolationError,
    ConfigError,
    MfcacheError,
    MissingArtifactError,
    NonConvergenceError,
)
from .gridio import dump_grid, load_grid, write_csv
from .mfg import (
    PolicyField,
    expected_cost,
    hjb_residual,
    initial_density,
    make_lattice,
    solve_mfe,
)
from .policies import IpiModel
from .simulate import replication_seeds, run_experiment


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.TimeoutExpired):
        return "unknown"


def _write_manifest(out_dir: Path, cfg: RunConfig, seeds, t0: float, extra=None) -> None:
    manifest = {
        "config": cfg.doc,
        "config_sha256": cfg.config_hash(),
        "seeds": list(seeds),
        "git_describe": _git_describe(),
        "wall_time_s": round(time.time() - t0, 3),
    }
    if extra:
        manifest.update(extra)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _solve_one(args):
    cfg_doc_hash, name, solver_cfg, lattice_doc, demand_doc, solver_doc = args
    horizon = float(lattice_doc.get("solve_horizon", lattice_doc["horizon"]))
    lat = make_lattice(
        int(lattice_doc["nx"]), int(lattice_doc["nq"]), horizon, solver_cfg
    )
    x_value = float(demand_doc.get("x0", solver_cfg.mean_popularity))
    m0 = initial_density(
        lat,
        q_mean=float(solver_doc["q0_mean"]),
        q_sd=float(solver_doc["q0_sd"]),
        x_mode=solver_doc["x0_mode"],
        x_value=x_value,
        x_sd=float(solver_doc.get("x0_sd", 0.05)),
        cfg=solver_cfg,
    )
    sol = solve_mfe(lat, solver_cfg, m0)
    closure = hjb_residual(lat, sol.value, sol.policy, sol.overlap, solver_cfg, stencil="scheme")
    return name, lat, sol, closure


def cmd_solve(cfg: RunConfig, out_dir: Path, jobs: int = 1) -> dict:
    """Solve the MFE per content and dump surfaces plus summary CSVs."""
    t0 = time.time()
    out_dir.mkdir(parents=True, exist_ok=True)
    lattice_doc = cfg.doc["lattice"]
    tasks = []
    for name, demand_doc, solver_doc in cfg.contents():
        solver_cfg = cfg.solver_config(demand_doc, solver_doc)
        tasks.append((cfg.config_hash(), name, solver_cfg, lattice_doc, demand_doc, solver_doc))

    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_solve_one, tasks))
    else:
        results = [_solve_one(t) for t in tasks]

    info = {}
    for name, lat, sol, closure in results:
        cdir = out_dir / "solve" / name
        cdir.mkdir(parents=True, exist_ok=True)
        dump_grid(cdir / "value", sol.value.values, lat, "value")
        dump_grid(cdir / "density", sol.density.values, lat, "density")
        dump_grid(cdir / "policy", sol.policy.values, lat, "policy")
        write_csv(
            cdir / "iterations.csv",
            ["iteration", "policy_change"],
            [(i + 1, c) for i, c in enumerate(sol.change_history)],
        )
        cell = lat.dx * lat.dq
        report_knots = [
            n for n in range(lat.nt + 1)
            if lat.t_knots[n] <= float(lattice_doc["horizon"]) + 1e-12
        ]
        rows = []
        q = lat.q_centers[None, :]
        for n in report_knots:
            m = sol.density.values[n]
            rows.append(
                (
                    lat.t_knots[n],
                    float((sol.policy.values[n] * m).sum() * cell),
                    sol.overlap[n],
                    float((q * m).sum() * cell),
                )
            )
        write_csv(cdir / "policy_summary.csv", ["t", "mean_policy", "overlap", "mean_q"], rows)
        qrows = []
        for n in report_knots:
            marg = sol.density.values[n].sum(axis=0) * lat.dx * lat.dq
            for j in range(lat.nq):
                qrows.append((lat.t_knots[n], lat.q_centers[j], marg[j] / lat.dq))
        write_csv(cdir / "q_marginal.csv", ["t", "q", "density"], qrows)
        info[name] = {
            "iterations": sol.iterations,
            "expected_cost": expected_cost(sol),
            "scheme_residual": closure,
            "max_mass_drift": sol.density.max_mass_drift,
            "min_density": sol.density.min_density,
            "nt": lat.nt,
        }
    _write_manifest(out_dir, cfg, [], t0, extra={"solve": info})
    return info


def _load_policy_field(out_dir: Path, content: str) -> PolicyField:
    path = out_dir / "solve" / content / "policy"
    if not path.with_suffix(".json").exists():
        raise MissingArtifactError(
            f"mean-field policy grid not found under {path}; run `solve` into the "
            "same output directory first"
        )
    values, lat = load_grid(path)
    return PolicyField(values, lat)


def cmd_simulate(cfg: RunConfig, out_dir: Path, jobs: int = 1, seed=None) -> dict:
    """Run the Monte-Carlo evaluation for every configured policy."""
    t0 = time.time()
    out_dir.mkdir(parents=True, exist_ok=True)
    sim = cfg.sim_config(seed_override=seed)
    kinds = list(cfg.doc["policies"])
    field = _load_policy_field(out_dir, cfg.contents()[0][0]) if "mf" in kinds else None
    ipi_doc = cfg.doc["ipi"]
    ipi = IpiModel(bias=float(ipi_doc["bias"]), sd=float(ipi_doc["sd"]))
    compare = bool(cfg.doc["sim"]["compare_ipi"])

    overlap_rows = []
    results = {}
    for kind in kinds:
        fld = field if kind == "mf" else None
        if compare:
            led_ppi, sum_ppi = run_experiment(sim, kind, IpiModel(), field=fld, jobs=jobs)
            led_ipi, sum_ipi = run_experiment(sim, kind, ipi, field=fld, jobs=jobs)
            for tag, summ in (("ppi", sum_ppi), ("ipi", sum_ipi)):
                write_csv(
                    out_dir / f"lra_{kind}_{tag}.csv",
                    ["t", "mean", "lo", "hi"],
                    zip(summ.t, summ.lra_mean, summ.lra_lo, summ.lra_hi),
                )
            results[kind] = {
                "lra_ppi": float(sum_ppi.lra_mean[-1]),
                "lra_ipi": float(sum_ipi.lra_mean[-1]),
                "increment": float(sum_ipi.lra_mean[-1] - sum_ppi.lra_mean[-1]),
                "barrier_hits": sum(l.barrier_hits for l in led_ppi + led_ipi),
            }
            overlap_rows.append(
                (sim.x0, kind, sum_ppi.overlap_mean, sum_ppi.overlap_lo, sum_ppi.overlap_hi)
            )
        else:
            ledgers, summ = run_experiment(sim, kind, ipi, field=fld, jobs=jobs)
            write_csv(
                out_dir / f"lra_{kind}.csv",
                ["t", "mean", "lo", "hi"],
                zip(summ.t, summ.lra_mean, summ.lra_lo, summ.lra_hi),
            )
            results[kind] = {
                "lra": float(summ.lra_mean[-1]),
                "lra_lo": float(summ.lra_lo[-1]),
                "lra_hi": float(summ.lra_hi[-1]),
                "overlap": summ.overlap_mean,
                "barrier_hits": sum(l.barrier_hits for l in ledgers),
            }
            overlap_rows.append(
                (sim.x0, kind, summ.overlap_mean, summ.overlap_lo, summ.overlap_hi)
            )

    write_csv(out_dir / "overlap.csv", ["x0", "policy", "mean", "lo", "hi"], overlap_rows)
    if compare:
        write_csv(
            out_dir / "increments.csv",
            ["policy", "lra_ppi", "lra_ipi", "increment"],
            [(k, v["lra_ppi"], v["lra_ipi"], v["increment"]) for k, v in results.items()],
        )
    _write_manifest(
        out_dir, cfg, replication_seeds(sim.master_seed, sim.replications), t0,
        extra={"simulate": results},
    )
    return results


def _sanitize(value) -> str:
    return str(value).replace("/", "_")


def cmd_sweep(cfg: RunConfig, out_dir: Path, jobs: int = 1, seed=None,
              key: str = None, values=None) -> list:
    """Solve + simulate once per swept value; merge headline numbers."""
    sweep_doc = cfg.doc.get("sweep", {})
    key = key or sweep_doc.get("key")
    if key is None:
        raise ConfigError("sweep needs a key (flag --key or config sweep.key)")
    if values is None:
        values = sweep_doc.get("values", [])
    if not values:
        print("warning: empty sweep value list; nothing to do", file=sys.stderr)
        return []
    t0 = time.time()
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    merged = []
    for value in values:
        sub = cfg.with_override(key, value)
        subdir = out_dir / f"{key.split('.')[-1]}={_sanitize(value)}"
        solve_info = cmd_solve(sub, subdir, jobs=jobs)
        sim_info = cmd_simulate(sub, subdir, jobs=jobs, seed=seed)
        iters = max(v["iterations"] for v in solve_info.values())
        for kind, res in sim_info.items():
            if "lra" in res:
                rows.append((value, kind, iters, res["lra"], res["lra_lo"],
                             res["lra_hi"], res["overlap"]))
            else:
                rows.append((value, kind, iters, res["lra_ppi"], res["lra_ipi"],
                             res["increment"], 0.0))
        merged.append({"value": value, "solve": solve_info, "simulate": sim_info})
    compare = bool(cfg.doc["sim"]["compare_ipi"])
    header = (
        ["value", "policy", "iterations", "lra_ppi", "lra_ipi", "increment", "unused"]
        if compare
        else ["value", "policy", "iterations", "lra", "lra_lo", "lra_hi", "overlap"]
    )
    write_csv(out_dir / "sweep.csv", header, rows)
    _write_manifest(out_dir, cfg, [], t0, extra={"sweep": {"key": key, "runs": merged}})
    return merged


def _load_config(args) -> RunConfig:
    if args.preset and args.config:
        raise ConfigError("give either --config or --preset, not both")
    if args.preset:
        return load_preset(args.preset)
    if args.config:
        return RunConfig.from_file(args.config)
    raise ConfigError("a config is required: --config PATH or --preset NAME")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfcache",
        description="Mean-field edge caching: solver and Monte-Carlo evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="path to a YAML run configuration")
        p.add_argument("--preset", help="name of a shipped preset")
        p.add_argument("--out", required=True, help="artifact output directory")
        p.add_argument("--jobs", type=int, default=1, help="worker pool size")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")

    add_common(sub.add_parser("solve", help="solve the mean-field equilibrium"))
    add_common(sub.add_parser("simulate", help="Monte-Carlo policy evaluation"))
    sweep = sub.add_parser("sweep", help="solve+simulate over a parameter sweep")
    add_common(sweep)
    sweep.add_argument("--key", help="dotted config key to sweep")
    sweep.add_argument("--values", help="comma-separated numeric values")

    presets = sub.add_parser("presets", help="preset utilities")
    presets.add_argument("action", choices=["list"])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "presets":
            for name in preset_names():
                print(name)
            return 0
        cfg = _load_config(args)
        out_dir = Path(args.out)
        if args.command == "solve":
            info = cmd_solve(cfg, out_dir, jobs=args.jobs)
            for name, rec in info.items():
                print(f"{name}: converged in {rec['iterations']} iterations, "
                      f"expected cost {rec['expected_cost']:.6g}")
        elif args.command == "simulate":
            results = cmd_simulate(cfg, out_dir, jobs=args.jobs, seed=args.seed)
            for kind, rec in results.items():
                if "lra" in rec:
                    print(f"{kind}: final LRA {rec['lra']:.6g} "
                          f"[{rec['lra_lo']:.6g}, {rec['lra_hi']:.6g}]")
                else:
                    print(f"{kind}: LRA increment {rec['increment']:.6g}")
        elif args.command == "sweep":
            values = None
            if args.values:
                values = [float(v) for v in args.values.split(",")]
            cmd_sweep(cfg, out_dir, jobs=args.jobs, seed=args.seed,
                      key=args.key, values=values)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CflViolationError, NonConvergenceError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 4
    except MfcacheError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
