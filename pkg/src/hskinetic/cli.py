"""Command-line entry point: ``hskinetic <subcommand> --config run.toml``."""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
from typing import Any, Sequence

import numpy as np

from . import __version__
from .chaos import GrandCanonicalSpec, sample_ensemble, save_ensemble
from .core import load_config, make_rng, params_from_config
from .dynamics import evolve
from .experiments import (
    Report,
    default_threads,
    run_chaos_scan,
    run_fluctuation_moments,
    run_recollision_scan,
    run_series_vs_particles,
    spec_from_mapping,
)
from .series import SeriesQuery, evaluate_series

SCANS = {
    "scan-chaos": ("chaos", run_chaos_scan, True),
    "scan-recollide": ("recollide", run_recollision_scan, False),
    "scan-fluct": ("fluct", run_fluctuation_moments, True),
    "compare": ("compare", run_series_vs_particles, True),
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hskinetic", description="Hard-sphere kinetic theory laboratory")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("sample", "evolve", "series", *SCANS):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="TOML configuration file")
        s.add_argument("--seed", type=int, default=None, help="override the configured seed")
        s.add_argument("--out", default="out", help="output directory")
        s.add_argument("--format", choices=("csv", "json"), default="csv")
        s.add_argument("--threads", type=int, default=None, help="worker processes (default: all cores)")
    return p


def _write(out: str, name: str, text: str) -> str:
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, name)
    with open(path, "w") as fh:
        fh.write(text)
    return path


def _manifest(args: argparse.Namespace, cfg: dict[str, Any], seed: int | None, files: list[str],
              verdicts: list[dict[str, Any]]) -> dict[str, Any]:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    import scipy

    return {
        "command": args.command,
        "config": os.path.abspath(args.config),
        "config_sha256": hashlib.sha256(blob).hexdigest(),
        "seed": seed,
        "threads": args.threads,
        "versions": {"hskinetic": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__},
        "outputs": files,
        "verdicts": verdicts,
        "passed": all(v["passed"] for v in verdicts),
    }


def _report_files(rep: Report, out: str, stem: str, fmt: str) -> list[str]:
    if fmt == "csv":
        return [_write(out, f"{stem}.csv", rep.to_csv()), _write(out, f"{stem}_summary.json", rep.to_json())]
    return [_write(out, f"{stem}.json", rep.to_json())]


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    cfg = load_config(args.config)
    threads = args.threads or default_threads()
    args.threads = threads
    files: list[str] = []
    verdicts: list[dict[str, Any]] = []

    if args.command in ("sample", "evolve", "series"):
        params, f0, seed = params_from_config(cfg)
        seed = args.seed if args.seed is not None else seed
        run = cfg.get(args.command, {})
        if args.command == "sample":
            spec = GrandCanonicalSpec(params, f0, exclusion=bool(run.get("exclusion", True)))
            ens = sample_ensemble(spec, int(run.get("size", 100)), seed)
            path = os.path.join(args.out, "ensemble.npz")
            os.makedirs(args.out, exist_ok=True)
            save_ensemble(path, ens, spec, seed)
            rows = "config,n_particles\n" + "".join(f"{k},{c.n}\n" for k, c in enumerate(ens))
            files += [path, _write(args.out, "sample.csv", rows)]
        elif args.command == "evolve":
            spec = GrandCanonicalSpec(params, f0)
            cfg0 = sample_ensemble(spec, 1, seed)[0]
            traj = evolve(cfg0, float(run.get("t", 1.0)))
            times = np.linspace(0.0, traj.horizon, int(run.get("snapshots", 5)))
            if args.format == "csv":
                path = os.path.join(args.out, "snapshots.csv")
                os.makedirs(args.out, exist_ok=True)
                traj.write_snapshots_csv(path, times)
                files.append(path)
            else:
                files.append(_write(args.out, "trajectory.json", traj.to_json()))
        else:
            q = SeriesQuery(run.get("target", "boltzmann"), np.asarray(run["points"], dtype=float),
                            float(run.get("t", 0.1)), f0, int(run.get("n_max", 3)), int(run.get("samples", 10_000)),
                            float(run.get("epsilon", params.epsilon)), params.lambda_mfp, run.get("t_bar"))
            est = evaluate_series(q, make_rng(seed))
            files.append(_write(args.out, "series.csv", est.to_csv()) if args.format == "csv"
                         else _write(args.out, "series.json", est.to_json()))
            verdicts.append({"rule": "series.tail_ratio", "passed": est.converged,
                             "detail": f"tail ratio {est.tail_ratio:.3g}"})
    else:
        key, fn, parallel = SCANS[args.command]
        section = cfg.get(key, cfg)
        seed = args.seed if args.seed is not None else section.get("seed", cfg.get("seed"))
        spec = spec_from_mapping(section, name=key, seed=seed)
        seed = spec.seed
        rep = fn(spec, threads=threads) if parallel else fn(spec)
        files += _report_files(rep, args.out, key, args.format)
        verdicts += [v.to_dict() for v in rep.verdicts]
        for v in rep.verdicts:
            print(f"[{'PASS' if v.passed else 'FAIL'}] {v.rule}: {v.detail}")

    man = _manifest(args, cfg, seed, files, verdicts)
    _write(args.out, "manifest.json", json.dumps(man, indent=1, default=str))
    return 0 if man["passed"] else 1


if __name__ == "__main__":
    sys.exit(main())
