"""Command-line runner: ``stochwave <command> CONFIG [--seed N] [--workers N] [--out-dir D] [--format F]``.

Exit codes: 0 when every executed verdict passes, 1 on any other verdict
status, 2 for usage and configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__, analysis, dynamics
from .config import ConfigError, ExperimentConfig, load_config, to_ini
from .domain import write_grid_csv
from .noise import NoiseModel
from .verify import ExperimentContext, Verdict, _jsonable, run_verdicts

MANIFEST_SCHEMA = "stochwave.manifest/1"
EXIT_PASS, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

COMMAND_VERDICTS = {
    "energy-audit": ("energy_law", "energy_balance"),
    "observability": ("observability",),
    "control": ("null_control",),
    "gramian": ("gramian_trace", "invariant_measure"),
    "mixing": ("mixing",),
}


class Output:
    """Collects written files so the manifest can list them with content hashes."""

    def __init__(self, directory: Path, fmt: str):
        self.dir = directory
        self.fmt = fmt
        self.files: dict[str, str] = {}
        directory.mkdir(parents=True, exist_ok=True)

    def _record(self, path: Path) -> None:
        self.files[path.name] = hashlib.sha256(path.read_bytes()).hexdigest()

    def table(self, stem: str, header, rows) -> Path:
        path = self.dir / f"{stem}.{self.fmt}"
        with path.open("w", newline="") as fh:
            if self.fmt == "csv":
                w = csv.writer(fh)
                w.writerow(header)
                for row in rows:
                    w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
            else:
                for row in rows:
                    fh.write(json.dumps(dict(zip(header, _jsonable(list(row)))), sort_keys=True) + "\n")
        self._record(path)
        return path

    def json(self, name: str, doc) -> Path:
        path = self.dir / name
        path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")
        self._record(path)
        return path

    def text(self, name: str, content: str) -> Path:
        path = self.dir / name
        path.write_text(content)
        self._record(path)
        return path

    def path(self, name: str) -> Path:
        return self.dir / name

    def register(self, path: Path) -> None:
        self._record(path)


def config_hash(cfg: ExperimentConfig) -> str:
    # worker count and output location do not affect any result
    norm = cfg.replace("run", workers=1).replace("output", directory="")
    return norm.digest()


def build_manifest(command: str, ctx: ExperimentContext, verdicts: list[Verdict], out: Output,
                   extra_status: str | None = None) -> dict:
    statuses = [v.status for v in verdicts]
    counts = {s: statuses.count(s) for s in ("PASS", "FAIL", "INCONCLUSIVE")}
    ok = all(s == "PASS" for s in statuses) and extra_status in (None, "PASS")
    p = ctx.cfg.physics
    return {
        "schema": MANIFEST_SCHEMA,
        "package_version": __version__,
        "command": command,
        "config_hash": config_hash(ctx.cfg),
        "grid_fingerprint": ctx.grid.fingerprint(),
        "params": {"rho": p.rho, "c": p.c, "m": p.m, "d": p.d, "k": p.k, "channels": ctx.ops.K,
                   "state_dim": ctx.ops.n},
        "quadrature": {"n_quad": ctx.cfg.analysis.n_quad, "quad_rtol": ctx.cfg.analysis.quad_rtol},
        "seed": ctx.seed,
        "verdicts": [v.to_json() for v in verdicts],
        "summary": counts,
        "passed": ok,
        "exit_code": EXIT_PASS if ok else EXIT_FAIL,
        "files": dict(sorted(out.files.items())),
    }


def _write_tables(out: Output, verdicts: list[Verdict]) -> None:
    for v in verdicts:
        for stem, (header, rows) in sorted(v.tables.items()):
            out.table(stem, header, rows)


def cmd_simulate(ctx: ExperimentContext, out: Output):
    r = ctx.cfg.run
    ops = ctx.ops
    x0 = ctx.initial_state()
    noise = NoiseModel.for_trajectory(ops.K, ctx.seed, 0, 0) if r.noise else None
    write_grid_csv(ctx.grid, out.path("grid.csv"))
    out.register(out.path("grid.csv"))
    try:
        traj = dynamics.simulate(ops, x0, r.T, ctx.dt, noise)
    except (dynamics.SimulationError, dynamics.PropagationError) as exc:
        return [Verdict("simulation", "FAIL", {}, [str(exc)])]
    out.table("trajectory", ["t", "acoustic", "boundary", "total"],
              zip(traj.times, traj.acoustic, traj.boundary, traj.total))
    dynamics.write_snapshots(traj, out.path("snapshots.bin"))
    out.register(out.path("snapshots.bin"))
    out.json("simulation.json", {"T": r.T, "dt": float(traj.times[1]), "n_steps": len(traj.times) - 1,
                                 "noise": traj.seed or None, "initial": r.initial})
    return []


def _gramian_report(ctx: ExperimentContext, out: Output) -> None:
    a = ctx.cfg.analysis
    g = analysis.controllability_gramian(ctx.ops, a.gramian_T, method="exact", rank_rtol=a.rank_rtol)
    ly = ctx.lyapunov
    out.json("gramian.json", {
        "T": g.T, "rank": g.rank, "kalman_rank": g.kalman_rank, "eigenvalues": g.eigenvalues,
        "trace_MQT": float(np.trace(g.Q_white)), "lyapunov_exists": ly.exists,
        "lyapunov_residual": ly.residual, "spectral_abscissa": ly.spectral_abscissa,
        "trace_M_sigma_inf": float(np.trace(ly.Sigma_white)) if ly.exists else None})


def _control_report(ctx: ExperimentContext, out: Output) -> None:
    a = ctx.cfg.analysis
    from .verify import unit_state

    y0 = unit_state(ctx.ops, np.random.default_rng(ctx.seed))
    T = max(a.horizons)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", analysis.RankDeficiencyWarning)
        res = analysis.null_control(ctx.ops, y0, T, a.null_control_steps, a.pinv_rtol)
    header = ["t"] + [f"v{j}" for j in range(ctx.ops.K)]
    out.table("control_signal", header, (np.concatenate([[t], v]) for t, v in zip(res.times, res.control)))
    out.json("control.json", {"T": T, "energy": res.energy, "energy_quadrature":
                              analysis.control_energy_quadrature(res), "residual": res.residual,
                              "rank": res.rank, "rank_deficient": res.rank_deficient})


def dispatch(command: str, ctx: ExperimentContext, out: Output) -> list[Verdict]:
    if command == "simulate":
        return cmd_simulate(ctx, out)
    if command == "verify-all":
        names = None
    else:
        names = COMMAND_VERDICTS[command]
    verdicts = run_verdicts(ctx, names)
    _write_tables(out, verdicts)
    if command == "gramian":
        _gramian_report(ctx, out)
    if command == "control":
        _control_report(ctx, out)
    if command == "mixing":
        mix = verdicts[0]
        out.json("mixing.json", {**mix.to_json(), "config_hash": config_hash(ctx.cfg),
                                 "seed": ctx.seed})
    return verdicts


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stochwave", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("simulate", "energy-audit", "observability", "control", "gramian", "mixing", "verify-all"):
        s = sub.add_parser(name)
        s.add_argument("config", help="INI experiment config")
        s.add_argument("--seed", type=int, default=None, help="override run.seed")
        s.add_argument("--workers", type=int, default=None, help="cap on worker threads")
        s.add_argument("--out-dir", default=None, help="override output.directory")
        s.add_argument("--format", choices=("csv", "jsonl"), default=None, help="table format")
    return p


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.seed is not None:
        cfg = cfg.replace("run", seed=args.seed)
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        cfg = cfg.replace("run", workers=args.workers)
    if args.out_dir is not None:
        cfg = cfg.replace("output", directory=args.out_dir)
    if args.format is not None:
        cfg = cfg.replace("output", format=args.format)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
    except ConfigError as exc:
        print(f"stochwave: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"stochwave: cannot read config: {exc}", file=sys.stderr)
        return EXIT_USAGE

    ctx = ExperimentContext(cfg)
    try:
        out = Output(Path(cfg.output.directory), cfg.output.format)
    except OSError as exc:
        print(f"stochwave: output directory not writable: {exc}", file=sys.stderr)
        return EXIT_USAGE
    started = time.time()
    out.text("config.ini", to_ini(cfg.replace("run", workers=1).replace("output", directory="")))
    verdicts = dispatch(args.command, ctx, out)
    manifest = build_manifest(args.command, ctx, verdicts, out)
    out.json("manifest.json", manifest)
    meta = {"started_unix": started, "finished_unix": time.time(), "workers": ctx.workers,
            "python": platform.python_version(), "numpy": np.__version__, "platform": platform.platform(),
            "out_dir": str(out.dir.resolve())}
    (out.dir / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    for v in verdicts:
        print(f"{v.status:12s} {v.name}")
    print(f"manifest: {out.dir / 'manifest.json'}")
    return manifest["exit_code"]


if __name__ == "__main__":
    sys.exit(main())
