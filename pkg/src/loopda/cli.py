"""Command-line front end: ``loopda run|sweep|climatology|verify``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

from . import __version__
from . import config as C
from . import experiments as X
from .errors import BlowUpError, ConfigError
from .verify import SUITES, run_suite

log = logging.getLogger("loopda")

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_CONFIG = 2
EXIT_BLOWUP = 3

MANIFEST = "manifest.json"


def _fmt(v):
    if hasattr(v, "item"):  # numpy scalar
        v = v.item()
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_csv(path, rows, header):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r[h]) for h in header])


class Manifest:
    """Resolved config, seeds, version, wall times and outputs of one command."""

    def __init__(self, out, command, cfg, seeds):
        self.path = Path(out) / MANIFEST
        self.data = {
            "tool": "loopda",
            "version": __version__,
            "command": command,
            "config": cfg,
            "seeds": seeds,
            "status": "running",
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "finished": None,
            "outputs": [],
        }

    def save(self):
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")

    def finish(self, outputs):
        self.data["outputs"] = [Path(p).name for p in outputs]
        self.data["status"] = "complete"
        self.data["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self.save()


# --- commands -------------------------------------------------------------


def cmd_run(cfg, out, workers):
    exp = C.experiment_config(cfg)
    man = Manifest(out, "run", cfg, [exp.seed])
    man.save()
    res = X.run_twin_experiment(exp)
    path = out / "run.csv"
    rows = list(res.rows())
    write_csv(path, rows, list(rows[0]))
    man.finish([path])
    print(f"forecast rmse {res.summary_rmse:.6g}  analysis rmse {res.analysis_rmse:.6g}  -> {path}")
    return EXIT_OK


def _sweep_call(cfg, base, seeds, workers, **kw):
    sw = cfg["sweep"]
    kind = sw["kind"]
    if kind == "windows":
        from .tables import INFLATION, tuned_inflation

        def tuned(f, w):
            if f not in INFLATION:
                return base.delta, base.mu
            mu, delta = tuned_inflation(f, w * base.time_scale_seconds)
            return delta, mu

        return X.window_sweep(base, C.sweep_windows(cfg), sw["filters"], seeds, workers,
                              inflation=tuned if sw["inflation"] == "tuned" else None, **kw)
    if kind == "inflation":
        return X.inflation_sweep(base, sw["deltas"], sw["mus"], seeds, workers, **kw)
    return X.observation_density_sweep(base, sw["counts"], seeds, workers, **kw)


def _read_partial(path, keys):
    done = {}
    if not path.is_file():
        return done
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            try:
                ident = tuple(_parse_cell(k, rec[k]) for k in keys) + (int(rec["seed"]),)
                done[ident] = float(rec["rmse"])
            except (KeyError, ValueError):
                continue  # a torn last line from an interrupted write
    return done


def _parse_cell(key, text):
    if key == "filter":
        return text
    if key == "sensors":
        return int(text)
    return float(text)


def _sweep_keys(kind):
    return {"windows": ("filter", "window"), "inflation": ("delta", "mu"), "density": ("sensors",)}[kind]


def cmd_sweep(cfg, out, workers):
    base = C.experiment_config(cfg)
    seeds = C.sweep_seeds(cfg)
    keys = _sweep_keys(cfg["sweep"]["kind"])
    partial = out / "cells.partial.csv"
    done = {}
    old = out / MANIFEST
    if old.is_file():
        try:
            prev = json.loads(old.read_text())
        except ValueError:
            prev = {}
        if prev.get("status") == "running" and prev.get("config") == json.loads(json.dumps(cfg)):
            done = _read_partial(partial, keys)
            log.info("resuming sweep: %d cells already done", len(done))
            print(f"resuming: {len(done)} completed cells reused", file=sys.stderr)
    if not done and partial.exists():
        partial.unlink()
    man = Manifest(out, f"sweep {cfg['sweep']['kind']}", cfg, seeds)
    man.save()

    header = list(keys) + ["seed", "rmse"]
    new_file = not partial.exists()
    with open(partial, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new_file:
            w.writerow(header)
            fh.flush()

        def on_cell(ident, val):
            w.writerow([_fmt(v) for v in ident] + [_fmt(val)])
            fh.flush()

        res = _sweep_call(cfg, base, seeds, workers, done=done, on_cell=on_cell)

    cells_path, table_path = out / "cells.csv", out / "sweep.csv"
    write_csv(cells_path, res.cells, header)
    table = res.table()
    write_csv(table_path, table, list(keys) + ["mean_rmse", "n_seeds", "blowups"])
    partial.unlink()
    man.finish([cells_path, table_path])
    for row in table:
        label = "  ".join(f"{k}={_fmt(row[k])}" for k in keys)
        print(f"{label}  rmse={row['mean_rmse']:.4g}  blowups={row['blowups']}")
    return EXIT_OK


def cmd_climatology(cfg, out, workers):
    exp = C.experiment_config(cfg)
    cl = cfg["climatology"]
    man = Manifest(out, "climatology", cfg, [exp.seed])
    man.save()
    stats = X.climatology(exp.model_params(), exp.integrator, duration=float(cl["duration"]),
                          spin_up=float(cl["spin_up"]), seed=exp.seed)
    rows = [{"variable": i, "mean": float(m), "variance": float(v), "sd": float(math.sqrt(v))}
            for i, (m, v) in enumerate(zip(stats.mean, stats.variance))]
    path = out / "climatology.csv"
    write_csv(path, rows, ["variable", "mean", "variance", "sd"])
    man.finish([path])
    for r in rows:
        print(f"x{r['variable'] + 1}: mean {r['mean']:.4g}  sd {r['sd']:.4g}")
    return EXIT_OK


def cmd_verify(suite, seed):
    suites = SUITES if suite == "all" else (suite,)
    ok = True
    for s in suites:
        for check in run_suite(s, seed):
            print(f"[{s}] {check.line()}")
            ok &= bool(check.passed)
    return EXIT_OK if ok else EXIT_VERIFY_FAILED


# --- parsing --------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="loopda", description="Data-assimilation twin experiments")
    p.add_argument("--version", action="version", version=f"loopda {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML config file or a previous manifest.json")
    common.add_argument("--seed", type=int, help="base seed (overrides experiment.seed)")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                        help="worker processes for sweep cells (default: cpu count)")
    common.add_argument("--full-scale", action="store_true",
                        help="3000 windows per run and 100 seeds per sweep cell")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")

    sub.add_parser("run", parents=[common], help="one twin experiment, one row per window")
    sw = sub.add_parser("sweep", parents=[common], help="RMSE over a grid of settings")
    sw.add_argument("kind", nargs="?", choices=C.SWEEP_KINDS, help="overrides sweep.kind")
    sub.add_parser("climatology", parents=[common], help="long-run mean and variance")
    v = sub.add_parser("verify", help="built-in consistency checks")
    v.add_argument("suite", nargs="?", default="all", choices=SUITES + ("all",))
    v.add_argument("--seed", type=int, default=0)
    return p


def _resolve(args):
    data = C.load(args.config) if args.config is not None else None
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"experiment.seed={args.seed}")
    if getattr(args, "kind", None):
        overrides.append(f'sweep.kind="{args.kind}"')
    return C.resolve(data, overrides, full_scale=args.full_scale)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "verify":
        return cmd_verify(args.suite, args.seed)
    try:
        cfg = _resolve(args)
    except FileNotFoundError as err:
        print(f"loopda: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as err:
        print(f"loopda: config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    args.out.mkdir(parents=True, exist_ok=True)
    cmd = {"run": cmd_run, "sweep": cmd_sweep, "climatology": cmd_climatology}[args.command]
    try:
        return cmd(cfg, args.out, max(1, args.workers))
    except BlowUpError as err:
        print(f"loopda: blow-up: {err}", file=sys.stderr)
        return EXIT_BLOWUP
    except ConfigError as err:
        print(f"loopda: config error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
