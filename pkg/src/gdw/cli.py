"""Command-line entry point: ``gdw run|gradcheck|ablate|report``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from .engine import MODES
from .experiment import (PRESETS, SCHEMA_VERSION, ConfigError, ExperimentConfig, read_metrics_csv,
                         run_experiment, summarize)


def _load_config(args) -> ExperimentConfig:
    if args.config and args.preset:
        raise ConfigError("give either --config or --preset, not both")
    if args.config:
        d = json.loads(Path(args.config).read_text())
    else:
        d = json.loads(json.dumps(PRESETS[args.preset or "smoke"]))
        d["schema_version"] = SCHEMA_VERSION
        d.setdefault("output_dir", f"runs/{d['name']}")
    if args.seed:
        d["seeds"] = list(args.seed)
    if args.mode:
        d["modes"] = list(args.mode)
    if args.out:
        d["output_dir"] = args.out
    if args.epochs is not None:
        d["trainer"] = {**d.get("trainer", {}), "epochs": args.epochs}
    return ExperimentConfig.from_dict(d)


def _print_summary(summary: dict, out=None) -> None:
    out = out or sys.stdout
    print(f"config {summary['config_hash']}", file=out)
    for mode, cell in summary["modes"].items():
        if cell["mean"] is None:
            print(f"  {mode:<20} no completed runs", file=out)
            continue
        line = f"  {mode:<20} {cell['mean']:.4f} +- {cell['std']:.4f}  (n={cell['n']})"
        if cell["incomplete"]:
            line += f"  incomplete: {[c['seed'] for c in cell['incomplete']]}"
        print(line, file=out)


def cmd_run(args) -> int:
    cfg = _load_config(args)
    _, summary = run_experiment(cfg, jobs=args.jobs)
    _print_summary(summary)
    print(f"wrote {cfg.output_dir}")
    return 0


def cmd_ablate(args) -> int:
    if not args.mode:
        args.mode = ["gdw", "gdw-no-constraint"]
    cfg = _load_config(args)
    records, summary = run_experiment(cfg, jobs=args.jobs)
    _print_summary(summary)
    print("mean within-epoch batch-loss variance:")
    for mode in cfg.modes:
        vals = [ep["batch_loss_var"] for r in records if r.mode == mode for ep in r.epochs]
        print(f"  {mode:<20} {float(np.mean(vals)) if vals else float('nan'):.6g}")
    print(f"wrote {cfg.output_dir}")
    return 0


def cmd_gradcheck(args) -> int:
    failed = False
    for name, (err, tol) in gradcheck.run_all(args.seed_value).items():
        ok = err <= tol
        failed |= not ok
        print(f"{'PASS' if ok else 'FAIL'} {name:<20} err={err:.3e} tol={tol:.0e}")
    return 1 if failed else 0


def cmd_report(args) -> int:
    out = Path(args.dir)
    cfg_file = out / "config.json"
    h, order = "unknown", list(MODES)
    if cfg_file.exists():
        saved = json.loads(cfg_file.read_text())
        h, order = saved["config_hash"], saved["config"]["modes"]
    records = read_metrics_csv(out / "metrics.csv")
    if not records:
        print(f"{out / 'metrics.csv'} holds no epochs", file=sys.stderr)
        return 1
    summary = summarize(sorted(records, key=lambda r: (order.index(r.mode), r.seed)), h)
    _print_summary(summary)
    if args.write:
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gdw", description="Class-level gradient reweighting experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def experiment_flags(sp):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--preset", choices=sorted(PRESETS), help="built-in config (default: smoke)")
        sp.add_argument("--seed", type=int, action="append", help="override the seed list (repeatable)")
        sp.add_argument("--mode", choices=MODES, action="append", help="restrict to these modes (repeatable)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--epochs", type=int, help="override trainer epochs")
        sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    run = sub.add_parser("run", help="train every (mode, seed) cell and write reports")
    experiment_flags(run)
    run.set_defaults(func=cmd_run)

    ab = sub.add_parser("ablate", help="constrained vs unconstrained class-level weights")
    experiment_flags(ab)
    ab.set_defaults(func=cmd_ablate)

    gc = sub.add_parser("gradcheck", help="finite-difference checks of all gradient paths")
    gc.add_argument("--seed", dest="seed_value", type=int, default=0)
    gc.set_defaults(func=cmd_gradcheck)

    rep = sub.add_parser("report", help="recompute the summary from metrics.csv")
    rep.add_argument("dir", help="output directory of a previous run")
    rep.add_argument("--write", action="store_true", help="overwrite summary.json")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
