"""Command-line experiment runner.

Subcommands: run, sweep, report, export-dataset. Output directories default
under $FEDSIM_OUT (or ./runs). Re-running with an identical manifest
reproduces identical CSVs byte-for-byte.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import config as configio
from . import data, engine, metrics, snapshot
from .attacks import save_trigger
from .engine import ExperimentAbortError, derive_seed

OUT_ROOT_ENV = "FEDSIM_OUT"


def _out_root(explicit):
    if explicit:
        return Path(explicit)
    return Path(os.environ.get(OUT_ROOT_ENV, "runs"))


def _write_manifest(out_dir, cfg, artifacts):
    manifest = {
        "config_hash": configio.config_hash(cfg),
        "seed": cfg.seed,
        "out_dir": str(out_dir),
        "artifacts": {k: str(v) for k, v in artifacts.items()},
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _execute(cfg, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    result = engine.run_experiment(cfg)
    artifacts = {
        "rounds_csv": out_dir / "rounds.csv",
        "summary": out_dir / "summary.txt",
        "checkpoint": out_dir / "final.ckpt",
        "config": out_dir / "config.yaml",
    }
    metrics.emit_csv(result.records, artifacts["rounds_csv"])
    removal = min(cfg.attack.window[1], cfg.rounds) if cfg.attack.kind != "none" else cfg.rounds
    with open(artifacts["summary"], "w") as fh:
        fh.write(metrics.emit_summary(result.records, removal_round=removal))
    snapshot.save_params(artifacts["checkpoint"], result.state.params)
    configio.dump_config(cfg, artifacts["config"])
    if result.state.attacker.trigger is not None:
        artifacts["trigger"] = out_dir / "trigger.bin"
        save_trigger(artifacts["trigger"], result.state.attacker.trigger)
    _write_manifest(out_dir, cfg, artifacts)
    return result


def cmd_run(args) -> int:
    try:
        cfg = configio.load_config(args.config, args.set or [])
    except configio.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    out_dir = _out_root(args.out) if args.out else _out_root(None) / Path(args.config).stem
    try:
        result = _execute(cfg, out_dir)
    except ExperimentAbortError as exc:
        print(f"error: experiment aborted: {exc}", file=sys.stderr)
        dump = out_dir / "abort.txt"
        dump.write_text(f"{exc}\nround={exc.round_index}\n")
        return 3
    final = result.records[-1]
    print(
        f"{out_dir}: {cfg.rounds} rounds, final MA {final.main_accuracy:.2f} "
        f"BA {final.backdoor_accuracy:.2f}"
    )
    return 0


def _sanitize(value) -> str:
    return str(value).replace("/", "_").replace(" ", "")


def cmd_sweep(args) -> int:
    values = [v for v in (args.values or "").split(",") if v != ""]
    if not values:
        print("error: sweep needs at least one value", file=sys.stderr)
        return 2
    root = _out_root(args.out) if args.out else _out_root(None) / (Path(args.config).stem + "-sweep")
    rows = []
    for text in values:
        try:
            cfg = configio.load_config(args.config, list(args.set or []) + [f"{args.axis}={text}"])
        except configio.ConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        cfg.seed = derive_seed(cfg.seed, "sweep", args.axis, text)
        if args.threads is not None:
            cfg.threads = args.threads
        run_dir = root / f"{args.axis.split('.')[-1]}={_sanitize(text)}"
        try:
            result = _execute(cfg, run_dir)
        except ExperimentAbortError as exc:
            print(f"error: experiment aborted for {args.axis}={text}: {exc}", file=sys.stderr)
            return 3
        records = result.records
        removal = min(cfg.attack.window[1], cfg.rounds) if cfg.attack.kind != "none" else cfg.rounds
        span = metrics.lifespan(records, removal, args.lifespan_threshold)
        rows.append(
            (
                text,
                str(run_dir),
                records[-1].main_accuracy,
                records[-1].backdoor_accuracy,
                metrics.peak_backdoor(records),
                span.rounds_above,
            )
        )
    root.mkdir(parents=True, exist_ok=True)
    combined = root / "sweep.csv"
    with open(combined, "w") as fh:
        fh.write("value,run_dir,final_ma,final_ba,peak_ba,lifespan\n")
        for row in rows:
            fh.write(",".join([row[0], row[1]] + [repr(float(v)) for v in row[2:5]] + [str(row[5])]) + "\n")
    print(f"{combined}: {len(rows)} runs")
    return 0


def cmd_report(args) -> int:
    rows = []
    for raw in sorted(args.run_dirs):
        run_dir = Path(raw)
        csv_path = run_dir / "rounds.csv"
        if not csv_path.exists():
            print(f"error: no round records at {csv_path}", file=sys.stderr)
            return 2
        records = metrics.parse_csv(csv_path)
        manifest_path = run_dir / "manifest.json"
        seed = "?"
        if manifest_path.exists():
            seed = json.loads(manifest_path.read_text()).get("seed", "?")
        last_attack = max((r.round_index for r in records if r.malicious_present), default=-1)
        span = metrics.lifespan(records, last_attack + 1, args.lifespan_threshold)
        rows.append(
            (
                str(run_dir),
                seed,
                records[-1].main_accuracy,
                records[-1].backdoor_accuracy,
                metrics.peak_backdoor(records),
                span.rounds_above,
            )
        )
    header = f"{'run':40s} {'seed':>10s} {'final_ma':>9s} {'final_ba':>9s} {'peak_ba':>9s} {'lifespan':>8s}"
    print(header)
    for name, seed, ma, ba, peak, life in rows:
        print(f"{name:40s} {str(seed):>10s} {ma:9.2f} {ba:9.2f} {peak:9.2f} {life:8d}")
    return 0


def cmd_export_dataset(args) -> int:
    try:
        cfg = configio.load_config(args.config, args.set or [])
    except configio.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    prepared, _ = engine.prepare(cfg)
    split = prepared.train_set if args.split == "train" else prepared.test_set
    out = Path(args.csv)
    out.parent.mkdir(parents=True, exist_ok=True)
    data.export_csv(split, out)
    if args.bin:
        data.save_dataset(args.bin, split)
    print(f"{out}: {len(split)} samples")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute one experiment from a config file")
    run.add_argument("--config", required=True)
    run.add_argument("--set", action="append", metavar="K=V", help="dotted-path override")
    run.add_argument("--out", help="output directory (default: $FEDSIM_OUT/<config name>)")
    run.add_argument("--seed", type=int)
    run.add_argument("--threads", type=int)
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="run one experiment per axis value")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--axis", required=True, help="dotted config path to vary")
    sweep.add_argument("--values", required=True, help="comma-separated values")
    sweep.add_argument("--set", action="append", metavar="K=V")
    sweep.add_argument("--out")
    sweep.add_argument("--threads", type=int)
    sweep.add_argument("--lifespan-threshold", type=float, default=90.0)
    sweep.set_defaults(func=cmd_sweep)

    report = sub.add_parser("report", help="tabulate finished runs")
    report.add_argument("run_dirs", nargs="+")
    report.add_argument("--lifespan-threshold", type=float, default=90.0)
    report.set_defaults(func=cmd_report)

    export = sub.add_parser("export-dataset", help="write a dataset split as CSV")
    export.add_argument("--config", required=True)
    export.add_argument("--split", choices=("train", "test"), default="train")
    export.add_argument("--csv", required=True)
    export.add_argument("--bin", help="also write a binary snapshot")
    export.add_argument("--set", action="append", metavar="K=V")
    export.set_defaults(func=cmd_export_dataset)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
