"""Command-line entry point: ``dmg-lab {generate,train,eval,sweep,report}``.

All data goes to files under the output directory; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import logging
import os
import sys
import time
from dataclasses import replace
from typing import List, Optional, Sequence

from . import io
from .config import ConfigError, RunConfig, load_config
from .data import DataFormatError, DomainSuite, generate, load_delimited, load_suite, save_suite, split_dataset
from .evaluator import DEFAULT_LAMBDAS, SCHEMA_VERSION, evaluate, sweep_point
from .numeric import make_rng
from .trainer import train

log = logging.getLogger("dmg_lab")


class CommandError(RuntimeError):
    pass


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def _csv_suite(cfg: RunConfig) -> DomainSuite:
    rng = make_rng(cfg.data.seed)
    sources = [split_dataset(load_delimited(p, f"src{i}"), cfg.data.fractions, rng)
               for i, p in enumerate(cfg.source_files)]
    targets = [split_dataset(load_delimited(p, f"tgt{i}"), cfg.data.fractions, rng)
               for i, p in enumerate(cfg.target_files)]
    labels = [int(d.y.max()) for d in sources + targets]
    return DomainSuite(sources, targets, max(labels) + 1)


def _load_suite(cfg: RunConfig) -> DomainSuite:
    data_dir = cfg.resolved_data_dir()
    if not os.path.exists(os.path.join(data_dir, "manifest.json")):
        raise CommandError(f"no dataset at {data_dir}; run 'dmg-lab generate' first")
    return load_suite(data_dir)


def cmd_generate(cfg: RunConfig) -> str:
    suite = _csv_suite(cfg) if cfg.uses_csv else generate(cfg.data)
    data_dir = cfg.resolved_data_dir()
    try:
        save_suite(suite, data_dir)
    except OSError as exc:
        raise CommandError(f"cannot write dataset to {data_dir}: {exc}") from None
    if cfg.uses_csv:
        # loaded data has no generating spec; record the file list instead
        path = os.path.join(data_dir, "manifest.json")
        manifest = io.read_json(path)
        manifest["spec"] = None
        manifest["seed"] = cfg.data.seed
        manifest["source_files"] = list(cfg.source_files)
        manifest["target_files"] = list(cfg.target_files)
        io.write_json(path, manifest)
    io.validate_report(io.read_json(os.path.join(data_dir, "manifest.json")), "manifest")
    return data_dir


def cmd_train(cfg: RunConfig) -> str:
    start = time.perf_counter()
    suite = _load_suite(cfg)
    ckpt, rep = train(cfg.train, suite)
    os.makedirs(cfg.out_dir, exist_ok=True)
    io.save_checkpoint(ckpt, os.path.join(cfg.out_dir, "checkpoint.json"))
    report = {
        "schema_version": SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "seed": cfg.train.seed,
        "suite_hash": ckpt.suite_hash,
        "config_hash": ckpt.config_hash,
        **rep.to_dict(),
    }
    report["wall_time_s"] = time.perf_counter() - start
    io.validate_report(report, "train")
    path = os.path.join(cfg.out_dir, "train_report.json")
    io.write_json(path, report)
    return path


def cmd_eval(cfg: RunConfig, checkpoint: Optional[str] = None, modes: Optional[Sequence[str]] = None) -> str:
    start = time.perf_counter()
    ckpt_path = checkpoint or os.path.join(cfg.out_dir, "checkpoint.json")
    if not os.path.exists(ckpt_path):
        raise CommandError(f"no checkpoint at {ckpt_path}; run 'dmg-lab train' first")
    ckpt = io.load_checkpoint(ckpt_path)
    suite = _load_suite(cfg)
    io.check_compatible(ckpt, suite.fingerprint())
    report = evaluate(ckpt, suite, tuple(modes or cfg.modes), cfg.tau, cfg.average)
    report["config"] = {"run": cfg.to_dict(), "checkpoint": ckpt.config}
    report["wall_time_s"] = time.perf_counter() - start
    io.validate_report(report, "eval")
    path = os.path.join(cfg.out_dir, "eval_report.json")
    io.write_json(path, report)
    return path


def _sweep_worker(args):
    cfg, parameter, value, suite_dir = args
    suite = load_suite(suite_dir)
    return sweep_point(cfg.train, parameter, value, suite, cfg.modes, cfg.tau)


def cmd_sweep(cfg: RunConfig, parameter: str, values: Sequence[float], jobs: int = 1) -> str:
    if parameter not in ("lambda_O", "lambda_S"):
        raise CommandError(f"unknown sweep parameter {parameter!r}; use lambda_O or lambda_S")
    if not values:
        raise CommandError("empty sweep value list")
    if os.environ.get("DMG_LAB_DETERMINISTIC") == "1":
        jobs = 1
    start = time.perf_counter()
    suite_dir = cfg.resolved_data_dir()
    _load_suite(cfg)  # fail early on missing data
    tasks = [(cfg, parameter, float(v), suite_dir) for v in values]
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_worker, tasks))
    else:
        rows = [_sweep_worker(t) for t in tasks]
    run_dir = os.path.join(cfg.out_dir, f"sweep_{parameter}")
    for row in rows:
        io.write_json(os.path.join(run_dir, f"{parameter}={row['value']:g}.json"), row)
    table = {
        "schema_version": SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "seed": cfg.train.seed,
        "parameter": parameter,
        "columns": ["value", "in_acc", "out_acc", "mean_iou"],
        "rows": rows,
        "wall_time_s": time.perf_counter() - start,
    }
    io.validate_report(table, "sweep")
    path = os.path.join(cfg.out_dir, f"sweep_{parameter}.json")
    io.write_json(path, table)
    return path


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def cmd_report(cfg: RunConfig) -> str:
    """Collect eval and sweep JSON under the output dir into a Markdown summary."""
    lines: List[str] = ["# dmg-lab report", ""]
    found = False
    eval_path = os.path.join(cfg.out_dir, "eval_report.json")
    if os.path.exists(eval_path):
        found = True
        ev = io.read_json(eval_path)
        lines += ["## Accuracy", "", "| domain | " + " | ".join(ev["modes"]) + " |",
                  "|---" * (len(ev["modes"]) + 1) + "|"]
        for d, row in ev["per_domain"].items():
            lines.append(f"| {d} | " + " | ".join(_fmt(row["per_mode"].get(m)) for m in ev["modes"]) + " |")
        lines += ["", f"mean in-domain: {_fmt(ev.get('mean_in_acc'))}",
                  f"mean out-of-domain: {_fmt(ev.get('mean_out_acc'))}", ""]
        if "iou" in ev:
            lines += ["## Mask overlap", "", "| layer | k | mean IoU | useless | shared | specific |",
                      "|---|---|---|---|---|---|"]
            for layer in ev["iou"]["per_layer"]:
                c = layer["categories"]
                lines.append(f"| {layer['layer_index']} | {layer['k']} | {_fmt(layer['mean'])} | "
                             f"{c['useless']} | {c['shared']} | {c['specific']} |")
            lines += ["", f"overall IoU: {_fmt(ev['iou']['overall'])}", ""]
    for parameter in ("lambda_O", "lambda_S"):
        path = os.path.join(cfg.out_dir, f"sweep_{parameter}.json")
        if not os.path.exists(path):
            continue
        found = True
        sw = io.read_json(path)
        lines += [f"## Sweep over {parameter}", "", "| value | in-acc | out-acc | mean IoU |", "|---|---|---|---|"]
        for row in sw["rows"]:
            if row["ok"]:
                lines.append(f"| {row['value']:g} | {_fmt(row['in_acc'])} | {_fmt(row['out_acc'])} | "
                             f"{_fmt(row['mean_iou'])} |")
            else:
                lines.append(f"| {row['value']:g} | failed: {row['error']} | | |")
        lines.append("")
    if not found:
        raise CommandError(f"nothing to report under {cfg.out_dir}")
    path = os.path.join(cfg.out_dir, "report.md")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
    return path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dmg-lab", description="Domain-specific mask experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="run config file")
        p.add_argument("--seed", type=int, default=None, help="override data and train seeds")
        p.add_argument("--out", default=None, help="output directory (overrides [output] dir)")
        return p

    common(sub.add_parser("generate", help="write synthetic or CSV-derived datasets"))
    common(sub.add_parser("train", help="train and write checkpoint + train report"))
    p_eval = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    p_eval.add_argument("--checkpoint", default=None)
    p_eval.add_argument("--modes", default=None, help="comma list of pred-ens,mask-ens,kd")
    p_sweep = common(sub.add_parser("sweep", help="train+eval over a lambda grid"))
    p_sweep.add_argument("--param", default="lambda_O")
    p_sweep.add_argument("--values", default=None,
                         help="comma list of values (default 0,1e-5,...,1)")
    p_sweep.add_argument("--jobs", type=int, default=1)
    common(sub.add_parser("report", help="summarize reports as Markdown"))
    return parser


def _parse_values(raw: Optional[str]) -> List[float]:
    if raw is None:
        return list(DEFAULT_LAMBDAS)
    try:
        return [float(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise CommandError(f"bad --values list {raw!r}") from None


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        if args.command == "generate":
            path = cmd_generate(cfg)
        elif args.command == "train":
            path = cmd_train(cfg)
        elif args.command == "eval":
            modes = [m.strip() for m in args.modes.split(",")] if args.modes else None
            path = cmd_eval(cfg, args.checkpoint, modes)
        elif args.command == "sweep":
            path = cmd_sweep(cfg, args.param, _parse_values(args.values), args.jobs)
        else:
            path = cmd_report(cfg)
    except (ConfigError, CommandError, io.IncompatibleCheckpoint, DataFormatError,
            FileNotFoundError, FloatingPointError, ValueError, KeyError) as exc:
        print(f"dmg-lab {args.command}: error: {exc}", file=sys.stderr)
        return 1
    log.info("wrote %s", path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
