"""Batch commands: gen-data, train, eval, compare and bench-windows.

Exit codes: 0 success, 1 usage/config error, 2 numerical abort, 3 integrity error.
"""

import argparse
import json
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import ValidationError

from src.cli.run_config import RunConfigFile, echo_config, load_run_config
from src.core import tensor as T
from src.core.corruptions import corrupt_split, corruption_grid, read_corruption_table
from src.core.data_synth import SITES, Split, gen_benchmark
from src.core.dataset_io import CORRUPTIONS_NAME, DatasetReader, load_train_data, write_dataset
from src.core.exceptions import ConfigError, NumericalAbortError, WinNormError
from src.core.losses_metrics import (
    METRIC_COLUMNS,
    MetricReport,
    append_metrics_csv,
    config_digest,
    m_cauc,
    mean_corruption_error,
    reports_to_frame,
    summarize_runs,
    write_summary_json,
)
from src.core.model import (
    CnnSpec,
    ConvNet,
    build_model,
    check_compatible,
    load_checkpoint,
    param_count,
    save_checkpoint,
)
from src.core.normalization import NormConfig, win_stats
from src.core.rng import Rng
from src.core.training import evaluate, train
from src.core.window_cache import cache_epoch
from src.core.window_sampling import OnlineRegionSource
from src.utils.config import settings
from src.utils.logger import logger, run_log_file, setup_logger

METHODS = ("BN", "IN", "WIN", "WIN-WIN")


class ArgumentParser(argparse.ArgumentParser):
    """argparse parser whose usage errors map to exit code 1."""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _csv_list(value: str) -> List[str]:
    return [item.strip() for item in value.split(",") if item.strip()]


# gen-data

def cmd_gen_data(args) -> int:
    sites = _csv_list(args.sites)
    unknown = [s for s in sites if s not in SITES]
    if not sites or unknown:
        raise ConfigError(f"Unknown or empty site list {args.sites!r}; known sites: {sorted(SITES)}")
    benchmark = gen_benchmark(
        args.seed, sites, args.n_per_class, args.test_per_class, args.binary, args.workers
    )
    write_dataset(args.out, benchmark, args.seed, args.binary)
    DatasetReader(args.out).read_all()
    logger.info(f"Dataset written and verified at {args.out}")
    return 0


# train

def run_training(config: RunConfigFile) -> Tuple[Dict, List[MetricReport]]:
    """
    Train one configuration and write its artifacts under config.out_dir.

    Returns:
        (summary dict, final-epoch metric reports)
    """
    out = Path(config.out_dir)
    echo_config(config, out)
    data, classes = load_train_data(config.data)
    spec = config.cnn_spec(len(classes), data.train.images.shape[1:])
    model = build_model(spec)
    digest = config_digest(config.model_dump(mode="json"))

    try:
        with run_log_file(out):
            model, record = train(model, data, config.train, config.run_id)
    except NumericalAbortError as e:
        with open(out / "diagnostics.json", "w") as f:
            json.dump(e.diagnostics, f, indent=2, default=str)
        raise

    reports = record.final_reports()
    for report in reports:
        report.config_digest = digest
    ood = [r.breakdown[s] for r in reports if r.name == "accuracy" for s in data.ood]
    if ood:
        reports.append(MetricReport("accuracy_ood_mean", float(np.mean(ood)), {}, config.train.seed, digest))

    save_checkpoint(model, out / "checkpoint", extra={
        "run_id": config.run_id,
        "classes": list(classes),
        "data": config.data.model_dump(mode="json"),
        "train": config.train.model_dump(mode="json"),
        "epoch": config.train.epochs,
        "metrics": {r.name: r.breakdown or r.value for r in reports},
    })
    record.to_frame().to_csv(out / "history.csv", index=False)
    append_metrics_csv(out / "metrics.csv", reports_to_frame(reports, config.run_id))
    summary = {
        "run_id": config.run_id,
        "method": config.method,
        "seed": config.train.seed,
        "param_count": param_count(spec),
        "elapsed_seconds": record.elapsed_seconds,
    }
    write_summary_json(out / "summary.json", reports, summary)
    return summary, reports


def cmd_train(args) -> int:
    config = load_run_config(args.config, args.override or [])
    if args.out:
        config = config.model_copy(update={"out_dir": args.out})
    summary, _ = run_training(config)
    logger.info(f"Run {summary['run_id']} finished in {summary['elapsed_seconds']:.1f}s")
    return 0


# eval

def _checkpoint_splits(reader: DatasetReader, manifest: Dict, names: Sequence[str]) -> Dict[str, Split]:
    train_sites = manifest.get("data", {}).get("train_sites") or [reader.sites[0]]
    splits = {}
    for name in names:
        if name == "val":
            splits[name] = Split.concat("val", [reader.read_split(s, "test") for s in train_sites])
        elif ":" in name:
            site, split_name = name.split(":", 1)
            splits[name] = reader.read_split(site, split_name)
        else:
            splits[name] = reader.read_split(name, "test")
    return splits


def _reference_auc(path: Path) -> Dict[str, float]:
    if not path.exists():
        raise ConfigError(f"Reference summary not found: {path}")
    with open(path, "r") as f:
        summary = json.load(f)
    for metric in summary.get("metrics", []):
        if metric.get("name") == "auc":
            return metric["breakdown"]
    raise ConfigError(f"Reference summary {path} has no per-split AUC")


def evaluate_corruptions(model: ConvNet, split: Split, tables: Dict, seed: int,
                         batch_size: int = 256) -> Tuple[MetricReport, MetricReport]:
    """Accuracy over the full kind x severity grid and the resulting mean corruption error."""
    rng = Rng(seed).stream("corruption")
    grid: Dict[str, float] = {}
    for spec in corruption_grid():
        corrupted = corrupt_split(split, spec, rng, tables)
        grid[f"{spec.kind}:{spec.severity}"] = evaluate(model, corrupted, batch_size)["accuracy"]
    mce = mean_corruption_error(list(grid.values()))
    return MetricReport("corruption_accuracy", float(np.mean(list(grid.values()))), grid, seed), \
        MetricReport("mean_corruption_error", mce, {}, seed)


def cmd_eval(args) -> int:
    model, manifest = load_checkpoint(args.checkpoint)
    reader = DatasetReader(args.data)
    check_compatible(model, np.zeros((1,) + tuple(model.spec.input_dims)), len(reader.classes))
    names = _csv_list(args.splits) if args.splits else ["val"] + [
        s for s in reader.sites if s not in manifest.get("data", {}).get("train_sites", [])
    ]
    splits = _checkpoint_splits(reader, manifest, names)
    seed = int(manifest.get("train", {}).get("seed", 0))

    per_split = {}
    for name, split in splits.items():
        check_compatible(model, split.images, len(split.classes))
        per_split[name] = evaluate(model, split, args.batch_size)
    reports = [
        MetricReport("accuracy", float(np.mean([m["accuracy"] for m in per_split.values()])),
                     {k: m["accuracy"] for k, m in per_split.items()}, seed)
    ]
    aucs = {k: m["auc"] for k, m in per_split.items() if "auc" in m}
    if aucs:
        reports.append(MetricReport("auc", float(np.mean(list(aucs.values()))), aucs, seed))
    if args.reference:
        reference = _reference_auc(Path(args.reference))
        site_aucs = {k: v for k, v in aucs.items() if k != "val"}
        reference = {k: v for k, v in reference.items() if k != "val"}
        reports.append(MetricReport("m_cauc", m_cauc(site_aucs, reference), {}, seed))
    if args.corruptions:
        tables = read_corruption_table(Path(args.data) / CORRUPTIONS_NAME)
        base = splits["val"] if "val" in splits else _checkpoint_splits(reader, manifest, ["val"])["val"]
        reports.extend(evaluate_corruptions(model, base, tables, seed, args.batch_size))

    out = Path(args.out or Path(args.checkpoint).parent / "eval")
    out.mkdir(parents=True, exist_ok=True)
    run_id = manifest.get("run_id") or Path(args.checkpoint).parent.name
    metrics_path = out / "metrics.csv"
    if metrics_path.exists():
        metrics_path.unlink()
    append_metrics_csv(metrics_path, reports_to_frame(reports, run_id))
    write_summary_json(out / "summary.json", reports, {"checkpoint": str(args.checkpoint), "data": str(args.data)})
    for report in reports:
        logger.info(f"{report.name}: {report.value:.4f}")
    return 0


# compare

def _cell_config(base: Dict, method: str, seed: int, out: Path) -> RunConfigFile:
    document = json.loads(json.dumps(base))
    norm = dict(document.get("norm", {}))
    train_cfg = dict(document.get("train", {}))
    norm["kind"] = "WIN" if method == "WIN-WIN" else method
    train_cfg["trainer"] = "win_win" if method == "WIN-WIN" else "single_pass"
    train_cfg["seed"] = seed
    document.update({
        "norm": norm,
        "train": train_cfg,
        "run_id": f"{method}-s{seed}",
        "out_dir": str(out / f"{method}-s{seed}"),
    })
    try:
        return RunConfigFile.model_validate(document)
    except ValidationError as e:
        raise ConfigError(f"Invalid matrix cell {method}/{seed}: {e}")


def run_cell(base: Dict, method: str, seed: int, out: str, corruptions: bool) -> Dict:
    """Train and evaluate one grid cell; failures are returned, not raised."""
    run_id = f"{method}-s{seed}"
    try:
        config = _cell_config(base, method, seed, Path(out))
        _, reports = run_training(config)
        if corruptions:
            model, manifest = load_checkpoint(Path(config.out_dir) / "checkpoint")
            data, _ = load_train_data(config.data)
            tables = read_corruption_table(Path(config.data.data_dir) / CORRUPTIONS_NAME)
            reports.extend(evaluate_corruptions(model, data.val, tables, seed, config.train.eval_batch_size))
        frame = reports_to_frame(reports, run_id)
        frame.insert(0, "method", method)
        return {"run_id": run_id, "ok": True, "rows": frame.to_dict(orient="records")}
    except Exception as e:  # noqa: BLE001
        logger.error(f"Grid cell {run_id} failed: {e}")
        return {"run_id": run_id, "ok": False, "error": f"{type(e).__name__}: {e}"}


def cmd_compare(args) -> int:
    matrix_path = Path(args.matrix)
    if not matrix_path.exists():
        raise ConfigError(f"Matrix file not found: {matrix_path}")
    with open(matrix_path, "r") as f:
        matrix = json.load(f)
    methods = matrix.get("methods", list(METHODS))
    unknown = [m for m in methods if m not in METHODS]
    if unknown or not methods:
        raise ConfigError(f"Unknown methods {unknown}; choose from {METHODS}")
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    base = matrix.get("base", {})
    corruptions = bool(matrix.get("corruptions", args.corruptions))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    cells = [(method, seed) for method in methods for seed in range(args.seeds)]
    logger.info(f"Running {len(cells)} grid cells with {args.jobs} worker(s)")
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(run_cell, base, m, s, str(out), corruptions) for m, s in cells]
            results = [future.result() for future in futures]
    else:
        results = [run_cell(base, m, s, str(out), corruptions) for m, s in cells]

    rows = [row for result in results if result["ok"] for row in result["rows"]]
    failures = [result for result in results if not result["ok"]]
    frame = pd.DataFrame(rows, columns=["method"] + METRIC_COLUMNS)
    frame.to_csv(out / "metrics.csv", index=False)
    table = summarize_runs(frame) if not frame.empty else pd.DataFrame()
    table.to_csv(out / "summary.csv", index=False)
    with open(out / "summary.json", "w") as f:
        json.dump({
            "runs": len(cells),
            "failed": [f["run_id"] for f in failures],
            "errors": {f["run_id"]: f["error"] for f in failures},
            "summary": table.to_dict(orient="records"),
        }, f, indent=2, default=str)
    if failures:
        logger.error(f"{len(failures)} of {len(cells)} grid cells failed")
        return 1
    logger.info(f"Comparison written to {out}")
    return 0


# bench-windows

def bench_epoch(spec: CnnSpec, mode: str, steps: int, batch_size: int, seed: int) -> Tuple[float, float]:
    """
    Time window generation plus the WIN statistics path for one simulated epoch.

    Returns:
        (epoch seconds, cache build seconds; 0 online)
    """
    model = build_model(spec)
    sites = model.win_sites()
    cfg = model.region_config()
    channels = {unit.norm.layer_id: unit.norm.channels for unit in model.units}
    feature_rng = Rng(seed).stream("features")
    features = {
        site.layer_id: T.tensor(feature_rng.normal(size=(batch_size, channels[site.layer_id]) + site.dims))
        for site in sites
    }
    window_rng = Rng(seed).stream("window")

    build_seconds = 0.0
    if mode == "offline":
        started = time.perf_counter()
        source = cache_epoch(window_rng, steps, sites, cfg.tau, cfg.strategy, cfg.share_window_across_layers)
        build_seconds = time.perf_counter() - started
    else:
        source = OnlineRegionSource(window_rng, cfg.strategy, cfg.tau, cfg.share_window_across_layers)

    started = time.perf_counter()
    with T.no_grad():
        for step in range(steps):
            for site in sites:
                mask = source.region(site.layer_id, step, site.dims, site.partition)
                win_stats(features[site.layer_id], mask)
    return time.perf_counter() - started, build_seconds


def cmd_bench_windows(args) -> int:
    if args.steps < 1:
        raise ConfigError("--steps must be >= 1; an empty epoch yields an empty report")
    if args.repeats < 1:
        raise ConfigError("--repeats must be >= 1")
    try:
        norm = NormConfig(kind="WIN", strategy=args.strategy, tau=args.tau)
    except ValidationError as e:
        raise ConfigError(f"Invalid window settings: {e}")
    spec = CnnSpec.default(norm=norm, init_seed=args.seed)
    modes = ["online", "offline"] if args.mode == "both" else [args.mode]

    report: Dict[str, Dict] = {}
    for mode in modes:
        runs = [bench_epoch(spec, mode, args.steps, args.batch_size, args.seed) for _ in range(args.repeats)]
        epoch_times = [r[0] for r in runs]
        report[mode] = {
            "median_epoch_seconds": statistics.median(epoch_times),
            "epoch_seconds": epoch_times,
            "median_cache_build_seconds": statistics.median(r[1] for r in runs),
        }
        logger.info(f"{mode}: median {report[mode]['median_epoch_seconds'] * 1000:.1f} ms per epoch")

    report["settings"] = {"steps": args.steps, "repeats": args.repeats, "strategy": args.strategy,
                          "tau": args.tau, "batch_size": args.batch_size, "seed": args.seed}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "bench.json", "w") as f:
            json.dump(report, f, indent=2)
    print(json.dumps(report, indent=2))
    return 0


# Parser

def build_parser() -> argparse.ArgumentParser:
    parser = ArgumentParser(prog="winnorm", description="Window normalization laboratory")
    parser.add_argument("--log-file", default=None, help="Also write logs to this file")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    gen = sub.add_parser("gen-data", help="Generate the multi-site shape benchmark")
    gen.add_argument("--out", default=settings.data_dir)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--sites", default=",".join(SITES))
    gen.add_argument("--n-per-class", type=int, default=500)
    gen.add_argument("--test-per-class", type=int, default=125)
    gen.add_argument("--binary", action="store_true", help="Two classes (disk vs square)")
    gen.add_argument("--workers", type=int, default=1)
    gen.set_defaults(handler=cmd_gen_data)

    tr = sub.add_parser("train", help="Train one configuration")
    tr.add_argument("--config", default=None, help="JSON run config (defaults when omitted)")
    tr.add_argument("--override", nargs="*", metavar="KEY=VAL", help="Dotted-path overrides, e.g. norm.tau=0.7")
    tr.add_argument("--out", default=None, help="Output directory (overrides out_dir)")
    tr.set_defaults(handler=cmd_train)

    ev = sub.add_parser("eval", help="Evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--splits", default=None, help="Comma list: val, site names, or site:split")
    ev.add_argument("--corruptions", action="store_true")
    ev.add_argument("--reference", default=None, help="summary.json of the merged-sites reference eval")
    ev.add_argument("--batch-size", type=int, default=256)
    ev.add_argument("--out", default=None)
    ev.set_defaults(handler=cmd_eval)

    cmp_ = sub.add_parser("compare", help="Run a method x seed grid")
    cmp_.add_argument("--matrix", required=True)
    cmp_.add_argument("--seeds", type=int, default=5)
    cmp_.add_argument("--out", required=True)
    cmp_.add_argument("--jobs", type=int, default=1)
    cmp_.add_argument("--corruptions", action="store_true")
    cmp_.set_defaults(handler=cmd_compare)

    bench = sub.add_parser("bench-windows", help="Time online vs offline window generation")
    bench.add_argument("--mode", choices=["online", "offline", "both"], default="both")
    bench.add_argument("--steps", type=int, default=32)
    bench.add_argument("--repeats", type=int, default=5)
    bench.add_argument("--strategy", default="Window")
    bench.add_argument("--tau", type=float, default=0.7)
    bench.add_argument("--batch-size", type=int, default=64)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--out", default=None)
    bench.set_defaults(handler=cmd_bench_windows)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one command and map errors to exit codes."""
    try:
        args = build_parser().parse_args(argv)
        if args.log_file:
            setup_logger(log_file=args.log_file)
        return args.handler(args)
    except NumericalAbortError as e:
        logger.error(f"Numerical abort: {e}")
        return e.exit_code
    except WinNormError as e:
        logger.error(str(e))
        return e.exit_code
    except (ValidationError, ValueError) as e:
        logger.error(f"Invalid input: {e}")
        return 1
