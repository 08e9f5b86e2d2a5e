"""Command-line orchestration: train, calibrate, table, plan, frontier,
compare, flops.

`train` executes the whole pipeline for one run configuration:
training, per-configuration statistics calibration, query-table construction
and frontier export, all written atomically under the run's output
directory. Exit codes: 0 success, 2 configuration error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from .core import SlimmableModelSpec, SlimmableNetwork, load_checkpoint, save_checkpoint
from .data import load_dataset, make_loader
from .errors import ConfigError, SlimresError
from .flops import cost_grid, write_cost_csv
from .norm import BNStatsBank, DEFAULT_CALIBRATION_BUDGET
from .planner import (
    QueryTable,
    build_table,
    evaluate_top1,
    frontier,
    select_config,
    width_grid,
    write_frontier_csv,
)
from .trainer import TRAINING_MODES, TrainSchedule, run_training


@dataclass
class RunConfig:
    mode: str
    spec_path: str
    dataset_name: str
    dataset_root: str
    output_dir: str
    seed: int = 0
    val_fraction: float = 0.1
    download: bool = False
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    independent_width: float = 1.0
    independent_resolution: int | None = None
    calibration_budget: int = DEFAULT_CALIBRATION_BUDGET
    augment: bool = True
    train_subset: int | None = None
    build_query_table: bool = True

    @classmethod
    def from_file(cls, path, overrides=None) -> "RunConfig":
        try:
            raw = yaml.safe_load(Path(path).read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read run config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"run config {path} must be a mapping")
        return cls.from_dict(raw, overrides or {}, base_dir=Path(path).parent)

    @classmethod
    def from_dict(cls, raw: dict, overrides: dict, base_dir=Path(".")) -> "RunConfig":
        def need(key):
            if key not in raw:
                raise ConfigError(f"run config missing required key {key!r}")
            return raw[key]

        mode = overrides.get("mode") or need("mode")
        if mode not in TRAINING_MODES:
            raise ConfigError(f"mode must be one of {TRAINING_MODES}, got {mode!r}")

        dataset = need("dataset")
        if not isinstance(dataset, dict) or "name" not in dataset or "root" not in dataset:
            raise ConfigError("dataset must be a mapping with 'name' and 'root'")

        sched_raw = raw.get("schedule", {})
        if not isinstance(sched_raw, dict):
            raise ConfigError("schedule must be a mapping")
        unknown = set(sched_raw) - {
            "epochs", "batch_size", "lr", "momentum", "weight_decay", "cosine"
        }
        if unknown:
            raise ConfigError(f"unknown schedule keys: {sorted(unknown)}")
        schedule = TrainSchedule(**sched_raw)
        if overrides.get("epochs"):
            schedule.epochs = overrides["epochs"]
        try:
            schedule.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

        independent = raw.get("independent", {}) or {}
        seed = overrides.get("seed")
        if seed is None:
            seed = int(raw.get("seed", 0))

        spec_path = Path(need("spec"))
        if not spec_path.is_absolute():
            spec_path = base_dir / spec_path

        out_dir = overrides.get("output_dir") or need("output_dir")

        cfg = cls(
            mode=mode,
            spec_path=str(spec_path),
            dataset_name=str(dataset["name"]),
            dataset_root=str(dataset["root"]),
            output_dir=str(out_dir),
            seed=seed,
            val_fraction=float(dataset.get("val_fraction", 0.1)),
            download=bool(dataset.get("download", False)),
            schedule=schedule,
            independent_width=float(independent.get("width", 1.0)),
            independent_resolution=independent.get("resolution"),
            calibration_budget=int(raw.get("calibration", {}).get(
                "budget", DEFAULT_CALIBRATION_BUDGET)),
            augment=bool(raw.get("augment", True)),
            train_subset=raw.get("train_subset"),
            build_query_table=bool(raw.get("build_query_table", True)),
        )
        cfg.validate()
        return cfg

    def validate(self):
        if self.calibration_budget < 1:
            raise ConfigError("calibration budget must be >= 1")
        if not Path(self.spec_path).exists():
            raise ConfigError(f"backbone spec file {self.spec_path} does not exist")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in (0, 1)")
        if self.train_subset is not None and int(self.train_subset) < 2:
            raise ConfigError("train_subset must be >= 2")

    def snapshot(self) -> dict:
        data = asdict(self)
        data["schedule"] = asdict(self.schedule)
        return data


def _atomic_write(path: Path, writer):
    tmp = path.with_name(path.name + ".tmp")
    writer(tmp)
    os.replace(tmp, path)


def _write_metrics_csv(path: Path, history):
    def write(p):
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(
                ["epoch", "lr", "loss_total", "loss_full", "loss_sub_mean",
                 "teacher_acc", "seconds"]
            )
            for m in history:
                w.writerow(
                    [m.epoch, f"{m.lr:.6g}", f"{m.loss_total:.6f}", f"{m.loss_full:.6f}",
                     f"{m.loss_sub_mean:.6f}", f"{m.teacher_acc:.6f}", f"{m.seconds:.2f}"]
                )

    _atomic_write(path, write)


def run(config: RunConfig, force: bool = False, quiet: bool = False) -> dict:
    """Full pipeline: train, calibrate, build the query table, export the
    frontier. Returns the run record (also written as JSON)."""
    out = Path(config.output_dir)
    record_path = out / "run_record.json"
    if record_path.exists() and not force:
        raise ConfigError(
            f"{record_path} already exists; pass --force to overwrite the run"
        )
    out.mkdir(parents=True, exist_ok=True)

    def say(msg):
        if not quiet:
            print(msg, flush=True)

    spec = SlimmableModelSpec.load(config.spec_path)
    splits = load_dataset(
        config.dataset_name,
        config.dataset_root,
        seed=config.seed,
        val_fraction=config.val_fraction,
        download=config.download,
    )
    if splits.train.num_classes != spec.num_classes:
        raise ConfigError(
            f"dataset has {splits.train.num_classes} classes, "
            f"backbone expects {spec.num_classes}"
        )
    train_set = splits.train
    if config.train_subset:
        train_set = torch.utils.data.Subset(train_set, range(int(config.train_subset)))

    independent = (
        config.independent_width,
        config.independent_resolution or max(spec.resolutions),
    )

    t_start = time.time()
    say(f"[train] mode={config.mode} seed={config.seed} "
        f"epochs={config.schedule.epochs} train_size={len(train_set)}")
    net, history = run_training(
        config.mode,
        spec,
        train_set,
        config.schedule,
        seed=config.seed,
        independent_config=independent,
        augment=config.augment,
        on_epoch=lambda m: say(
            f"  epoch {m.epoch}: loss={m.loss_total:.4f} acc={m.teacher_acc:.3f} "
            f"({m.seconds:.1f}s)"
        ),
    )

    metrics_path = out / "metrics.csv"
    _write_metrics_csv(metrics_path, history)

    bank = BNStatsBank(calibration_sample_budget=config.calibration_budget)

    def calibration_stream():
        loader = make_loader(train_set, batch_size=128, shuffle=False)
        return (images for images, _ in loader)

    def val_loader():
        return make_loader(splits.val, batch_size=256, shuffle=False)

    table = None
    table_path = None
    frontier_path = None
    if config.build_query_table:
        say(f"[table] grid {len(width_grid(spec.width_lower_bound))} widths x "
            f"{len(spec.resolutions)} resolutions")
        table = build_table(
            net,
            bank,
            calibration_stream,
            val_loader,
            budget=config.calibration_budget,
            progress=lambda row: say(
                f"  ({row.width:.2f}x, {row.resolution}) "
                f"{row.mflops:.2f} MF top1={row.top1:.3f}"
            ),
        )
        table_path = out / "table.csv"
        _atomic_write(table_path, table.save_csv)
        front = frontier(table)
        frontier_path = out / "frontier.csv"
        _atomic_write(frontier_path, lambda p: write_frontier_csv(p, front))
        from .plots import plot_frontiers

        plot_frontiers([(config.mode, front)], out / "frontier.png")
    else:
        # still calibrate and score the deployed full configuration
        full = spec.config(1.0, max(spec.resolutions))
        from .core import materialize_subnet
        from .norm import calibrate as _calibrate

        bank.put(
            full,
            _calibrate(
                materialize_subnet(net, 1.0), full, calibration_stream(),
                budget=config.calibration_budget,
            ),
        )

    test_loader = make_loader(splits.test, batch_size=256, shuffle=False)
    full_config = spec.config(1.0, max(spec.resolutions))
    if full_config not in bank:
        from .core import materialize_subnet
        from .norm import calibrate as _calibrate

        bank.put(
            full_config,
            _calibrate(
                materialize_subnet(net, 1.0), full_config, calibration_stream(),
                budget=config.calibration_budget,
            ),
        )
    final_top1 = evaluate_top1(net, full_config, bank, test_loader)

    ckpt_path = out / "checkpoint.pt"
    save_checkpoint(
        ckpt_path, net, bank=bank,
        meta={"mode": config.mode, "seed": config.seed, "dataset": splits.meta},
    )

    record = {
        "version": 1,
        "config": config.snapshot(),
        "seed": config.seed,
        "dataset": splits.meta,
        "epochs": [
            {"epoch": m.epoch, "loss_total": m.loss_total, "loss_full": m.loss_full,
             "loss_sub_mean": m.loss_sub_mean, "teacher_acc": m.teacher_acc}
            for m in history
        ],
        "checkpoint": str(ckpt_path),
        "metrics_csv": str(metrics_path),
        "table_csv": str(table_path) if table_path else None,
        "frontier_csv": str(frontier_path) if frontier_path else None,
        "final_full_config_top1": final_top1,
        "wall_clock_s": time.time() - t_start,
    }
    _atomic_write(record_path, lambda p: Path(p).write_text(json.dumps(record, indent=2)))
    say(f"[done] full-config test top1={final_top1:.4f} "
        f"wall={record['wall_clock_s']:.1f}s record={record_path}")
    return record


def _dominance_fractions(tables: dict[str, QueryTable], grid_points: int = 201):
    """Best-accuracy-under-budget curves plus pairwise win fractions.

    Returns (budgets, curves, matrix, labels); ties at a budget point count
    half a win for each side. Raises ValueError when cost ranges are
    disjoint.
    """
    labels = list(tables)
    fronts = {k: frontier(t) for k, t in tables.items()}
    lo = max(min(r.mflops for r in f) for f in fronts.values())
    hi = min(max(r.mflops for r in f) for f in fronts.values())
    if hi < lo:
        raise ValueError("cost ranges are disjoint; no shared budget grid")
    budgets = np.linspace(lo, hi, grid_points)

    def acc_under(front, budget):
        best = None
        for row in front:
            if row.mflops <= budget + 1e-12:
                best = row.top1 if best is None else max(best, row.top1)
        return best

    curves = {
        k: np.array([acc_under(f, b) for b in budgets], dtype=float)
        for k, f in fronts.items()
    }
    n = len(labels)
    matrix = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i == j:
                matrix[i, j] = 0.5
                continue
            wins = float(np.sum(curves[labels[i]] > curves[labels[j]]))
            ties = float(np.sum(curves[labels[i]] == curves[labels[j]]))
            matrix[i, j] = (wins + 0.5 * ties) / len(budgets)
    return budgets, curves, matrix, labels


def compare(table_paths, labels, out_dir, grid_points: int = 201, quiet: bool = False):
    """Aligned frontier export plus dominance statistics for >= 2 runs."""
    if len(table_paths) < 2:
        raise ConfigError("compare needs at least two runs or tables")
    if labels and len(labels) != len(table_paths):
        raise ConfigError("--labels must match the number of inputs")
    resolved = [_resolve_table(p) for p in table_paths]
    if not labels:
        labels = [name for name, _ in resolved]
    tables = dict(zip(labels, (t for _, t in resolved)))
    if len(tables) != len(resolved):
        raise ConfigError("duplicate labels; pass --labels to disambiguate")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fronts = {k: frontier(t) for k, t in tables.items()}

    from .plots import plot_frontiers

    plot_frontiers(list(fronts.items()), out / "comparison.png")

    try:
        budgets, curves, matrix, names = _dominance_fractions(tables, grid_points)
    except ValueError as exc:
        print(f"warning: {exc}; writing frontiers only", file=sys.stderr)
        for name, front in fronts.items():
            write_frontier_csv(out / f"frontier_{name}.csv", front)
        return None

    def write_comparison(p):
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["budget_mflops"] + [f"{n}_top1" for n in names])
            for i, b in enumerate(budgets):
                w.writerow([f"{b:.6f}"] + [f"{curves[n][i]:.6f}" for n in names])

    _atomic_write(out / "comparison.csv", write_comparison)

    def write_dominance(p):
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method"] + names)
            for i, name in enumerate(names):
                w.writerow([name] + [f"{matrix[i, j]:.6f}" for j in range(len(names))])

    _atomic_write(out / "dominance.csv", write_dominance)

    if not quiet:
        for i, name in enumerate(names):
            others = [f"{matrix[i, j]:.3f} vs {names[j]}" for j in range(len(names)) if j != i]
            print(f"{name}: wins {', '.join(others)}")
    return {"budgets": budgets, "curves": curves, "matrix": matrix, "labels": names}


def _resolve_table(path) -> tuple[str, QueryTable]:
    """Accept a run directory (with run_record.json), record file, or CSV."""
    p = Path(path)
    if p.is_dir():
        record = p / "run_record.json"
        if not record.exists():
            raise ConfigError(f"{p} has no run_record.json")
        data = json.loads(record.read_text())
        if not data.get("table_csv"):
            raise ConfigError(f"run {p} did not build a query table")
        return data["config"]["mode"], QueryTable.load_csv(data["table_csv"])
    if p.suffix == ".json":
        data = json.loads(p.read_text())
        return data["config"]["mode"], QueryTable.load_csv(data["table_csv"])
    return p.stem, QueryTable.load_csv(p)


def _dataset_args(parser):
    parser.add_argument("--dataset", required=True, help="cifar10 | cifar100 | folder-of-images")
    parser.add_argument("--data-root", required=True)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--val-fraction", type=float, default=0.1)


def _cmd_train(args):
    overrides = {
        "mode": args.mode,
        "seed": args.seed,
        "epochs": args.epochs,
        "output_dir": args.output_dir,
    }
    config = RunConfig.from_file(args.config, overrides)
    run(config, force=args.force, quiet=args.quiet)
    return 0


def _cmd_flops(args):
    spec = SlimmableModelSpec.load(args.spec)
    widths = (
        [float(w) for w in args.widths.split(",")]
        if args.widths
        else width_grid(spec.width_lower_bound)
    )
    resolutions = (
        [int(r) for r in args.resolutions.split(",")]
        if args.resolutions
        else list(spec.resolutions)
    )
    reports = cost_grid(spec, widths, resolutions)
    if args.out:
        write_cost_csv(args.out, reports)
        print(f"wrote {len(reports)} rows to {args.out}")
    else:
        print("width,resolution,mflops")
        for r in reports:
            print(f"{r.config.width:.4g},{r.config.resolution},{r.mflops:.6f}")
    return 0


def _load_for_eval(args):
    net, bank, meta = load_checkpoint(args.checkpoint)
    splits = load_dataset(
        args.dataset, args.data_root, seed=args.seed, val_fraction=args.val_fraction
    )
    return net, bank or BNStatsBank(), splits


def _cmd_calibrate(args):
    net, bank, splits = _load_for_eval(args)
    spec = net.spec
    widths = (
        [float(w) for w in args.widths.split(",")]
        if args.widths
        else width_grid(spec.width_lower_bound)
    )
    resolutions = (
        [int(r) for r in args.resolutions.split(",")]
        if args.resolutions
        else list(spec.resolutions)
    )
    from .core import materialize_subnet
    from .norm import calibrate as _calibrate

    for w in widths:
        for r in resolutions:
            config = spec.config(w, r)
            loader = make_loader(splits.train, batch_size=128, shuffle=False)
            stream = (images for images, _ in loader)
            entry = _calibrate(
                materialize_subnet(net, w), config, stream, budget=args.budget
            )
            bank.put(config, entry)
            print(f"calibrated ({w:.2f}x, {r}) over {entry.sample_count} samples")
    out = args.out or args.checkpoint
    save_checkpoint(out, net, bank=bank, meta={"calibration_budget": args.budget})
    print(f"saved statistics for {len(bank)} configurations to {out}")
    return 0


def _cmd_table(args):
    net, bank, splits = _load_for_eval(args)

    def calibration_stream():
        loader = make_loader(splits.train, batch_size=128, shuffle=False)
        return (images for images, _ in loader)

    def val_loader():
        return make_loader(splits.val, batch_size=256, shuffle=False)

    table = build_table(
        net, bank, calibration_stream, val_loader, budget=args.budget,
        progress=lambda row: print(
            f"({row.width:.2f}x, {row.resolution}) {row.mflops:.2f} MF top1={row.top1:.3f}"
        ),
    )
    _atomic_write(Path(args.out), table.save_csv)
    save_checkpoint(args.checkpoint, net, bank=bank, meta={})
    print(f"wrote {len(table)} rows to {args.out}")
    return 0


def _cmd_plan(args):
    table = QueryTable.load_csv(args.table)
    row = select_config(table, args.budget)
    print(
        f"best under {args.budget:.6g} MFLOPs: width={row.width:.4g} "
        f"resolution={row.resolution} cost={row.mflops:.6f} MFLOPs top1={row.top1:.4f}"
    )
    return 0


def _cmd_frontier(args):
    table = QueryTable.load_csv(args.table)
    front = frontier(table)
    write_frontier_csv(args.out, front)
    print(f"{len(front)} non-dominated rows -> {args.out}")
    if args.plot:
        from .plots import plot_frontiers

        plot_frontiers([(Path(args.table).stem, front)], args.plot)
        print(f"figure -> {args.plot}")
    return 0


def _cmd_compare(args):
    compare(args.inputs, args.labels, args.out, grid_points=args.grid_points)
    print(f"comparison artifacts -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slimres",
        description="Width-resolution adaptive network training and planning",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run train -> calibrate -> table -> frontier")
    p.add_argument("--config", required=True, help="run configuration YAML")
    p.add_argument("--mode", choices=TRAINING_MODES, help="override config mode")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--epochs", type=int, help="override schedule epochs")
    p.add_argument("--output-dir", help="override config output_dir")
    p.add_argument("--force", action="store_true", help="overwrite an existing run")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("flops", help="emit the analytic cost grid as CSV")
    p.add_argument("--spec", required=True, help="backbone description YAML")
    p.add_argument("--widths", help="comma-separated widths (default: 0.05 grid)")
    p.add_argument("--resolutions", help="comma-separated resolutions")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=_cmd_flops)

    p = sub.add_parser("calibrate", help="collect per-config normalization statistics")
    p.add_argument("--checkpoint", required=True)
    _dataset_args(p)
    p.add_argument("--widths", help="comma-separated widths (default: 0.05 grid)")
    p.add_argument("--resolutions", help="comma-separated resolutions")
    p.add_argument("--budget", type=int, default=DEFAULT_CALIBRATION_BUDGET)
    p.add_argument("--out", help="write to a new checkpoint instead of in place")
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("table", help="build the width x resolution query table")
    p.add_argument("--checkpoint", required=True)
    _dataset_args(p)
    p.add_argument("--budget", type=int, default=DEFAULT_CALIBRATION_BUDGET)
    p.add_argument("--out", required=True, help="table CSV path")
    p.set_defaults(func=_cmd_table)

    p = sub.add_parser("plan", help="select the best configuration under a budget")
    p.add_argument("--table", required=True, help="query table CSV")
    p.add_argument("--budget", type=float, required=True, help="budget in MFLOPs")
    p.set_defaults(func=_cmd_plan)

    p = sub.add_parser("frontier", help="export the non-dominated rows")
    p.add_argument("--table", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--plot", help="also render a PNG figure")
    p.set_defaults(func=_cmd_frontier)

    p = sub.add_parser("compare", help="overlay runs and compute dominance stats")
    p.add_argument("inputs", nargs="+", help="run dirs, run_record.json files or table CSVs")
    p.add_argument("--labels", nargs="*", default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--grid-points", type=int, default=201)
    p.set_defaults(func=_cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except SlimresError as exc:
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
