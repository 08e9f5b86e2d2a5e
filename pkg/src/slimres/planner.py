"""Query-table construction and budget-constrained configuration selection.

After training, every (width, resolution) grid point is evaluated once on a
validation set with calibrated normalization statistics; the resulting table
is persisted and reused for all later budget queries.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from .core import SlimmableNetwork, SubnetConfig, materialize_subnet
from .errors import InfeasibleBudgetError
from .flops import network_cost
from .norm import BNStatsBank, calibrate

WIDTH_STEP = 0.05


def width_grid(lower: float, step: float = WIDTH_STEP) -> list[float]:
    """Widths from the lower bound to 1.0 inclusive, rounded to the grid."""
    if not 0 < lower < 1.0 + 1e-9:
        raise ValueError(f"lower bound must be in (0, 1], got {lower}")
    n = int(round((1.0 - lower) / step))
    grid = [round(lower + i * step, 4) for i in range(n + 1)]
    if grid[-1] != 1.0:
        grid.append(1.0)
    return grid


@dataclass(frozen=True)
class TableRow:
    width: float
    resolution: int
    mflops: float
    top1: float

    def config(self) -> SubnetConfig:
        return SubnetConfig(self.width, self.resolution)


@dataclass
class QueryTable:
    """Rows over the full width x resolution grid, one per configuration."""

    rows: list[TableRow]

    def __post_init__(self):
        seen = set()
        for row in self.rows:
            key = (round(row.width, 4), row.resolution)
            if key in seen:
                raise ValueError(f"duplicate configuration {key} in table")
            seen.add(key)
        by_res: dict[int, list[TableRow]] = {}
        for row in self.rows:
            by_res.setdefault(row.resolution, []).append(row)
        for res, rows in by_res.items():
            rows = sorted(rows, key=lambda r: r.width)
            for a, b in zip(rows, rows[1:]):
                if not b.mflops > a.mflops:
                    raise ValueError(
                        f"cost must strictly increase with width at resolution {res}: "
                        f"{a.width}->{a.mflops} vs {b.width}->{b.mflops}"
                    )

    def __len__(self):
        return len(self.rows)

    def save_csv(self, path):
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["width", "resolution", "mflops", "top1"])
            for row in sorted(self.rows, key=lambda r: (r.mflops, r.width, r.resolution)):
                writer.writerow(
                    [f"{row.width:.4g}", row.resolution, f"{row.mflops:.6f}", f"{row.top1:.6f}"]
                )

    @classmethod
    def load_csv(cls, path) -> "QueryTable":
        rows = []
        with Path(path).open() as fh:
            for rec in csv.DictReader(fh):
                rows.append(
                    TableRow(
                        width=float(rec["width"]),
                        resolution=int(rec["resolution"]),
                        mflops=float(rec["mflops"]),
                        top1=float(rec["top1"]),
                    )
                )
        return cls(rows=rows)


def evaluate_top1(
    net: SlimmableNetwork,
    config: SubnetConfig,
    bank: BNStatsBank,
    loader,
    use_batch_stats: bool = False,
) -> float:
    """Top-1 accuracy at one configuration with calibrated statistics.

    `use_batch_stats=True` skips the bank and normalizes every evaluation
    batch with its own statistics (the baseline post-statistics calibration
    is compared against).
    """
    stats = None if use_batch_stats else bank.get(config).stats()
    net.eval()
    correct = 0
    total = 0
    with torch.no_grad():
        for images, labels in loader:
            if images.shape[-1] != config.resolution:
                images = F.interpolate(
                    images,
                    size=(config.resolution, config.resolution),
                    mode="bilinear",
                    align_corners=False,
                )
            logits = net(
                images,
                width=config.width,
                norm_stats=stats,
                force_batch_stats=use_batch_stats,
            )
            correct += int((logits.argmax(1) == labels).sum())
            total += labels.shape[0]
    return correct / max(1, total)


def build_table(
    net: SlimmableNetwork,
    bank: BNStatsBank,
    calibration_stream_factory,
    val_loader_factory,
    widths=None,
    resolutions=None,
    budget: int | None = None,
    progress=None,
) -> QueryTable:
    """Evaluate every grid configuration once, calibrating inline when needed.

    The stream/loader factories are called per configuration so each one sees
    the same data order, keeping the table deterministic for a fixed
    checkpoint and seed.
    """
    spec = net.spec
    if widths is None:
        widths = width_grid(spec.width_lower_bound)
    if resolutions is None:
        resolutions = list(spec.resolutions)
    rows = []
    for w in widths:
        for r in resolutions:
            config = spec.config(w, r)
            if config not in bank:
                view = materialize_subnet(net, w)
                entry = calibrate(view, config, calibration_stream_factory(), budget=budget)
                bank.put(config, entry)
            top1 = evaluate_top1(net, config, bank, val_loader_factory())
            cost = network_cost(spec, config)
            rows.append(
                TableRow(width=round(w, 4), resolution=r, mflops=cost.mflops, top1=top1)
            )
            if progress is not None:
                progress(rows[-1])
    return QueryTable(rows=rows)


def select_config(table: QueryTable, budget_mflops: float) -> TableRow:
    """Highest-accuracy row within budget; ties prefer cheaper, then smaller.

    Ties on accuracy break toward lower MFLOPs, then lower resolution.
    """
    feasible = [r for r in table.rows if r.mflops <= budget_mflops]
    if not feasible:
        cheapest = min(r.mflops for r in table.rows)
        raise InfeasibleBudgetError(
            f"budget {budget_mflops} MFLOPs below cheapest configuration ({cheapest:.3f})"
        )
    return min(feasible, key=lambda r: (-r.top1, r.mflops, r.resolution))


def frontier(table: QueryTable) -> list[TableRow]:
    """Rows not dominated in both cost and accuracy, sorted by MFLOPs.

    A row is dominated when some other row costs no more and is strictly
    more accurate.
    """
    if not table.rows:
        raise ValueError("table is empty")
    ordered = sorted(table.rows, key=lambda r: (r.mflops, -r.top1))
    out = []
    best = -1.0
    i = 0
    while i < len(ordered):
        j = i
        group_best = -1.0
        while j < len(ordered) and ordered[j].mflops == ordered[i].mflops:
            group_best = max(group_best, ordered[j].top1)
            j += 1
        # a row survives unless something at most as expensive is strictly better
        for k in range(i, j):
            if ordered[k].top1 >= group_best and ordered[k].top1 >= best:
                out.append(ordered[k])
        best = max(best, group_best)
        i = j
    return out


def write_frontier_csv(path, rows: list[TableRow]):
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["width", "resolution", "mflops", "top1"])
        for row in rows:
            writer.writerow(
                [f"{row.width:.4g}", row.resolution, f"{row.mflops:.6f}", f"{row.top1:.6f}"]
            )
