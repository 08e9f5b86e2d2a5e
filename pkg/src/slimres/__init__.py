"""Toolkit for training one network executable at any width-resolution
configuration and selecting the best configuration under a FLOPs budget."""

from .core import (
    LayerSpec,
    SlimmableModelSpec,
    SlimmableNetwork,
    SubnetConfig,
    SubnetView,
    load_checkpoint,
    materialize_subnet,
    save_checkpoint,
    sliced_channels,
)
from .flops import CostReport, layer_cost, network_cost
from .norm import BankEntry, BNStatsBank, SliceBatchNorm2d, calibrate
from .planner import QueryTable, TableRow, build_table, frontier, select_config, width_grid
from .trainer import (
    LossBreakdown,
    TrainSchedule,
    TrainStepPlan,
    compute_losses,
    run_training,
    sample_plan,
    train_step,
)

__version__ = "0.1.0"

__all__ = [
    "LayerSpec",
    "SlimmableModelSpec",
    "SlimmableNetwork",
    "SubnetConfig",
    "SubnetView",
    "sliced_channels",
    "materialize_subnet",
    "save_checkpoint",
    "load_checkpoint",
    "CostReport",
    "layer_cost",
    "network_cost",
    "BankEntry",
    "BNStatsBank",
    "SliceBatchNorm2d",
    "calibrate",
    "QueryTable",
    "TableRow",
    "build_table",
    "frontier",
    "select_config",
    "width_grid",
    "LossBreakdown",
    "TrainSchedule",
    "TrainStepPlan",
    "compute_losses",
    "sample_plan",
    "train_step",
    "run_training",
]
