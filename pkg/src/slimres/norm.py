"""Normalization during training and per-configuration statistics afterwards.

During training every sampled sub-network normalizes with its own
current-batch statistics; the learnable scale/shift are leading slices of
shared parameters. After training, `calibrate` streams a small number of
samples through a frozen sub-network and records per-layer mean/variance,
which evaluation-mode normalization then requires.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CalibrationRequiredError, DegenerateBatchError, InsufficientDataError

BANK_VERSION = 1
DEFAULT_CALIBRATION_BUDGET = 2000  # samples; small streams are enough in practice


class SliceBatchNorm2d(nn.Module):
    """Batch norm whose scale/shift are sliced views of shared parameters.

    Three normalization sources, in priority order:
      * `stats=(mean, var)` — calibrated statistics for the active config;
      * batch statistics — in training mode, or when `force_batch_stats`;
      * otherwise evaluation without calibration is refused.
    """

    def __init__(self, num_features: int, eps: float = 1e-5):
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(num_features))
        self.bias = nn.Parameter(torch.zeros(num_features))

    def forward(self, x, stats=None, force_batch_stats: bool = False):
        c = x.shape[1]
        gamma = self.weight[:c]
        beta = self.bias[:c]
        if stats is not None:
            mean, var = stats
            if mean.numel() != c or var.numel() != c:
                raise ValueError(
                    f"calibrated statistics carry {mean.numel()} channels, "
                    f"activations carry {c}"
                )
            return F.batch_norm(
                x, mean.to(x.dtype), var.to(x.dtype), gamma, beta,
                training=False, momentum=0.0, eps=self.eps,
            )
        if self.training or force_batch_stats:
            if self.training and x.shape[0] < 2:
                raise DegenerateBatchError(
                    f"batch statistics need at least 2 samples, got {x.shape[0]}"
                )
            return F.batch_norm(
                x, None, None, gamma, beta, training=True, momentum=0.0, eps=self.eps
            )
        raise CalibrationRequiredError(
            "evaluation-mode normalization needs calibrated statistics; "
            "run calibrate() for this configuration first"
        )


class StreamingMoments:
    """Numerically stable one-pass per-channel mean/variance accumulator."""

    def __init__(self, channels: int):
        self.count = 0
        self.mean = torch.zeros(channels, dtype=torch.float64)
        self.m2 = torch.zeros(channels, dtype=torch.float64)

    def update(self, x: torch.Tensor):
        # x: (N, C, H, W); every spatial position of every sample is one value
        x = x.detach().to(torch.float64)
        n_b = x.shape[0] * x.shape[2] * x.shape[3]
        batch_mean = x.mean(dim=(0, 2, 3))
        batch_m2 = x.var(dim=(0, 2, 3), unbiased=False) * n_b
        delta = batch_mean - self.mean
        total = self.count + n_b
        self.mean = self.mean + delta * (n_b / total)
        self.m2 = self.m2 + batch_m2 + delta.pow(2) * (self.count * n_b / total)
        self.count = total

    def moments(self) -> tuple[torch.Tensor, torch.Tensor]:
        if self.count == 0:
            raise InsufficientDataError("no samples accumulated")
        return self.mean.clone(), self.m2 / self.count


@dataclass
class BankEntry:
    """Per-layer calibrated statistics for one (width, resolution) config."""

    means: list[torch.Tensor]
    variances: list[torch.Tensor]
    sample_count: int

    def __post_init__(self):
        if len(self.means) != len(self.variances):
            raise ValueError("means and variances must pair up per layer")
        for v in self.variances:
            if (v < 0).any():
                raise ValueError("variance entries must be non-negative")

    def stats(self) -> list[tuple[torch.Tensor, torch.Tensor]]:
        return list(zip(self.means, self.variances))

    def channel_counts(self) -> list[int]:
        return [int(m.numel()) for m in self.means]


class BNStatsBank:
    """Calibrated statistics keyed by (width, resolution)."""

    def __init__(self, calibration_sample_budget: int = DEFAULT_CALIBRATION_BUDGET):
        self.calibration_sample_budget = calibration_sample_budget
        self.entries: dict[tuple[float, int], BankEntry] = {}

    @staticmethod
    def _key(config) -> tuple[float, int]:
        return config.key()

    def put(self, config, entry: BankEntry):
        self.entries[self._key(config)] = entry

    def get(self, config) -> BankEntry:
        key = self._key(config)
        if key not in self.entries:
            raise CalibrationRequiredError(
                f"no calibrated statistics for width={key[0]} resolution={key[1]}"
            )
        return self.entries[key]

    def __contains__(self, config) -> bool:
        return self._key(config) in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def state_dict(self) -> dict:
        return {
            "version": BANK_VERSION,
            "budget": self.calibration_sample_budget,
            "entries": {
                key: {
                    "means": [m for m in e.means],
                    "variances": [v for v in e.variances],
                    "sample_count": e.sample_count,
                }
                for key, e in self.entries.items()
            },
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "BNStatsBank":
        if state.get("version") != BANK_VERSION:
            raise ValueError(f"unsupported statistics bank version {state.get('version')}")
        bank = cls(calibration_sample_budget=state["budget"])
        for key, e in state["entries"].items():
            bank.entries[tuple(key)] = BankEntry(
                means=list(e["means"]),
                variances=list(e["variances"]),
                sample_count=e["sample_count"],
            )
        return bank


def calibrate(view, config, stream, budget: int | None = None) -> BankEntry:
    """Collect per-layer statistics for `config` over a frozen weight store.

    `stream` yields image batches (or (images, labels) pairs) at any
    resolution; each batch is resized to `config.resolution` before the
    forward pass. Exactly `budget` samples are consumed when the stream
    provides them; a shorter stream is used in full, an empty one is an
    error. Learnable weights are untouched, and distinct configs may
    calibrate concurrently over the same frozen store (all collection state
    lives in this call).
    """
    if budget is None:
        budget = DEFAULT_CALIBRATION_BUDGET
    if budget < 1:
        raise ValueError(f"calibration budget must be >= 1, got {budget}")

    accumulators = [StreamingMoments(c) for c in _norm_channels(view)]

    seen = 0
    with torch.no_grad():
        for batch in stream:
            images = batch[0] if isinstance(batch, (tuple, list)) else batch
            if seen + images.shape[0] > budget:
                images = images[: budget - seen]
            if images.shape[-1] != config.resolution:
                images = F.interpolate(
                    images, size=(config.resolution, config.resolution),
                    mode="bilinear", align_corners=False,
                )
            taps = []
            view(images, force_batch_stats=True, norm_taps=taps)
            for acc, x in zip(accumulators, taps):
                acc.update(x)
            seen += images.shape[0]
            if seen >= budget:
                break

    if seen == 0:
        raise InsufficientDataError("calibration stream yielded no samples")

    means, variances = [], []
    for acc in accumulators:
        mean, var = acc.moments()
        means.append(mean)
        variances.append(var)
    return BankEntry(means=means, variances=variances, sample_count=seen)


def _norm_channels(view) -> list[int]:
    counts = []
    for layer, (_, out_ch) in zip(view.spec.layers, view.channels()):
        if layer.kind == "normalization":
            counts.append(out_ch)
    return counts
