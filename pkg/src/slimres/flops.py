"""Analytic multiply-accumulate cost model over (width, resolution).

Counts follow the usual convention: a vanilla convolution costs
C1*C2*K*K*H*W with H, W the output size, a group convolution divides by the
group count, a fully-connected layer costs in*out. Bias, normalization,
activation and pooling are free. User-facing output labels these counts
"MFLOPs", matching how they are reported in the literature.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from .core import LayerSpec, SlimmableModelSpec, SubnetConfig


@dataclass(frozen=True)
class LayerCost:
    index: int
    kind: str
    macs: int


@dataclass(frozen=True)
class CostReport:
    config: SubnetConfig
    per_layer: tuple[LayerCost, ...]
    total: int

    def __post_init__(self):
        if self.total != sum(c.macs for c in self.per_layer):
            raise ValueError("total must equal the sum of per-layer costs")
        if any(c.macs < 0 for c in self.per_layer):
            raise ValueError("layer costs must be non-negative")

    @property
    def mflops(self) -> float:
        return self.total / 1e6


def layer_cost(layer: LayerSpec, in_ch: int, out_ch: int, out_h: int, out_w: int) -> int:
    """MACs for one layer at already-resolved sliced channels and output size."""
    if out_h < 1 or out_w < 1 or in_ch < 1 or out_ch < 1:
        raise ValueError("channel counts and output dims must be positive")
    k2 = layer.kernel * layer.kernel
    if layer.kind == "convolution":
        return in_ch * out_ch * k2 * out_h * out_w
    if layer.kind == "depthwise-convolution":
        # groups equal channels: each output channel reads one input channel
        return out_ch * k2 * out_h * out_w
    if layer.kind == "group-convolution":
        return in_ch * (out_ch // layer.groups) * k2 * out_h * out_w
    if layer.kind == "fully-connected":
        return in_ch * out_ch
    return 0


def network_cost(spec: SlimmableModelSpec, config: SubnetConfig) -> CostReport:
    """Propagate spatial dims and sliced channels through the whole backbone."""
    channels = spec.channels_at(config.width)
    h = w = config.resolution
    per_layer = []
    for i, (layer, (in_ch, out_ch)) in enumerate(zip(spec.layers, channels)):
        if layer.kind in ("convolution", "depthwise-convolution", "group-convolution"):
            h = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
            w = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
            if h < 1 or w < 1:
                raise ValueError(
                    f"resolution {config.resolution} collapses at layer {i}; "
                    "incompatible with the stride pattern"
                )
            macs = layer_cost(layer, in_ch, out_ch, h, w)
        elif layer.kind == "fully-connected":
            macs = layer_cost(layer, in_ch, out_ch, 1, 1)
        else:
            if layer.kind == "pooling":
                h = w = 1
            macs = 0
        per_layer.append(LayerCost(index=i, kind=layer.kind, macs=macs))
    return CostReport(config=config, per_layer=tuple(per_layer), total=sum(c.macs for c in per_layer))


def cost_grid(spec: SlimmableModelSpec, widths, resolutions) -> list[CostReport]:
    return [
        network_cost(spec, SubnetConfig(w, r))
        for w in widths
        for r in resolutions
    ]


def write_cost_csv(path, reports: list[CostReport]):
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["width", "resolution", "mflops"])
        for report in reports:
            writer.writerow(
                [f"{report.config.width:.4g}", report.config.resolution, f"{report.mflops:.6f}"]
            )
