"""Backbone descriptions and prefix slicing over one shared weight store.

A backbone is described layer by layer (`LayerSpec`), and every admissible
width materializes a sub-network that uses the leading slice of each layer's
parameters. Views alias the shared parameter storage, so backward passes
through several views accumulate gradients into the same tensors without any
copying.

Concurrency: the weight store is single-writer during training steps; views
are read-only aliases that are safe for concurrent evaluation forwards. No
internal locking is performed.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F
import yaml

from .errors import WidthBoundError
from .norm import SliceBatchNorm2d

CHECKPOINT_VERSION = 1

LAYER_KINDS = (
    "convolution",
    "depthwise-convolution",
    "group-convolution",
    "fully-connected",
    "normalization",
    "pooling",
    "activation",
)

_CHANNELED_KINDS = ("convolution", "depthwise-convolution", "group-convolution", "fully-connected")


def check_width(width: float) -> float:
    """Validate a width multiplier, returning it as a float."""
    w = float(width)
    if not 0.0 < w <= 1.0:
        raise ValueError(f"width multiplier must be in (0, 1], got {width}")
    return w


def sliced_channels(base_channels: int, width: float, divisor: int = 8) -> int:
    """Channel count of the leading slice at `width`.

    Rounds to the nearest multiple of `divisor` (Python round-half-to-even at
    exact halves) and never drops below one divisor group, so group
    convolutions stay valid at every width. Full width always returns the
    base count unchanged.
    """
    check_width(width)
    if base_channels < 1:
        raise ValueError(f"base_channels must be >= 1, got {base_channels}")
    if divisor < 1:
        raise ValueError(f"divisor must be >= 1, got {divisor}")
    if width == 1.0:
        return base_channels
    return max(divisor, round(base_channels * width / divisor) * divisor)


@dataclass(frozen=True)
class LayerSpec:
    """One backbone layer.

    `base_in_channels`/`base_out_channels` are the full-width counts; sliced
    counts derive from them at materialization time. Kinds without parameters
    (pooling, activation) carry channels only to document the interface.
    """

    kind: str
    base_in_channels: int = 0
    base_out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    groups: int = 1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kernel < 1 or self.stride < 1 or self.groups < 1:
            raise ValueError("kernel, stride and groups must all be >= 1")
        if self.kind in _CHANNELED_KINDS:
            if self.base_in_channels < 1 or self.base_out_channels < 1:
                raise ValueError(f"{self.kind} layer needs positive channel counts")
        if self.kind == "depthwise-convolution" and self.base_in_channels != self.base_out_channels:
            raise ValueError("depthwise layers must keep channel count")

    @property
    def padding(self) -> int:
        # same-style padding; keeps spatial size at stride 1 for odd kernels
        return (self.kernel - 1) // 2


@dataclass(frozen=True)
class SubnetConfig:
    """A (width multiplier, input resolution) execution point."""

    width: float
    resolution: int

    def __post_init__(self):
        check_width(self.width)
        if self.resolution < 1:
            raise ValueError(f"resolution must be positive, got {self.resolution}")

    def key(self) -> tuple[float, int]:
        return (round(self.width, 4), int(self.resolution))


@dataclass(frozen=True)
class SlimmableModelSpec:
    """Backbone description from which any width-sliced sub-network derives.

    The first layer's input channels and the classifier's output units are
    never sliced; everything in between scales with the width multiplier,
    rounded to `channel_divisor` groups.
    """

    layers: tuple[LayerSpec, ...]
    width_lower_bound: float
    channel_divisor: int
    num_classes: int
    input_channels: int
    resolutions: tuple[int, ...]
    name: str = "backbone"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "resolutions", tuple(int(r) for r in self.resolutions))
        check_width(self.width_lower_bound)
        if self.channel_divisor < 1:
            raise ValueError("channel_divisor must be >= 1")
        if self.num_classes < 1 or self.input_channels < 1:
            raise ValueError("num_classes and input_channels must be positive")
        if not self.resolutions:
            raise ValueError("resolution set must be non-empty")
        if list(self.resolutions) != sorted(set(self.resolutions), reverse=True):
            raise ValueError("resolution set must be strictly decreasing")
        if any(r < 1 for r in self.resolutions):
            raise ValueError("resolutions must be positive")
        self._validate_layers()

    def _validate_layers(self):
        d = self.channel_divisor
        running = self.input_channels
        saw_classifier = False
        for i, layer in enumerate(self.layers):
            if saw_classifier:
                raise ValueError("no layers allowed after the classifier")
            if layer.kind in _CHANNELED_KINDS and layer.base_in_channels != running:
                raise ValueError(
                    f"layer {i} ({layer.kind}) expects {layer.base_in_channels} input "
                    f"channels but receives {running}"
                )
            if layer.kind == "convolution":
                if layer.base_out_channels % d:
                    raise ValueError(f"layer {i}: out channels must be divisible by {d}")
                running = layer.base_out_channels
            elif layer.kind == "depthwise-convolution":
                if layer.base_out_channels % d:
                    raise ValueError(f"layer {i}: channels must be divisible by {d}")
            elif layer.kind == "group-convolution":
                if d % layer.groups:
                    # divisor multiples stay divisible by groups at every width
                    raise ValueError(
                        f"layer {i}: groups {layer.groups} must divide channel_divisor {d}"
                    )
                if layer.base_out_channels % d:
                    raise ValueError(f"layer {i}: out channels must be divisible by {d}")
                running = layer.base_out_channels
            elif layer.kind == "fully-connected":
                if layer.base_out_channels != self.num_classes:
                    raise ValueError("classifier output must equal num_classes")
                saw_classifier = True
                running = self.num_classes
        if not saw_classifier:
            raise ValueError("backbone must end in a fully-connected classifier")
        # first sliceable layer must take the raw input channels
        first = self.layers[0]
        if first.kind in _CHANNELED_KINDS and first.base_in_channels != self.input_channels:
            raise ValueError("first layer must consume the raw input channels")
        for r in self.resolutions:
            self._walk_spatial(r)

    def _walk_spatial(self, resolution: int) -> list[tuple[int, int]]:
        """Output (h, w) after each layer; raises if any dimension collapses."""
        h = w = int(resolution)
        dims = []
        for i, layer in enumerate(self.layers):
            if layer.kind in ("convolution", "depthwise-convolution", "group-convolution"):
                h = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
                w = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
                if h < 1 or w < 1:
                    raise ValueError(
                        f"resolution {resolution} collapses to {h}x{w} at layer {i}; "
                        "incompatible with the stride pattern"
                    )
            elif layer.kind == "pooling":
                h = w = 1
            dims.append((h, w))
        return dims

    def channels_at(self, width: float) -> list[tuple[int, int]]:
        """Sliced (in, out) channel counts per layer at the given width."""
        check_width(width)
        d = self.channel_divisor
        running = self.input_channels  # first layer input is never sliced
        out = []
        for layer in self.layers:
            if layer.kind in ("convolution", "group-convolution"):
                o = sliced_channels(layer.base_out_channels, width, d)
                out.append((running, o))
                running = o
            elif layer.kind == "depthwise-convolution":
                out.append((running, running))
            elif layer.kind == "fully-connected":
                out.append((running, self.num_classes))  # classes never sliced
                running = self.num_classes
            else:
                out.append((running, running))
        return out

    def config(self, width: float, resolution: int) -> SubnetConfig:
        """Build a SubnetConfig validated against this model's grids."""
        w = check_width(width)
        if w < self.width_lower_bound - 1e-9:
            raise WidthBoundError(
                f"width {width} below configured lower bound {self.width_lower_bound}"
            )
        if int(resolution) not in self.resolutions:
            raise ValueError(
                f"resolution {resolution} not in configured set {self.resolutions}"
            )
        return SubnetConfig(w, int(resolution))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "num_classes": self.num_classes,
            "input_channels": self.input_channels,
            "channel_divisor": self.channel_divisor,
            "width_lower_bound": self.width_lower_bound,
            "resolutions": list(self.resolutions),
            "layers": [
                {k: v for k, v in asdict(layer).items() if not _is_default(layer, k)}
                for layer in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SlimmableModelSpec":
        layers = []
        running = int(data["input_channels"])
        for entry in data["layers"]:
            entry = dict(entry)
            kind = entry["kind"]
            if kind in _CHANNELED_KINDS:
                entry.setdefault("base_in_channels", running)
                if kind == "depthwise-convolution":
                    entry.setdefault("base_out_channels", entry["base_in_channels"])
                if kind == "fully-connected":
                    entry.setdefault("base_out_channels", int(data["num_classes"]))
                running = entry["base_out_channels"]
            layers.append(LayerSpec(**entry))
        return cls(
            layers=tuple(layers),
            width_lower_bound=float(data["width_lower_bound"]),
            channel_divisor=int(data["channel_divisor"]),
            num_classes=int(data["num_classes"]),
            input_channels=int(data["input_channels"]),
            resolutions=tuple(data["resolutions"]),
            name=str(data.get("name", "backbone")),
        )

    def spec_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def save(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path) -> "SlimmableModelSpec":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))


def _is_default(layer: LayerSpec, name: str) -> bool:
    defaults = {"kernel": 1, "stride": 1, "groups": 1}
    return name in defaults and getattr(layer, name) == defaults[name]


class SlimmableConv2d(nn.Module):
    """Convolution whose forward uses the leading slice of a full-size weight."""

    def __init__(self, layer: LayerSpec):
        super().__init__()
        self.kind = layer.kind
        self.kernel = layer.kernel
        self.stride = layer.stride
        self.base_groups = layer.groups
        self.padding = layer.padding
        if layer.kind == "depthwise-convolution":
            shape = (layer.base_out_channels, 1, layer.kernel, layer.kernel)
        elif layer.kind == "group-convolution":
            shape = (
                layer.base_out_channels,
                layer.base_in_channels // layer.groups,
                layer.kernel,
                layer.kernel,
            )
        else:
            shape = (layer.base_out_channels, layer.base_in_channels, layer.kernel, layer.kernel)
        self.weight = nn.Parameter(torch.empty(shape))
        nn.init.kaiming_normal_(self.weight, mode="fan_out", nonlinearity="relu")

    def forward(self, x, in_ch: int, out_ch: int):
        if x.shape[1] != in_ch:
            raise ValueError(f"expected {in_ch} input channels, got {x.shape[1]}")
        if self.kind == "depthwise-convolution":
            w = self.weight[:out_ch]
            groups = out_ch
        elif self.kind == "group-convolution":
            w = self.weight[:out_ch, : in_ch // self.base_groups]
            groups = self.base_groups
        else:
            w = self.weight[:out_ch, :in_ch]
            groups = 1
        return F.conv2d(x, w, None, self.stride, self.padding, groups=groups)


class SlimmableLinear(nn.Module):
    """Classifier head: input features sliced, output classes fixed."""

    def __init__(self, layer: LayerSpec):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(layer.base_out_channels, layer.base_in_channels))
        self.bias = nn.Parameter(torch.zeros(layer.base_out_channels))
        nn.init.normal_(self.weight, std=0.01)

    def forward(self, x, in_ch: int, out_ch: int):
        if x.shape[1] != in_ch:
            raise ValueError(f"expected {in_ch} input features, got {x.shape[1]}")
        return F.linear(x, self.weight[:, :in_ch], self.bias)


class _GlobalAvgPool(nn.Module):
    def forward(self, x):
        return x.mean(dim=(2, 3))


class SlimmableNetwork(nn.Module):
    """The shared weight store plus per-width forward execution.

    `forward(x, width)` runs the sub-network that uses the leading
    `sliced_channels` slice of every layer. In training mode, normalization
    layers use current-batch statistics; in evaluation mode they require
    per-layer calibrated statistics passed via `norm_stats` (see
    `slimres.norm`), unless `force_batch_stats` is set.
    """

    def __init__(self, spec: SlimmableModelSpec):
        super().__init__()
        self.spec = spec
        ops = []
        for layer in spec.layers:
            if layer.kind in ("convolution", "depthwise-convolution", "group-convolution"):
                ops.append(SlimmableConv2d(layer))
            elif layer.kind == "normalization":
                ops.append(SliceBatchNorm2d(layer.base_out_channels))
            elif layer.kind == "activation":
                ops.append(nn.ReLU(inplace=False))
            elif layer.kind == "pooling":
                ops.append(_GlobalAvgPool())
            elif layer.kind == "fully-connected":
                ops.append(SlimmableLinear(layer))
        self.ops = nn.ModuleList(ops)

    @property
    def norm_layers(self) -> list[SliceBatchNorm2d]:
        return [m for m in self.ops if isinstance(m, SliceBatchNorm2d)]

    def forward(
        self,
        x,
        width: float = 1.0,
        norm_stats=None,
        force_batch_stats: bool = False,
        norm_taps=None,
    ):
        """Run the width-`width` sub-network.

        `norm_stats` supplies calibrated per-layer (mean, var) pairs for
        evaluation. `norm_taps`, when given, is a caller-owned list that
        receives each normalization layer's input activations; callers own
        the list, so concurrent forwards never share collection state.
        """
        if x.dim() != 4 or x.shape[1] != self.spec.input_channels:
            raise ValueError(
                f"expected input of shape (N, {self.spec.input_channels}, H, W), "
                f"got {tuple(x.shape)}"
            )
        channels = self.spec.channels_at(width)
        stats_iter = iter(norm_stats) if norm_stats is not None else None
        for op, layer, (in_ch, out_ch) in zip(self.ops, self.spec.layers, channels):
            if isinstance(op, (SlimmableConv2d, SlimmableLinear)):
                x = op(x, in_ch, out_ch)
            elif isinstance(op, SliceBatchNorm2d):
                if norm_taps is not None:
                    norm_taps.append(x)
                stats = next(stats_iter) if stats_iter is not None else None
                x = op(x, stats=stats, force_batch_stats=force_batch_stats)
            else:
                x = op(x)
        return x


class SubnetView:
    """Executable view of the shared store at one width. Holds no weights."""

    def __init__(self, net: SlimmableNetwork, width: float):
        self.net = net
        self.width = check_width(width)

    @property
    def spec(self) -> SlimmableModelSpec:
        return self.net.spec

    def channels(self) -> list[tuple[int, int]]:
        return self.net.spec.channels_at(self.width)

    def __call__(self, x, norm_stats=None, force_batch_stats: bool = False, norm_taps=None):
        return self.net(
            x,
            width=self.width,
            norm_stats=norm_stats,
            force_batch_stats=force_batch_stats,
            norm_taps=norm_taps,
        )


def materialize_subnet(net: SlimmableNetwork, width: float) -> SubnetView:
    """View of the shared store at `width`; storage is aliased, never copied."""
    w = check_width(width)
    if w < net.spec.width_lower_bound - 1e-9:
        raise WidthBoundError(
            f"width {width} below configured lower bound {net.spec.width_lower_bound}"
        )
    return SubnetView(net, w)


def save_checkpoint(path, net: SlimmableNetwork, bank=None, meta=None):
    """Atomically write weights, spec (with hash) and optional BN bank."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "spec": net.spec.to_dict(),
        "spec_hash": net.spec.spec_hash(),
        "state_dict": net.state_dict(),
        "bank": bank.state_dict() if bank is not None else None,
        "meta": meta or {},
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns (net, bank, meta). Raises on spec-hash mismatch."""
    from .norm import BNStatsBank  # local import: norm does not know checkpoints

    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    spec = SlimmableModelSpec.from_dict(payload["spec"])
    if spec.spec_hash() != payload["spec_hash"]:
        raise ValueError("checkpoint spec hash mismatch; file corrupt or stale")
    net = SlimmableNetwork(spec)
    net.load_state_dict(payload["state_dict"])
    bank = None
    if payload.get("bank") is not None:
        bank = BNStatsBank.from_state_dict(payload["bank"])
    return net, bank, payload.get("meta", {})
