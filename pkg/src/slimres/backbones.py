"""Reference backbone descriptions.

Builders return plain `SlimmableModelSpec`s: a depthwise-separable stack in
its original 224-input form and a shrunk variant for 32x32 inputs, so the
same layer kinds (vanilla conv, depthwise conv, pointwise conv, classifier)
are exercised at desk scale.
"""

from __future__ import annotations

from .core import LayerSpec, SlimmableModelSpec
from .data import CIFAR_RESOLUTIONS, IMAGENET_STYLE_RESOLUTIONS


def _conv_bn_relu(layers, in_ch, out_ch, kernel=3, stride=1):
    layers.append(
        LayerSpec("convolution", in_ch, out_ch, kernel=kernel, stride=stride)
    )
    layers.append(LayerSpec("normalization", out_ch, out_ch))
    layers.append(LayerSpec("activation", out_ch, out_ch))
    return out_ch


def _separable_block(layers, in_ch, out_ch, stride=1):
    layers.append(
        LayerSpec("depthwise-convolution", in_ch, in_ch, kernel=3, stride=stride)
    )
    layers.append(LayerSpec("normalization", in_ch, in_ch))
    layers.append(LayerSpec("activation", in_ch, in_ch))
    return _conv_bn_relu(layers, in_ch, out_ch, kernel=1, stride=1)


def mobilenet_v1_spec(
    num_classes: int = 1000,
    width_lower_bound: float = 0.25,
    resolutions=IMAGENET_STYLE_RESOLUTIONS,
    channel_divisor: int = 8,
) -> SlimmableModelSpec:
    """Classic 224-input depthwise-separable backbone (~569 MMACs full width)."""
    layers: list[LayerSpec] = []
    c = _conv_bn_relu(layers, 3, 32, kernel=3, stride=2)
    stages = [
        (64, 1),
        (128, 2), (128, 1),
        (256, 2), (256, 1),
        (512, 2), (512, 1), (512, 1), (512, 1), (512, 1), (512, 1),
        (1024, 2), (1024, 1),
    ]
    for out_ch, stride in stages:
        c = _separable_block(layers, c, out_ch, stride=stride)
    layers.append(LayerSpec("pooling", c, c))
    layers.append(LayerSpec("fully-connected", c, num_classes))
    return SlimmableModelSpec(
        layers=tuple(layers),
        width_lower_bound=width_lower_bound,
        channel_divisor=channel_divisor,
        num_classes=num_classes,
        input_channels=3,
        resolutions=tuple(resolutions),
        name="mobilenet_v1",
    )


def cifar_mobile_spec(
    num_classes: int = 10,
    width_lower_bound: float = 0.25,
    resolutions=CIFAR_RESOLUTIONS,
    channel_divisor: int = 8,
) -> SlimmableModelSpec:
    """Depthwise-separable stack shrunk for 32x32 inputs (desk scale)."""
    layers: list[LayerSpec] = []
    c = _conv_bn_relu(layers, 3, 32, kernel=3, stride=1)
    stages = [
        (64, 1),
        (128, 2), (128, 1),
        (256, 2), (256, 1),
        (512, 2), (512, 1),
    ]
    for out_ch, stride in stages:
        c = _separable_block(layers, c, out_ch, stride=stride)
    layers.append(LayerSpec("pooling", c, c))
    layers.append(LayerSpec("fully-connected", c, num_classes))
    return SlimmableModelSpec(
        layers=tuple(layers),
        width_lower_bound=width_lower_bound,
        channel_divisor=channel_divisor,
        num_classes=num_classes,
        input_channels=3,
        resolutions=tuple(resolutions),
        name="cifar_mobile",
    )
