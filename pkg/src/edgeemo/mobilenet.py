"""Inverted-residual network builders (MobileNetV2 and small variants).

Batch norm is assumed folded into the convolutions, so every conv carries a
bias and the graph has no normalization nodes.
"""

from __future__ import annotations

import math

import numpy as np

from .graph import (
    ADD,
    CONV2D,
    DEPTHWISE,
    FULLY_CONNECTED,
    GLOBAL_AVG_POOL,
    GRAPH_INPUT,
    RELU6,
    SAME,
    SOFTMAX,
    GraphSpec,
    Model,
    NodeSpec,
    infer_shapes,
)
from .tensor import Tensor

EMOTION_LABELS = ["happiness", "sadness", "surprise", "fear", "anger", "disgust", "neutral"]

# (expansion, output channels, repeats, first stride)
MOBILENET_V2_SETTINGS = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
]


def make_divisible(v: float, divisor: int = 8) -> int:
    new_v = max(divisor, int(v + divisor / 2) // divisor * divisor)
    if new_v < 0.9 * v:
        new_v += divisor
    return new_v


def default_labels(num_classes: int) -> list:
    if num_classes == len(EMOTION_LABELS):
        return list(EMOTION_LABELS)
    return [f"class_{i}" for i in range(num_classes)]


class _Builder:
    def __init__(self, init: str, seed: int):
        if init not in ("random", "zeros"):
            raise ValueError(f"init must be 'random' or 'zeros', got {init!r}")
        self.init = init
        self.rng = np.random.default_rng(seed)
        self.nodes = []
        self.weights = {}

    def _param(self, shape, fan_in, gain):
        if self.init == "zeros":
            return np.zeros(shape, np.float32)
        return self.rng.normal(0.0, gain / math.sqrt(fan_in), size=shape).astype(np.float32)

    def _bias(self, n):
        if self.init == "zeros":
            return np.zeros(n, np.float32)
        return self.rng.normal(0.0, 0.05, size=n).astype(np.float32)

    def add(self, node_id, kind, inputs, **attrs):
        self.nodes.append(NodeSpec(node_id, kind, list(inputs), **attrs))
        return node_id

    def conv(self, node_id, src, cin, cout, k, stride, gain):
        w = self._param((cout, k, k, cin), k * k * cin, gain)
        self.weights[f"{node_id}.weight"] = Tensor(w)
        self.weights[f"{node_id}.bias"] = Tensor(self._bias(cout))
        return self.add(node_id, CONV2D, [src], stride=stride, padding=SAME,
                        weight=f"{node_id}.weight", bias=f"{node_id}.bias")

    def depthwise(self, node_id, src, c, stride, gain):
        w = self._param((1, 3, 3, c), 9, gain)
        self.weights[f"{node_id}.weight"] = Tensor(w)
        self.weights[f"{node_id}.bias"] = Tensor(self._bias(c))
        return self.add(node_id, DEPTHWISE, [src], stride=stride, padding=SAME,
                        weight=f"{node_id}.weight", bias=f"{node_id}.bias")

    def fc(self, node_id, src, cin, cout, gain):
        self.weights[f"{node_id}.weight"] = Tensor(self._param((cout, cin), cin, gain))
        self.weights[f"{node_id}.bias"] = Tensor(self._bias(cout))
        return self.add(node_id, FULLY_CONNECTED, [src],
                        weight=f"{node_id}.weight", bias=f"{node_id}.bias")

    def relu6(self, src):
        return self.add(f"{src}_relu6", RELU6, [src])


def build_inverted_residual_net(
    settings,
    num_classes: int,
    input_size: int,
    stem_channels: int,
    last_channels: int,
    init: str = "random",
    seed: int = 0,
    name: str = "irnet",
) -> Model:
    """Stem conv, a stack of inverted-residual blocks, 1x1 head, pool, classifier."""
    if num_classes < 1:
        raise ValueError("num_classes must be positive")
    downsample = 2 ** (1 + sum(1 for _, _, _, s in settings if s == 2))
    if input_size < 1 or input_size % downsample:
        raise ValueError(f"input_size must be a positive multiple of {downsample}, got {input_size}")
    b = _Builder(init, seed)
    he = math.sqrt(2.0)
    x = b.relu6(b.conv("stem", GRAPH_INPUT, 3, stem_channels, 3, 2, he))
    cin = stem_channels
    idx = 0
    for t, c, reps, s in settings:
        for r in range(reps):
            stride = s if r == 0 else 1
            block_in = x
            hidden = cin * t
            if t != 1:
                x = b.relu6(b.conv(f"block{idx}_expand", x, cin, hidden, 1, 1, he))
            x = b.relu6(b.depthwise(f"block{idx}_dw", x, hidden, stride, he))
            x = b.conv(f"block{idx}_project", x, hidden, c, 1, 1, 1.0)
            if stride == 1 and cin == c:
                x = b.add(f"block{idx}_add", ADD, [block_in, x])
            cin = c
            idx += 1
    x = b.relu6(b.conv("head", x, cin, last_channels, 1, 1, he))
    x = b.add("pool", GLOBAL_AVG_POOL, [x])
    x = b.fc("classifier", x, last_channels, num_classes, 1.0)
    x = b.add("softmax", SOFTMAX, [x])
    g = GraphSpec((1, input_size, input_size, 3), b.nodes, x, b.weights)
    infer_shapes(g)
    return Model(g, name=name, labels=default_labels(num_classes))


def build_mobilenet_v2(
    width_multiplier: float = 1.0,
    num_classes: int = 7,
    input_size: int = 224,
    init: str = "random",
    seed: int = 0,
) -> Model:
    """MobileNetV2 with the published block schedule (17 bottlenecks)."""
    if input_size < 32 or input_size % 32:
        raise ValueError(f"input_size must be a positive multiple of 32, got {input_size}")
    if width_multiplier <= 0:
        raise ValueError("width_multiplier must be positive")
    settings = [
        (t, make_divisible(c * width_multiplier), n, s) for t, c, n, s in MOBILENET_V2_SETTINGS
    ]
    return build_inverted_residual_net(
        settings,
        num_classes,
        input_size,
        stem_channels=make_divisible(32 * width_multiplier),
        last_channels=make_divisible(1280 * max(1.0, width_multiplier)),
        init=init,
        seed=seed,
        name=f"mobilenet_v2_{width_multiplier:g}_{input_size}",
    )


def build_small_irnet(
    num_classes: int = 7, input_size: int = 32, init: str = "random", seed: int = 0
) -> Model:
    """Three inverted-residual blocks, about 50k parameters."""
    settings = [(6, 24, 1, 2), (6, 24, 1, 1), (6, 40, 1, 2)]
    return build_inverted_residual_net(
        settings, num_classes, input_size, stem_channels=16, last_channels=512,
        init=init, seed=seed, name=f"small_irnet_{input_size}",
    )
