"""Synthetic fixtures: oracle-stub classifier and labelled RTEN image manifests.

The stub reads class ``c`` off a flat gray level ``v_c``: global average
pooling recovers the level ``m`` and a linear layer scores ``2 m v_c - v_c^2``
(the ``m``-dependent part of ``-(m - v_c)^2``), so argmax is the nearest level.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .evaluate import ManifestEntry, write_manifest
from .graph import FULLY_CONNECTED, GLOBAL_AVG_POOL, SOFTMAX, GraphSpec, Model, NodeSpec
from .mobilenet import EMOTION_LABELS
from .tensor import Tensor, save_rten

STUB_GAIN = 20.0


def class_levels(num_classes: int = len(EMOTION_LABELS)) -> np.ndarray:
    """Normalized gray levels, evenly spaced inside (-1, 1), one per class."""
    return np.linspace(-0.9, 0.9, num_classes)


def oracle_stub_tensors(num_classes: int = len(EMOTION_LABELS)) -> dict:
    v = class_levels(num_classes)
    w = np.zeros((num_classes, 3), np.float32)
    w[:, 0] = STUB_GAIN * 2.0 * v
    b = (-STUB_GAIN * v * v).astype(np.float32)
    return {"fc.weight": Tensor(w), "fc.bias": Tensor(b)}


def oracle_stub_nodes() -> list:
    return [
        NodeSpec("pool", GLOBAL_AVG_POOL, ["input"]),
        NodeSpec("fc", FULLY_CONNECTED, ["pool"], weight="fc.weight", bias="fc.bias"),
        NodeSpec("softmax", SOFTMAX, ["fc"]),
    ]


def oracle_stub_model(input_size: int = 224) -> Model:
    g = GraphSpec((1, input_size, input_size, 3), oracle_stub_nodes(), "softmax", oracle_stub_tensors())
    return Model(g, name="oracle_stub", labels=list(EMOTION_LABELS))


def write_oracle_stub_source(out_dir, input_size: int = 224) -> tuple:
    """Write ``graph.json`` plus ``weights/*.rten`` for the convert command."""
    out_dir = Path(out_dir)
    wdir = out_dir / "weights"
    wdir.mkdir(parents=True, exist_ok=True)
    for name, t in oracle_stub_tensors().items():
        save_rten(t, wdir / f"{name}.rten")
    spec = {
        "name": "oracle_stub",
        "labels": list(EMOTION_LABELS),
        "input_shape": [1, input_size, input_size, 3],
        "nodes": [n.to_dict() for n in oracle_stub_nodes()],
        "output": "softmax",
    }
    spec_path = out_dir / "graph.json"
    spec_path.write_text(json.dumps(spec, indent=2))
    return spec_path, wdir


def level_image(label_index: int, size: int, rng: np.random.Generator, noise: float = 0.02) -> Tensor:
    """Already-normalized 1xSxSx3 tensor at the class level plus small noise."""
    lvl = class_levels()[label_index]
    x = lvl + rng.uniform(-noise, noise, size=(1, size, size, 3))
    return Tensor(np.clip(x, -1.0, 1.0).astype(np.float32))


def write_synthetic_manifest(out_dir, count: int = 14, size: int = 224, seed: int = 0) -> Path:
    """``count`` RTEN images cycling through the classes, tagged A/B/untagged."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    tags = ("A", "B", None)
    entries = []
    for i in range(count):
        c = i % len(EMOTION_LABELS)
        name = f"img{i:03d}.rten"
        save_rten(level_image(c, size, rng), img_dir / name)
        entries.append(ManifestEntry(f"images/{name}", EMOTION_LABELS[c], tags[i % 3]))
    path = out_dir / "manifest.csv"
    with open(path, "w", newline="") as fh:
        write_manifest(entries, fh)
    return path
