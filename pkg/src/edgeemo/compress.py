"""Magnitude pruning, k-means weight clustering, calibration and int8 PTQ."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from numba import njit

from . import emdl
from .graph import (
    GRAPH_INPUT,
    PARAM_KINDS,
    SOFTMAX,
    ClusterCodebook,
    GraphError,
    Model,
    activation_peak_bytes,
    compressible_weights,
    weight_channel_axis,
)
from .runtime import Executor
from .tensor import (
    I32,
    PerChannelQuant,
    Tensor,
    bias_scales,
    f32,
    quant_params_from_range,
    quantize_per_channel,
    round_half_away,
)

KMEANS_MAX_ITER = 300


@dataclass
class CompressionConfig:
    sparsity: float = 0.5
    clusters: Optional[int] = 16
    quantize: bool = True
    calibration_manifest: Optional[str] = None
    calibration_random: int = 100
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if not 0.0 <= self.sparsity <= 1.0:
            raise ValueError(f"sparsity must be in [0, 1], got {self.sparsity}")
        if self.clusters is not None and self.clusters < 2:
            raise ValueError(f"clusters must be >= 2, got {self.clusters}")
        if self.calibration_random < 1:
            raise ValueError("calibration_random must be >= 1")


@dataclass
class TensorReport:
    name: str
    encoding: str
    original_bytes: int
    pruned_nonzeros: int
    unique_values: int
    encoded_bytes: int


@dataclass
class CompressionReport:
    per_tensor: list
    original_bytes: int
    encoded_bytes: int
    by_encoding: dict
    activation_table_bytes: int
    activation_peak_bytes_before: int
    activation_peak_bytes_after: int
    config: dict = field(default_factory=dict)

    @property
    def ratio(self) -> float:
        return self.original_bytes / self.encoded_bytes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratio"] = self.ratio
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# -- pruning -----------------------------------------------------------------------


def prune_tensor(w: np.ndarray, sparsity: float) -> np.ndarray:
    """Zero the floor(sparsity * n) smallest-magnitude entries (ties: lowest index)."""
    flat = np.asarray(w, np.float32).ravel().copy()
    k = math.floor(sparsity * flat.size)
    if k:
        order = np.argsort(np.abs(flat), kind="stable")
        flat[order[:k]] = 0.0
    return flat.reshape(np.shape(w))


def prune_magnitude(m: Model, sparsity: float) -> Model:
    """Per-tensor one-shot magnitude pruning of conv/FC weights.

    Biases and the final classifier layer are left alone.
    """
    if not 0.0 <= sparsity <= 1.0:
        raise ValueError(f"sparsity must be in [0, 1], got {sparsity}")
    if m.is_quantized:
        raise ValueError("prune before quantizing")
    if m.codebooks:
        raise ValueError("prune before clustering")
    out = m.copy()
    for name in compressible_weights(out.graph):
        out.graph.weights[name] = Tensor(prune_tensor(out.graph.weights[name].data, sparsity))
    return out


# -- clustering ---------------------------------------------------------------------


@njit(nogil=True, cache=True)
def _assign(values, centroids, assignment, sums, counts):
    """Nearest centroid per value (ties to the lower index); returns #changes and SSE."""
    k = centroids.shape[0]
    for j in range(k):
        sums[j] = 0.0
        counts[j] = 0
    changed = 0
    sse = 0.0
    for i in range(values.shape[0]):
        v = values[i]
        best = 0
        bd = abs(v - centroids[0])
        for j in range(1, k):
            d = abs(v - centroids[j])
            if d < bd:
                bd = d
                best = j
        if assignment[i] != best:
            changed += 1
            assignment[i] = best
        sums[best] += v
        counts[best] += 1
        sse += bd * bd
    return changed, sse


@njit(nogil=True, cache=True)
def _objective(values, centroids, assignment):
    s = 0.0
    for i in range(values.shape[0]):
        d = values[i] - centroids[assignment[i]]
        s += d * d
    return s


def kmeans_1d(values: np.ndarray, k: int, max_iter: int = KMEANS_MAX_ITER):
    """Lloyd's algorithm in 1-D with centroids initialised evenly on [min, max].

    Returns (centroids float64, assignment int64, objective history). The
    history holds the sum of squared distances after each centroid update.
    Empty clusters keep their previous centroid.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    v = np.ascontiguousarray(values, np.float64).ravel()
    if v.size == 0:
        raise ValueError("cannot cluster an empty set of values")
    centroids = np.linspace(v.min(), v.max(), k)
    assignment = np.full(v.size, -1, np.int64)
    sums = np.zeros(k)
    counts = np.zeros(k, np.int64)
    history = []
    _assign(v, centroids, assignment, sums, counts)
    for _ in range(max_iter):
        nz = counts > 0
        centroids[nz] = sums[nz] / counts[nz]
        history.append(float(_objective(v, centroids, assignment)))
        changed, _ = _assign(v, centroids, assignment, sums, counts)
        if changed == 0:
            break
    return centroids, assignment, history


def cluster_tensor(w: np.ndarray, k: int, preserve_zeros: bool = True):
    """Cluster one tensor; returns (clustered values, ClusterCodebook or None)."""
    flat = np.asarray(w, np.float32).ravel()
    exempt = flat == 0 if preserve_zeros else np.zeros(flat.size, bool)
    active = flat[~exempt]
    if active.size == 0:
        return np.asarray(w, np.float32).copy(), None
    centroids, assign, history = kmeans_1d(active, k)
    c32 = centroids.astype(np.float32)
    assignment = np.full(flat.size, -1, np.int16)
    assignment[~exempt] = assign
    out = np.zeros(flat.size, np.float32)
    out[~exempt] = c32[assign]
    cb = ClusterCodebook(c32, assignment, preserve_zeros, history)
    return out.reshape(np.shape(w)), cb


def cluster_weights(m: Model, k: int, preserve_zeros: bool = True) -> Model:
    """Replace every eligible weight by its k-means centroid (per tensor)."""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if m.is_quantized:
        raise ValueError("cluster before quantizing")
    out = m.copy()
    for name in compressible_weights(out.graph):
        values, cb = cluster_tensor(out.graph.weights[name].data, k, preserve_zeros)
        if cb is None:
            continue
        out.graph.weights[name] = Tensor(values)
        out.codebooks[name] = cb
    return out


# -- calibration / quantization ---------------------------------------------------------


def quant_edges(m: Model) -> list:
    """Edges that carry int8 activations (everything but softmax outputs)."""
    return [GRAPH_INPUT] + [n.id for n in m.graph.nodes if n.kind != SOFTMAX]


def collect_ranges(m: Model, inputs: Sequence, threads: int = 1) -> dict:
    """Running (min, max) of every activation edge over float inference."""
    inputs = list(inputs)
    if not inputs:
        raise ValueError("calibration needs at least one input")
    if m.is_quantized:
        raise ValueError("calibrate the float model")
    ranges = {}
    with Executor(m, threads) as ex:
        for x in inputs:
            ex.run(x)
            for edge, buf in ex.activations().items():
                lo, hi = float(buf.min()), float(buf.max())
                if edge in ranges:
                    plo, phi = ranges[edge]
                    lo, hi = min(lo, plo), max(hi, phi)
                ranges[edge] = (lo, hi)
    return ranges


def calibrate(m: Model, inputs: Sequence, threads: int = 1) -> dict:
    """Per-edge activation quant params from the observed ranges."""
    return {e: quant_params_from_range(lo, hi) for e, (lo, hi) in collect_ranges(m, inputs, threads).items()}


def random_calibration_inputs(m: Model, count: int, seed: int) -> list:
    rng = np.random.default_rng(seed)
    shape = m.graph.input_shape
    return [rng.uniform(-1.0, 1.0, size=shape).astype(np.float32) for _ in range(count)]


def _quantize_clustered(t: Tensor, cb: ClusterCodebook, axis: int):
    amax = float(np.max(np.abs(cb.centroids))) if cb.k else 0.0
    scale = f32(amax / 127.0) if amax > 0 else 1.0
    q = np.clip(round_half_away(cb.centroids.astype(np.float64) / scale), -127, 127).astype(np.int8)
    cb.qcentroids, cb.qscale = q, scale
    dense = np.zeros(cb.assignment.size, np.int8)
    keep = cb.assignment >= 0
    dense[keep] = q[cb.assignment[keep]]
    pcq = PerChannelQuant(axis, (scale,) * t.shape[axis])
    return Tensor(dense.reshape(t.shape), "I8", pcq)


def quantize_model(m: Model, calib: dict) -> Model:
    """Int8 weights (per-channel symmetric), int32 biases, calibrated activations.

    Clustered tensors share one scale across channels so every centroid maps to
    a single int8 value and the codebook survives quantization.
    """
    missing = [e for e in quant_edges(m) if e not in calib]
    if missing:
        raise GraphError(f"calibration does not cover edges {missing}")
    if m.is_quantized:
        raise ValueError("model is already quantized")
    out = m.copy()
    W = out.graph.weights
    for n in out.graph.nodes:
        if n.kind not in PARAM_KINDS:
            continue
        axis = weight_channel_axis(out.graph, n.weight)
        w = W[n.weight]
        if n.weight in out.codebooks:
            qw = _quantize_clustered(w, out.codebooks[n.weight], axis)
        else:
            qw = quantize_per_channel(w.data, axis)
        W[n.weight] = qw
        if n.bias is not None:
            bscale = np.array(bias_scales(calib[n.inputs[0]].scale, qw.quant.scales), np.float64)
            qb = round_half_away(W[n.bias].data.astype(np.float64) / bscale)
            qb = np.clip(qb, -(2**31), 2**31 - 1).astype(np.int32)
            W[n.bias] = Tensor(qb, I32, PerChannelQuant(0, tuple(bscale)))
    out.activation_quant = {e: calib[e] for e in quant_edges(m)}
    return out


# -- pipeline -----------------------------------------------------------------------------


def _calibration_inputs(m: Model, cfg: CompressionConfig) -> list:
    if cfg.calibration_manifest:
        from .evaluate import load_image, load_manifest_file, preprocess

        entries = load_manifest_file(cfg.calibration_manifest)
        if not entries:
            raise ValueError("calibration manifest is empty")
        size = m.graph.input_shape[1]
        return [preprocess(load_image(e.path), size).data for e in entries]
    return random_calibration_inputs(m, cfg.calibration_random, cfg.seed)


def build_report(original: Model, pruned: Model, final: Model, cfg: Optional[CompressionConfig] = None) -> CompressionReport:
    sizes = emdl.encoded_size(final)
    rows = []
    for name in emdl.tensor_order(final.graph):
        t = final.graph.weights[name]
        nz = int(np.count_nonzero(pruned.graph.weights[name].data))
        rows.append(TensorReport(
            name=name,
            encoding=sizes["tensors"][name]["encoding"],
            original_bytes=4 * original.graph.weights[name].size,
            pruned_nonzeros=nz,
            unique_values=int(np.unique(t.data[t.data != 0]).size),
            encoded_bytes=sizes["tensors"][name]["bytes"],
        ))
    return CompressionReport(
        per_tensor=[asdict(r) for r in rows],
        original_bytes=sum(r.original_bytes for r in rows),
        encoded_bytes=sizes["total"],
        by_encoding=sizes["by_encoding"],
        activation_table_bytes=sizes["activation_table"],
        activation_peak_bytes_before=activation_peak_bytes(original),
        activation_peak_bytes_after=activation_peak_bytes(final),
        config=asdict(cfg) if cfg is not None else {},
    )


def optimize_pipeline(m: Model, cfg: CompressionConfig):
    """Prune, then cluster (if configured), then calibrate + quantize (if configured)."""
    if m.is_quantized or m.codebooks:
        raise ValueError("pipeline expects an uncompressed float model")
    pruned = prune_magnitude(m, cfg.sparsity)
    cur = pruned
    if cfg.clusters is not None:
        cur = cluster_weights(cur, cfg.clusters)
    if cfg.quantize:
        calib = calibrate(cur, _calibration_inputs(cur, cfg), cfg.threads)
        cur = quantize_model(cur, calib)
    return cur, build_report(m, pruned, cur, cfg)
