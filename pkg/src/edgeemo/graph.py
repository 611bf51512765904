"""Graph description, shape inference, and params/MAdds/memory accounting."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import F32, I8, I32, PerChannelQuant

GRAPH_INPUT = "input"

CONV2D = "Conv2D"
DEPTHWISE = "DepthwiseConv2D"
FULLY_CONNECTED = "FullyConnected"
RELU6 = "ReLU6"
ADD = "Add"
GLOBAL_AVG_POOL = "GlobalAvgPool"
SOFTMAX = "Softmax"

NODE_KINDS = (CONV2D, DEPTHWISE, FULLY_CONNECTED, RELU6, ADD, GLOBAL_AVG_POOL, SOFTMAX)
PARAM_KINDS = (CONV2D, DEPTHWISE, FULLY_CONNECTED)
CONV_KINDS = (CONV2D, DEPTHWISE)

SAME = "Same"
VALID = "Valid"


class GraphError(ValueError):
    """Structural problem with a graph (bad references, shape mismatch...)."""


@dataclass
class NodeSpec:
    id: str
    kind: str
    inputs: list
    stride: int = 1
    padding: str = SAME
    weight: Optional[str] = None
    bias: Optional[str] = None

    def to_dict(self) -> dict:
        d = {"id": self.id, "kind": self.kind, "inputs": list(self.inputs)}
        if self.kind in CONV_KINDS:
            d["stride"] = self.stride
            d["padding"] = self.padding
        if self.kind in PARAM_KINDS:
            d["weight"] = self.weight
            d["bias"] = self.bias
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NodeSpec":
        return cls(
            id=str(d["id"]),
            kind=str(d["kind"]),
            inputs=[str(i) for i in d["inputs"]],
            stride=int(d.get("stride", 1)),
            padding=str(d.get("padding", SAME)),
            weight=d.get("weight"),
            bias=d.get("bias"),
        )


@dataclass
class GraphSpec:
    """Topologically ordered node list plus the named weight tensors."""

    input_shape: tuple
    nodes: list
    output: str
    weights: dict = field(default_factory=dict)

    def node(self, node_id: str) -> NodeSpec:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def topology(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "nodes": [n.to_dict() for n in self.nodes],
            "output": self.output,
        }


@dataclass
class ClusterCodebook:
    """Shared-value encoding of one weight tensor.

    ``assignment`` holds a centroid index per element (flat, row-major);
    -1 marks pruned positions that were exempt from clustering and stay 0.
    ``qcentroids``/``qscale`` are filled in once the tensor is quantized.
    """

    centroids: np.ndarray
    assignment: np.ndarray
    preserved_zero: bool
    objective_history: list = field(default_factory=list)
    qcentroids: Optional[np.ndarray] = None
    qscale: Optional[float] = None

    @property
    def k(self) -> int:
        return len(self.centroids)

    @property
    def has_exempt(self) -> bool:
        return bool((self.assignment < 0).any())


@dataclass
class Model:
    graph: GraphSpec
    name: str = "model"
    labels: list = field(default_factory=list)
    activation_quant: dict = field(default_factory=dict)
    codebooks: dict = field(default_factory=dict)

    @property
    def is_quantized(self) -> bool:
        return any(
            self.graph.weights[n.weight].dtype == I8
            for n in self.graph.nodes
            if n.kind in PARAM_KINDS
        )

    def copy(self) -> "Model":
        return copy.deepcopy(self)


# -- shape inference -----------------------------------------------------------


def conv_output_size(size: int, k: int, stride: int, padding: str) -> tuple:
    """Return (output size, padding before) along one spatial axis.

    Same padding puts the extra cell on the bottom/right.
    """
    if padding == SAME:
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return out, total // 2
    if padding == VALID:
        if size < k:
            raise GraphError(f"valid padding needs input {size} >= kernel {k}")
        return (size - k) // stride + 1, 0
    raise GraphError(f"unknown padding {padding!r}")


def _check_node(n: NodeSpec, in_shapes: list, weights: dict) -> tuple:
    def need_inputs(count):
        if len(in_shapes) != count:
            raise GraphError(f"node {n.id}: {n.kind} takes {count} input(s), got {len(in_shapes)}")

    def weight(name, rank):
        if name is None or name not in weights:
            raise GraphError(f"node {n.id}: missing weight tensor {name!r}")
        t = weights[name]
        if len(t.shape) != rank:
            raise GraphError(f"node {n.id}: tensor {name} has rank {len(t.shape)}, expected {rank}")
        return t.shape

    def bias(out_ch):
        if n.bias is None:
            return
        if n.bias not in weights:
            raise GraphError(f"node {n.id}: missing bias tensor {n.bias!r}")
        if weights[n.bias].shape != (out_ch,):
            raise GraphError(f"node {n.id}: bias shape {weights[n.bias].shape} != ({out_ch},)")

    if n.kind in CONV_KINDS:
        need_inputs(1)
        s = in_shapes[0]
        if len(s) != 4:
            raise GraphError(f"node {n.id}: convolution expects NHWC input, got {s}")
        if n.stride not in (1, 2):
            raise GraphError(f"node {n.id}: stride must be 1 or 2")
        o, kh, kw, i = weight(n.weight, 4)
        if n.kind == CONV2D:
            if i != s[3]:
                raise GraphError(f"node {n.id}: weight expects {i} input channels, got {s[3]}")
            cout = o
        else:
            if o != 1 or i != s[3]:
                raise GraphError(f"node {n.id}: depthwise weight must be 1xHxWx{s[3]}")
            cout = i
        ho, _ = conv_output_size(s[1], kh, n.stride, n.padding)
        wo, _ = conv_output_size(s[2], kw, n.stride, n.padding)
        bias(cout)
        return (1, ho, wo, cout)
    if n.kind == FULLY_CONNECTED:
        need_inputs(1)
        out_f, in_f = weight(n.weight, 2)
        if math.prod(in_shapes[0][1:]) != in_f:
            raise GraphError(f"node {n.id}: FC expects {in_f} inputs, got {in_shapes[0]}")
        bias(out_f)
        return (1, out_f)
    if n.kind in (RELU6, SOFTMAX):
        need_inputs(1)
        return tuple(in_shapes[0])
    if n.kind == ADD:
        need_inputs(2)
        if tuple(in_shapes[0]) != tuple(in_shapes[1]):
            raise GraphError(f"node {n.id}: Add operands differ {in_shapes}")
        return tuple(in_shapes[0])
    if n.kind == GLOBAL_AVG_POOL:
        need_inputs(1)
        if len(in_shapes[0]) != 4:
            raise GraphError(f"node {n.id}: GlobalAvgPool expects NHWC input")
        return (1, in_shapes[0][3])
    raise GraphError(f"node {n.id}: unknown kind {n.kind!r}")


def infer_shapes(g: GraphSpec) -> dict:
    """Validate ``g`` and return the shape of every edge (keyed by producer id)."""
    shape = tuple(int(d) for d in g.input_shape)
    if len(shape) < 2 or shape[0] != 1 or any(d < 1 for d in shape):
        raise GraphError(f"input shape must be 1 x ..., got {shape}")
    shapes = {GRAPH_INPUT: shape}
    used = {}
    for n in g.nodes:
        if n.id in shapes:
            raise GraphError(f"duplicate node id {n.id!r}")
        for src in n.inputs:
            if src not in shapes:
                raise GraphError(f"node {n.id}: input {src!r} is not an earlier node")
        if n.kind in PARAM_KINDS:
            for name in (n.weight, n.bias):
                if name is None:
                    continue
                if name in used:
                    raise GraphError(f"tensor {name!r} referenced by {used[name]} and {n.id}")
                used[name] = n.id
        shapes[n.id] = _check_node(n, [shapes[s] for s in n.inputs], g.weights)
    if g.output not in shapes or g.output == GRAPH_INPUT:
        raise GraphError(f"output {g.output!r} is not a node")
    unused = set(g.weights) - set(used)
    if unused:
        raise GraphError(f"unreferenced weight tensors: {sorted(unused)}")
    return shapes


def classifier_node(g: GraphSpec) -> Optional[NodeSpec]:
    """The final classifier layer: the last FullyConnected node, if any."""
    fcs = [n for n in g.nodes if n.kind == FULLY_CONNECTED]
    return fcs[-1] if fcs else None


def compressible_weights(g: GraphSpec) -> list:
    """Weight tensor names eligible for pruning and clustering."""
    head = classifier_node(g)
    return [n.weight for n in g.nodes if n.kind in PARAM_KINDS and n is not head]


def weight_channel_axis(g: GraphSpec, name: str) -> int:
    """Output-channel axis of a weight or bias tensor."""
    for n in g.nodes:
        if n.weight == name:
            return 3 if n.kind == DEPTHWISE else 0
        if n.bias == name:
            return 0
    raise KeyError(name)


def check_precision(model: Model) -> bool:
    """Validate weight dtypes; True for an int8 model, False for float."""
    g = model.graph
    dtypes = set()
    for n in g.nodes:
        if n.kind not in PARAM_KINDS:
            continue
        w = g.weights[n.weight]
        dtypes.add(w.dtype)
        if w.dtype == I8:
            axis = 3 if n.kind == DEPTHWISE else 0
            if not isinstance(w.quant, PerChannelQuant) or w.quant.axis != axis:
                raise GraphError(f"tensor {n.weight}: int8 weights need per-channel quant on axis {axis}")
            if n.bias is not None and g.weights[n.bias].dtype != I32:
                raise GraphError(f"tensor {n.bias}: int8 layers need int32 biases")
        elif n.bias is not None and g.weights[n.bias].dtype != F32:
            raise GraphError(f"tensor {n.bias}: float layers need F32 biases")
    if len(dtypes) > 1:
        raise GraphError("model mixes float and int8 weights")
    return dtypes == {I8}


# -- accounting ----------------------------------------------------------------


def count_params(g: GraphSpec) -> int:
    return int(sum(t.size for t in g.weights.values()))


def count_madds(g: GraphSpec) -> int:
    """Multiply-accumulate count of one inference."""
    shapes = infer_shapes(g)
    total = 0
    for n in g.nodes:
        out = shapes[n.id]
        if n.kind == CONV2D:
            cout, kh, kw, cin = g.weights[n.weight].shape
            total += out[1] * out[2] * cout * kh * kw * cin
        elif n.kind == DEPTHWISE:
            _, kh, kw, c = g.weights[n.weight].shape
            total += out[1] * out[2] * c * kh * kw
        elif n.kind == FULLY_CONNECTED:
            total += math.prod(g.weights[n.weight].shape)
    return int(total)


def edge_bytes(m_or_g, shapes: dict | None = None) -> dict:
    """Bytes of each activation buffer; int8 edges in quantized models."""
    if isinstance(m_or_g, Model):
        g, quantized = m_or_g.graph, m_or_g.is_quantized
    else:
        g, quantized = m_or_g, False
    shapes = shapes or infer_shapes(g)
    kinds = {n.id: n.kind for n in g.nodes}
    out = {}
    for edge, shape in shapes.items():
        # softmax output and the graph input are float in both paths
        int8_edge = quantized and edge != GRAPH_INPUT and kinds.get(edge) != SOFTMAX
        out[edge] = math.prod(shape) * (1 if int8_edge else 4)
    return out


def activation_peak_bytes(m_or_g) -> int:
    """Peak sum of simultaneously live activation buffers over the schedule.

    A buffer is live from the step that produces it until its last consumer;
    the graph input is live from the start, the output until the end.
    """
    g = m_or_g.graph if isinstance(m_or_g, Model) else m_or_g
    shapes = infer_shapes(g)
    size = edge_bytes(m_or_g, shapes)
    produced = {GRAPH_INPUT: 0}
    last_use = {GRAPH_INPUT: 0}
    for step, n in enumerate(g.nodes, start=1):
        produced[n.id] = step
        last_use.setdefault(n.id, step)
        for src in n.inputs:
            last_use[src] = max(last_use[src], step)
    last_use[g.output] = len(g.nodes)
    peak = 0
    for step in range(1, len(g.nodes) + 1):
        live = sum(size[e] for e in size if produced[e] <= step <= last_use[e])
        peak = max(peak, live)
    return int(peak)
