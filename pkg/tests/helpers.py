import numpy as np

from edgeemo.graph import GraphSpec, Model, NodeSpec
from edgeemo.tensor import Tensor


def make_model(input_shape, nodes, output, weights, name="t"):
    """nodes: list of (id, kind, inputs, attrs dict)."""
    specs = [NodeSpec(i, k, list(inp), **attrs) for i, k, inp, attrs in nodes]
    w = {n: (t if isinstance(t, Tensor) else Tensor(np.asarray(t, np.float32))) for n, t in weights.items()}
    return Model(GraphSpec(tuple(input_shape), specs, output, w), name=name, labels=[])


def conv_model(x_shape, w, b, stride=1, padding="Same", kind="Conv2D"):
    weights = {"c.w": w}
    attrs = dict(stride=stride, padding=padding, weight="c.w")
    if b is not None:
        weights["c.b"] = b
        attrs["bias"] = "c.b"
    return make_model(x_shape, [("c", kind, ["input"], attrs)], "c", weights)
