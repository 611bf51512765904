"""Graph executor for float32 and int8 models.

Work inside a node is split into contiguous output-row (or output-channel)
ranges, one per worker. Each output element is computed entirely by one
worker with a fixed summation order, so results are bitwise identical for
any ``thread_count``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import kernels as K
from .graph import (
    ADD,
    CONV2D,
    DEPTHWISE,
    FULLY_CONNECTED,
    GLOBAL_AVG_POOL,
    GRAPH_INPUT,
    PARAM_KINDS,
    RELU6,
    SOFTMAX,
    GraphError,
    Model,
    check_precision,
    conv_output_size,
    infer_shapes,
)
from .tensor import F32, Tensor


def split_range(n: int, parts: int) -> list:
    """Contiguous, balanced split of ``range(n)`` into at most ``parts`` pieces."""
    bounds = [(i * n // parts, (i + 1) * n // parts) for i in range(parts)]
    return [(a, b) for a, b in bounds if b > a]


def _rows(buf: np.ndarray) -> np.ndarray:
    """2-D view used by elementwise kernels: one row per image row."""
    if buf.ndim == 4:
        return buf.reshape(buf.shape[1], -1)
    return buf.reshape(-1, 1)


def _softmax_rows(x: np.ndarray, out: np.ndarray):
    c = x.shape[-1]
    xs, os_ = x.reshape(-1, c), out.reshape(-1, c)
    for r in range(xs.shape[0]):
        K.softmax_f32(xs[r], os_[r])


class Executor:
    """Runs one model with a fixed worker count.

    Not safe for concurrent use; one inference at a time.
    """

    def __init__(self, model: Model, thread_count: int = 1):
        if thread_count < 1:
            raise ValueError("thread_count must be >= 1")
        self.model = model
        self.graph = model.graph
        self.thread_count = int(thread_count)
        self.shapes = infer_shapes(self.graph)
        self.quantized = check_precision(model)
        if self.quantized:
            missing = [e for e in self._quant_edges() if e not in model.activation_quant]
            if missing:
                raise GraphError(f"missing activation quant params for edges {missing}")
        self.buffers = {}
        self.buffers[GRAPH_INPUT] = np.zeros(self.shapes[GRAPH_INPUT], np.float32)
        if self.quantized:
            self._qinput = np.zeros(self.shapes[GRAPH_INPUT], np.int8)
        kinds = {n.id: n.kind for n in self.graph.nodes}
        for n in self.graph.nodes:
            dt = np.int8 if self.quantized and kinds[n.id] != SOFTMAX else np.float32
            self.buffers[n.id] = np.zeros(self.shapes[n.id], dt)
        self._steps = [self._plan(n) for n in self.graph.nodes]
        self._pool = ThreadPoolExecutor(self.thread_count - 1) if self.thread_count > 1 else None

    # -- lifecycle --------------------------------------------------------------

    def close(self):
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        pool = getattr(self, "_pool", None)
        if pool is not None:
            pool.shutdown(wait=False)

    # -- planning ---------------------------------------------------------------

    def _quant_edges(self) -> list:
        kinds = {n.id: n.kind for n in self.graph.nodes}
        return [GRAPH_INPUT] + [e for e in kinds if kinds[e] != SOFTMAX]

    def _src(self, edge: str) -> np.ndarray:
        if self.quantized and edge == GRAPH_INPUT:
            return self._qinput
        return self.buffers[edge]

    def _plan(self, n):
        """Return (n_units, fn(r0, r1, slot)) for one node."""
        if self.quantized:
            return self._plan_i8(n)
        return self._plan_f32(n)

    def _bias_f32(self, n, count):
        if n.bias is None:
            return np.zeros(count, np.float32)
        return np.ascontiguousarray(self.graph.weights[n.bias].data, np.float32)

    def _plan_f32(self, n):
        W = self.graph.weights
        out = self.buffers[n.id]
        if n.kind in (CONV2D, DEPTHWISE):
            x = self._src(n.inputs[0])[0]
            w = W[n.weight].data
            _, kh, kw, _ = w.shape
            _, pt = conv_output_size(x.shape[0], kh, n.stride, n.padding)
            _, pl = conv_output_size(x.shape[1], kw, n.stride, n.padding)
            o3 = out[0]
            if n.kind == CONV2D:
                wk = np.ascontiguousarray(w.transpose(1, 2, 3, 0))
                b = self._bias_f32(n, w.shape[0])
                fn = lambda r0, r1, s: K.conv2d_f32(x, wk, b, o3, n.stride, pt, pl, r0, r1)
            else:
                wk = np.ascontiguousarray(w[0])
                b = self._bias_f32(n, w.shape[3])
                fn = lambda r0, r1, s: K.depthwise_f32(x, wk, b, o3, n.stride, pt, pl, r0, r1)
            return o3.shape[0], fn
        if n.kind == FULLY_CONNECTED:
            x = self._src(n.inputs[0]).reshape(-1)
            wt = np.ascontiguousarray(W[n.weight].data.T)
            b = self._bias_f32(n, wt.shape[1])
            o = out.reshape(-1)
            return o.shape[0], lambda r0, r1, s: K.fc_f32(x, wt, b, o, r0, r1)
        if n.kind == RELU6:
            x, o = _rows(self._src(n.inputs[0])), _rows(out)
            return o.shape[0], lambda r0, r1, s: K.relu6_f32(x, o, r0, r1)
        if n.kind == ADD:
            a, b, o = _rows(self._src(n.inputs[0])), _rows(self._src(n.inputs[1])), _rows(out)
            return o.shape[0], lambda r0, r1, s: K.add_f32(a, b, o, r0, r1)
        if n.kind == GLOBAL_AVG_POOL:
            x, o = self._src(n.inputs[0])[0], out.reshape(-1)
            return o.shape[0], lambda r0, r1, s: K.gap_f32(x, o, r0, r1)
        if n.kind == SOFTMAX:
            x = self._src(n.inputs[0])
            return 1, lambda r0, r1, s: _softmax_rows(x, out)
        raise GraphError(f"unsupported node kind {n.kind}")

    def _plan_i8(self, n):
        W = self.graph.weights
        aq = self.model.activation_quant
        out = self.buffers[n.id]
        src = n.inputs[0]
        iq = aq[src]
        if n.kind == SOFTMAX:
            x = self._src(src)
            scratch = np.zeros(x.shape, np.float32)

            def run_softmax(r0, r1, s):
                K.dequantize_vec(x.reshape(-1), iq.scale, iq.zero_point, scratch.reshape(-1))
                _softmax_rows(scratch, out)

            return 1, run_softmax
        oq = aq[n.id]
        if n.kind in PARAM_KINDS:
            w = W[n.weight]
            scales = np.asarray(w.quant.scales, np.float64)
            mult = iq.scale * scales / oq.scale
            if n.bias is not None:
                bias = np.ascontiguousarray(W[n.bias].data, np.int32)
            else:
                bias = np.zeros(len(scales), np.int32)
            xz, oz = iq.zero_point, oq.zero_point
            if n.kind == FULLY_CONNECTED:
                x, o = self._src(src).reshape(-1), out.reshape(-1)
                wk = np.ascontiguousarray(w.data)
                return o.shape[0], lambda r0, r1, s: K.fc_i8(x, xz, wk, bias, mult, oz, o, r0, r1)
            x, o3 = self._src(src)[0], out[0]
            _, kh, kw, _ = w.shape
            _, pt = conv_output_size(x.shape[0], kh, n.stride, n.padding)
            _, pl = conv_output_size(x.shape[1], kw, n.stride, n.padding)
            if n.kind == DEPTHWISE:
                wk = np.ascontiguousarray(w.data[0], np.int16)
                fn = lambda r0, r1, s: K.depthwise_i8(x, xz, wk, bias, mult, oz, o3, n.stride, pt, pl, r0, r1)
            elif kh == kw == 1 and n.stride == 1:
                wk = np.ascontiguousarray(w.data.reshape(w.shape[0], w.shape[3]))
                bias_eff = (bias.astype(np.int64) - xz * wk.astype(np.int64).sum(axis=1)).astype(np.int32)
                if wk.shape[0] > wk.shape[1]:  # expanding: vectorize over output channels
                    wt = np.ascontiguousarray(wk.T)
                    fn = lambda r0, r1, s: K.conv1x1_i8_outer(x, wt, bias_eff, mult, oz, o3, r0, r1)
                else:
                    fn = lambda r0, r1, s: K.conv1x1_i8(x, wk, bias_eff, mult, oz, o3, r0, r1)
            else:
                wk = np.ascontiguousarray(w.data.transpose(1, 2, 3, 0), np.int32)
                fn = lambda r0, r1, s: K.conv2d_i8(x, xz, wk, bias, mult, oz, o3, n.stride, pt, pl, r0, r1)
            return o3.shape[0], fn
        if n.kind == RELU6:
            x, o = _rows(self._src(src)), _rows(out)
            table = K.relu6_table(iq.scale, iq.zero_point, oq.scale, oq.zero_point)
            return o.shape[0], lambda r0, r1, s: K.lut_i8(x, table, o, r0, r1)
        if n.kind == ADD:
            bq = aq[n.inputs[1]]
            a, b, o = _rows(self._src(src)), _rows(self._src(n.inputs[1])), _rows(out)
            args = (iq.scale, iq.zero_point, b, bq.scale, bq.zero_point, oq.scale, oq.zero_point)
            return o.shape[0], lambda r0, r1, s: K.add_i8(a, *args, o, r0, r1)
        if n.kind == GLOBAL_AVG_POOL:
            x, o = self._src(src)[0], out.reshape(-1)
            args = (iq.scale, iq.zero_point, oq.scale, oq.zero_point)
            return o.shape[0], lambda r0, r1, s: K.gap_i8(x, *args, o, r0, r1)
        raise GraphError(f"unsupported node kind {n.kind}")

    # -- execution --------------------------------------------------------------

    def _dispatch(self, units: int, fn):
        chunks = split_range(units, self.thread_count)
        if self._pool is None or len(chunks) == 1:
            for slot, (r0, r1) in enumerate(chunks):
                fn(r0, r1, slot)
            return
        futures = [
            self._pool.submit(fn, r0, r1, slot) for slot, (r0, r1) in enumerate(chunks) if slot
        ]
        fn(chunks[0][0], chunks[0][1], 0)
        for f in futures:
            f.result()

    def run(self, x) -> Tensor:
        """Run one inference; returns the output edge as an F32 tensor."""
        arr = x.data if isinstance(x, Tensor) else np.asarray(x)
        if isinstance(x, Tensor) and x.dtype != F32:
            raise ValueError("executor input must be an F32 tensor")
        if tuple(arr.shape) != tuple(self.shapes[GRAPH_INPUT]):
            raise ValueError(f"input shape {tuple(arr.shape)} != graph input {self.shapes[GRAPH_INPUT]}")
        np.copyto(self.buffers[GRAPH_INPUT], arr, casting="same_kind")
        if self.quantized:
            q = self.model.activation_quant[GRAPH_INPUT]
            xin, qin = _rows(self.buffers[GRAPH_INPUT]), _rows(self._qinput)
            self._dispatch(
                xin.shape[0],
                lambda r0, r1, s: K.quantize_input(xin, q.scale, q.zero_point, qin, r0, r1),
            )
        for units, fn in self._steps:
            self._dispatch(units, fn)
        out = self.buffers[self.graph.output]
        if out.dtype == np.int8:
            q = self.model.activation_quant[self.graph.output]
            return Tensor((q.scale * (out.astype(np.float64) - q.zero_point)).astype(np.float32))
        return Tensor(out)

    def activations(self) -> dict:
        """Edge buffers from the most recent run (float path: real values)."""
        return dict(self.buffers)


def infer(ex: Executor, x) -> Tensor:
    """Float32 inference."""
    if ex.quantized:
        raise GraphError("infer() runs float graphs; use infer_quantized()")
    return ex.run(x)


def infer_quantized(ex: Executor, x) -> Tensor:
    """Int8 inference of a quantized graph; float input, float probabilities out."""
    if not ex.quantized:
        raise GraphError("infer_quantized() needs a quantized graph")
    return ex.run(x)
