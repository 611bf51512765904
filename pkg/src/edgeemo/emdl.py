"""EMDL model container: JSON topology header plus 64-byte aligned weight blobs.

File layout (little-endian)::

    "EMDL" | version u16 = 1 | flags u16 = 0 | header_len u32
    header JSON (UTF-8, sorted keys, no whitespace)
    zero padding to a 64-byte boundary  -> start of the blob section
    blobs, each starting at a 64-byte aligned offset within the section

Header JSON keys: ``format``, ``name``, ``labels``, ``input_shape``, ``nodes``,
``output``, ``activation_quant`` (edge -> {scale, zero_point}) and ``tensors``,
a list of directory entries ``{name, shape, encoding, offset, length, ...}``
with offsets relative to the blob section.

Blob layouts per encoding (n elements, C channels, L codebook entries):

    F32   n x f32
    Q8    C x f32 scales, then n x i8              (per-channel symmetric)
    I32   [C x f32 scales], then n x i32           (quantized biases; the
                                                    scale table is omitted
                                                    when ``derived_scales``)
    CL8   L x f32 codebook, then n x u8 indices
    CL4   L x f32 codebook, then ceil(n/2) bytes   (L <= 16; even element in
                                                    the low nibble)
    CLQ8  f32 scale, L x i8 codebook, then indices (4-bit packed when L <= 16,
                                                    else u8)

An I32 bias with ``derived_scales`` has scale ``f32(s_in * s_w[c])`` where
``s_in`` is the layer's input-edge activation scale and ``s_w`` the weight's
per-channel scales, so the table is rebuilt on load instead of stored.

Clustered entries carry ``codebook_len`` and ``zero_entry``; when
``zero_entry`` is true, codebook entry 0 is the exact zero used by pruned
positions and the centroids follow it.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from pathlib import Path

import numpy as np

from .graph import (
    PARAM_KINDS,
    ClusterCodebook,
    GraphError,
    GraphSpec,
    Model,
    NodeSpec,
    check_precision,
    infer_shapes,
    weight_channel_axis,
)
from .tensor import (
    F32,
    I8,
    I32,
    PerChannelQuant,
    QuantParams,
    Tensor,
    bias_scales,
    load_rten,
)

MAGIC = b"EMDL"
VERSION = 1
ALIGN = 64
ACTIVATION_ENTRY_BYTES = 8  # f32 scale + i32 zero point

ENCODINGS = ("F32", "Q8", "I32", "CL8", "CL4", "CLQ8")


class EmdlError(ValueError):
    """Malformed or inconsistent EMDL file."""


def _align(n: int) -> int:
    return -(-n // ALIGN) * ALIGN


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode()


# -- encodings -----------------------------------------------------------------


def tensor_encoding(m: Model, name: str) -> str:
    t = m.graph.weights[name]
    cb = m.codebooks.get(name)
    if cb is not None:
        if cb.qcentroids is not None:
            return "CLQ8"
        return "CL4" if _codebook_len(cb) <= 16 else "CL8"
    return {F32: "F32", I8: "Q8", I32: "I32"}[t.dtype]


def _codebook_len(cb: ClusterCodebook) -> int:
    return cb.k + (1 if cb.has_exempt else 0)


def _pack4(idx: np.ndarray) -> bytes:
    idx = idx.astype(np.uint8)
    if idx.size % 2:
        idx = np.append(idx, np.uint8(0))
    return (idx[0::2] | (idx[1::2] << 4)).astype(np.uint8).tobytes()


def _unpack4(buf: bytes, n: int) -> np.ndarray:
    packed = np.frombuffer(buf, np.uint8)
    out = np.empty(packed.size * 2, np.uint8)
    out[0::2] = packed & 0x0F
    out[1::2] = packed >> 4
    return out[:n]


def _index_bytes(n: int, bits: int) -> int:
    return -(-n // 2) if bits == 4 else n


def _codebook_indices(cb: ClusterCodebook) -> np.ndarray:
    a = cb.assignment.astype(np.int64)
    return a + 1 if cb.has_exempt else a


def encode_tensor(m: Model, name: str) -> tuple:
    """Return (blob bytes, directory metadata) for one tensor."""
    t = m.graph.weights[name]
    enc = tensor_encoding(m, name)
    meta = {"name": name, "shape": list(t.shape), "encoding": enc}
    if enc == "F32":
        return t.data.astype("<f4").tobytes(), meta
    if enc in ("Q8", "I32"):
        meta["axis"] = t.quant.axis
        if enc == "I32" and _derived_bias_scales(m.graph, m.activation_quant, name) == t.quant.scales:
            meta["derived_scales"] = True
            return t.data.astype("<i4").tobytes(), meta
        scales = np.asarray(t.quant.scales, "<f4").tobytes()
        dt = "i1" if enc == "Q8" else "<i4"
        return scales + t.data.astype(dt).tobytes(), meta
    cb = m.codebooks[name]
    idx = _codebook_indices(cb)
    L = _codebook_len(cb)
    meta.update(codebook_len=L, zero_entry=cb.has_exempt)
    if enc in ("CL4", "CL8"):
        entries = np.asarray(([0.0] if cb.has_exempt else []) + list(cb.centroids), "<f4")
        index = _pack4(idx) if enc == "CL4" else idx.astype(np.uint8).tobytes()
        return entries.tobytes() + index, meta
    meta["axis"] = t.quant.axis
    bits = 4 if L <= 16 else 8
    meta["index_bits"] = bits
    qentries = np.asarray(([0] if cb.has_exempt else []) + list(cb.qcentroids), "i1")
    index = _pack4(idx) if bits == 4 else idx.astype(np.uint8).tobytes()
    return struct.pack("<f", cb.qscale) + qentries.tobytes() + index, meta


def _derived_bias_scales(g: GraphSpec, aq: dict, bias_name: str):
    for n in g.nodes:
        if n.bias == bias_name:
            w = g.weights.get(n.weight)
            src = aq.get(n.inputs[0])
            if w is None or src is None or not isinstance(w.quant, PerChannelQuant):
                return None
            return bias_scales(src.scale, w.quant.scales)
    return None


def expected_blob_length(meta: dict) -> int:
    n = math.prod(meta["shape"])
    enc = meta["encoding"]
    if enc == "F32":
        return 4 * n
    if enc == "I32" and meta.get("derived_scales"):
        return 4 * n
    if enc in ("Q8", "I32"):
        c = meta["shape"][meta["axis"]]
        return 4 * c + (n if enc == "Q8" else 4 * n)
    L = meta["codebook_len"]
    if enc == "CL4":
        return 4 * L + _index_bytes(n, 4)
    if enc == "CL8":
        return 4 * L + n
    if enc == "CLQ8":
        return 4 + L + _index_bytes(n, meta["index_bits"])
    raise EmdlError(f"unknown encoding {enc!r}")


def decode_tensor(blob: bytes, meta: dict):
    """Inverse of :func:`encode_tensor`: returns (Tensor, codebook or None).

    I32 tensors with derived scales come back as raw int32 arrays; the
    caller attaches their scales once the whole graph is known.
    """
    shape = tuple(meta["shape"])
    n = math.prod(shape)
    enc = meta["encoding"]
    if enc == "F32":
        return Tensor(np.frombuffer(blob, "<f4").reshape(shape)), None
    if enc == "I32" and meta.get("derived_scales"):
        return np.frombuffer(blob, "<i4").reshape(shape).copy(), None
    if enc in ("Q8", "I32"):
        axis = meta["axis"]
        c = shape[axis]
        scales = np.frombuffer(blob[: 4 * c], "<f4")
        dt = "i1" if enc == "Q8" else "<i4"
        data = np.frombuffer(blob[4 * c :], dt).reshape(shape)
        return Tensor(data, I8 if enc == "Q8" else I32, PerChannelQuant(axis, tuple(scales))), None
    L = meta["codebook_len"]
    zero_entry = bool(meta["zero_entry"])
    if enc in ("CL4", "CL8"):
        entries = np.frombuffer(blob[: 4 * L], "<f4")
        raw = blob[4 * L :]
        idx = _unpack4(raw, n) if enc == "CL4" else np.frombuffer(raw, np.uint8)
        _check_indices(idx, L)
        cb = _codebook(entries, idx, zero_entry)
        return Tensor(entries[idx].reshape(shape)), cb
    if enc == "CLQ8":
        (qscale,) = struct.unpack("<f", blob[:4])
        qentries = np.frombuffer(blob[4 : 4 + L], "i1")
        raw = blob[4 + L :]
        idx = _unpack4(raw, n) if meta["index_bits"] == 4 else np.frombuffer(raw, np.uint8)
        _check_indices(idx, L)
        fentries = (qentries.astype(np.float64) * qscale).astype(np.float32)
        cb = _codebook(fentries, idx, zero_entry)
        cb.qcentroids = qentries[1:].copy() if zero_entry else qentries.copy()
        cb.qscale = float(qscale)
        axis = meta["axis"]
        pcq = PerChannelQuant(axis, (float(qscale),) * shape[axis])
        return Tensor(qentries[idx].reshape(shape), I8, pcq), cb
    raise EmdlError(f"unknown encoding {enc!r}")


def _check_indices(idx: np.ndarray, L: int):
    if idx.size and int(idx.max()) >= L:
        raise EmdlError("codebook index out of range")


def _codebook(entries: np.ndarray, idx: np.ndarray, zero_entry: bool) -> ClusterCodebook:
    if zero_entry:
        return ClusterCodebook(
            centroids=np.asarray(entries[1:], np.float32).copy(),
            assignment=idx.astype(np.int16) - 1,
            preserved_zero=True,
        )
    return ClusterCodebook(
        centroids=np.asarray(entries, np.float32).copy(),
        assignment=idx.astype(np.int16),
        preserved_zero=False,
    )


# -- save / load -----------------------------------------------------------------


def _header(m: Model, directory: list) -> dict:
    topo = m.graph.topology()
    return {
        "format": "EMDL",
        "name": m.name,
        "labels": list(m.labels),
        "input_shape": topo["input_shape"],
        "nodes": topo["nodes"],
        "output": topo["output"],
        "activation_quant": {e: q.to_dict() for e, q in sorted(m.activation_quant.items())},
        "tensors": directory,
    }


def tensor_order(g: GraphSpec) -> list:
    """Weights in node order (weight then bias), the canonical blob order."""
    names = []
    for n in g.nodes:
        if n.kind in PARAM_KINDS:
            names.append(n.weight)
            if n.bias is not None:
                names.append(n.bias)
    return names


def to_bytes(m: Model) -> bytes:
    infer_shapes(m.graph)
    directory, blobs, offset = [], [], 0
    for name in tensor_order(m.graph):
        blob, meta = encode_tensor(m, name)
        offset = _align(offset)
        meta.update(offset=offset, length=len(blob))
        directory.append(meta)
        blobs.append((offset, blob))
        offset += len(blob)
    header = canonical_json(_header(m, directory))
    prefix = MAGIC + struct.pack("<HHI", VERSION, 0, len(header)) + header
    section = bytearray(offset)
    for off, blob in blobs:
        section[off : off + len(blob)] = blob
    return prefix + b"\0" * (_align(len(prefix)) - len(prefix)) + bytes(section)


def save(m: Model, path) -> int:
    data = to_bytes(m)
    Path(path).write_bytes(data)
    return len(data)


def from_bytes(data: bytes) -> Model:
    if len(data) < 12:
        raise EmdlError("truncated EMDL file (no header)")
    magic, version, flags, header_len = struct.unpack("<4sHHI", data[:12])
    if magic != MAGIC:
        raise EmdlError(f"bad magic {magic!r}")
    if version < 1 or version > VERSION:
        raise EmdlError(f"unsupported EMDL version {version}")
    if flags != 0:
        raise EmdlError(f"unsupported flags {flags:#x}")
    if 12 + header_len > len(data):
        raise EmdlError("truncated EMDL file (header)")
    try:
        h = json.loads(data[12 : 12 + header_len].decode())
        nodes = [NodeSpec.from_dict(d) for d in h["nodes"]]
        input_shape = tuple(int(d) for d in h["input_shape"])
        output = str(h["output"])
        directory = list(h["tensors"])
        aq = {e: QuantParams.from_dict(q) for e, q in h.get("activation_quant", {}).items()}
        name, labels = str(h["name"]), [str(s) for s in h["labels"]]
    except (ValueError, KeyError, TypeError) as e:
        raise EmdlError(f"bad EMDL header: {e}") from None
    base = _align(12 + header_len)
    section = len(data) - base
    weights, codebooks, spans = {}, {}, []
    for meta in directory:
        try:
            tname = meta["name"]
            off, length = int(meta["offset"]), int(meta["length"])
            expected = expected_blob_length(meta)
        except (KeyError, TypeError, ValueError) as e:
            raise EmdlError(f"bad tensor directory entry: {e}") from None
        if tname in weights:
            raise EmdlError(f"duplicate tensor {tname!r}")
        if off < 0 or off % ALIGN or length != expected:
            raise EmdlError(f"tensor {tname}: bad offset/length")
        if off + length > section:
            raise EmdlError(f"tensor {tname}: blob out of range (truncated file?)")
        spans.append((off, off + length, tname))
        try:
            t, cb = decode_tensor(data[base + off : base + off + length], meta)
        except (ValueError, KeyError) as e:
            raise EmdlError(f"tensor {tname}: {e}") from None
        weights[tname] = t
        if cb is not None:
            codebooks[tname] = cb
    spans.sort()
    for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise EmdlError(f"blobs {an} and {bn} overlap")
    for n in nodes:
        for ref in (n.weight, n.bias):
            if ref is not None and ref not in weights:
                raise EmdlError(f"node {n.id} references missing tensor {ref!r}")
    g = GraphSpec(input_shape, nodes, output, weights)
    for tname, t in list(weights.items()):
        if isinstance(t, np.ndarray):
            scales = _derived_bias_scales(g, aq, tname)
            if scales is None:
                raise EmdlError(f"tensor {tname}: cannot derive bias scales")
            try:
                weights[tname] = Tensor(t, I32, PerChannelQuant(0, scales))
            except ValueError as e:
                raise EmdlError(f"tensor {tname}: {e}") from None
    m = Model(g, name=name, labels=labels, activation_quant=aq, codebooks=codebooks)
    try:
        infer_shapes(g)
        check_precision(m)
    except GraphError as e:
        raise EmdlError(f"invalid graph: {e}") from None
    return m


def load(path) -> Model:
    return from_bytes(Path(path).read_bytes())


def graph_hash(m: Model) -> str:
    return hashlib.sha256(canonical_json(m.graph.topology())).hexdigest()


# -- size accounting ---------------------------------------------------------------


def encoded_size(m: Model) -> dict:
    """Exact stored bytes per tensor (payload plus scale/codebook tables)."""
    tensors = {}
    by_encoding = {}
    for name in tensor_order(m.graph):
        blob, meta = encode_tensor(m, name)
        tensors[name] = {"encoding": meta["encoding"], "bytes": len(blob)}
        by_encoding[meta["encoding"]] = by_encoding.get(meta["encoding"], 0) + len(blob)
    act = ACTIVATION_ENTRY_BYTES * len(m.activation_quant)
    return {
        "tensors": tensors,
        "by_encoding": dict(sorted(by_encoding.items())),
        "activation_table": act,
        "total": sum(by_encoding.values()) + act,
    }


# -- convert -------------------------------------------------------------------------


def convert(spec_path, weights_dir) -> Model:
    """Assemble a model from a JSON graph description and a directory of RTEN tensors.

    The file uses the header's node schema: ``{name, labels, input_shape,
    nodes, output}`` plus optional ``activation_quant``. Tensor ``foo`` is read
    from ``<weights_dir>/foo.rten``. Integer weights must be symmetric
    (zero point 0) and are spread to per-channel form.
    """
    spec = json.loads(Path(spec_path).read_text())
    nodes = [NodeSpec.from_dict(d) for d in spec["nodes"]]
    weights = {}
    for n in nodes:
        for ref in (n.weight, n.bias):
            if ref is not None:
                weights[ref] = load_rten(Path(weights_dir) / f"{ref}.rten")
    g = GraphSpec(tuple(spec["input_shape"]), nodes, str(spec["output"]), weights)
    for name, t in list(weights.items()):
        if t.dtype != F32:
            if t.quant.zero_point != 0:
                raise EmdlError(f"tensor {name}: integer weights must have zero point 0")
            axis = weight_channel_axis(g, name)
            pcq = PerChannelQuant(axis, (t.quant.scale,) * t.shape[axis])
            weights[name] = Tensor(t.data, t.dtype, pcq)
    shapes = infer_shapes(g)
    aq = {e: QuantParams.from_dict(q) for e, q in spec.get("activation_quant", {}).items()}
    labels = spec.get("labels") or [f"class_{i}" for i in range(shapes[g.output][-1])]
    m = Model(g, name=spec.get("name", Path(spec_path).stem), labels=labels, activation_quant=aq)
    check_precision(m)
    return m
