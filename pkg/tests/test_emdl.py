import json
import math
import struct

import numpy as np
import pytest
from helpers import conv_model
from hypothesis import given
from hypothesis import strategies as st

from edgeemo import emdl
from edgeemo.compress import (
    CompressionConfig,
    calibrate,
    cluster_weights,
    optimize_pipeline,
    quantize_model,
    random_calibration_inputs,
)
from edgeemo.graph import GraphError, count_params
from edgeemo.mobilenet import build_mobilenet_v2, build_small_irnet
from edgeemo.synthetic import oracle_stub_model, write_oracle_stub_source
from edgeemo.tensor import I8, QuantParams, Tensor, save_rten


def weights_equal(a, b):
    assert set(a.graph.weights) == set(b.graph.weights)
    for k in a.graph.weights:
        assert a.graph.weights[k] == b.graph.weights[k], k


def _variants():
    m = build_small_irnet(seed=3)
    calib = calibrate(m, random_calibration_inputs(m, 4, 0))
    q = quantize_model(m, calib)
    cl = cluster_weights(m, 16)
    cl8 = cluster_weights(m, 40)
    full, _ = optimize_pipeline(m, CompressionConfig(0.5, 16, True, calibration_random=4))
    full8, _ = optimize_pipeline(m, CompressionConfig(0.5, 20, True, calibration_random=4))
    return {"f32": m, "q8": q, "cl4": cl, "cl8": cl8, "clq8_4bit": full, "clq8_8bit": full8}


VARIANTS = _variants()


@pytest.mark.parametrize("kind", list(VARIANTS))
def test_roundtrip_and_canonical(kind):
    m = VARIANTS[kind]
    data = emdl.to_bytes(m)
    back = emdl.from_bytes(data)
    weights_equal(m, back)
    assert emdl.graph_hash(back) == emdl.graph_hash(m)
    assert back.activation_quant == m.activation_quant
    assert emdl.to_bytes(back) == data  # save . load . save is byte-identical
    assert set(back.codebooks) == set(m.codebooks)


def test_encodings_present():
    encs = {k: set(emdl.encoded_size(m)["by_encoding"]) for k, m in VARIANTS.items()}
    assert encs["f32"] == {"F32"}
    assert encs["q8"] == {"Q8", "I32"}
    assert "CL4" in encs["cl4"] and "CL8" in encs["cl8"]
    assert "CLQ8" in encs["clq8_4bit"] and "CLQ8" in encs["clq8_8bit"]
    meta = {e["name"]: e for e in json.loads(_header(emdl.to_bytes(VARIANTS["clq8_8bit"])))["tensors"]}
    assert meta["block0_expand.weight"]["index_bits"] == 8


def test_reference_roundtrip_seed7():
    m = build_mobilenet_v2(1.0, 7, 224, "random", seed=7)
    back = emdl.from_bytes(emdl.to_bytes(m))
    assert emdl.graph_hash(back) == emdl.graph_hash(m)
    weights_equal(m, back)


def _header(data):
    (n,) = struct.unpack("<I", data[8:12])
    return data[12 : 12 + n].decode()


def test_hand_built_file_matches_schema():
    w = np.array([[[[1.0, 2.0]]]], np.float32)  # OHWI 1x1x1x2
    b = np.array([0.5], np.float32)
    m = conv_model((1, 1, 1, 2), w, b)
    m.graph.nodes.append(__import__("edgeemo.graph", fromlist=["NodeSpec"]).NodeSpec("r", "ReLU6", ["c"]))
    m.graph.output = "r"
    m.name = "two"
    header = {
        "activation_quant": {},
        "format": "EMDL",
        "input_shape": [1, 1, 1, 2],
        "labels": [],
        "name": "two",
        "nodes": [
            {"bias": "c.b", "id": "c", "inputs": ["input"], "kind": "Conv2D",
             "padding": "Same", "stride": 1, "weight": "c.w"},
            {"id": "r", "inputs": ["c"], "kind": "ReLU6"},
        ],
        "output": "r",
        "tensors": [
            {"encoding": "F32", "length": 8, "name": "c.w", "offset": 0, "shape": [1, 1, 1, 2]},
            {"encoding": "F32", "length": 4, "name": "c.b", "offset": 64, "shape": [1]},
        ],
    }
    hj = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    prefix = b"EMDL" + struct.pack("<HHI", 1, 0, len(hj)) + hj
    pad = (-len(prefix)) % 64
    blobs = struct.pack("<2f", 1.0, 2.0) + b"\0" * 56 + struct.pack("<f", 0.5)
    expected = prefix + b"\0" * pad + blobs
    assert emdl.to_bytes(m) == expected
    assert (len(prefix) + pad) % 64 == 0


def test_encoded_size_arithmetic():
    m = VARIANTS["f32"]
    s = emdl.encoded_size(m)
    assert s["total"] == 4 * count_params(m.graph)
    # CL4 with k=16 and no pruned zeros: ceil(P/2) + 16 f32 codebook entries
    cl = VARIANTS["cl4"]
    sizes = emdl.encoded_size(cl)["tensors"]
    for name, cb in cl.codebooks.items():
        P = cl.graph.weights[name].size
        assert sizes[name]["encoding"] == "CL4"
        assert sizes[name]["bytes"] == math.ceil(P / 2) + 64
    # Q8: one byte per element plus a per-channel f32 scale table
    q = VARIANTS["q8"]
    for name, info in emdl.encoded_size(q)["tensors"].items():
        t = q.graph.weights[name]
        if info["encoding"] == "Q8":
            assert info["bytes"] == t.size + 4 * t.shape[t.quant.axis]


def test_q8_storage_quarter():
    m = build_mobilenet_v2(0.35, 7, 96)
    assert count_params(m.graph) >= 1e5
    q = quantize_model(m, calibrate(m, random_calibration_inputs(m, 1, 0)))
    sizes = emdl.encoded_size(q)["tensors"]
    q8 = [n for n, i in sizes.items() if i["encoding"] == "Q8"]
    f32_bytes = sum(4 * m.graph.weights[n].size for n in q8)
    tables = sum(4 * q.graph.weights[n].shape[q.graph.weights[n].quant.axis] for n in q8)
    q8_bytes = sum(sizes[n]["bytes"] for n in q8)
    assert q8_bytes <= 0.26 * f32_bytes + tables


@pytest.mark.parametrize("kind", list(VARIANTS))
def test_decode_reencode_lossless(kind):
    m = VARIANTS[kind]
    for name in emdl.tensor_order(m.graph):
        blob, meta = emdl.encode_tensor(m, name)
        back = emdl.from_bytes(emdl.to_bytes(m))
        blob2, meta2 = emdl.encode_tensor(back, name)
        assert blob == blob2 and meta == meta2


# -- malformed files --------------------------------------------------------------


def _good():
    return emdl.to_bytes(VARIANTS["q8"])


def _rewrite_header(data, fn):
    (n,) = struct.unpack("<I", data[8:12])
    h = json.loads(data[12 : 12 + n])
    fn(h)
    hj = json.dumps(h, sort_keys=True, separators=(",", ":")).encode()
    base = -(-(12 + n) // 64) * 64
    prefix = data[:8] + struct.pack("<I", len(hj)) + hj
    pad = (-len(prefix)) % 64
    return prefix + b"\0" * pad + data[base:]


def test_rejects_truncation():
    data = _good()
    for cut in (0, 5, 11, 40, len(data) - 1):
        with pytest.raises(emdl.EmdlError):
            emdl.from_bytes(data[:cut])


@pytest.mark.parametrize(
    "patch,msg",
    [((0, b"XMDL"), "magic"), ((4, struct.pack("<H", 2)), "version"), ((6, struct.pack("<H", 1)), "flags")],
)
def test_rejects_bad_prefix(patch, msg):
    data = bytearray(_good())
    off, b = patch
    data[off : off + len(b)] = b
    with pytest.raises(emdl.EmdlError, match=msg):
        emdl.from_bytes(bytes(data))


def test_rejects_overlap_range_and_dangling():
    data = _good()

    def overlap(h):
        h["tensors"][1]["offset"] = h["tensors"][0]["offset"]

    def out_of_range(h):
        h["tensors"][-1]["offset"] += 1 << 20

    def dangling(h):
        h["tensors"] = h["tensors"][:-1]

    def misaligned(h):
        h["tensors"][1]["offset"] += 1

    for fn, msg in ((overlap, "overlap"), (out_of_range, "range"), (dangling, "missing"), (misaligned, "offset")):
        with pytest.raises(emdl.EmdlError, match=msg):
            emdl.from_bytes(_rewrite_header(data, fn))


def test_rejects_bad_codebook_index():
    m = VARIANTS["cl8"]
    data = bytearray(emdl.to_bytes(m))
    (n,) = struct.unpack("<I", data[8:12])
    h = json.loads(data[12 : 12 + n])
    base = -(-(12 + n) // 64) * 64
    e = next(t for t in h["tensors"] if t["encoding"] == "CL8")
    data[base + e["offset"] + 4 * e["codebook_len"]] = 255
    with pytest.raises(emdl.EmdlError, match="index"):
        emdl.from_bytes(bytes(data))


@given(st.binary(max_size=200))
def test_garbage_never_crashes_unstructured(blob):
    with pytest.raises(emdl.EmdlError):
        emdl.from_bytes(b"EMDL" + blob)


# -- convert ------------------------------------------------------------------------


def test_convert_stub(tmp_path):
    spec, wdir = write_oracle_stub_source(tmp_path)
    m = emdl.convert(spec, wdir)
    ref = oracle_stub_model()
    weights_equal(m, ref)
    assert m.labels == ref.labels


def test_convert_integer_weights(tmp_path):
    spec, wdir = write_oracle_stub_source(tmp_path)
    save_rten(Tensor(np.array([[1, 2, 3]] * 7, np.int8), I8, QuantParams(0.5, 0)), wdir / "fc.weight.rten")
    with pytest.raises(GraphError, match="int32 biases"):
        emdl.convert(spec, wdir)  # int8 weights with a float bias are not a valid graph
    save_rten(Tensor(np.array([[1, 2, 3]] * 7, np.int8), I8, QuantParams(0.5, 3)), wdir / "fc.weight.rten")
    with pytest.raises(emdl.EmdlError, match="zero point"):
        emdl.convert(spec, wdir)
