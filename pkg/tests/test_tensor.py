import io
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from edgeemo.tensor import (
    F32,
    I8,
    I32,
    PerChannelQuant,
    QuantParams,
    Tensor,
    TensorFormatError,
    dequantize,
    quant_params_from_range,
    quantize,
    quantize_per_channel,
    read_raw_tensor,
    round_half_away,
    tensor_from_bytes,
    tensor_to_bytes,
    write_raw_tensor,
)

scales = st.floats(1e-4, 10.0, allow_nan=False)
zps = st.integers(-128, 127)


def test_quantize_examples():
    assert quantize(0.0, QuantParams(0.5, 0)) == 0
    assert quantize(1.0, QuantParams(0.5, 10)) == 12
    assert quantize(1000.0, QuantParams(0.5, 0)) == 127
    assert quantize(-1000.0, QuantParams(0.5, 0)) == -128


def test_round_half_away():
    assert list(round_half_away(np.array([0.5, 1.5, -0.5, -2.5, 2.4]))) == [1, 2, -1, -3, 2]
    assert quantize(0.25, QuantParams(0.5, 0)) == 1
    assert quantize(-0.25, QuantParams(0.5, 0)) == -1


def test_dequantize_examples():
    q = QuantParams(0.5, 10)
    assert dequantize(10, q) == 0.0
    assert dequantize(12, q) == 1.0


def test_range_examples():
    assert quant_params_from_range(0, 0) == QuantParams(1.0, 0)
    q = quant_params_from_range(-1, 1)
    assert q.zero_point == 0
    assert q.scale == pytest.approx(2 / 255, rel=1e-7)
    q = quant_params_from_range(0, 6)
    assert q.zero_point == -128
    assert q.scale == pytest.approx(6 / 255, rel=1e-7)
    # range is widened to include zero
    assert quant_params_from_range(2, 6).zero_point == -128
    assert quant_params_from_range(-6, -2).zero_point == 127
    with pytest.raises(ValueError):
        quant_params_from_range(1, 0)


def test_quant_param_validation():
    with pytest.raises(ValueError):
        QuantParams(0.0, 0)
    with pytest.raises(ValueError):
        QuantParams(1.0, 128)
    with pytest.raises(ValueError):
        PerChannelQuant(0, (1.0, -1.0))


def test_tensor_invariants():
    with pytest.raises(ValueError):
        Tensor([1, 2], I8)
    with pytest.raises(ValueError):
        Tensor([1.0], F32, QuantParams(1.0, 0))
    with pytest.raises(ValueError):
        Tensor(np.zeros((2, 0)))
    with pytest.raises(ValueError):
        Tensor(np.zeros((2, 3), np.int8), I8, PerChannelQuant(0, (1.0,)))
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 3.0


def test_per_channel_examples():
    w = np.array([[-1.0, 1.0], [0.0, 0.0]], np.float32)
    t = quantize_per_channel(w, 0)
    assert t.quant.scales[0] == pytest.approx(1 / 127)
    assert t.quant.scales[1] == 1.0
    assert t.data.tolist() == [[-127, 127], [0, 0]]
    assert t.quant.zero_points == (0, 0)


def test_rten_size_example():
    data = tensor_to_bytes(Tensor([1.0]))
    assert len(data) == 16
    assert data[:8] == b"RTEN\x01\x00\x01\x00"
    assert struct.unpack("<I", data[8:12]) == (1,)
    assert struct.unpack("<f", data[12:16]) == (1.0,)


def test_rten_i8_layout():
    t = Tensor(np.array([[1, -2]], np.int8), I8, QuantParams(0.25, -3))
    data = tensor_to_bytes(t)
    assert len(data) == 8 + 8 + 8 + 2
    assert data[5] == 1
    assert struct.unpack("<fi", data[16:24]) == (0.25, -3)
    assert tensor_from_bytes(data) == t


def test_rten_roundtrip_random(rng):
    t = Tensor(rng.standard_normal((2, 3)).astype(np.float32))
    assert tensor_from_bytes(tensor_to_bytes(t)) == t


@pytest.mark.parametrize("cut", [0, 3, 8, 11, 15])
def test_rten_truncated(cut):
    data = tensor_to_bytes(Tensor([1.0, 2.0]))
    with pytest.raises(TensorFormatError):
        tensor_from_bytes(data[:cut] if cut < 16 else data[:-1])


@pytest.mark.parametrize(
    "patch,msg",
    [((0, b"XTEN"), "magic"), ((4, b"\x02"), "version"), ((5, b"\x07"), "dtype")],
)
def test_rten_rejects(patch, msg):
    data = bytearray(tensor_to_bytes(Tensor([1.0])))
    off, b = patch
    data[off : off + len(b)] = b
    with pytest.raises(TensorFormatError, match=msg):
        tensor_from_bytes(bytes(data))


def test_rten_trailing_bytes():
    with pytest.raises(TensorFormatError):
        tensor_from_bytes(tensor_to_bytes(Tensor([1.0])) + b"\0")


def test_rten_stream_sequence():
    a, b = Tensor([1.0]), Tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
    buf = io.BytesIO()
    n = write_raw_tensor(a, buf) + write_raw_tensor(b, buf)
    assert n == len(buf.getvalue())
    buf.seek(0)
    assert read_raw_tensor(buf) == a and read_raw_tensor(buf) == b


def test_rten_rejects_per_channel():
    t = quantize_per_channel(np.ones((2, 2)), 0)
    with pytest.raises(TensorFormatError):
        tensor_to_bytes(t)


# -- properties ---------------------------------------------------------------


@given(scales, zps, st.floats(-1e4, 1e4), st.floats(-1e4, 1e4))
def test_quantize_monotone(s, zp, a, b):
    q = QuantParams(s, zp)
    lo, hi = min(a, b), max(a, b)
    assert quantize(lo, q) <= quantize(hi, q)


@given(scales, zps, st.floats(0, 1))
def test_roundtrip_error_bound(s, zp, frac):
    q = QuantParams(s, zp)
    lo, hi = s * (-128 - zp), s * (127 - zp)
    x = lo + frac * (hi - lo)
    assert abs(dequantize(quantize(x, q), q) - x) <= s / 2 + 1e-9 * max(1.0, abs(x))


@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_zero_exactly_representable(a, b):
    q = quant_params_from_range(min(a, b), max(a, b))
    assert dequantize(quantize(0.0, q), q) == 0.0
    lo, hi = min(a, b, 0.0), max(a, b, 0.0)
    # endpoints land inside int8 without losing more than about a quantum
    for x in (lo, hi):
        assert abs(dequantize(quantize(x, q), q) - x) <= q.scale * 1.01


dtypes = st.sampled_from([F32, I8, I32])


@st.composite
def tensors(draw):
    dt = draw(dtypes)
    shape = draw(hnp.array_shapes(min_dims=1, max_dims=4, min_side=1, max_side=5))
    npdt = {F32: np.float32, I8: np.int8, I32: np.int32}[dt]
    data = draw(hnp.arrays(npdt, shape))
    quant = None if dt == F32 else QuantParams(draw(scales), draw(zps))
    return Tensor(data, dt, quant)


@given(tensors())
def test_rten_roundtrip_property(t):
    back = tensor_from_bytes(tensor_to_bytes(t))
    assert back == t
