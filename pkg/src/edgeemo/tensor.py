"""Tensor container, int8 affine quantization, and the RTEN raw-tensor format.

RTEN layout (little-endian)::

    "RTEN" | version u8 = 1 | dtype u8 | rank u8 | pad u8 = 0
    dims: u32 x rank
    I8 only: scale f32, zero_point i32
    payload, row-major

dtype codes: 0 = F32, 1 = I8, 2 = I32 (I32 holds quantized biases).
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from typing import BinaryIO, Sequence, Union

import numpy as np

F32 = "F32"
I8 = "I8"
I32 = "I32"

_NP_DTYPES = {F32: np.dtype("<f4"), I8: np.dtype("i1"), I32: np.dtype("<i4")}
_DTYPE_CODES = {F32: 0, I8: 1, I32: 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}

RTEN_MAGIC = b"RTEN"
RTEN_VERSION = 1

INT8_MIN = -128
INT8_MAX = 127


class TensorFormatError(ValueError):
    """Raised when an RTEN stream is malformed."""


def f32(x: float) -> float:
    """Round a real to the nearest float32 and return it as a Python float."""
    return float(np.float32(x))


@dataclass(frozen=True)
class QuantParams:
    """Per-tensor affine int8 mapping: real = scale * (q - zero_point).

    The scale is rounded to float32 on construction, matching what the file
    formats store.
    """

    scale: float
    zero_point: int

    def __post_init__(self):
        object.__setattr__(self, "scale", f32(self.scale))
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if not INT8_MIN <= self.zero_point <= INT8_MAX:
            raise ValueError(f"zero_point {self.zero_point} outside int8 range")
        object.__setattr__(self, "zero_point", int(self.zero_point))

    def to_dict(self) -> dict:
        return {"scale": self.scale, "zero_point": self.zero_point}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantParams":
        return cls(float(d["scale"]), int(d["zero_point"]))


@dataclass(frozen=True)
class PerChannelQuant:
    """Symmetric per-channel quantization along ``axis``; zero points are all 0."""

    axis: int
    scales: tuple

    def __post_init__(self):
        scales = tuple(f32(s) for s in self.scales)
        if not scales:
            raise ValueError("per-channel quant needs at least one scale")
        if not all(s > 0 and math.isfinite(s) for s in scales):
            raise ValueError("every per-channel scale must be positive and finite")
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "axis", int(self.axis))

    @property
    def zero_points(self) -> tuple:
        return (0,) * len(self.scales)

    def broadcast_scales(self, shape: Sequence[int]) -> np.ndarray:
        """Scales reshaped so they broadcast against a tensor of ``shape``."""
        view = [1] * len(shape)
        view[self.axis] = len(self.scales)
        return np.asarray(self.scales, dtype=np.float64).reshape(view)


Quant = Union[QuantParams, PerChannelQuant]


class Tensor:
    """Immutable N-d array in F32, I8 or I32 with optional quantization params.

    ``quant`` is required for the integer dtypes and forbidden for F32.
    """

    __slots__ = ("data", "dtype", "quant")

    def __init__(self, data, dtype: str = F32, quant: Quant | None = None):
        if dtype not in _NP_DTYPES:
            raise ValueError(f"unknown dtype {dtype!r}")
        if (dtype == F32) != (quant is None):
            raise ValueError("integer tensors need quant params; F32 tensors must not have them")
        arr = np.array(data, dtype=_NP_DTYPES[dtype], order="C", copy=True)
        if arr.ndim == 0:
            raise ValueError("tensors must have rank >= 1")
        if any(d < 1 for d in arr.shape):
            raise ValueError(f"every dim must be >= 1, got {arr.shape}")
        if isinstance(quant, PerChannelQuant):
            if not 0 <= quant.axis < arr.ndim or arr.shape[quant.axis] != len(quant.scales):
                raise ValueError("per-channel scales do not match the tensor's channel axis")
        arr.setflags(write=False)
        self.data = arr
        self.dtype = dtype
        self.quant = quant

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def nbytes(self) -> int:
        return int(self.data.nbytes)

    def dequantized(self) -> np.ndarray:
        """Real values as float64 (F32 tensors are just widened)."""
        if self.dtype == F32:
            return self.data.astype(np.float64)
        q = self.data.astype(np.float64)
        if isinstance(self.quant, QuantParams):
            return self.quant.scale * (q - self.quant.zero_point)
        return q * self.quant.broadcast_scales(self.shape)

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.dtype == other.dtype
            and self.quant == other.quant
            and self.shape == other.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, quant={self.quant})"


def round_half_away(x):
    """Round to nearest integer, halves away from zero (scalar or array)."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(x, q: QuantParams):
    """Map real value(s) to int8 with saturation."""
    v = round_half_away(np.asarray(x, dtype=np.float64) / q.scale) + q.zero_point
    out = np.clip(v, INT8_MIN, INT8_MAX).astype(np.int8)
    return int(out) if out.ndim == 0 else out


def dequantize(v, q: QuantParams):
    out = q.scale * (np.asarray(v, dtype=np.float64) - q.zero_point)
    return float(out) if out.ndim == 0 else out


def quant_params_from_range(lo: float, hi: float) -> QuantParams:
    """Affine int8 params covering ``[lo, hi]`` widened to include zero.

    The zero point is computed from the exact ratio ``lo * 255 / (hi - lo)``
    and rounded half-to-even, so a symmetric range gets zero point 0.
    """
    if lo > hi:
        raise ValueError(f"min {lo} exceeds max {hi}")
    lo = min(float(lo), 0.0)
    hi = max(float(hi), 0.0)
    if lo == hi:
        return QuantParams(1.0, 0)
    scale = f32((hi - lo) / 255.0)
    if scale <= 0:
        scale = float(np.finfo(np.float32).tiny)
    zp = int(np.clip(np.rint(-128.0 - lo * 255.0 / (hi - lo)), INT8_MIN, INT8_MAX))
    return QuantParams(scale, zp)


def bias_scales(input_scale: float, weight_scales) -> tuple:
    """Scales of int32 biases: input scale times each weight-channel scale."""
    return tuple(f32(input_scale * s) for s in weight_scales)


def symmetric_channel_scales(w: np.ndarray, axis: int) -> np.ndarray:
    """max|w| / 127 per slice along ``axis``; all-zero slices get scale 1."""
    moved = np.moveaxis(np.abs(np.asarray(w, dtype=np.float64)), axis, 0)
    amax = moved.reshape(moved.shape[0], -1).max(axis=1)
    scales = np.where(amax > 0, amax / 127.0, 1.0).astype(np.float32)
    return scales


def quantize_per_channel(w: np.ndarray, axis: int, scales=None) -> Tensor:
    """Symmetric int8 quantization of ``w`` with one scale per ``axis`` slice."""
    w = np.asarray(w, dtype=np.float32)
    if scales is None:
        scales = symmetric_channel_scales(w, axis)
    pcq = PerChannelQuant(axis, tuple(float(s) for s in scales))
    q = round_half_away(w.astype(np.float64) / pcq.broadcast_scales(w.shape))
    return Tensor(np.clip(q, -127, 127).astype(np.int8), I8, pcq)


# -- RTEN ---------------------------------------------------------------------


def write_raw_tensor(t: Tensor, sink: BinaryIO) -> int:
    """Serialize ``t`` to ``sink``; returns the number of bytes written."""
    if isinstance(t.quant, PerChannelQuant):
        raise TensorFormatError("RTEN stores per-tensor quant params only")
    head = struct.pack("<4sBBBB", RTEN_MAGIC, RTEN_VERSION, _DTYPE_CODES[t.dtype], t.data.ndim, 0)
    head += struct.pack(f"<{t.data.ndim}I", *t.shape)
    if t.dtype != F32:
        head += struct.pack("<fi", t.quant.scale, t.quant.zero_point)
    payload = t.data.astype(_NP_DTYPES[t.dtype], copy=False).tobytes(order="C")
    sink.write(head)
    sink.write(payload)
    return len(head) + len(payload)


def _read_exact(source: BinaryIO, n: int, what: str) -> bytes:
    buf = source.read(n)
    if len(buf) != n:
        raise TensorFormatError(f"truncated RTEN stream while reading {what}")
    return buf


def read_raw_tensor(source: BinaryIO) -> Tensor:
    magic, version, code, rank, _pad = struct.unpack("<4sBBBB", _read_exact(source, 8, "header"))
    if magic != RTEN_MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}")
    if version != RTEN_VERSION:
        raise TensorFormatError(f"unsupported RTEN version {version}")
    if code not in _CODE_DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")
    if rank == 0:
        raise TensorFormatError("rank must be >= 1")
    dtype = _CODE_DTYPES[code]
    dims = struct.unpack(f"<{rank}I", _read_exact(source, 4 * rank, "dims"))
    quant = None
    if dtype != F32:
        scale, zp = struct.unpack("<fi", _read_exact(source, 8, "quant params"))
        try:
            quant = QuantParams(float(scale), zp)
        except ValueError as e:
            raise TensorFormatError(str(e)) from None
    npdt = _NP_DTYPES[dtype]
    n = math.prod(dims)
    payload = _read_exact(source, n * npdt.itemsize, "payload")
    try:
        return Tensor(np.frombuffer(payload, dtype=npdt).reshape(dims), dtype, quant)
    except ValueError as e:
        raise TensorFormatError(str(e)) from None


def tensor_to_bytes(t: Tensor) -> bytes:
    buf = io.BytesIO()
    write_raw_tensor(t, buf)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> Tensor:
    src = io.BytesIO(data)
    t = read_raw_tensor(src)
    if src.read(1):
        raise TensorFormatError("trailing bytes after RTEN payload")
    return t


def save_rten(t: Tensor, path) -> int:
    with open(path, "wb") as fh:
        return write_raw_tensor(t, fh)


def load_rten(path) -> Tensor:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())
