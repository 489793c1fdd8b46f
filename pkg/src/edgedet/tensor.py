"""Dense tensors in Float32 / Float16 / Int8 and the ETF binary file format."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np

QMAX = 127
SCALE_BITS = 16


def round_significand(x: float, bits: int) -> float:
    """Round ``x`` to the nearest float with a ``bits``-bit significand."""
    m, e = np.frexp(x)
    return float(np.ldexp(np.rint(m * 2.0**bits), int(e) - bits))


class DType(enum.IntEnum):
    F32 = 0
    F16 = 1
    I8 = 2

    @property
    def numpy(self) -> np.dtype:
        return _NUMPY_DTYPES[self]

    @classmethod
    def parse(cls, name: "str | DType") -> "DType":
        if isinstance(name, DType):
            return name
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown precision {name!r}; expected f32, f16 or i8") from None


_NUMPY_DTYPES = {
    DType.F32: np.dtype("<f4"),
    DType.F16: np.dtype("<f2"),
    DType.I8: np.dtype("i1"),
}


@dataclass(frozen=True)
class QuantParams:
    """Symmetric per-tensor Int8 parameters (zero point fixed at 0).

    The scale is rounded to a 16-bit significand. Every product ``q * scale``
    with ``|q| <= 127`` is then exact in float32, so dequantization is exact
    and the scale round-trips bit-exactly through ETF files and JSON tables.
    """

    scale: float
    num_bits: int = 8

    def __post_init__(self):
        scale = float(self.scale)
        if not np.isfinite(scale) or scale <= 0:
            raise ValueError(f"quantization scale must be positive and finite, got {self.scale!r}")
        if self.num_bits != 8:
            raise ValueError("only 8-bit quantization is supported")
        object.__setattr__(self, "scale", round_significand(scale, SCALE_BITS))

    @property
    def symmetric(self) -> bool:
        return True

    @property
    def zero_point(self) -> int:
        return 0

    @property
    def qmin(self) -> int:
        return -QMAX

    @property
    def qmax(self) -> int:
        return QMAX


@dataclass(frozen=True, eq=False)
class Tensor:
    """Immutable row-major array tagged with one of the three precisions."""

    data: np.ndarray
    dtype: DType = DType.F32
    qparams: QuantParams | None = field(default=None)

    def __post_init__(self):
        dtype = DType.parse(self.dtype)
        arr = np.asarray(self.data)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(d < 1 for d in arr.shape):
            raise ValueError(f"tensor dimensions must be positive, got {arr.shape}")
        if dtype is DType.I8:
            if self.qparams is None:
                raise ValueError("I8 tensors must carry QuantParams")
            if arr.dtype != np.int8:
                if np.any(np.abs(arr) > QMAX) or not np.all(arr == np.round(arr)):
                    raise ValueError("I8 payload must be integers in [-127, 127]")
            arr = arr.astype(np.int8, copy=False)
        elif dtype is DType.F16:
            arr = arr.astype(np.float16, copy=False)
        else:
            arr = arr.astype(np.float32, copy=False)
        if arr.flags.writeable:
            arr = arr.copy() if arr is self.data else arr
            arr.flags.writeable = False
        object.__setattr__(self, "dtype", dtype)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        """Real-valued float32 view of the tensor (dequantized for I8)."""
        if self.dtype is DType.I8:
            return dequantize(self).data
        return self.data.astype(np.float32)

    def __repr__(self) -> str:
        extra = f", scale={self.qparams.scale:g}" if self.qparams else ""
        return f"Tensor({self.dtype.name}, shape={self.shape}{extra})"


def f32(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), DType.F32)


def _check_finite(x: np.ndarray) -> None:
    bad = np.flatnonzero(~np.isfinite(x))
    if bad.size:
        idx = np.unravel_index(bad[0], x.shape)
        raise ValueError(f"non-finite value {x[idx]!r} at index {tuple(int(i) for i in idx)}")


def quantize_array(x: np.ndarray, scale: float) -> np.ndarray:
    # float32 inputs and 16-bit-significand scales are exact in float64; the quotient is correctly rounded
    q = np.rint(np.asarray(x, dtype=np.float64) / scale)
    return np.clip(q, -QMAX, QMAX).astype(np.int8)


def quantize(t: Tensor, qp: QuantParams) -> Tensor:
    """Map a float tensor onto the symmetric Int8 grid of ``qp``.

    Rounds half to even and saturates at +-127. Raises ``ValueError`` naming
    the first non-finite element.
    """
    if t.dtype is DType.I8:
        raise TypeError("quantize expects a floating-point tensor")
    x = t.data
    _check_finite(x)
    return Tensor(quantize_array(x, qp.scale), DType.I8, qp)


def dequantize(t: Tensor) -> Tensor:
    if t.dtype is not DType.I8 or t.qparams is None:
        raise TypeError("dequantize expects an I8 tensor with QuantParams")
    y = t.data.astype(np.float64) * t.qparams.scale
    return Tensor(y.astype(np.float32), DType.F32)


def to_f16(t: Tensor) -> Tensor:
    """Round to the nearest binary16 value (ties to even, overflow to inf)."""
    if t.dtype is DType.I8:
        t = dequantize(t)
    with np.errstate(over="ignore"):
        return Tensor(t.data.astype(np.float16), DType.F16)


def round_f16(x: np.ndarray) -> np.ndarray:
    """float32 array holding the binary16-rounded values of ``x``."""
    with np.errstate(over="ignore"):
        return np.asarray(x, dtype=np.float32).astype(np.float16).astype(np.float32)


# --- ETF files -------------------------------------------------------------

ETF_MAGIC = b"ETF1"


def write_etf(t: Tensor, fp: BinaryIO) -> None:
    fp.write(ETF_MAGIC)
    fp.write(struct.pack("<BB", int(t.dtype), len(t.shape)))
    fp.write(struct.pack(f"<{len(t.shape)}I", *t.shape))
    fp.write(np.ascontiguousarray(t.data, dtype=t.dtype.numpy).tobytes())
    if t.dtype is DType.I8:
        fp.write(struct.pack("<f", t.qparams.scale))


def read_etf(fp: BinaryIO) -> Tensor:
    magic = fp.read(4)
    if magic != ETF_MAGIC:
        raise ValueError(f"not an ETF file (magic {magic!r})")
    code, rank = struct.unpack("<BB", fp.read(2))
    try:
        dtype = DType(code)
    except ValueError:
        raise ValueError(f"unknown ETF dtype code {code}") from None
    shape = struct.unpack(f"<{rank}I", fp.read(4 * rank))
    count = int(np.prod(shape, dtype=np.int64))
    npdt = dtype.numpy
    payload = fp.read(count * npdt.itemsize)
    if len(payload) != count * npdt.itemsize:
        raise ValueError("truncated ETF payload")
    data = np.frombuffer(payload, dtype=npdt).reshape(shape)
    qp = None
    if dtype is DType.I8:
        raw = fp.read(4)
        if len(raw) != 4:
            raise ValueError("truncated ETF scale")
        (scale,) = struct.unpack("<f", raw)
        qp = QuantParams(scale)
    return Tensor(data, dtype, qp)


def save_etf(t: Tensor, path: str | Path) -> None:
    with open(path, "wb") as fp:
        write_etf(t, fp)


def load_etf(path: str | Path) -> Tensor:
    with open(path, "rb") as fp:
        return read_etf(fp)
