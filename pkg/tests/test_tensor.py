import io

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from edgedet.tensor import (
    QMAX,
    DType,
    QuantParams,
    Tensor,
    dequantize,
    load_etf,
    quantize,
    read_etf,
    round_f16,
    round_significand,
    save_etf,
    to_f16,
    write_etf,
)

finite32 = st.floats(-1e4, 1e4, allow_nan=False, width=32)


def scalar_quantize(x, scale):
    # independent oracle: Python round() is half-to-even, like the library
    return max(-QMAX, min(QMAX, round(float(x) / scale)))


def test_quantize_trivial_cases():
    qp = QuantParams(0.1)
    q = quantize(Tensor(np.array([0.0, 12.7, -200.0])), qp)
    assert q.dtype is DType.I8
    assert q.data.tolist() == [0, 127, -127]


def test_quantize_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, 1000).astype(np.float32)
    qp = QuantParams(1 / 127)
    got = quantize(Tensor(x), qp).data.tolist()
    assert got == [scalar_quantize(v, qp.scale) for v in x]


def test_dequantize_trivial_cases():
    qp = QuantParams(0.1)
    t = Tensor(np.array([127, 0], dtype=np.int8), DType.I8, qp)
    out = dequantize(t).data
    assert out[1] == 0.0
    assert out[0] == np.float32(127 * qp.scale)
    # the stored scale is 0.1 rounded to a 16-bit significand
    assert abs(out[0] - 12.7) <= 12.7 * 2**-16


@given(hnp.arrays(np.float32, st.integers(1, 200), elements=st.floats(-1, 1, width=32)), st.floats(1e-4, 10))
def test_roundtrip_error_bound(x, raw_scale):
    qp = QuantParams(raw_scale)
    x = x * np.float32(QMAX * qp.scale)
    back = dequantize(quantize(Tensor(x), qp)).numpy().astype(np.float64)
    assert np.all(np.abs(back - x.astype(np.float64)) <= qp.scale / 2)


def test_quantize_rejects_nonfinite():
    with pytest.raises(ValueError):
        quantize(Tensor(np.array([1.0, np.nan])), QuantParams(0.1))


@pytest.mark.parametrize("bad", [0.0, -1.0, float("inf"), float("nan")])
def test_quant_params_validation(bad):
    with pytest.raises(ValueError):
        QuantParams(bad)


def test_quant_params_scale_has_short_significand():
    qp = QuantParams(1 / 3)
    m, _ = np.frexp(qp.scale)
    assert float(m * 2**16).is_integer()
    assert abs(qp.scale - 1 / 3) <= 2**-17
    assert round_significand(qp.scale, 16) == qp.scale


def test_f16_conversion_cases():
    out = to_f16(Tensor(np.array([1.0, 2049.0, 70000.0], dtype=np.float32)))
    assert out.dtype is DType.F16
    assert out.numpy().tolist() == [1.0, 2048.0, float("inf")]


@given(hnp.arrays(np.float32, 20, elements=finite32))
def test_round_f16_matches_numpy_cast(x):
    assert np.array_equal(round_f16(x), x.astype(np.float16).astype(np.float32))


def test_tensor_is_immutable_and_validates():
    src = np.zeros((2, 3), dtype=np.float32)
    t = Tensor(src)
    src[0, 0] = 5
    assert t.data[0, 0] == 0
    with pytest.raises(ValueError):
        t.data[0, 0] = 1
    with pytest.raises(ValueError):
        Tensor(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        Tensor(np.array([1, 2], dtype=np.int8), DType.I8)
    with pytest.raises(ValueError):
        Tensor(np.array([200.0]), DType.I8, QuantParams(1.0))


@pytest.mark.parametrize("dtype", list(DType))
def test_etf_roundtrip_bit_exact(dtype, tmp_path):
    rng = np.random.default_rng(1)
    if dtype is DType.I8:
        t = Tensor(rng.integers(-127, 128, (3, 4, 5)).astype(np.int8), dtype, QuantParams(0.0371))
    else:
        t = Tensor(rng.standard_normal((3, 4, 5)), dtype)
    save_etf(t, tmp_path / "t.etf")
    back = load_etf(tmp_path / "t.etf")
    assert back.dtype is t.dtype and back.shape == t.shape
    assert back.data.tobytes() == t.data.tobytes()
    if dtype is DType.I8:
        assert back.qparams.scale == t.qparams.scale


def test_etf_rejects_corrupt_streams():
    buf = io.BytesIO()
    write_etf(Tensor(np.ones(4)), buf)
    raw = buf.getvalue()
    for bad in (b"XXXX" + raw[4:], raw[:-3]):
        with pytest.raises(ValueError):
            read_etf(io.BytesIO(bad))
