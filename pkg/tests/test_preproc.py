import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from edgedet.preproc import RESOLUTIONS, Image, PreprocConfig, normalize, preprocess, read_ppm, resize_bilinear, write_ppm

images = st.tuples(st.integers(1, 12), st.integers(1, 12)).flatmap(
    lambda hw: hnp.arrays(np.uint8, (*hw, 3)).map(Image)
)
sizes = st.tuples(st.integers(1, 16), st.integers(1, 16))


def test_resize_identity():
    img = Image(np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8))
    assert np.array_equal(resize_bilinear(img, (5, 7)).data, img.data)


@given(st.integers(0, 255), sizes)
def test_resize_constant_stays_constant(v, size):
    img = Image(np.full((2, 2, 3), v, dtype=np.uint8))
    assert np.all(resize_bilinear(img, size).data == v)


def test_gradient_downsize_matches_oracle():
    grad = (np.arange(16).reshape(4, 4) * 16).astype(np.uint8)
    img = Image(np.stack([grad, grad.T, 255 - grad], axis=-1))
    out = resize_bilinear(img, (2, 2)).data
    for y in range(2):
        for x in range(2):
            assert out[y, x].tolist() == oracles.bilinear_pixel(img.data, y, x, 2, 2)


@given(images, sizes)
def test_resize_matches_oracle(img, size):
    out = resize_bilinear(img, size).data
    assert out.shape == (*size, 3)
    for y in range(size[0]):
        for x in range(size[1]):
            assert out[y, x].tolist() == oracles.bilinear_pixel(img.data, y, x, *size)


def test_normalize_centering_and_plain_scaling():
    mean, std = (0.2, 0.4, 0.6), (0.3, 7.0, 0.01)
    img = Image(np.tile(np.array([51, 102, 153], dtype=np.uint8), (2, 2, 1)))
    out = normalize(img, PreprocConfig((2, 2), mean, std)).numpy()
    assert out.shape == (3, 2, 2) and np.allclose(out, 0, atol=1e-6)
    raw = np.random.default_rng(1).integers(0, 256, (3, 4, 3), dtype=np.uint8)
    out = normalize(Image(raw), PreprocConfig((3, 4), (0, 0, 0), (1, 1, 1))).numpy()
    assert np.array_equal(out, (raw / 255.0).astype(np.float32).transpose(2, 0, 1))


def test_normalize_matches_scalar_oracle():
    cfg = PreprocConfig()
    raw = np.random.default_rng(2).integers(0, 256, (5, 6, 3), dtype=np.uint8)
    out = normalize(Image(raw), cfg).numpy()
    for c in range(3):
        for y in range(5):
            for x in range(6):
                ref = (raw[y, x, c] / 255.0 - cfg.mean[c]) / cfg.std[c]
                assert out[c, y, x] == np.float32(ref)


def test_preprocess_shape_at_standard_resolutions():
    img = Image(np.zeros((20, 30, 3), dtype=np.uint8))
    for res in RESOLUTIONS.values():
        assert preprocess(img, PreprocConfig(res)).shape == (3, *res)


def test_invalid_inputs():
    with pytest.raises(ValueError):
        Image(np.zeros((4, 4), dtype=np.uint8))
    with pytest.raises(ValueError):
        Image(np.zeros((4, 4, 3), dtype=np.float32))
    with pytest.raises(ValueError):
        PreprocConfig((0, 4))
    with pytest.raises(ValueError):
        resize_bilinear(Image(np.zeros((2, 2, 3), dtype=np.uint8)), (0, 2))


def test_ppm_roundtrip_and_comments(tmp_path):
    img = Image(np.random.default_rng(3).integers(0, 256, (7, 5, 3), dtype=np.uint8))
    write_ppm(img, tmp_path / "a.ppm")
    assert np.array_equal(read_ppm(tmp_path / "a.ppm").data, img.data)
    body = img.data.tobytes()
    (tmp_path / "b.ppm").write_bytes(b"P6\n# made by hand\n5 7\n255\n" + body)
    assert np.array_equal(read_ppm(tmp_path / "b.ppm").data, img.data)
    (tmp_path / "c.ppm").write_bytes(b"P3\n5 7\n255\n" + body)
    with pytest.raises(ValueError):
        read_ppm(tmp_path / "c.ppm")
