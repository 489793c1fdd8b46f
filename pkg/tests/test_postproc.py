import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from edgedet.postproc import (
    AnchorConfig2D,
    AnchorConfig3D,
    Box2D,
    Box3D,
    Detection,
    decode_2d,
    decode_3d,
    encode_2d,
    encode_3d,
    generate_anchors_2d,
    generate_anchors_3d,
    iou_2d,
    iou_bev,
    nms,
    nms_indices,
    normalize_yaw,
    read_jsonl,
    score_filter,
    sigmoid,
    write_jsonl,
)
from edgedet.preproc import RESOLUTIONS


def anchors_loop_oracle(resolution, cfg):
    h, w = resolution
    out = []
    for level, s in enumerate(cfg.strides):
        size = cfg.sizes[level]
        for i in range(h // s):
            for j in range(w // s):
                for r in cfg.ratios:
                    for sc in cfg.scales:
                        out.append(((j + 0.5) * s, (i + 0.5) * s, size * sc / math.sqrt(r), size * sc * math.sqrt(r)))
    return np.array(out, dtype=np.float32)


def test_single_level_anchor_enumeration():
    cfg = AnchorConfig2D((32,), (32.0,), (1.0,), (1.0,))
    a = generate_anchors_2d((64, 64), cfg).numpy()
    assert a.tolist() == [[16, 16, 32, 32], [48, 16, 32, 32], [16, 48, 32, 32], [48, 48, 32, 32]]


def test_anchor_count_proportional_to_pixels():
    cfg = AnchorConfig2D()
    counts = {k: generate_anchors_2d(r, cfg).shape[0] for k, r in RESOLUTIONS.items()}
    for k, (h, w) in RESOLUTIONS.items():
        assert counts[k] * (416 * 736) == counts["low"] * (h * w)


def test_anchors_match_enumeration_oracle_bit_exactly():
    cfg = AnchorConfig2D()
    got = generate_anchors_2d((64, 128), cfg).numpy()
    assert np.array_equal(got, anchors_loop_oracle((64, 128), cfg))


def test_anchor_2d_validation():
    with pytest.raises(ValueError):
        AnchorConfig2D((8, 16), (32.0,))
    with pytest.raises(ValueError):
        generate_anchors_2d((60, 128), AnchorConfig2D())


def test_decode_2d_cases():
    a = np.array([[10.0, 20.0, 4.0, 6.0]])
    assert decode_2d(a, np.zeros((1, 4))).boxes.tolist() == [[8, 17, 12, 23]]
    wide = decode_2d(a, np.array([[0, 0, math.log(2), 0]])).boxes[0]
    assert wide[2] - wide[0] == pytest.approx(8.0)
    clipped = decode_2d(a, np.array([[0, 0, 5.0, 0]]), image_size=(30, 15)).boxes[0]
    assert clipped[0] == 0 and clipped[2] == 15


def test_decode_2d_drops_nonfinite_rows():
    a = np.tile([10.0, 10.0, 4.0, 4.0], (3, 1))
    d = np.array([[0, 0, 0, 0], [np.nan, 0, 0, 0], [0, 0, 1000.0, 0]])
    out = decode_2d(a, d)
    assert out.dropped == 2 and out.rows.tolist() == [0]


@settings(max_examples=50)
@given(st.integers(0, 2**31 - 1))
def test_encode_decode_2d_roundtrip(seed):
    rng = np.random.default_rng(seed)
    a = np.column_stack([rng.uniform(0, 500, (20, 2)), rng.uniform(8, 200, (20, 2))])
    xy = rng.uniform(0, 500, (20, 2))
    boxes = np.column_stack([xy, xy + rng.uniform(1, 300, (20, 2))])
    assert np.allclose(decode_2d(a, encode_2d(a, boxes)).boxes, boxes, atol=1e-5)


def test_decode_3d_cases():
    a = np.array([[1.0, 2.0, -1.0, 1.6, 3.9, 1.5, 0.3]])
    box = decode_3d(a, np.zeros((1, 7)), np.array([[1.0, 0.0]])).boxes[0]
    assert np.allclose(box, a[0])
    flipped = decode_3d(a, np.zeros((1, 7)), np.array([[0.0, 1.0]])).boxes[0]
    assert np.array_equal(flipped[:6], box[:6])
    assert normalize_yaw(flipped[6] - box[6] - math.pi) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=50)
@given(st.integers(0, 2**31 - 1))
def test_encode_decode_3d_roundtrip(seed):
    rng = np.random.default_rng(seed)
    n = 20
    a = np.column_stack([rng.uniform(0, 70, n), rng.uniform(-40, 40, n), rng.uniform(-2, 0, n), rng.uniform(0.5, 2, (n, 3)), rng.choice([0, math.pi / 2], n)])
    b = np.column_stack([a[:, :3] + rng.normal(0, 1, (n, 3)), a[:, 3:6] * rng.uniform(0.7, 1.3, (n, 3)), rng.uniform(-math.pi, math.pi, n)])
    d, dirs = encode_3d(a, b)
    logits = np.eye(2)[dirs]
    out = decode_3d(a, d, logits).boxes
    assert np.allclose(out[:, :6], b[:, :6], atol=1e-5)
    assert np.allclose(normalize_yaw(out[:, 6] - b[:, 6]), 0, atol=1e-5)


def test_anchors_3d_layout():
    cfg = AnchorConfig3D(feature_size=(4, 5))
    a = generate_anchors_3d(cfg).numpy()
    assert a.shape == (4 * 5 * cfg.per_cell, 7)
    assert a[0, 6] == 0 and a[1, 6] == np.float32(math.pi / 2)
    assert a[cfg.per_cell, 0] > a[0, 0] and a[cfg.per_cell, 1] == a[0, 1]


def test_iou_trivial_cases():
    assert iou_2d([0, 0, 2, 2], [0, 0, 2, 2]) == 1.0
    assert iou_2d([0, 0, 1, 1], [2, 2, 3, 3]) == 0.0
    b = (0, 0, 0, 2, 4, 1, 0.4)
    assert iou_bev(b, b) == pytest.approx(1.0)
    assert iou_bev(b, (10, 0, 0, 2, 4, 1, 0.4)) == 0.0


def test_rotated_square_matches_montecarlo():
    exact = iou_bev((0, 0, 0, 1, 1, 1, 0.0), (0, 0, 0, 1, 1, 1, math.pi / 4))
    mc = oracles.iou_bev_montecarlo((0, 0, 1, 1, 0.0), (0, 0, 1, 1, math.pi / 4))
    assert abs(exact - mc) <= 0.003
    # analytic value: the overlap is a regular octagon of area 2(sqrt2 - 1)
    octagon = 2 * (math.sqrt(2) - 1)
    assert exact == pytest.approx(octagon / (2 - octagon), rel=1e-12)


@given(st.lists(st.floats(-50, 50), min_size=4, max_size=4), st.lists(st.floats(0.1, 20), min_size=4, max_size=4))
def test_iou_2d_matches_scalar_oracle_and_is_symmetric(xy, wh):
    a = [xy[0], xy[1], xy[0] + wh[0], xy[1] + wh[1]]
    b = [xy[2], xy[3], xy[2] + wh[2], xy[3] + wh[3]]
    assert iou_2d(a, b) == pytest.approx(oracles.iou_2d_scalar(a, b), abs=1e-12)
    assert iou_2d(a, b) == pytest.approx(iou_2d(b, a), abs=1e-12)


@given(st.floats(-math.pi, math.pi), st.floats(-math.pi, math.pi), st.floats(-2, 2))
def test_iou_bev_symmetric_and_bounded(ya, yb, dx):
    a, b = (0, 0, 0, 1.5, 4.0, 1, ya), (dx, 0.3, 0, 1.2, 3.0, 1, yb)
    v = iou_bev(a, b)
    assert 0.0 <= v <= 1.0 and v == pytest.approx(iou_bev(b, a), abs=1e-9)


def test_nms_trivial_cases():
    dets = [Detection(Box2D(0, 0, 10, 10), 0.8, 0), Detection(Box2D(0, 0, 10, 10), 0.9, 0)]
    assert [d.score for d in nms(dets, 0.5)] == [0.9]
    apart = [Detection(Box2D(20 * i, 0, 20 * i + 10, 10), 0.5, 0) for i in range(4)]
    assert nms(apart, 0.5) == apart
    other_class = [dets[0], Detection(Box2D(0, 0, 10, 10), 0.9, 1)]
    assert len(nms(other_class, 0.5)) == 2


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_nms_matches_quadratic_reference(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 120))
    xy = rng.uniform(0, 100, (n, 2))
    boxes = np.column_stack([xy, xy + rng.uniform(2, 40, (n, 2))])
    scores = np.round(rng.random(n), 1)
    classes = rng.integers(0, 2, n)
    got = nms_indices(boxes, scores, classes, 0.4).tolist()
    assert got == oracles.nms_quadratic(boxes.tolist(), scores.tolist(), classes.tolist(), 0.4)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_bev_nms_matches_quadratic_reference(seed):
    rng = np.random.default_rng(seed)
    n = 40
    boxes = np.column_stack([rng.uniform(0, 10, (n, 2)), np.zeros(n), rng.uniform(1, 3, (n, 3)), rng.uniform(-math.pi, math.pi, n)])
    scores = np.round(rng.random(n), 1)
    classes = rng.integers(0, 2, n)
    got = nms_indices(boxes, scores, classes, 0.3, "bev").tolist()
    assert got == oracles.nms_quadratic(boxes.tolist(), scores.tolist(), classes.tolist(), 0.3, iou_bev)


def test_nms_rejects_nonfinite_scores():
    with pytest.raises(ValueError):
        nms_indices(np.zeros((1, 4)), [np.nan], [0], 0.5)


def test_score_filter_cases():
    logits = np.random.default_rng(0).standard_normal((6, 3))
    assert len(score_filter(logits, 1.0)) == 0
    assert len(score_filter(logits, 0.0)) == 18
    with pytest.raises(ValueError):
        score_filter(logits, 1.5)


def test_score_filter_matches_scalar_oracle():
    logits = np.random.default_rng(1).standard_normal((50, 4)) * 2
    hits = score_filter(logits, 0.3)
    ref = [(a, k, 1 / (1 + math.exp(-logits[a, k]))) for a in range(50) for k in range(4) if 1 / (1 + math.exp(-logits[a, k])) > 0.3]
    assert list(zip(hits.anchors.tolist(), hits.classes.tolist())) == [(a, k) for a, k, _ in ref]
    assert np.allclose(hits.scores, [s for *_, s in ref], rtol=1e-12)


def test_top_k_keeps_best_in_original_order():
    hits = score_filter(np.array([[0.0], [3.0], [1.0], [3.0]]), 0.0).top(2)
    assert hits.anchors.tolist() == [1, 3]


def test_sigmoid_saturates_without_warnings():
    with np.errstate(over="raise", invalid="raise", divide="raise"):
        assert sigmoid(np.array([-1000.0, 1000.0])).tolist() == [0.0, 1.0]


def test_jsonl_roundtrip(tmp_path):
    dets = [Detection(Box2D(1, 2, 3, 4), 0.5, 1, "f0"), Detection(Box3D(1, 2, 3, 1, 2, 1, 0.1), 1.0, 0, "f1")]
    write_jsonl(dets, tmp_path / "d.jsonl", ["a", "b"])
    assert read_jsonl(tmp_path / "d.jsonl", ["a", "b"]) == dets
    with pytest.raises(ValueError):
        read_jsonl(tmp_path / "d.jsonl", ["x"])


def test_box_validation():
    with pytest.raises(ValueError):
        Box2D(2, 0, 1, 1)
    with pytest.raises(ValueError):
        Box3D(0, 0, 0, 0, 1, 1, 0)
    with pytest.raises(ValueError):
        Detection(Box2D(0, 0, 1, 1), 1.5, 0)
    assert Box3D(0, 0, 0, 1, 1, 1, 3 * math.pi).yaw == pytest.approx(math.pi)
