import numpy as np
import pytest
from hypothesis import given, strategies as st

from sfdet import detector as det
from sfdet.datagen import LabeledBox
from sfdet.detector import Detection, DetectorConfig, LossWeights

SMALL = DetectorConfig(image_size=32, widths=(4, 6, 8))


def _f64(params):
    return {k: v.astype(np.float64) for k, v in params.items()}


def _rand_boxes(rng, k):
    out = []
    for _ in range(k):
        w, h = rng.uniform(0.05, 0.5, 2)
        out.append(LabeledBox(int(rng.integers(3)), rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2),
                              w, h))
    return out


def test_forward_shapes_and_determinism(rng):
    p = det.init_detector(DetectorConfig(), seed=0)
    x = rng.random((2, 64, 64, 3)).astype(np.float32)
    g1, g2 = det.forward(p, x), det.forward(p, x)
    assert g1.shape == (2, 8, 8, 8)
    np.testing.assert_array_equal(g1, g2)
    assert det.forward(p, x[0]).shape == (8, 8, 8)
    assert 20_000 < sum(v.size for v in p.values()) < 40_000


def test_zero_weights_give_constant_grid(rng):
    p = {k: np.zeros_like(v) for k, v in det.init_detector(SMALL).items()}
    p["head.b"] = np.arange(8, dtype=np.float32)
    g = det.forward(p, rng.random((32, 32, 3)))
    np.testing.assert_array_equal(g, np.broadcast_to(np.arange(8.0), g.shape))


def test_wrong_image_size_raises(rng):
    p = det.init_detector(SMALL)
    with pytest.raises(ValueError):
        det.forward(p, rng.random((40, 40, 3)), SMALL)


def test_forward_jacobian_column_matches_perturbation(rng):
    p = _f64(det.init_detector(SMALL, seed=2))
    p["head.w"] = rng.normal(0, 0.3, p["head.w"].shape)
    x = rng.random((1, 32, 32, 3))
    grid, _, cache = det.forward_train(p, x)
    probe = rng.normal(size=grid.shape)
    grads = det.backward(p, cache, probe)
    for name in ("b1.w", "b3c.w", "head.b"):
        idx = tuple(rng.integers(s) for s in p[name].shape)
        old = p[name][idx]
        p[name][idx] = old + 1e-6
        up = det.forward(p, x)
        p[name][idx] = old - 1e-6
        dn = det.forward(p, x)
        p[name][idx] = old
        num = np.sum((up - dn) * probe) / 2e-6
        assert abs(num - grads[name][idx]) <= 1e-4 * max(abs(num), 1e-3)


def test_loss_gradient_finite_differences_two_objects(rng):
    p = _f64(det.init_detector(SMALL, seed=1))
    p["head.w"] = rng.normal(0, 0.3, p["head.w"].shape)
    x = rng.random((1, 32, 32, 3))
    tg = [[LabeledBox(0, 0.3, 0.3, 0.2, 0.25), LabeledBox(2, 0.7, 0.6, 0.3, 0.2)]]

    def loss():
        return det.detection_loss(det.forward_train(p, x)[0], tg)[0].total

    grid, _, cache = det.forward_train(p, x)
    grads = det.backward(p, cache, det.detection_loss(grid, tg)[1])
    for name in p:
        idx = tuple(rng.integers(s) for s in p[name].shape)
        old = p[name][idx]
        p[name][idx] = old + 1e-6
        a = loss()
        p[name][idx] = old - 1e-6
        b = loss()
        p[name][idx] = old
        num = (a - b) / 2e-6
        assert abs(num - grads[name][idx]) <= 1e-4 * max(abs(num), 1e-6), name


def test_no_targets_zero_logits_gives_ln2():
    grid = np.zeros((4, 4, 8))
    lb, _ = det.detection_loss(grid, [])
    assert lb.l_box == 0 and lb.l_cls == 0
    assert lb.l_obj == pytest.approx(np.log(2), abs=1e-15)


def test_perfect_prediction_has_zero_box_and_class_loss():
    boxes = [LabeledBox(1, 0.4, 0.6, 0.3, 0.2)]
    lb, _ = det.detection_loss(det.encode_boxes(boxes, 8, 3, logit=40.0), boxes)
    assert lb.l_box == pytest.approx(0, abs=1e-9)
    assert lb.l_cls < 1e-12


@given(st.floats(0, 2), st.floats(0, 2), st.floats(0, 2), st.integers(0, 2**31))
def test_breakdown_total_is_exact_weighted_sum(wb, wc, wd, seed):
    rng = np.random.default_rng(seed)
    grid = rng.normal(size=(4, 4, 8))
    boxes = _rand_boxes(rng, 2)
    lb, _ = det.detection_loss(grid, boxes, LossWeights(wb, wc, wd))
    assert lb.total == wb * lb.l_box + wc * lb.l_cls + wd * lb.l_obj
    lb2, _ = det.detection_loss(grid, boxes, LossWeights(2 * wb, wc, wd))
    assert lb2.total - wc * lb2.l_cls - wd * lb2.l_obj == pytest.approx(2 * wb * lb.l_box, abs=1e-12)


def test_iou_examples():
    assert det.iou((0.5, 0.5, 0.2, 0.2), (0.5, 0.5, 0.2, 0.2)) == pytest.approx(1.0)
    assert det.iou((0.2, 0.2, 0.1, 0.1), (0.8, 0.8, 0.1, 0.1)) == 0.0
    assert det.iou((0.25, 0.5, 0.5, 1.0), (0.5, 0.5, 0.5, 1.0)) == pytest.approx(1 / 3)
    assert det.iou((0.5, 0.5, 0.0, 0.2), (0.5, 0.5, 0.2, 0.2)) == 0.0


@given(st.lists(st.floats(0.05, 0.95), min_size=8, max_size=8))
def test_iou_symmetric_and_bounded(v):
    a, b = (v[0], v[1], v[2] / 2, v[3] / 2), (v[4], v[5], v[6] / 2, v[7] / 2)
    assert det.iou(a, b) == pytest.approx(det.iou(b, a))
    assert 0.0 <= det.iou(a, b) <= 1.0


@given(st.integers(0, 2**31))
def test_encode_decode_roundtrip(seed):
    rng = np.random.default_rng(seed)
    boxes = _rand_boxes(rng, 1)
    dets = det.decode(det.encode_boxes(boxes, 8, 3), 0.4, 0.3)
    assert len(dets) == 1 and dets[0].class_id == boxes[0].class_id
    assert det.iou(dets[0], boxes[0]) >= 0.999


def test_decode_threshold_examples():
    grid = np.full((8, 8, 8), -100.0)
    assert det.decode(grid, 0.4, 0.3) == []
    grid[3, 5, 0] = 5.0
    grid[3, 5, 2] = 5.0
    grid[3, 5, 4:] = 0.0
    dets = det.decode(grid, 0.4, 0.3)
    assert len(dets) == 1 and dets[0].class_id == 1
    assert dets[0].cx == pytest.approx((5 + 0.5) / 8) and dets[0].cy == pytest.approx((3 + 0.5) / 8)
    assert dets[0].confidence == pytest.approx((1 / (1 + np.exp(-5.0))) ** 2)


def test_confidence_is_obj_times_max_class():
    rng = np.random.default_rng(3)
    grid = rng.normal(size=(8, 8, 8))
    s = 1 / (1 + np.exp(-grid))
    conf = s[..., 0] * s[..., 1:4].max(-1)
    dets = det.decode(grid, 0.0, 1.0)
    assert sorted(d.confidence for d in dets) == pytest.approx(sorted(conf.ravel()))


def test_nms_keeps_higher_confidence_of_overlapping_pair():
    a = Detection(0, 0.50, 0.5, 0.2, 0.2, 0.9)
    b = Detection(0, 0.5 + 0.2 / 3, 0.5, 0.2, 0.2, 0.8)  # IoU 0.5 with a
    assert det.iou(a, b) == pytest.approx(0.5)
    assert det.nms([b, a], 0.3) == [a]
    c = Detection(1, b.cx, b.cy, b.w, b.h, 0.8)  # other class survives
    assert det.nms([a, c], 0.3) == [a, c]


@given(st.integers(0, 2**31), st.floats(0.1, 0.9))
def test_nms_idempotent_and_subset(seed, thr):
    rng = np.random.default_rng(seed)
    dets = [Detection(int(rng.integers(2)), *rng.uniform(0.3, 0.7, 2), *rng.uniform(0.1, 0.4, 2),
                      float(rng.random())) for _ in range(12)]
    once = det.nms(dets, thr)
    assert det.nms(once, thr) == once
    assert {d.confidence for d in once} <= {d.confidence for d in dets}


def test_sgd_examples():
    p = {"a": np.array([1.0])}
    out, _ = det.sgd_step(p, {"a": np.array([0.5])}, 0.01)
    assert out["a"][0] == pytest.approx(0.995)
    assert det.sgd_step(p, {"a": np.array([0.0])}, 0.01)[0]["a"][0] == 1.0
    assert det.sgd_step(p, {"a": np.array([0.5])}, 0.0)[0]["a"][0] == 1.0
    assert p["a"][0] == 1.0  # pure


def test_sgd_momentum_accumulates():
    p = {"a": np.array([0.0])}
    g = {"a": np.array([1.0])}
    p1, v1 = det.sgd_step(p, g, 0.1, 0.9)
    p2, _ = det.sgd_step(p1, g, 0.1, 0.9, v1)
    assert p2["a"][0] == pytest.approx(-0.1 - 0.1 * 1.9)


def test_sgd_non_finite_gradient_reports_batch():
    with pytest.raises(det.TrainingError, match="batch 7"):
        det.sgd_step({"a": np.zeros(2)}, {"a": np.array([np.nan, 0])}, 0.01, step=7)


def test_training_reduces_loss():
    from sfdet.datagen import make_split
    pairs = make_split(32, seed=0)
    _, trace = det.train_detector(pairs, train=det.TrainConfig(epochs=4, batch_size=8), seed=0)
    assert trace[-1] < trace[0]
