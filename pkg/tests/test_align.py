import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sfdet import align


def _kl(p, q):
    return p * math.log(p / q) + (1 - p) * math.log((1 - p) / (1 - q))


def test_graph_examples():
    np.testing.assert_allclose(align.build_feature_graph(np.ones((2, 2, 3))).edges, np.ones((4, 4)))
    np.testing.assert_allclose(align.build_feature_graph(np.array([[1.0, 0], [0, 2.0]])).edges, np.eye(2))
    e = align.build_feature_graph(np.array([[1.0, 0], [1, 1]])).edges
    assert e[0, 1] == pytest.approx(1 / math.sqrt(2))


def test_zero_patch_has_zero_similarity():
    e = align.build_feature_graph(np.array([[1.0, 0], [0, 0], [0, 3.0]])).edges
    assert e[1].tolist() == [0, 0, 0]
    assert e[0, 0] == e[2, 2] == 1


def test_graph_needs_two_patches():
    with pytest.raises(ValueError):
        align.build_feature_graph(np.ones((1, 1, 4)))


@given(st.integers(0, 2**31))
def test_graph_invariants(seed):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(3, 3, 4))
    e = align.build_feature_graph(f).edges
    np.testing.assert_allclose(e, e.T)
    np.testing.assert_allclose(np.diag(e), 1.0)
    assert e.min() >= -1 and e.max() <= 1
    g = f.copy()
    g[1, 2] *= rng.uniform(0.1, 10)
    np.testing.assert_allclose(align.build_feature_graph(g).edges, e, atol=1e-12)


def test_gw_scalar_example():
    gt = align.build_feature_graph(np.array([[1.0, 0], [0, 1]]))
    ga = align.build_feature_graph(np.array([[1.0, 0], [1, 1]]))
    q = (1 + 1 / math.sqrt(2)) / 2
    loss, _, _ = align.gw_loss(gt, ga)
    assert loss == pytest.approx(_kl(0.5, q) + _kl(0.5, 1 - q), rel=1e-9)


def test_gw_shape_mismatch():
    with pytest.raises(ValueError):
        align.gw_loss(align.build_feature_graph(np.ones((3, 2))), align.build_feature_graph(np.ones((4, 2))))


@given(st.integers(0, 2**31))
def test_gw_nonnegative_and_zero_on_equal(seed):
    rng = np.random.default_rng(seed)
    gt = align.build_feature_graph(rng.normal(size=(4, 3)))
    ga = align.build_feature_graph(rng.normal(size=(4, 3)))
    assert align.gw_loss(gt, ga)[0] >= 0
    loss, dt, da = align.gw_loss(gt, gt)
    assert loss == 0.0
    np.testing.assert_allclose(dt, 0, atol=1e-12)
    np.testing.assert_allclose(da, 0, atol=1e-12)


def _fd_gw(rng):
    ft, fa = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    _, dt, da = align.gw_loss(align.build_feature_graph(ft), align.build_feature_graph(fa))
    for f, d in ((ft, dt), (fa, da)):
        for idx in np.ndindex(f.shape):
            old = f[idx]
            f[idx] = old + 1e-6
            up = align.gw_loss(align.build_feature_graph(ft), align.build_feature_graph(fa))[0]
            f[idx] = old - 1e-6
            dn = align.gw_loss(align.build_feature_graph(ft), align.build_feature_graph(fa))[0]
            f[idx] = old
            num = (up - dn) / 2e-6
            assert abs(num - d[idx]) <= 1e-4 * max(abs(num), 1e-5)


def test_gw_gradient_finite_differences(rng):
    for _ in range(5):
        _fd_gw(rng)


def test_gw_batch_is_mean_of_images(rng):
    ft, fa = rng.normal(size=(2, 2, 2, 3)), rng.normal(size=(2, 2, 2, 3))
    total, dt, _ = align.gw_batch(ft, fa)
    per = [align.gw_loss(align.build_feature_graph(ft[i]), align.build_feature_graph(fa[i])) for i in range(2)]
    assert total == pytest.approx((per[0][0] + per[1][0]) / 2)
    np.testing.assert_allclose(dt[1], per[1][1].reshape(2, 2, 3) / 2)


def test_gw_batch_mean_reduction_divides_by_edge_count(rng):
    ft, fa = rng.normal(size=(2, 2, 3, 3)), rng.normal(size=(2, 2, 3, 3))
    total, dt, da = align.gw_batch(ft, fa)
    m_total, m_dt, m_da = align.gw_batch(ft, fa, "mean")
    assert m_total == pytest.approx(total / 36)
    np.testing.assert_allclose(m_dt, dt / 36)
    np.testing.assert_allclose(m_da, da / 36)
    with pytest.raises(ValueError):
        align.gw_batch(ft, fa, "max")


def _flat_disc(channels):
    d = align.init_discriminator(channels)
    return {k: np.zeros_like(v) for k, v in d.items()}


def test_adversarial_half_probability_is_n_ln2(rng):
    feats = rng.normal(size=(5, 2, 2, 3))
    loss, _, _ = align.adversarial_loss(_flat_disc(3), feats, [0, 1, 1, 0, 1])
    assert loss == pytest.approx(5 * math.log(2), abs=1e-12)


def test_adversarial_perfect_discriminator_hits_floor():
    d = _flat_disc(1)
    d["d.w1"][0, 0] = 1.0
    d["d.w2"][0, 0] = 100.0
    d["d.b2"][0] = -50.0
    feats = np.array([0.0, 1.0]).reshape(2, 1, 1, 1)
    loss, _, _ = align.adversarial_loss(d, feats, [0, 1])
    assert loss == pytest.approx(-2 * math.log(1 - 1e-7), rel=1e-6)


def test_adversarial_length_mismatch():
    with pytest.raises(ValueError):
        align.adversarial_loss(_flat_disc(2), np.zeros((2, 1, 1, 2)), [1])


def test_grl_negates_input_gradient(rng):
    disc = align.init_discriminator(3, seed=1)
    feats = rng.normal(size=(4, 2, 2, 3))
    labels = [0, 1, 0, 1]
    _, _, reversed_grad = align.adversarial_loss(disc, feats, labels, grl_scale=1.0)
    # plain input gradient by central differences
    for idx in [(0, 0, 0, 0), (1, 1, 0, 2), (3, 1, 1, 1)]:
        old = feats[idx]
        feats[idx] = old + 1e-6
        up = align.adversarial_loss(disc, feats, labels)[0]
        feats[idx] = old - 1e-6
        dn = align.adversarial_loss(disc, feats, labels)[0]
        feats[idx] = old
        assert -reversed_grad[idx] == pytest.approx((up - dn) / 2e-6, rel=1e-5, abs=1e-9)
    half = align.adversarial_loss(disc, feats, labels, grl_scale=0.5)[2]
    np.testing.assert_allclose(half, 0.5 * reversed_grad)
    np.testing.assert_array_equal(align.grad_reverse(np.array([1.0, -2.0])), [-1.0, 2.0])


def test_discriminator_gradient_finite_differences(rng):
    for seed in range(5):
        disc = align.init_discriminator(3, seed=seed)
        feats = rng.normal(size=(4, 2, 2, 3))
        labels = rng.integers(0, 2, 4)
        _, grads, _ = align.adversarial_loss(disc, feats, labels)
        for name, v in disc.items():
            idx = tuple(rng.integers(s) for s in v.shape)
            old = v[idx]
            v[idx] = old + 1e-6
            up = align.adversarial_loss(disc, feats, labels)[0]
            v[idx] = old - 1e-6
            dn = align.adversarial_loss(disc, feats, labels)[0]
            v[idx] = old
            num = (up - dn) / 2e-6
            assert abs(num - grads[name][idx]) <= 1e-4 * max(abs(num), 1e-6)


def test_discriminator_training_decreases_loss(rng):
    disc = align.init_discriminator(2, seed=0)
    feats = np.concatenate([rng.normal(-1, 0.3, (8, 1, 1, 2)), rng.normal(1, 0.3, (8, 1, 1, 2))])
    labels = [0] * 8 + [1] * 8
    losses = []
    for _ in range(30):
        loss, grads, _ = align.adversarial_loss(disc, feats, labels)
        losses.append(loss)
        disc = {k: v - 0.05 * grads[k] for k, v in disc.items()}
    assert losses[-1] < losses[0]
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


@given(st.integers(0, 2**31))
def test_mmd_properties(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(6, 3)), rng.normal(0.5, 1, size=(5, 3))
    assert align.mmd(a, b) >= 0
    assert align.mmd(a, b) == pytest.approx(align.mmd(b, a), abs=1e-12)
    assert align.mmd(a, a[::-1]) == pytest.approx(0, abs=1e-9)


def test_mmd_grows_with_shift(rng):
    a = rng.normal(size=(40, 2))
    vals = [align.mmd(a, rng.normal(size=(40, 2)) + s) for s in (0.5, 1.5, 3.0)]
    assert vals[0] < vals[1] < vals[2]
    with pytest.raises(ValueError):
        align.mmd([], a)
