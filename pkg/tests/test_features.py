import numpy as np
import pytest

from weakground import autograd as ag
from weakground import features as ft
from weakground.autograd import Tensor
from weakground.features import ConfigurationError


@pytest.fixture(scope="module")
def dark_params():
    return ft.init_dark(np.random.default_rng(0))


@pytest.fixture(scope="module")
def fpn_params():
    return ft.init_fpn(np.random.default_rng(1), dim=16)


def test_stride_formula_at_paper_scale(dark_params):
    f1, f2, f3 = ft.encode_dark(Tensor(np.zeros((1, 416, 416, 3))), dark_params)
    assert f1.shape[1:3] == (52, 52)
    assert f2.shape[1:3] == (26, 26)
    assert f3.shape[1:3] == (13, 13)


def test_stride_formula_at_desk_scale(dark_params):
    f1, f2, f3 = ft.encode_dark(Tensor(np.zeros((2, 64, 64, 3))), dark_params)
    assert f1.shape[1:3] == (8, 8)
    assert f2.shape[1:3] == (4, 4)
    assert f3.shape[1:3] == (2, 2)


def test_indivisible_image_rejected(dark_params):
    with pytest.raises(ValueError, match="divisibility by 32"):
        ft.encode_dark(Tensor(np.zeros((1, 50, 50, 3))), dark_params)


def test_fpn_zero_inputs_give_zero_outputs(fpn_params):
    zeros = [Tensor(np.zeros((1, s, s, c)))
             for s, c in zip((8, 4, 2), ft.DARK_CHANNELS[2:])]
    for p in ft.fpn_fuse(tuple(zeros), fpn_params):
        assert np.abs(p.data).max() == 0.0


def test_fpn_emits_uniform_channel_width(dark_params, fpn_params):
    feats = ft.encode_dark(Tensor(np.random.default_rng(3).random((2, 64, 64, 3))),
                           dark_params)
    p1, p2, p3 = ft.fpn_fuse(feats, fpn_params)
    assert p1.shape == (2, 8, 8, 16)
    assert p2.shape == (2, 4, 4, 16)
    assert p3.shape == (2, 2, 2, 16)


def test_fpn_identity_projection_passthrough():
    # identity 1x1 projections and zero coarse levels leave the fine level as-is
    dim = ft.DARK_CHANNELS[2]
    params = {}
    for i, cin in enumerate(ft.DARK_CHANNELS[2:], start=1):
        w = np.zeros((cin, dim))
        np.fill_diagonal(w, 1.0)
        params[f"fpn.w{i}"] = Tensor(w)
        params[f"fpn.b{i}"] = Tensor(np.zeros(dim))
    rng = np.random.default_rng(4)
    f1 = Tensor(rng.random((1, 8, 8, ft.DARK_CHANNELS[2])))
    f2 = Tensor(np.zeros((1, 4, 4, ft.DARK_CHANNELS[3])))
    f3 = Tensor(np.zeros((1, 2, 2, ft.DARK_CHANNELS[4])))
    p1, _, _ = ft.fpn_fuse((f1, f2, f3), params)
    np.testing.assert_allclose(p1.data, f1.data, atol=1e-12)


# --- fixed descriptor encoders ---


def test_dino_red_bin_localizes_red_rectangle():
    img = np.full((64, 64, 3), 0.1, dtype=np.float32)
    img[16:32, 24:40] = (0.9, 0.12, 0.12)
    feats = ft.encode_dino(img)
    assert feats.shape == (8, 8, 11)
    # brute-force per-patch histogram of the red octant (r>=.5, g<.5, b<.5)
    expect = np.zeros((8, 8))
    for pi in range(8):
        for pj in range(8):
            patch = img[pi * 8:(pi + 1) * 8, pj * 8:(pj + 1) * 8]
            red = (patch[..., 0] >= 0.5) & (patch[..., 1] < 0.5) & (patch[..., 2] < 0.5)
            expect[pi, pj] = red.mean()
    np.testing.assert_allclose(feats[..., 4], expect, atol=1e-12)
    hit = np.argwhere(feats[..., 4] > 0)
    assert set(map(tuple, hit)) == {(2, 3), (2, 4), (3, 3), (3, 4)}


def test_dino_histogram_rows_sum_to_one(small_dataset):
    feats = ft.encode_dino(small_dataset.train[0].scene.image)
    np.testing.assert_allclose(feats[..., :8].sum(axis=2), 1.0, atol=1e-12)


def test_sam_uniform_image_has_zero_gradients():
    feats = ft.encode_sam(np.full((64, 64, 3), 0.3, dtype=np.float32))
    assert feats.shape == (16, 16, 8)
    assert np.abs(feats[..., :5]).max() == 0.0


def test_encoders_are_pure(small_dataset):
    img = small_dataset.train[0].scene.image
    assert np.array_equal(ft.encode_dino(img), ft.encode_dino(img.copy()))
    assert np.array_equal(ft.encode_sam(img), ft.encode_sam(img.copy()))


# --- dynamic ensemble ---


def test_dvfe_weights_zero_projection_is_uniform():
    base = Tensor(np.random.default_rng(5).random((2, 4, 4, 6)))
    w = ft.dvfe_weights(base, Tensor(np.zeros((6, 3))))
    np.testing.assert_allclose(w.data, 1 / 3, atol=1e-12)


def test_dvfe_weights_match_scalar_softmax():
    # construct a pooled feature and projection that yield logits (10, 0, 0)
    base = Tensor(np.ones((1, 2, 2, 4)))
    wt = np.zeros((4, 3))
    wt[:, 0] = 2.5  # GAP = ones -> logit0 = 10
    w = ft.dvfe_weights(base, Tensor(wt))
    z = np.exp(np.array([10.0, 0.0, 0.0]) - 10.0)
    np.testing.assert_allclose(w.data[0], z / z.sum(), atol=1e-12)
    # frozen from the scalar oracle: 1 / (e^10 + 2)
    assert abs(w.data[0][1] - 4.539580782951091e-05) < 1e-12


def test_dvfe_weights_sum_to_one(rng):
    base = Tensor(rng.normal(size=(5, 3, 3, 8)))
    w = ft.dvfe_weights(base, Tensor(rng.normal(size=(8, 3))))
    np.testing.assert_allclose(w.data.sum(axis=1), 1.0, atol=1e-9)
    assert (w.data > 0).all()


def test_dvfe_weights_rejects_mismatched_projection(rng):
    base = Tensor(rng.normal(size=(1, 2, 2, 8)))
    with pytest.raises(ConfigurationError):
        ft.dvfe_weights(base, Tensor(rng.normal(size=(5, 3))))


def _adapters(rng, channels, dim):
    return [(Tensor(rng.normal(size=(c, dim))), Tensor(rng.normal(size=dim)))
            for c in channels]


def test_dvfe_combine_one_hot_selects_single_source(rng):
    entries = [Tensor(rng.random((1, 4, 4, 5))), Tensor(rng.random((1, 6, 6, 7)))]
    adapters = _adapters(rng, (5, 7), 8)
    weights = Tensor(np.array([[1.0, 0.0]]))
    out = ft.dvfe_combine(entries, adapters, weights, (4, 4))
    solo = ag.bilinear_resize(ft.linear_map(entries[0], *adapters[0]), 4, 4)
    np.testing.assert_allclose(out.data, solo.data, atol=1e-12)


def test_dvfe_combine_identical_sources_weight_invariant(rng):
    entry = Tensor(rng.random((2, 4, 4, 5)))
    adapters = _adapters(rng, (5,), 8) * 2
    out_a = ft.dvfe_combine([entry, entry], adapters,
                            Tensor(np.array([[0.9, 0.1], [0.25, 0.75]])), (4, 4))
    out_b = ft.dvfe_combine([entry, entry], adapters,
                            Tensor(np.array([[0.5, 0.5], [0.5, 0.5]])), (4, 4))
    np.testing.assert_allclose(out_a.data, out_b.data, atol=1e-9)


def test_dvfe_combine_uniform_weights_average_two_sources(rng):
    # direct elementwise recomputation oracle
    entries = [Tensor(rng.random((1, 4, 4, 3))), Tensor(rng.random((1, 2, 2, 6)))]
    adapters = _adapters(rng, (3, 6), 5)
    weights = Tensor(np.array([[0.5, 0.5]]))
    out = ft.dvfe_combine(entries, adapters, weights, (4, 4))
    expect = np.zeros((1, 4, 4, 5))
    for entry, (w, b) in zip(entries, adapters):
        mapped = entry.data @ w.data + b.data
        expect += 0.5 * ag.bilinear_resize(Tensor(mapped), 4, 4).data
    np.testing.assert_allclose(out.data, expect, atol=1e-12)


def test_dvfe_one_hot_limit_at_logit_30(rng):
    entries = [Tensor(rng.random((1, 4, 4, 5))), Tensor(rng.random((1, 4, 4, 5)))]
    adapters = _adapters(rng, (5, 5), 8)
    logits = Tensor(np.array([[30.0, 0.0]]))
    weights = ag.softmax(logits, axis=1)
    out = ft.dvfe_combine(entries, adapters, weights, (4, 4))
    solo = ag.bilinear_resize(ft.linear_map(entries[0], *adapters[0]), 4, 4)
    assert np.abs(out.data - solo.data).max() < 1e-6


def test_dvfe_combine_residual_variant_adds_base(rng):
    entries = [Tensor(rng.random((1, 4, 4, 5)))]
    adapters = _adapters(rng, (5,), 8)
    weights = Tensor(np.array([[1.0]]))
    base = Tensor(rng.random((1, 4, 4, 8)))
    pure = ft.dvfe_combine(entries, adapters, weights, (4, 4))
    resid = ft.dvfe_combine(entries, adapters, weights, (4, 4), residual_base=base)
    np.testing.assert_allclose(resid.data, pure.data + base.data, atol=1e-12)


def test_dvfe_combine_rejects_mismatch(rng):
    entries = [Tensor(rng.random((1, 4, 4, 5)))]
    adapters = _adapters(rng, (5, 5), 8)
    with pytest.raises(ConfigurationError):
        ft.dvfe_combine(entries, adapters, Tensor(np.array([[0.5, 0.5]])), (4, 4))


def test_dvfe_weights_gradcheck(rng):
    base = Tensor(rng.normal(size=(2, 3, 3, 6)))
    probe = Tensor(rng.normal(size=(2, 3)))

    def f(wt):
        w = ft.dvfe_weights(base, wt)
        return ag.tsum(ag.mul(w, probe))

    rep = ag.gradcheck(f, Tensor(rng.normal(size=(6, 3))), op="dvfe_weights")
    assert rep.passed, rep.max_rel_err
