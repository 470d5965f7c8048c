import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weakground import autograd as ag
from weakground import consistency as cc
from weakground.autograd import Tensor


def brute_rasterize(box, h, w):
    """Pixel-enumeration oracle for the half-up rounding rule."""
    x, y, bw, bh = box
    out = np.zeros((h, w), dtype=np.uint8)
    for i in range(h):
        for j in range(w):
            if (math.floor(y + 0.5) <= i < math.floor(y + bh + 0.5)
                    and math.floor(x + 0.5) <= j < math.floor(x + bw + 0.5)):
                out[i, j] = 1
    return out


def brute_iou(a, b):
    inter = int(np.logical_and(a, b).sum())
    union = int(np.logical_or(a, b).sum())
    return 1.0 if union == 0 else inter / union


def test_rasterize_examples():
    m = cc.rasterize((1, 1, 2, 2), 4, 4)
    expect = np.zeros((4, 4), dtype=np.uint8)
    expect[1:3, 1:3] = 1
    np.testing.assert_array_equal(m, expect)
    assert cc.rasterize((10, 10, 3, 3), 4, 4).sum() == 0
    assert cc.rasterize((0, 0, 4, 4), 4, 4).all()
    assert cc.rasterize((1, 1, -2, 3), 4, 4).sum() == 0  # degenerate, not an error


@given(st.floats(-6, 12), st.floats(-6, 12), st.floats(-2, 10), st.floats(-2, 10),
       st.integers(4, 16), st.integers(4, 16))
@settings(max_examples=200, deadline=None)
def test_rasterize_matches_brute_force(x, y, bw, bh, h, w):
    np.testing.assert_array_equal(cc.rasterize((x, y, bw, bh), h, w),
                                  brute_rasterize((x, y, bw, bh), h, w))


def test_projection_examples():
    m = Tensor(np.array([[0, 1, 0], [0, 1, 1], [0, 0, 0]], dtype=float))
    np.testing.assert_array_equal(cc.project_x(m).data, [0, 1, 1])
    np.testing.assert_array_equal(cc.project_y(m).data, [1, 1, 0])
    z = Tensor(np.zeros((3, 3)))
    assert cc.project_x(z).data.sum() == 0 and cc.project_y(z).data.sum() == 0


def test_projection_of_box_is_interval_indicator():
    m = Tensor(cc.rasterize((1, 0, 2, 3), 4, 5).astype(float))
    np.testing.assert_array_equal(cc.project_x(m).data, [0, 1, 1, 0, 0])
    np.testing.assert_array_equal(cc.project_y(m).data, [1, 1, 1, 0])


def test_projections_match_brute_force_on_random_masks(rng):
    for _ in range(1000):
        m = (rng.random((8, 8)) < 0.4).astype(float)
        np.testing.assert_array_equal(cc.project_x(Tensor(m)).data, m.max(axis=0))
        np.testing.assert_array_equal(cc.project_y(Tensor(m)).data, m.max(axis=1))


def test_dice_identical_inputs_is_eps_scale():
    v = cc.dice(Tensor(np.array([1.0, 0, 1])), Tensor(np.array([1.0, 0, 1]))).item()
    # 1 - 4/(4 + 1e-6)
    assert abs(v - (1 - 4 / (4 + 1e-6))) < 1e-15
    assert v < 2.6e-7


def test_dice_disjoint_supports_is_one():
    assert cc.dice(Tensor(np.array([1.0, 0])), Tensor(np.array([0.0, 1]))).item() == 1.0


def test_dice_derived_scalar_case():
    # 1 - 2*0.5 / (0.5 + 1 + eps) with eps negligible -> 1/3
    v = cc.dice(Tensor(np.array([0.5, 0.5])), Tensor(np.array([1.0, 0]))).item()
    assert abs(v - (1 - 1.0 / (1.5 + 1e-6))) < 1e-15
    assert abs(v - 1 / 3) < 1e-6


@given(st.integers(0, 2 ** 31 - 1), st.integers(2, 12))
@settings(max_examples=100, deadline=None)
def test_dice_symmetric_and_bounded(seed, n):
    r = np.random.default_rng(seed)
    p, q = r.random(n), r.random(n)
    d_pq = cc.dice(Tensor(p), Tensor(q)).item()
    d_qp = cc.dice(Tensor(q), Tensor(p)).item()
    assert abs(d_pq - d_qp) < 1e-12
    assert 0.0 <= d_pq <= 1.0
    d_pp = cc.dice(Tensor(p), Tensor(p)).item()
    assert d_pp <= 1e-6 / (2 * (p * p).sum() + 1e-6) + 1e-14


def test_dice_rejects_length_mismatch():
    with pytest.raises(ag.ShapeError):
        cc.dice(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


def test_scl_zero_when_mask_equals_box():
    box = (2, 1, 3, 4)
    probs = Tensor(cc.rasterize(box, 8, 8).astype(float))
    assert cc.scl_loss(probs, box).item() < 1e-6


def test_scl_empty_prediction_vs_nonempty_box_is_two():
    v = cc.scl_loss(Tensor(np.zeros((8, 8))), (2, 2, 3, 3)).item()
    assert abs(v - 2.0) < 1e-6


def test_scl_constrains_projections_only():
    # a diagonal band inside the box touches every row and column of the box
    box = (2, 2, 4, 4)
    m = np.zeros((8, 8))
    for k in range(4):
        m[2 + k, 2 + k] = 1.0
    assert cc.scl_loss(Tensor(m), box).item() < 1e-6


def test_scl_gradcheck_wrt_mask(rng):
    probs = rng.uniform(0.05, 0.95, size=(6, 6))
    rep = ag.gradcheck(lambda t: cc.scl_loss(t, (1, 1, 3, 3)), Tensor(probs),
                       op="scl")
    assert rep.passed, rep.max_rel_err


def test_iou_examples():
    a = cc.rasterize((0, 0, 2, 2), 4, 4)
    b = cc.rasterize((1, 1, 2, 2), 4, 4)
    assert abs(cc.iou(a, b) - 1 / 7) < 1e-12
    assert cc.iou(a, a) == 1.0
    assert cc.iou(a, cc.rasterize((2, 2, 2, 2), 4, 4)) == 0.0


def test_iou_empty_conventions():
    e = np.zeros((4, 4), dtype=np.uint8)
    assert cc.iou(e, e) == 1.0
    assert cc.iou(e, np.ones((4, 4), dtype=np.uint8)) == 0.0


def test_iou_rejects_shape_mismatch():
    with pytest.raises(ag.ShapeError):
        cc.iou(np.zeros((2, 2)), np.zeros((3, 3)))


def test_iou_matches_pixel_enumeration_on_random_boxes(rng):
    for _ in range(1000):
        h, w = int(rng.integers(8, 65)), int(rng.integers(8, 65))
        box_a = tuple(rng.uniform(-4, s) for s in (w, h)) + tuple(
            rng.uniform(0, 12) for _ in range(2))
        box_b = tuple(rng.uniform(-4, s) for s in (w, h)) + tuple(
            rng.uniform(0, 12) for _ in range(2))
        a, b = cc.rasterize(box_a, h, w), cc.rasterize(box_b, h, w)
        assert cc.iou(a, b) == brute_iou(a, b)
        assert cc.iou(a, b) == cc.iou(b, a)


def test_gate_boundary_is_inclusive():
    # engineered masks with IoU exactly 0.3: |A∩B|=3, |A∪B|=10
    a = np.zeros((4, 4), dtype=np.uint8)
    b = np.zeros((4, 4), dtype=np.uint8)
    a.flat[:6] = 1
    b.flat[3:10] = 1
    assert abs(cc.iou(a, b) - 0.3) < 1e-12


def test_isl_gate_closed_returns_zero_with_zero_gradients():
    probs = Tensor(np.full((8, 8), 0.9), requires_grad=True)
    pseudo = cc.rasterize((0, 0, 2, 2), 8, 8)
    # predicted mask covers everything, box is small: IoU well below alpha
    loss, state = cc.isl_loss(probs, (0, 0, 2, 2), pseudo, alpha=0.3,
                              gate_source="predicted_mask")
    assert not state.open
    assert loss.item() == 0.0
    ag.backward(loss)
    assert probs.grad is None  # the zero is graph-free


def test_isl_gate_open_equals_res_loss():
    from weakground.res import res_loss
    rng = np.random.default_rng(0)
    probs_np = rng.uniform(0.2, 0.8, size=(8, 8))
    box = (1, 1, 5, 5)
    pseudo = cc.rasterize(box, 8, 8)
    probs = Tensor(probs_np)
    loss, state = cc.isl_loss(probs, box, pseudo, alpha=0.3,
                              gate_source="pseudo_mask")
    assert state.open and state.iou == 1.0
    assert loss.item() == res_loss(Tensor(probs_np), pseudo).item()


def test_isl_gate_both_sources():
    probs = Tensor(np.where(cc.rasterize((1, 1, 4, 4), 8, 8) > 0, 0.9, 0.1))
    box = (1, 1, 4, 4)
    pseudo = np.zeros((8, 8), dtype=np.uint8)  # empty pseudo: IoU 0 vs box
    _, s_pred = cc.isl_loss(probs, box, pseudo, 0.3, "predicted_mask")
    _, s_pseudo = cc.isl_loss(probs, box, pseudo, 0.3, "pseudo_mask")
    assert s_pred.open and s_pred.iou == 1.0
    assert not s_pseudo.open and s_pseudo.iou == 0.0


def test_isl_rejects_bad_alpha():
    with pytest.raises(ValueError):
        cc.isl_loss(Tensor(np.zeros((2, 2))), (0, 0, 1, 1),
                    np.zeros((2, 2), dtype=np.uint8), alpha=1.5)
