import math

import numpy as np
import pytest

from weakground import autograd as ag
from weakground import res
from weakground.autograd import Tensor
from weakground.res import OracleConfig


def _scene_with_boxes(dataset):
    return dataset.train[0].scene


def test_oracle_clean_mode_returns_gt_mask(small_dataset):
    scene = _scene_with_boxes(small_dataset)
    obj = scene.objects[0]
    pm = res.oracle_mask(scene, obj.gt_box, OracleConfig(seed=3))
    assert pm.mode == "clean"
    np.testing.assert_array_equal(pm.mask, obj.gt_mask)


def test_oracle_selects_max_iou_object(small_dataset):
    scene = _scene_with_boxes(small_dataset)
    for obj in scene.objects:
        x, y, w, h = obj.gt_box
        jittered = (x + 1, y - 1, w + 2, h + 1)
        pm = res.oracle_mask(scene, jittered, OracleConfig(seed=3))
        np.testing.assert_array_equal(pm.mask, obj.gt_mask)


def test_oracle_disjoint_prompt_gives_empty_mask(small_dataset):
    scene = _scene_with_boxes(small_dataset)
    pm = res.oracle_mask(scene, (-20, -20, 5, 5), OracleConfig(seed=3))
    assert pm.mode == "empty"
    assert pm.mask.sum() == 0


def test_oracle_dilate_is_superset_erode_is_subset(small_dataset):
    scene = _scene_with_boxes(small_dataset)
    obj = scene.objects[0]
    for radius in (1, 2):
        dil = res.oracle_mask(scene, obj.gt_box,
                              OracleConfig(p_clean=0, p_dilate=1, radius=radius,
                                           seed=1))
        ero = res.oracle_mask(scene, obj.gt_box,
                              OracleConfig(p_clean=0, p_erode=1, p_dilate=0,
                                           radius=radius, seed=1))
        assert ((obj.gt_mask == 1) <= (dil.mask == 1)).all()
        assert ((ero.mask == 1) <= (obj.gt_mask == 1)).all()
        assert dil.mask.sum() > obj.gt_mask.sum() > ero.mask.sum()


def test_oracle_determinism(small_dataset):
    scene = _scene_with_boxes(small_dataset)
    cfg = OracleConfig(p_clean=0.4, p_dilate=0.2, p_erode=0.2,
                       p_distractor=0.2, seed=11)
    a = res.oracle_mask(scene, scene.objects[0].gt_box, cfg, entropy=(3, 7))
    b = res.oracle_mask(scene, scene.objects[0].gt_box, cfg, entropy=(3, 7))
    assert a.mode == b.mode
    np.testing.assert_array_equal(a.mask, b.mask)


def test_oracle_mode_frequencies(small_dataset):
    scene = _scene_with_boxes(small_dataset)
    cfg = OracleConfig(p_clean=0.5, p_dilate=0.2, p_erode=0.2,
                       p_distractor=0.1, seed=0)
    modes = [res.oracle_mask(scene, scene.objects[0].gt_box, cfg, entropy=(i,)).mode
             for i in range(400)]
    freq = {m: modes.count(m) / 400 for m in set(modes)}
    assert abs(freq.get("clean", 0) - 0.5) < 0.1
    assert abs(freq.get("dilate", 0) - 0.2) < 0.08


def test_oracle_distractor_stays_inside_grown_prompt(small_dataset):
    from weakground.consistency import rasterize
    cfg = OracleConfig(p_clean=0, p_distractor=1, p_dilate=0, radius=2, seed=5)
    found_union = False
    for pair in small_dataset.train:
        scene = pair.scene
        for obj in scene.objects:
            pm = res.oracle_mask(scene, obj.gt_box, cfg)
            extra = (pm.mask == 1) & (obj.gt_mask == 0)
            if extra.any():
                found_union = True
                x, y, w, h = obj.gt_box
                grown = rasterize((x - 2, y - 2, w + 4, h + 4), scene.height,
                                  scene.width)
                assert (extra <= (grown == 1)).all()
            else:
                np.testing.assert_array_equal(pm.mask, obj.gt_mask)
    assert found_union  # the corpus contains at least one overlapping neighbor


def test_oracle_config_validation():
    with pytest.raises(ValueError, match="sum to 1"):
        OracleConfig(p_clean=0.5).validate() or res.oracle_mask(
            None, (0, 0, 1, 1), OracleConfig(p_clean=0.5))
    with pytest.raises(ValueError, match="radius"):
        OracleConfig(radius=3).validate()


# --- decoder ---


def test_aspp_output_shape_and_zero_init_half(rng):
    params = res.init_aspp(rng, dim=6, text_dim=5, channels=4)
    for k in params:
        params[k].data = np.zeros_like(params[k].data)
    feat = Tensor(rng.random((2, 8, 8, 6)))
    text = Tensor(rng.random((2, 5)))
    probs = res.aspp_decode(feat, text, params, (64, 64))
    assert probs.shape == (2, 64, 64)
    np.testing.assert_allclose(probs.data, 0.5, atol=1e-12)


def test_aspp_depends_on_text(rng):
    params = res.init_aspp(rng, dim=6, text_dim=5, channels=4)
    feat = Tensor(rng.random((1, 8, 8, 6)))
    a = res.aspp_decode(feat, Tensor(rng.random((1, 5))), params, (32, 32))
    b = res.aspp_decode(feat, Tensor(rng.random((1, 5))), params, (32, 32))
    assert np.abs(a.data - b.data).max() > 1e-6


def test_res_loss_half_probability_is_ln2():
    probs = Tensor(np.full((6, 6), 0.5))
    for target in (np.zeros((6, 6)), np.ones((6, 6))):
        assert abs(res.res_loss(probs, target).item() - math.log(2)) < 1e-12


def test_res_loss_single_pixel_quarter():
    loss = res.res_loss(Tensor(np.array([[0.25]])), np.array([[1.0]])).item()
    assert abs(loss - (-math.log(0.25))) < 1e-12


def test_res_loss_near_perfect_prediction_is_eps_scale(small_dataset):
    m = small_dataset.train[0].scene.objects[0].gt_mask.astype(float)
    probs = Tensor(np.clip(m, res.PROB_EPS, 1 - res.PROB_EPS))
    assert res.res_loss(probs, m).item() < 1e-6


def test_res_loss_rejects_shape_mismatch():
    with pytest.raises(ag.ShapeError):
        res.res_loss(Tensor(np.zeros((2, 2))), np.zeros((3, 3)))


def test_res_loss_clamps_before_log():
    # raw 0/1 probabilities would be log-domain violations without the clamp
    probs = Tensor(np.array([[0.0, 1.0]]))
    v = res.res_loss(probs, np.array([[0.0, 1.0]])).item()
    assert v < 1e-6


def test_res_loss_gradcheck_through_decoder(rng):
    """Path check: decoder params -> mask probabilities -> BCE."""
    params = res.init_aspp(np.random.default_rng(11), dim=4, text_dim=3,
                           channels=2)
    feat = Tensor(np.random.default_rng(12).random((1, 4, 4, 4)))
    text = Tensor(np.random.default_rng(13).random((1, 3)))
    target = (np.random.default_rng(14).random((8, 8)) < 0.5).astype(float)

    for name in ("aspp.w2", "aspp.fuse.w", "aspp.mix.w"):
        def f(x, name=name):
            p = {**params, name: x}
            probs = res.aspp_decode(feat, text, p, (8, 8))
            return res.res_loss(ag.reshape(probs, (8, 8)), target)

        rep = ag.gradcheck(f, Tensor(params[name].data.copy()), op=name)
        assert rep.passed, f"{name}: {rep.max_rel_err}"


def test_pgm_export(tmp_path, small_dataset):
    mask = small_dataset.train[0].scene.objects[0].gt_mask
    path = tmp_path / "m.pgm"
    res.write_pgm(mask, path)
    blob = path.read_bytes()
    h, w = mask.shape
    header = f"P5\n{w} {h}\n255\n".encode()
    assert blob.startswith(header)
    data = np.frombuffer(blob[len(header):], dtype=np.uint8).reshape(h, w)
    np.testing.assert_array_equal(data, mask * 255)
