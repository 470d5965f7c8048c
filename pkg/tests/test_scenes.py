import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weakground import scenes
from weakground.scenes import (VOCAB, DatasetParseError, DatasetVersionError,
                               IntegrityError, POSITIONALS)


def brute_force_matches(pair):
    """Independent matcher: filter by attribute words, then demand the object
    is the extremal one (or nearest image center) among the filtered set for
    every positional word."""
    sc, ex = pair.scene, pair.expression
    words = ex.words()
    attrs = [w for w in words if w not in POSITIONALS]
    pos = [w for w in words if w in POSITIONALS]
    keep = []
    for i, o in enumerate(sc.objects):
        traits = {o.color, o.shape_kind, o.size_class}
        if all(w in traits for w in attrs):
            keep.append(i)
    matched = []
    for i in keep:
        ok = True
        for p in pos:
            cx = {j: sc.objects[j].gt_box[0] + sc.objects[j].gt_box[2] / 2
                  for j in keep}
            cy = {j: sc.objects[j].gt_box[1] + sc.objects[j].gt_box[3] / 2
                  for j in keep}
            if p == "leftmost":
                best = min(keep, key=lambda j: (cx[j], j))
            elif p == "rightmost":
                best = min(keep, key=lambda j: (-cx[j], j))
            elif p == "topmost":
                best = min(keep, key=lambda j: (cy[j], j))
            elif p == "bottommost":
                best = min(keep, key=lambda j: (-cy[j], j))
            else:
                best = min(keep, key=lambda j: (
                    (cx[j] - sc.width / 2) ** 2 + (cy[j] - sc.height / 2) ** 2, j))
            if i != best:
                ok = False
        if ok:
            matched.append(i)
    return matched


def test_generation_is_deterministic(tmp_path):
    a = scenes.generate(7, 10, image_size=64)
    b = scenes.generate(7, 10, image_size=64)
    scenes.save(a, tmp_path / "a.wgl")
    scenes.save(b, tmp_path / "b.wgl")
    assert (tmp_path / "a.wgl").read_bytes() == (tmp_path / "b.wgl").read_bytes()


def test_object_count_respects_configured_range():
    ds = scenes.generate(3, 12, image_size=64, min_objects=2, max_objects=3)
    for pair in ds.train + ds.test:
        assert 2 <= len(pair.scene.objects) <= 3


def test_every_expression_matches_exactly_one_object(small_dataset):
    for split in ("train", "val", "test"):
        for pair in small_dataset.split(split):
            matched = brute_force_matches(pair)
            assert matched == [pair.expression.target_index]


def test_resolve_agrees_with_stored_target(small_dataset):
    for split in ("train", "val", "test"):
        for pair in small_dataset.split(split):
            assert scenes.resolve(pair.expression, pair.scene) \
                == pair.expression.target_index


def test_resolve_attribute_only():
    ds = scenes.generate(11, 6, image_size=64)
    pair = ds.train[0]
    obj = pair.scene.objects[pair.expression.target_index]
    # a fully attribute-qualified expression for a unique object resolves
    ids = VOCAB.ids([obj.color, obj.shape_kind, obj.size_class])
    matched = scenes.match_expression(ids, pair.scene.objects, (64, 64))
    assert pair.expression.target_index in matched


def test_resolve_leftmost_selects_min_center_x(small_dataset):
    pair = small_dataset.train[0]
    ids = VOCAB.ids(["leftmost"])
    matched = scenes.match_expression(ids, pair.scene.objects, (64, 64))
    centers = [o.center()[0] for o in pair.scene.objects]
    assert matched == [int(np.argmin(centers))]


def test_resolve_rejects_ambiguous_tokens():
    ds = scenes.generate(13, 4, image_size=64)
    pair = ds.train[0]
    with pytest.raises(IntegrityError):
        # empty token set matches everything
        scenes.resolve(scenes.Expression(tokens=[], target_index=0), pair.scene)


def test_scene_invariants(small_dataset):
    from scipy import ndimage
    for pair in small_dataset.train:
        sc = pair.scene
        assert 2 <= len(sc.objects) <= 5
        area = sc.height * sc.width
        masks = [o.gt_mask for o in sc.objects]
        for o in sc.objects:
            count = o.gt_mask.sum()
            lo, hi = scenes.SIZE_BANDS[o.size_class]
            assert lo * area <= count or o.size_class == "small"
            if o.size_class == "small":
                assert count < 0.06 * area
            elif o.size_class == "medium":
                assert 0.06 * area <= count <= 0.15 * area
            else:
                assert count > 0.15 * area
            assert ndimage.label(o.gt_mask)[1] == 1
        for i in range(len(masks)):
            for j in range(i + 1, len(masks)):
                overlap = (masks[i] & masks[j]).sum()
                assert overlap <= 0.2 * min(masks[i].sum(), masks[j].sum())


def test_gt_box_is_tight(small_dataset):
    for pair in small_dataset.train:
        for o in pair.scene.objects:
            x, y, w, h = o.gt_box
            m = o.gt_mask
            assert m[y, :].any() and m[y + h - 1, :].any()
            assert m[:, x].any() and m[:, x + w - 1].any()
            assert not m[:y].any() and not m[y + h:].any()
            assert not m[:, :x].any() and not m[:, x + w:].any()


def test_expression_token_length_cap(small_dataset):
    for pair in small_dataset.train:
        assert 1 <= len(pair.expression.tokens) <= 8


def test_save_load_round_trip(small_dataset, tmp_path):
    path = tmp_path / "ds.wgl"
    scenes.save(small_dataset, path)
    loaded = scenes.load(path)
    assert loaded.counts() == small_dataset.counts()
    assert loaded.seed == small_dataset.seed
    for split in ("train", "val", "test"):
        for a, b in zip(small_dataset.split(split), loaded.split(split)):
            assert np.array_equal(a.scene.image, b.scene.image)
            assert a.scene.seed == b.scene.seed
            assert a.expression.tokens == b.expression.tokens
            assert a.expression.target_index == b.expression.target_index
            for oa, ob in zip(a.scene.objects, b.scene.objects):
                assert oa.gt_box == ob.gt_box
                assert np.array_equal(oa.gt_mask, ob.gt_mask)
                assert (oa.shape_kind, oa.color, oa.size_class) \
                    == (ob.shape_kind, ob.color, ob.size_class)


def test_vocab_sidecar_written(small_dataset, tmp_path):
    path = tmp_path / "ds.wgl"
    scenes.save(small_dataset, path)
    sidecar = tmp_path / "ds.wgl.vocab.json"
    assert sidecar.exists()
    import json
    table = json.loads(sidecar.read_text())
    assert table == VOCAB.to_table()


def test_truncated_file_is_a_parse_error_with_offset(small_dataset, tmp_path):
    path = tmp_path / "ds.wgl"
    scenes.save(small_dataset, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:len(blob) // 2])
    with pytest.raises(DatasetParseError, match="at byte"):
        scenes.load(path)


def test_unknown_version_tag_rejected(small_dataset, tmp_path):
    path = tmp_path / "ds.wgl"
    scenes.save(small_dataset, path)
    blob = path.read_bytes()
    path.write_bytes(blob.replace(b'"wgl1"', b'"v99."', 1))
    with pytest.raises(DatasetVersionError, match="v99"):
        scenes.load(path)


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=10, deadline=None)
def test_single_pair_generation_always_valid(seed):
    pair = scenes.make_pair(seed, 0, 0, 64, 2, 4)
    assert brute_force_matches(pair) == [pair.expression.target_index]
    assert pair.scene.image.dtype == np.float32
    assert pair.scene.image.min() >= 0.0 and pair.scene.image.max() <= 1.0
