import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import raster, semantic_vector_oracle
from scfam.labels import (
    AnnotatedScene,
    Box,
    LabelingConfig,
    SemanticLabeler,
    boxes_from_record,
    label_global,
    label_map_local,
    label_map_mid,
    label_scene,
    label_semantic_vector,
    load_scene,
    read_annotations,
    write_annotations,
)
from scfam.rf import FieldRect, field_grid, project_field, stack_from_layers

FIELD = FieldRect(0, 0, 10, 10)
STACK = stack_from_layers([(3, 1, 1), (3, 2, 1), (3, 2, 1)])


def blank(h=16, w=16, boxes=()):
    return AnnotatedScene(np.zeros((h, w, 3)), list(boxes))


# -- single-field vectors ------------------------------------------------------


def test_small_box_inside_field():
    v = label_semantic_vector([(2, 2, 4, 4)], [3], 5, 0.6, FIELD)
    assert v.tolist() == [0, 0, 0, 1, 0]


def test_disjoint_box():
    for zeta in (0.01, 0.6, 1.0):
        assert not label_semantic_vector([(20, 20, 30, 30)], [0], 2, zeta, FIELD).any()


def test_partial_overlap_below_threshold():
    box = (8, 0, 18, 10)
    canvas = (40, 40)
    assert int(raster(box, canvas).sum()) == 100
    assert int((raster(box, canvas) & raster((0, 0, 10, 10), canvas)).sum()) == 20
    assert not label_semantic_vector([box], [0], 1, 0.6, FIELD).any()


def test_ratio_exactly_zeta_counts_as_present():
    # intersection 60, min area 100
    assert label_semantic_vector([(4, 0, 14, 10)], [1], 2, 0.6, FIELD).tolist() == [0, 1]
    assert label_semantic_vector([(4, 0, 14, 10)], [1], 2, 0.61, FIELD).tolist() == [0, 0]


def test_mismatched_lengths_and_empty_field():
    with pytest.raises(ValueError):
        label_semantic_vector([(0, 0, 1, 1)], [], 2, 0.6, FIELD)
    with pytest.raises(ValueError):
        label_semantic_vector([], [], 2, 0.6, FieldRect(0, 0, 0, 5))


def _random_instance(rng, canvas=24):
    def rect():
        x0, y0 = rng.integers(0, canvas - 1, size=2)
        x1 = rng.integers(x0 + 1, canvas + 1)
        y1 = rng.integers(y0 + 1, canvas + 1)
        return int(x0), int(y0), int(x1), int(y1)

    n = int(rng.integers(0, 6))
    boxes = [rect() for _ in range(n)]
    classes = [int(c) for c in rng.integers(0, 4, size=n)]
    zeta = float(rng.choice([rng.uniform(0.05, 1.0), 0.25, 0.5, 0.6, 1.0]))
    return boxes, classes, zeta, rect()


def test_random_instances_match_pixel_oracle():
    rng = np.random.default_rng(11)
    for _ in range(300):
        boxes, classes, zeta, field = _random_instance(rng)
        got = label_semantic_vector(boxes, classes, 4, zeta, FieldRect(*field))
        assert got.tolist() == semantic_vector_oracle(boxes, classes, 4, zeta, field, (24, 24)).tolist()


coord = st.integers(0, 20)


@st.composite
def rects(draw):
    x0, y0 = draw(coord), draw(coord)
    return x0, y0, x0 + draw(st.integers(1, 10)), y0 + draw(st.integers(1, 10))


@settings(max_examples=150, deadline=None)
@given(st.lists(st.tuples(rects(), st.integers(0, 2)), max_size=5), rects(), st.floats(0.05, 1.0), st.floats(0.05, 1.0))
def test_higher_zeta_never_adds_classes(items, field, z1, z2):
    lo, hi = sorted((z1, z2))
    boxes = [b for b, _ in items]
    classes = [c for _, c in items]
    a = label_semantic_vector(boxes, classes, 3, lo, FieldRect(*field))
    b = label_semantic_vector(boxes, classes, 3, hi, FieldRect(*field))
    assert np.all(b <= a)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(rects(), st.integers(0, 2)), max_size=5), rects(), st.randoms(use_true_random=False))
def test_box_order_is_irrelevant(items, field, rnd):
    shuffled = list(items)
    rnd.shuffle(shuffled)
    f = FieldRect(*field)
    a = label_semantic_vector([b for b, _ in items], [c for _, c in items], 3, 0.6, f)
    b = label_semantic_vector([b for b, _ in shuffled], [c for _, c in shuffled], 3, 0.6, f)
    assert a.tolist() == b.tolist()


# -- maps --------------------------------------------------------------------------


def test_empty_scene_maps_are_zero():
    s = blank()
    assert not label_map_mid(s, STACK, 3, 3).any()
    assert not label_map_local(s, STACK, 1).any()
    assert not label_global(s, 3).any()


def test_full_image_box_gives_all_ones():
    s = blank(boxes=[Box(0, 0, 16, 16, 1)])
    for zeta in (0.3, 1.0):
        assert label_map_local(s, STACK, 2, zeta).all()
        mid = label_map_mid(s, STACK, 3, 3, zeta)
        assert mid[1].all() and not mid[0].any() and not mid[2].any()


def _map_oracle(scene, k, num_classes, zeta):
    h, w = scene.image_size
    y0, y1, x0, x1 = field_grid(STACK, k, (h, w))
    out = np.zeros((num_classes, len(y0), len(x0)), dtype=np.int8)
    boxes = [(int(b.x0), int(b.y0), int(b.x1), int(b.y1)) for b in scene.boxes]
    for u in range(len(y0)):
        for v in range(len(x0)):
            f = project_field(STACK, k, u, v, (h, w)).as_tuple()
            out[:, u, v] = semantic_vector_oracle(boxes, scene.classes, num_classes, zeta, f, (h, w))
    return out


def test_small_centred_box_map_matches_oracle():
    s = blank(32, 32, [Box(14, 14, 18, 18, 0)])
    local = label_map_local(s, STACK, 2, 0.6)
    assert local.tolist() == _map_oracle(s, 2, 1, 0.6)[0].tolist()
    ys, xs = np.nonzero(local)
    assert ys.min() >= 4 and ys.max() <= 11 and xs.min() >= 4 and xs.max() <= 11


def test_opposite_corners_and_mixed_overlap():
    s = blank(32, 32, [Box(0, 0, 12, 12, 0), Box(20, 20, 32, 32, 2), Box(10, 10, 22, 22, 1)])
    mid = label_map_mid(s, STACK, 3, 3, 0.3)
    assert mid.tolist() == _map_oracle(s, 3, 3, 0.3).tolist()
    assert mid[:, 0, 0].tolist() == [1, 0, 0]
    assert mid[:, -1, -1].tolist() == [0, 0, 1]
    assert (mid.sum(axis=0) >= 2).any()


def test_global_vector():
    s = blank(boxes=[Box(0, 0, 4, 4, 1), Box(5, 5, 9, 9, 4), Box(0, 0, 4, 4, 1)])
    assert label_global(s, 6).tolist() == [0, 1, 0, 0, 1, 0]


def test_duplicate_boxes_same_as_one():
    one = blank(boxes=[Box(2, 2, 9, 9, 0)])
    two = blank(boxes=[Box(2, 2, 9, 9, 0), Box(2, 2, 9, 9, 0)])
    assert label_map_mid(one, STACK, 2, 2).tolist() == label_map_mid(two, STACK, 2, 2).tolist()


def test_local_is_or_of_mid_when_grids_coincide():
    rng = np.random.default_rng(3)
    for _ in range(20):
        boxes = []
        for _ in range(3):
            x0, y0 = rng.integers(0, 12, size=2)
            boxes.append(Box(int(x0), int(y0), int(x0 + rng.integers(2, 8)), int(y0 + rng.integers(2, 8)), int(rng.integers(3))))
        s = blank(boxes=boxes)
        mid = label_map_mid(s, STACK, 2, 3, 0.5)
        assert label_map_local(s, STACK, 2, 0.5).tolist() == mid.max(axis=0).tolist()


def test_degenerate_boxes_are_dropped_with_warning():
    with pytest.warns(UserWarning):
        s = blank(boxes=[Box(3, 3, 3, 9, 0), Box(20, 20, 30, 30, 1), Box(1, 1, 4, 4, 1)])
    assert s.boxes == [Box(1, 1, 4, 4, 1)]


def test_boxes_are_clipped_to_image():
    s = blank(boxes=[Box(-4, -4, 30, 5, 0)])
    assert s.boxes == [Box(0, 0, 16, 5, 0)]


def test_invalid_labeling_config():
    for bad in (0.0, 1.5, -0.1):
        with pytest.raises(ValueError):
            LabelingConfig(zeta=bad)


def test_label_scene_uses_taps():
    stack = stack_from_layers([(3, 1, 1), (3, 2, 1)])
    stack = type(stack)(stack.layers, {"F1": 1, "F2": 2})
    s = blank(boxes=[Box(2, 2, 10, 10, 2)])
    maps = label_scene(s, stack, LabelingConfig(0.6, 3))
    assert maps.local.shape == (16, 16)
    assert maps.mid.shape == (3, 8, 8)
    assert maps.global_vec.tolist() == [0, 0, 1]
    json.dumps(maps.to_dict())


def test_labeler_estimator_api():
    stack = type(STACK)(STACK.layers, {"F1": 1, "F2": 2})
    lab = SemanticLabeler(stack=stack, zeta=0.5, num_classes=2)
    assert lab.get_params()["zeta"] == 0.5
    scenes = [blank(boxes=[Box(0, 0, 8, 8, 1)])]
    out = lab.fit(scenes).transform(scenes)
    assert out[0].mid.shape[0] == 2
    with pytest.raises(ValueError):
        SemanticLabeler(stack=stack, num_classes=1).fit(scenes)


def test_annotation_round_trip(tmp_path):
    rec = {"image": "missing.png", "size": [16, 16], "boxes": [{"x0": 1, "y0": 2, "x1": 5, "y1": 6, "class": 1}]}
    p = tmp_path / "a.jsonl"
    write_annotations(p, [rec, rec])
    back = read_annotations(p)
    assert back == [rec, rec]
    assert boxes_from_record(back[0]) == [Box(1, 2, 5, 6, 1)]
    scene = load_scene(back[0], tmp_path)
    assert scene.image_size == (16, 16)
    with pytest.raises(FileNotFoundError):
        load_scene({"image": "nope.png", "boxes": []}, tmp_path)
