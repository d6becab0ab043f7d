import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import clip_rect, extended_influence_bbox, influence_mask, mask_bbox, rf_size_oracle
from scfam.rf import (
    ConvStackSpec,
    FieldRect,
    LayerSpec,
    field_grid,
    is_interior,
    jump_and_offset,
    load_stack,
    output_grid_size,
    project_field,
    receptive_field_size,
    receptive_field_sizes,
    stack_from_layers,
)


def test_single_and_double_3x3():
    assert receptive_field_size(stack_from_layers([(3, 1)]), 1) == 3
    assert receptive_field_size(stack_from_layers([(3, 1), (3, 1)]), 2) == 5


def test_pool_in_the_middle_matches_oracle():
    layers = [(3, 1, 0), (3, 1, 0), (2, 2, 0), (3, 1, 0)]
    assert rf_size_oracle(layers, 4) == 10
    assert receptive_field_size(stack_from_layers(layers), 4) == 10


def test_identity_stack_projects_to_single_pixel():
    r = project_field(stack_from_layers([(1, 1)]), 1, 0, 0, (8, 8))
    assert r.as_tuple() == (0, 0, 1, 1)


def test_padded_3x3_kernel_footprint():
    r = project_field(stack_from_layers([(3, 1, 1)]), 1, 4, 4, (9, 9))
    assert (r.x0, r.x1, r.y0, r.y1) == (3, 6, 3, 6)


def test_vgg_like_interior_matches_oracle():
    layers = [(3, 1, 1), (3, 1, 1), (2, 2, 0), (3, 1, 1)]
    stack = stack_from_layers(layers)
    r = project_field(stack, 4, 8, 9, (32, 32))
    assert is_interior(stack, 4, 8, 9, (32, 32))
    assert r.as_tuple() == mask_bbox(influence_mask(layers, 4, 8, 9, (32, 32)))


def test_sizes_list_and_jump():
    stack = stack_from_layers([(3, 1, 1), (3, 2, 1), (3, 2, 1)])
    assert receptive_field_sizes(stack) == [3, 5, 9]
    assert jump_and_offset(stack, 3) == (4, -1 - 1 - 2)


def test_bad_layer_index():
    stack = stack_from_layers([(3, 1)])
    with pytest.raises(IndexError):
        receptive_field_size(stack, 0)
    with pytest.raises(IndexError):
        receptive_field_size(stack, 2)


def test_position_outside_grid():
    with pytest.raises(IndexError):
        project_field(stack_from_layers([(3, 1, 1)]), 1, 9, 0, (9, 9))


def test_unit_seeing_only_padding_is_an_error():
    with pytest.raises(ValueError):
        project_field(stack_from_layers([(3, 1, 5)]), 1, 0, 0, (4, 4))


def test_invalid_layer_values():
    for bad in ({"kernel": 0}, {"kernel": 3, "stride": 0}, {"kernel": 3, "padding": -1}):
        with pytest.raises(ValueError):
            LayerSpec(**bad)
    with pytest.raises(ValueError):
        ConvStackSpec(layers=())


def test_field_rect_area():
    assert FieldRect(1, 2, 4, 7).area == 15


def test_load_stack_json_and_experiment_config(tmp_path):
    stack = stack_from_layers([(3, 1, 1), (2, 2, 0)])
    p = tmp_path / "s.json"
    p.write_text(json.dumps(stack.to_dict()))
    assert load_stack(p).layers == stack.layers
    q = tmp_path / "cfg.yaml"
    q.write_text("backbone:\n  stack:\n    layers:\n      - {kernel: 5, stride: 1, padding: 0}\n")
    assert receptive_field_size(load_stack(q), 1) == 5


def test_field_grid_matches_project_field():
    stack = stack_from_layers([(3, 1, 1), (3, 2, 1), (5, 2, 2)])
    y0, y1, x0, x1 = field_grid(stack, 3, (20, 24))
    for u in range(len(y0)):
        for v in range(len(x0)):
            assert project_field(stack, 3, u, v, (20, 24)).as_tuple() == (x0[v], y0[u], x1[v], y1[u])


layer_st = st.tuples(st.integers(1, 5), st.integers(1, 3), st.integers(0, 2))


@settings(max_examples=60, deadline=None)
@given(st.lists(layer_st, min_size=1, max_size=6))
def test_size_recursion_property(layers):
    stack = stack_from_layers(layers)
    for k in range(1, len(layers) + 1):
        assert receptive_field_size(stack, k) == rf_size_oracle(layers, k)


def _random_stack(rng):
    n = int(rng.integers(1, 7))
    return [(int(rng.integers(1, 6)), int(rng.integers(1, 4)), int(rng.integers(0, 3))) for _ in range(n)]


def check_stack_against_oracle(layers, image_hw):
    """Compare every unit of the last layer with the influence-map oracles:
    exact at interior units, after clipping at the border."""
    stack = stack_from_layers(layers)
    k = len(layers)
    assert receptive_field_size(stack, k) == rf_size_oracle(layers, k)
    gh, gw = output_grid_size(stack, k, image_hw)
    l_k = receptive_field_size(stack, k)
    for u in range(gh):
        for v in range(gw):
            if is_interior(stack, k, u, v, image_hw):
                r = project_field(stack, k, u, v, image_hw)
                assert r.as_tuple() == mask_bbox(influence_mask(layers, k, u, v, image_hw)), (layers, u, v)
                assert r.area == l_k * l_k
                continue
            expect = clip_rect(extended_influence_bbox(layers, k, u, v), image_hw)
            if expect is None:
                with pytest.raises(ValueError):
                    project_field(stack, k, u, v, image_hw)
                continue
            r = project_field(stack, k, u, v, image_hw)
            assert r.as_tuple() == expect, (layers, u, v)
            assert r.area <= l_k * l_k


def test_random_stacks_against_influence_oracle():
    rng = np.random.default_rng(7)
    done = 0
    while done < 40:
        layers = _random_stack(rng)
        try:
            output_grid_size(stack_from_layers(layers), len(layers), (40, 40))
        except ValueError:
            continue
        check_stack_against_oracle(layers, (40, 40))
        done += 1


@settings(max_examples=100, deadline=None)
@given(st.lists(layer_st, min_size=1, max_size=8))
def test_size_is_non_decreasing_in_depth(layers):
    sizes = receptive_field_sizes(stack_from_layers(layers))
    assert all(a <= b for a, b in zip(sizes, sizes[1:]))
