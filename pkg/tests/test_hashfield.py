import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ngpsr import autodiff as ad
from ngpsr.hashfield import (aggregate, corner_bits, corner_slots, cross_level_map, encode_multiscale, hash_index,
                             level_specs, predict_weights, quantize, weight_sizes)
from ngpsr.layers import init_mlp

# Pinned with a plain big-integer script (Python ints, explicit mod 2**32),
# independent of the numpy uint64 code path under test.
GOLDEN = [
    ((0, 0, 0, 0, 0), 2 ** 16, 0),
    ((1, 0, 0, 0, 0), 2 ** 16, 1),
    ((0, 1, 0, 0, 0), 2 ** 16, 31153),
    ((0, 0, 1, 0, 0), 2 ** 16, 22421),
    ((0, 0, 0, 1, 0), 2 ** 16, 49909),
    ((0, 0, 0, 0, 1), 2 ** 16, 40037),
    ((3, 7, 1, 2, 5), 2 ** 16, 35922),
    ((64, 64, 64, 64, 64), 2 ** 16, 11584),
    ((24, 56, 8, 0, 40), 2 ** 16, 19904),
    ((1, 0, 0, 0, 0), 2 ** 19, 1),
    ((0, 0, 1, 0, 0), 2 ** 19, 153493),
    ((0, 0, 0, 1, 0), 2 ** 19, 443125),
    ((0, 0, 0, 0, 1), 2 ** 19, 40037),
    ((3, 7, 1, 2, 5), 2 ** 19, 35922),
    ((64, 64, 64, 64, 64), 2 ** 19, 273728),
    ((24, 56, 8, 0, 40), 2 ** 19, 19904),
]


def weight_params(seed=0, dim=5):
    return init_mlp(np.random.default_rng(seed), "weights", weight_sizes(dim))


@pytest.mark.parametrize("coords, table, slot", GOLDEN)
def test_hash_golden_values(coords, table, slot):
    assert hash_index(np.array(coords), table) == slot


def test_hash_is_vectorized_and_in_range():
    coords = np.random.default_rng(0).integers(0, 2 ** 20, size=(1000, 5))
    slots = hash_index(coords, 2 ** 16)
    assert slots.shape == (1000,)
    assert slots.min() >= 0 and slots.max() < 2 ** 16
    np.testing.assert_array_equal(slots, [hash_index(c, 2 ** 16) for c in coords])


def test_hash_rejects_non_power_of_two_table():
    with pytest.raises(ValueError):
        hash_index(np.zeros(5, dtype=int), 1000)


def test_level_resolutions():
    assert [s.resolution for s in level_specs(4, 8)] == [8, 16, 32, 64]
    with pytest.raises(ValueError):
        level_specs(4, 1)


def test_corner_expansion_has_32_distinct_corners():
    bits = corner_bits(5)
    assert bits.shape == (32, 5)
    assert len({tuple(b) for b in bits}) == 32


@pytest.mark.parametrize("q, n, base, offset", [
    ((0.0,) * 5, 8, (0,) * 5, (0.0,) * 5),
    ((0.3, 0.7), 10, (3, 7), (0.0, 0.0)),
    ((1.0, 0.5), 8, (7, 4), (1.0, 0.0)),
])
def test_quantize_closed_forms(q, n, base, offset):
    hv = quantize(np.array(q), n)
    np.testing.assert_array_equal(hv.base_cell, base)
    np.testing.assert_allclose(hv.offset, offset, atol=1e-12)


def test_quantize_corner_set_in_two_dimensions():
    hv = quantize(np.array([0.3, 0.7]), 10)
    assert {tuple(c) for c in hv.corners} == {(3, 7), (4, 7), (3, 8), (4, 8)}


def test_cross_level_map():
    corner = np.array([3, 7, 1, 0, 5])
    np.testing.assert_array_equal(cross_level_map(corner, 64, 64), corner)
    np.testing.assert_array_equal(cross_level_map(corner, 8, 64), [24, 56, 8, 0, 40])


def test_coarse_and_fine_vertices_at_one_position_share_a_slot():
    specs = level_specs(3, 4)
    finest = specs[-1].resolution
    for s in specs:
        grid = np.stack(np.meshgrid(*[np.arange(s.resolution + 1)] * 5, indexing="ij"), -1).reshape(-1, 5)
        mapped = cross_level_map(grid, s.resolution, finest)
        np.testing.assert_array_equal(hash_index(mapped, 2 ** 16), hash_index(grid * (finest // s.resolution), 2 ** 16))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (5,), elements=st.floats(0, 1)), arrays(np.float64, (16,), elements=st.floats(-1, 1)))
def test_weights_lie_on_the_simplex(offset, cam):
    w = predict_weights(ad.Tensor(offset[None]), ad.Tensor(cam[None]), weight_params()).data
    assert abs(w.sum() - 1) < 1e-6 and np.all(w >= 0)


def test_zero_output_layer_gives_uniform_weights():
    params = weight_params()
    params["weights.1.weight"].data[:] = 0
    w = predict_weights(ad.Tensor(np.full((1, 5), 0.4)), ad.Tensor(np.zeros((1, 16))), params).data
    np.testing.assert_allclose(w, 1 / 32)


def test_raw_weights_skip_normalization():
    params = weight_params()
    args = (ad.Tensor(np.full((1, 5), 0.4)), ad.Tensor(np.zeros((1, 16))), params)
    assert abs(predict_weights(*args, raw=True).data.sum() - 1) > 1e-3


def test_aggregate_arithmetic():
    feats = ad.Tensor(np.arange(1.0, 5.0).reshape(1, 4, 1))
    assert aggregate(ad.Tensor(np.full((1, 4), 0.25)), feats).data[0, 0] == 2.5
    onehot = np.zeros((1, 4))
    onehot[0, 2] = 1
    assert aggregate(ad.Tensor(onehot), feats).data[0, 0] == 3.0
    with pytest.raises(ad.ShapeError):
        aggregate(ad.Tensor(np.ones((1, 3))), feats)


def test_identical_corner_features_ignore_weights():
    f = np.random.default_rng(0).normal(size=4)
    feats = ad.Tensor(np.broadcast_to(f, (2, 32, 4)).copy())
    w = ad.softmax(ad.Tensor(np.random.default_rng(1).normal(size=(2, 32))))
    np.testing.assert_allclose(aggregate(w, feats).data, np.stack([f, f]))


def _multiscale_inputs(seed=0, batch=3):
    rng = np.random.default_rng(seed)
    specs = level_specs(4, 8)
    q = rng.random((4, batch, 5))
    cam = ad.Tensor(rng.uniform(-1, 1, (batch, 16)))
    params = weight_params(seed)
    params["hash.table"] = ad.Tensor(rng.normal(size=(2 ** 16, 4)), requires_grad=True)
    return specs, q, cam, params


def test_multiscale_width_and_zero_table():
    specs, q, cam, params = _multiscale_inputs()
    out = encode_multiscale([ad.Tensor(x) for x in q], cam, specs, params)
    assert out.shape == (3, 16)
    params["hash.table"].data[:] = 0
    assert not encode_multiscale([ad.Tensor(x) for x in q], cam, specs, params).data.any()


def test_table_perturbation_is_local():
    specs, q, cam, params = _multiscale_inputs(batch=1)
    slots = set(np.concatenate([s.ravel() for s in corner_slots(q, specs, 2 ** 16)]).tolist())
    before = encode_multiscale([ad.Tensor(x) for x in q], cam, specs, params).data.copy()
    free = next(i for i in range(2 ** 16) if i not in slots)
    params["hash.table"].data[free] += 10
    np.testing.assert_array_equal(encode_multiscale([ad.Tensor(x) for x in q], cam, specs, params).data, before)
    hit = min(slots)
    params["hash.table"].data[hit] += 10
    assert not np.array_equal(encode_multiscale([ad.Tensor(x) for x in q], cam, specs, params).data, before)


def test_table_entry_gradient_matches_finite_difference():
    specs, q, cam, params = _multiscale_inputs(batch=2)
    table = params["hash.table"]
    with ad.Tape() as tape:
        loss = ad.sum_all(encode_multiscale([ad.Tensor(x) for x in q], cam, specs, params))
    ad.backward(loss, tape)
    row = int(np.flatnonzero(np.any(table.grad != 0, axis=1))[0])
    h = 1e-3
    vals = []
    for sign in (1, -1):
        table.data[row, 1] += sign * h
        vals.append(float(np.sum(encode_multiscale([ad.Tensor(x) for x in q], cam, specs, params).data)))
        table.data[row, 1] -= sign * h
    numeric = (vals[0] - vals[1]) / (2 * h)
    assert abs(numeric - table.grad[row, 1]) / max(abs(numeric), 1e-12) < 1e-3


def test_trained_weights_depend_on_offset(tiny_trained):
    params = tiny_trained.model.params
    cam = ad.Tensor(np.zeros((1, 16), dtype=np.float32))
    a = predict_weights(ad.Tensor(np.zeros((1, 5), dtype=np.float32)), cam, params).data
    b = predict_weights(ad.Tensor(np.full((1, 5), 0.9, dtype=np.float32)), cam, params).data
    assert np.abs(a - b).sum() > 1e-3
