import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ngpsr import autodiff as ad
from ngpsr.gradcheck import OP_TOL, op_error, op_suite


@pytest.mark.parametrize("name", sorted(op_suite(0)))
def test_every_op_matches_finite_differences(name):
    assert op_suite(0)[name]() < OP_TOL


def test_linear_rejects_mismatched_width():
    with pytest.raises(ad.ShapeError):
        ad.linear(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((4, 5))))


def test_tensor_keeps_float_dtype_and_casts_integers_to_float32():
    assert ad.Tensor(np.zeros(2, dtype=np.float64)).dtype == np.float64
    t = ad.Tensor([1, 2], requires_grad=True)
    assert t.dtype == np.float32
    assert np.array_equal(t.grad, np.zeros(2, dtype=np.float32))


def test_ops_outside_a_tape_record_nothing():
    w = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    with ad.Tape() as tape:
        with ad.no_tape():
            ad.relu(w)
    assert tape.nodes == []


def test_fan_out_accumulates_gradients():
    x = ad.Tensor(np.array([1.5, -2.0], dtype=np.float64), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum_all(ad.add(ad.mul(x, x), x))
    ad.backward(loss, tape)
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_replayed_backward_is_bit_identical():
    rng = np.random.default_rng(3)
    xs, ws = rng.normal(size=(16, 8)), rng.normal(size=(4, 8))

    def run():
        w = ad.Tensor(ws, requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.mse_loss(ad.tanh(ad.linear(ad.Tensor(xs), w)), np.zeros((16, 4)))
        ad.backward(loss, tape)
        return w.grad.tobytes()

    assert run() == run()


def test_relu_records_its_mask_when_tracking_branches():
    with ad.Tape(track_branches=True) as tape:
        ad.relu(ad.Tensor(np.array([-1.0, 2.0]), requires_grad=True))
    assert len(tape.branches) == 1


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-30, 30)))
def test_softmax_sums_to_one(x):
    y = ad.softmax(ad.Tensor(x)).data
    assert abs(y.sum() - 1) < 1e-9 and np.all(y >= 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(3, 6), st.integers(3, 6), st.integers(0, 2 ** 31))
def test_conv2d_gradient_over_random_shapes(c, h, w, seed):
    rng = np.random.default_rng(seed)
    err = op_error(ad.conv2d, [rng.normal(size=(c, h, w)), rng.normal(size=(2, c, 3, 3)), rng.normal(size=2)])
    assert err < OP_TOL


def test_conv2d_preserves_spatial_size():
    out = ad.conv2d(ad.Tensor(np.zeros((2, 3, 7, 5))), ad.Tensor(np.zeros((4, 3, 3, 3))), ad.Tensor(np.zeros(4)))
    assert out.shape == (2, 4, 7, 5)


def test_adam_first_step_moves_each_weight_by_lr():
    # bias correction makes the first update exactly lr * sign(grad)
    p = ad.Tensor(np.array([1.0, -1.0, 0.5]), requires_grad=True)
    p.grad = np.array([0.3, -2.0, 1e-3], dtype=np.float32)
    state = ad.AdamState(lr=0.01)
    ad.adam_step({"p": p}, state)
    np.testing.assert_allclose(p.data, [0.99, -0.99, 0.49], rtol=1e-5)
    assert state.step == 1
    assert np.all(p.grad == 0)


def test_adam_refuses_missing_gradient():
    p = ad.Tensor(np.ones(2), requires_grad=True)
    p.grad = None
    with pytest.raises(ad.ContractError):
        ad.adam_step({"p": p}, ad.AdamState())
