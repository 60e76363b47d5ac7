import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pmufusion import nn
from pmufusion.nn import AdamState, DenseLayer, adam_step, backward, forward, grad_check


def test_identity_layer_passes_input_through():
    layer = DenseLayer(np.eye(3), np.zeros(3), "linear")
    x = np.array([0.5, -2.0, 7.0])
    assert np.array_equal(forward([layer], x)[-1], x)


def test_zero_weights_output_bias():
    b = np.array([1.5, -0.25])
    layer = DenseLayer(np.zeros((2, 4)), b, "linear")
    assert np.array_equal(forward([layer], np.arange(4.0))[-1], b)


def test_hand_dot_product():
    # [DERIVED] 1*3 + 2*4 = 11
    layer = DenseLayer(np.array([[1.0, 2.0]]), np.zeros(1), "linear")
    assert forward([layer], np.array([3.0, 4.0]))[-1][0] == 11.0


def test_forward_rejects_wrong_width():
    layer = DenseLayer(np.ones((2, 3)), np.zeros(2))
    with pytest.raises(nn.DimensionError):
        forward([layer], np.ones(4))


def test_zero_output_gradient_gives_zero_gradients():
    rng = nn.make_rng(0)
    layers = nn.build_stack([4, 5, 3], ["tanh", "linear"], rng)
    acts = forward(layers, rng.standard_normal(4))
    grads, gin = backward(layers, acts, np.zeros(3))
    for dW, db in grads:
        assert not dW.any() and not db.any()
    assert not gin.any()


def test_linear_layer_weight_gradient_is_input():
    # loss = output (scalar): dL/dW = x^T, dL/db = 1
    x = np.array([2.0, -1.0, 0.5])
    layer = DenseLayer(np.array([[0.3, 0.1, -0.7]]), np.array([0.2]))
    grads, gin = backward([layer], forward([layer], x), np.ones(1))
    assert np.array_equal(grads[0][0], x[None, :])
    assert np.array_equal(grads[0][1], np.ones(1))
    assert np.array_equal(gin, layer.weights[0])


@pytest.mark.parametrize("acts", [("tanh", "sigmoid", "linear"), ("softplus", "tanh", "sigmoid")])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_random_three_layer_net_matches_finite_differences(acts, seed):
    rng = nn.make_rng(seed)
    layers = nn.build_stack([5, 7, 6, 3], list(acts), rng)
    for l in layers:
        l.bias[:] = rng.uniform(-0.5, 0.5, l.bias.shape)
    x = rng.standard_normal((4, 5))
    target = rng.standard_normal((4, 3))

    def loss(out):
        d = out - target
        return 0.5 * float(np.sum(d * d)), d

    assert grad_check(layers, loss, x, h=1e-5) < 1e-4


def test_relu_net_away_from_kinks():
    rng = nn.make_rng(5)
    layers = nn.build_stack([4, 6, 2], ["relu", "linear"], rng)
    x = rng.standard_normal((3, 4))
    pre = x @ layers[0].weights.T + layers[0].bias
    # keep every pre-activation well clear of zero
    layers[0].bias += np.where(np.abs(pre).min(axis=0) < 0.05, 0.2, 0.0)
    pre = x @ layers[0].weights.T + layers[0].bias
    assert np.abs(pre).min() > 1e-3
    assert grad_check(layers, lambda o: (float(np.sum(o ** 2)), 2 * o), x) < 1e-4


def test_linear_network_quadratic_loss_is_exact():
    rng = nn.make_rng(3)
    layers = nn.build_stack([3, 4, 2], ["linear", "linear"], rng)
    x = rng.standard_normal((5, 3))
    assert grad_check(layers, lambda o: (float(np.sum(o ** 2)), 2 * o), x) < 1e-7


def test_grad_check_without_parameters():
    assert grad_check([], lambda o: (0.0, o), np.ones(2)) == 0.0


def test_adam_zero_gradient_is_a_no_op():
    p = [np.array([1.0, -2.0]), np.array([[0.5]])]
    before = [a.copy() for a in p]
    state = AdamState.zeros_like(p)
    adam_step(p, [np.zeros(2), np.zeros((1, 1))], state, 1e-3)
    for a, b in zip(p, before):
        assert np.array_equal(a, b)
    assert all(not m.any() for m in state.m) and all(not v.any() for v in state.v)


signed = lambda lo, hi: st.floats(lo, hi).flatmap(lambda m: st.sampled_from([m, -m]))


@given(g=signed(0.05, 1e3), lr=st.floats(1e-5, 1e-3), start=st.floats(-10, 10))
def test_adam_first_step_moves_by_lr(g, lr, start):
    # [DERIVED] bias-corrected first moments are g and g^2, so the step is lr * g / (|g| + eps)
    p = [np.array([start])]
    adam_step(p, [np.array([g])], AdamState.zeros_like(p), lr)
    assert abs(abs(p[0][0] - start) - lr) < 1e-9
    assert np.sign(start - p[0][0]) == np.sign(g)


@given(g=signed(1e-6, 1e6), lr=st.floats(1e-6, 1.0))
def test_adam_first_step_closed_form(g, lr):
    p = [np.array([0.0])]
    state = AdamState.zeros_like(p)
    adam_step(p, [np.array([g])], state, lr)
    assert -p[0][0] == pytest.approx(lr * g / (abs(g) + state.eps), rel=1e-12)


def test_adam_is_deterministic_from_a_state_copy():
    rng = nn.make_rng(1)
    p0 = [rng.standard_normal((3, 2)), rng.standard_normal(3)]
    g = [rng.standard_normal((3, 2)), rng.standard_normal(3)]
    state = AdamState.zeros_like(p0)
    adam_step(p0, g, state, 1e-2)
    a, b = [x.copy() for x in p0], [x.copy() for x in p0]
    sa, sb = state.copy(), state.copy()
    adam_step(a, g, sa, 1e-2)
    adam_step(b, g, sb, 1e-2)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert sa.step == sb.step == 2


def test_adam_rejects_non_finite_gradient():
    p = [np.zeros(2)]
    with pytest.raises(nn.TrainingDivergenceError):
        adam_step(p, [np.array([np.nan, 0.0])], AdamState.zeros_like(p), 1e-3)


def test_glorot_init_bounds_and_seed():
    a = DenseLayer.init(40, 10, "relu", nn.make_rng(7))
    b = DenseLayer.init(40, 10, "relu", nn.make_rng(7))
    assert np.array_equal(a.weights, b.weights)
    assert np.abs(a.weights).max() <= np.sqrt(6 / 50)
    assert not a.bias.any()


@settings(max_examples=25)
@given(st.integers(0, 2 ** 31 - 1))
def test_checkpoint_round_trip(seed):
    rng = nn.make_rng(seed)
    layers = nn.build_stack([3, 4, 2], ["relu", "sigmoid"], rng)
    blob = nn.dump_checkpoint({"net": layers}, {"kind": "test", "seed": seed}, {"scale": rng.standard_normal(6)})
    sections, meta, arrays = nn.load_checkpoint(blob)
    assert meta["seed"] == seed
    for a, b in zip(layers, sections["net"]):
        assert np.array_equal(a.weights, b.weights) and np.array_equal(a.bias, b.bias)
        assert a.activation == b.activation
    assert nn.dump_checkpoint(sections, meta, arrays) == blob


def test_truncated_checkpoint_is_rejected():
    layers = nn.build_stack([2, 2], ["linear"], nn.make_rng(0))
    blob = nn.dump_checkpoint({"net": layers}, {})
    with pytest.raises(ValueError):
        nn.load_checkpoint(blob[:-5])
