import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chn.errors import ConfigError, DivergenceError, InputError, ParseError, ShapeError
from chn.net import (Gradients, LayerSpec, ModalityNet, OptimizerState, backward, dumps_model,
                     forward, init_network, loads_model, load_model, save_model, sgd_step,
                     stack_specs)


def tiny_specs():
    return [LayerSpec(4, 3, "relu"), LayerSpec(3, 2, "tanh")]


def test_init_shapes_and_zero_biases():
    net = init_network(tiny_specs(), seed=7)
    assert net.weights[0].shape == (3, 4)
    assert net.weights[1].shape == (2, 3)
    assert all(np.all(b == 0) for b in net.biases)


def test_init_is_deterministic():
    a = init_network(tiny_specs(), seed=7)
    b = init_network(tiny_specs(), seed=7)
    assert dumps_model(a) == dumps_model(b)
    c = init_network(tiny_specs(), seed=8)
    assert not a.equals(c)


def test_init_rejects_broken_chain():
    with pytest.raises(ConfigError):
        init_network([LayerSpec(4, 3), LayerSpec(5, 2)], seed=0)


@pytest.mark.parametrize("kwargs", [dict(input_dim=0, output_dim=2), dict(input_dim=2, output_dim=2, activation="sigmoid"),
                                    dict(input_dim=2, output_dim=2, dropout_rate=1.0)])
def test_layer_spec_validation(kwargs):
    with pytest.raises(ConfigError):
        LayerSpec(**kwargs)


def test_tanh_identity_at_origin():
    net = ModalityNet([LayerSpec(2, 2, "tanh")], [np.eye(2)], [np.zeros(2)])
    assert np.array_equal(forward(net, [0.0, 0.0]).output, [[0.0, 0.0]])


def test_relu_hand_case():
    net = ModalityNet([LayerSpec(2, 1, "relu")], [np.array([[1.0, -1.0]])], [np.zeros(1)])
    trace = forward(net, [2.0, 3.0])
    assert trace.pre[0][0, 0] == -1.0
    assert trace.output[0, 0] == 0.0


def test_forward_eval_deterministic_and_errors():
    net = init_network(stack_specs(4, [5], 3, dropout=0.5), seed=1)
    x = np.arange(8.0).reshape(2, 4)
    a, b = forward(net, x), forward(net, x)
    assert all(np.array_equal(p, q) for p, q in zip(a.post, b.post))
    with pytest.raises(ShapeError):
        forward(net, np.ones(3))
    with pytest.raises(InputError):
        forward(net, [1.0, np.nan, 0.0, 0.0])


def test_train_mode_dropout_is_seeded_and_inverted():
    net = init_network(stack_specs(6, [400], 2, dropout=0.5), seed=1)
    x = np.ones((1, 6))
    t1 = forward(net, x, mode="train", seed=3)
    t2 = forward(net, x, mode="train", seed=3)
    assert np.array_equal(t1.output, t2.output)
    mask = t1.masks[0]
    assert set(np.unique(mask)) <= {0.0, 2.0}
    assert 0.35 < np.mean(mask == 0) < 0.65


def test_backward_zero_residual():
    net = init_network(stack_specs(4, [3], 2), seed=0)
    trace = forward(net, np.ones((3, 4)))
    g = backward(net, trace, np.zeros((3, 2)))
    assert all(np.all(p == 0) for p in g.parameters())


def test_backward_one_hot_outer_product():
    net = init_network(stack_specs(4, [3], 2), seed=0)
    x = np.array([[0.3, -0.1, 0.7, 0.2]])
    trace = forward(net, x)
    g = backward(net, trace, np.array([[1.0, 0.0]]))
    assert np.allclose(g.weights[-1][0], trace.post[0][0])
    assert np.all(g.weights[-1][1] == 0)


def test_backward_residual_shape_error():
    net = init_network(stack_specs(4, [3], 2), seed=0)
    trace = forward(net, np.ones((2, 4)))
    with pytest.raises(ShapeError):
        backward(net, trace, np.zeros((2, 3)))


def _numeric_grads(net, loss_fn, step=1e-5):
    out = []
    for p in net.parameters():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + step
            fp = loss_fn()
            p[idx] = old - step
            fm = loss_fn()
            p[idx] = old
            g[idx] = (fp - fm) / (2 * step)
        out.append(g)
    return out


def test_backward_matches_finite_differences_on_quadratic_loss():
    # small weights keep tanh near its linear regime
    rng = np.random.default_rng(0)
    net = ModalityNet([LayerSpec(3, 2, "tanh")], [0.05 * rng.normal(size=(2, 3))], [np.zeros(2)])
    x = rng.normal(size=(4, 3))
    target = rng.normal(size=(4, 2))

    def loss():
        return 0.5 * np.sum((forward(net, x).output - target) ** 2)

    trace = forward(net, x)
    # residuals are taken with respect to the pre-activation
    out = trace.output
    g = backward(net, trace, (out - target) * (1 - out ** 2))
    num = _numeric_grads(net, loss)
    for a, n in zip(g.parameters(), num):
        rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        assert rel.max() <= 1e-6


def test_backward_with_dropout_mask_matches_finite_differences():
    rng = np.random.default_rng(1)
    net = init_network(stack_specs(3, [6], 2, dropout=0.5), seed=4)
    net.biases[0][:] = 0.3
    x = rng.normal(size=(2, 3))
    trace = forward(net, x, mode="train", seed=11)

    def loss():
        return 0.5 * np.sum(forward(net, x, mode="train", seed=11).output ** 2)

    g = backward(net, trace, trace.output * (1 - trace.output ** 2))
    num = _numeric_grads(net, loss)
    for a, n in zip(g.parameters(), num):
        assert np.allclose(a, n, atol=1e-8)


def _scalar_net(theta):
    return ModalityNet([LayerSpec(1, 1, "tanh")], [np.array([[theta]])], [np.zeros(1)])


def _scalar_grads(g):
    return Gradients([np.array([[g]])], [np.zeros(1)])


def test_sgd_plain_step():
    net = _scalar_net(1.0)
    state = OptimizerState.for_net(net, 0.1, momentum=0.0)
    new, _ = sgd_step(net, _scalar_grads(2.0), state)
    assert new.weights[0][0, 0] == pytest.approx(0.8)
    assert net.weights[0][0, 0] == 1.0


def test_sgd_momentum_two_steps():
    net = _scalar_net(0.0)
    state = OptimizerState.for_net(net, 1.0, momentum=0.9)
    net, state = sgd_step(net, _scalar_grads(1.0), state)
    assert state.velocity_w[0][0, 0] == pytest.approx(-1.0)
    net, state = sgd_step(net, _scalar_grads(1.0), state)
    assert state.velocity_w[0][0, 0] == pytest.approx(-1.9)
    assert net.weights[0][0, 0] == pytest.approx(-2.9)


def test_sgd_zero_gradient_unchanged():
    net = init_network(tiny_specs(), seed=2)
    state = OptimizerState.for_net(net, 0.5)
    zero = Gradients([np.zeros_like(w) for w in net.weights], [np.zeros_like(b) for b in net.biases])
    new, _ = sgd_step(net, zero, state)
    assert new.equals(net)


def test_sgd_fch_multiplier_only_scales_last_layer():
    net = init_network(tiny_specs(), seed=2)
    state = OptimizerState.for_net(net, 0.1, momentum=0.0, fch_lr_mult=10.0)
    ones = Gradients([np.ones_like(w) for w in net.weights], [np.ones_like(b) for b in net.biases])
    new, _ = sgd_step(net, ones, state)
    assert np.allclose(new.weights[0] - net.weights[0], -0.1)
    assert np.allclose(new.weights[1] - net.weights[1], -1.0)


def test_sgd_non_finite_names_layer():
    net = init_network(tiny_specs(), seed=2)
    state = OptimizerState.for_net(net, 0.1)
    bad = Gradients([np.zeros_like(w) for w in net.weights], [np.zeros_like(b) for b in net.biases])
    bad.biases[1][0] = np.inf
    with pytest.raises(DivergenceError) as info:
        sgd_step(net, bad, state)
    assert info.value.layer == 1


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), hidden=st.lists(st.integers(1, 6), max_size=3),
       bits=st.integers(1, 8))
def test_model_file_round_trip(tmp_path_factory, seed, hidden, bits):
    net = init_network(stack_specs(5, hidden, bits, dropout=0.25), seed)
    rng = np.random.default_rng(seed)
    for b in net.biases:
        b[:] = rng.normal(size=b.shape)
    path = tmp_path_factory.mktemp("m") / "net.chnm"
    save_model(path, net)
    back = load_model(path)
    assert back.equals(net)
    assert dumps_model(back) == dumps_model(net)


def test_model_file_corruption_is_parse_error():
    text = dumps_model(init_network(tiny_specs(), seed=0))
    with pytest.raises(ParseError):
        loads_model(text.replace("CHNM", "XXXX", 1))
    with pytest.raises(ParseError):
        loads_model("\n".join(text.splitlines()[:-1]))
