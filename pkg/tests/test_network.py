import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fdch.errors import FormatError, ShapeError
from fdch.network import (
    Layer,
    Mlp,
    backward,
    forward,
    init_mlp,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
)
from oracles import numerical_grad, rel_error


def test_init_shapes_and_determinism():
    net = init_mlp([8, 4, 2], ["relu", "identity"], seed=3)
    assert [layer.W.shape for layer in net.layers] == [(4, 8), (2, 4)]
    assert all(np.all(layer.b == 0) for layer in net.layers)
    assert net == init_mlp([8, 4, 2], ["relu", "identity"], seed=3)
    assert net != init_mlp([8, 4, 2], ["relu", "identity"], seed=4)


@pytest.mark.parametrize(
    "dims, acts, msg",
    [([8], [], "need >=2"), ([8, 0], ["relu"], "positive"), ([8, 4], [], "activations")],
)
def test_init_rejects_bad_dims(dims, acts, msg):
    with pytest.raises(ShapeError, match=msg):
        init_mlp(dims, acts, seed=0)


def test_init_scale_is_he():
    net = init_mlp([400, 300], ["relu"], seed=0)
    assert np.var(net.layers[0].W) == pytest.approx(2 / 400, rel=0.02)


def test_identity_layer_is_identity():
    net = Mlp([Layer(np.eye(3), np.zeros(3), "identity")])
    X = np.random.default_rng(0).standard_normal((3, 5))
    Y, _ = forward(net, X)
    np.testing.assert_array_equal(Y, X)


def test_relu_on_negative_preactivation_is_zero():
    net = Mlp([Layer(np.eye(2), np.full(2, -10.0), "relu")])
    Y, _ = forward(net, np.ones((2, 3)))
    assert np.all(Y == 0)


@given(st.lists(st.floats(-1e6, 1e6), min_size=4, max_size=4))
def test_tanh_output_in_open_interval(vals):
    net = init_mlp([4, 3], ["tanh"], seed=1)
    Y, _ = forward(net, np.array(vals)[:, None])
    assert np.all(np.abs(Y) <= 1)


def test_forward_rejects_wrong_input_dim():
    net = init_mlp([5, 2], ["relu"], seed=0)
    with pytest.raises(ShapeError):
        forward(net, np.zeros((4, 1)))


def test_forward_is_batch_order_equivariant():
    rng = np.random.default_rng(5)
    net = init_mlp([5, 7, 3], ["tanh", "identity"], seed=2)
    X = rng.standard_normal((5, 9))
    perm = rng.permutation(9)
    Y, _ = forward(net, X)
    Yp, _ = forward(net, X[:, perm])
    np.testing.assert_array_equal(Yp, Y[:, perm])


def _check_grads(net, X):
    Y, tape = forward(net, X)
    grads, dX = backward(net, tape, Y)  # d(1/2 ||Y||^2)/dY = Y

    def loss():
        out, _ = forward(net, X)
        return 0.5 * np.sum(out**2)

    errs = []
    for layer, (dW, db) in zip(net.layers, grads):
        errs.append(rel_error(dW, numerical_grad(loss, layer.W)))
        errs.append(rel_error(db, numerical_grad(loss, layer.b)))
    errs.append(rel_error(dX, numerical_grad(loss, X)))
    return max(errs)


def test_backward_matches_finite_differences_example():
    rng = np.random.default_rng(11)
    net = init_mlp([5, 4, 3], ["relu", "identity"], seed=11)
    assert _check_grads(net, rng.standard_normal((5, 6))) < 1e-4


@pytest.mark.parametrize("act", ["relu", "tanh", "identity"])
def test_gradient_check_property(act):
    rng = np.random.default_rng({"relu": 1, "tanh": 2, "identity": 3}[act])
    worst = 0.0
    for trial in range(30):
        depth = int(rng.integers(1, 4))
        dims = [int(d) for d in rng.integers(2, 7, size=depth + 1)]
        net = init_mlp(dims, [act] * depth, seed=trial)
        for layer in net.layers:
            layer.b[:] = rng.standard_normal(layer.b.shape) * 0.1
        X = rng.standard_normal((dims[0], int(rng.integers(1, 8))))
        worst = max(worst, _check_grads(net, X))
    assert worst < 1e-4


def test_zero_output_gradient_gives_zero_grads():
    net = init_mlp([4, 3, 2], ["tanh", "identity"], seed=0)
    Y, tape = forward(net, np.ones((4, 3)))
    grads, dX = backward(net, tape, np.zeros_like(Y))
    assert all(not dW.any() and not db.any() for dW, db in grads)
    assert not dX.any()


def test_identity_layer_closed_form_grads():
    rng = np.random.default_rng(0)
    net = Mlp([Layer(rng.standard_normal((2, 3)), np.zeros(2), "identity")])
    X = rng.standard_normal((3, 4))
    dY = rng.standard_normal((2, 4))
    _, tape = forward(net, X)
    [(dW, db)], _ = backward(net, tape, dY)
    np.testing.assert_allclose(dW, dY @ X.T)
    np.testing.assert_allclose(db, dY.sum(axis=1))


def test_backward_rejects_mismatched_dY():
    net = init_mlp([4, 2], ["relu"], seed=0)
    _, tape = forward(net, np.ones((4, 3)))
    with pytest.raises(ShapeError):
        backward(net, tape, np.ones((2, 2)))


def _scalar_net(w):
    return Mlp([Layer(np.array([[w]]), np.zeros(1), "identity")])


def test_sgd_zero_lr_is_noop():
    net = init_mlp([3, 2], ["relu"], seed=0)
    before = net.copy()
    _, tape = forward(net, np.ones((3, 2)))
    grads, _ = backward(net, tape, np.ones((2, 2)))
    assert sgd_step(net, grads, 0.0) == before


def test_sgd_arithmetic():
    net = sgd_step(_scalar_net(1.0), [(np.array([[2.0]]), np.zeros(1))], 0.1)
    assert net.layers[0].W[0, 0] == pytest.approx(0.8)


def test_sgd_converges_on_quadratic():
    # 1/2 (w - 3)^2, gradient w - 3
    net = _scalar_net(0.0)
    for _ in range(10_000):
        w = net.layers[0].W[0, 0]
        sgd_step(net, [(np.array([[w - 3.0]]), np.zeros(1))], 0.1)
        if abs(net.layers[0].W[0, 0] - 3.0) < 1e-6:
            break
    assert abs(net.layers[0].W[0, 0] - 3.0) < 1e-6


def test_sgd_rejects_shape_mismatch():
    with pytest.raises(ShapeError):
        sgd_step(_scalar_net(1.0), [(np.zeros((2, 1)), np.zeros(1))], 0.1)


def test_checkpoint_round_trip(tmp_path):
    a = init_mlp([6, 5, 4], ["relu", "identity"], seed=1)
    b = init_mlp([3, 4], ["tanh"], seed=2)
    M = np.arange(6.0).reshape(2, 3) / 7
    path = tmp_path / "m.fdch"
    save_checkpoint(path, [a, b], [M])
    nets, mats = load_checkpoint(path)
    assert nets == [a, b]
    np.testing.assert_array_equal(mats[0], M)
    raw = path.read_bytes()
    assert raw[:4] == b"FDCH"


def test_checkpoint_corruption_is_named(tmp_path):
    path = tmp_path / "m.fdch"
    save_checkpoint(path, [init_mlp([3, 2], ["relu"], seed=0)])
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])
    with pytest.raises(FormatError, match="unexpected end of file"):
        load_checkpoint(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="bad magic"):
        load_checkpoint(path)
