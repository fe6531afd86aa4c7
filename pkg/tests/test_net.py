import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from barriernet.net import Adam, Mlp, Sgd, load_checkpoint, save_checkpoint

from oracles import central_diff


def small_net(seed=0, d=3, q=2, S=1, m=2, hidden=(5, 4)):
    return Mlp.create(d, q, S, m, hidden=hidden, seed=seed)


def scalar_loss(net, Z, A, B):
    f, p, _ = net.forward(Z)
    return float(np.sum(A * f) + np.sum(B * p.reshape(len(Z), -1)))


def test_zero_weights():
    net = small_net()
    for W, b in zip(net.weights, net.biases):
        W[:] = 0
        b[:] = 0
    f, p, _ = net.forward(np.random.default_rng(0).normal(size=(7, 3)))
    assert np.all(f == 0) and np.allclose(p, net.c_max / 2)
    assert p.shape == (7, 1, 2)


def test_single_hidden_unit_by_hand():
    net = Mlp.create(1, 1, 1, 1, hidden=(1,), c_max=4.0)
    net.weights = [np.array([[0.5]]), np.array([[2.0], [-1.0]])]
    net.biases = [np.array([0.1]), np.array([0.3, 0.2])]
    z = 1.2
    hdn = np.tanh(0.5 * z + 0.1)
    f, p, _ = net.forward([[z]])
    assert f[0, 0] == pytest.approx(2.0 * hdn + 0.3, abs=1e-15)
    assert p[0, 0, 0] == pytest.approx(4.0 / (1.0 + np.exp(-(-hdn + 0.2))), abs=1e-15)


def test_zero_upstream_gives_zero_grads():
    net = small_net()
    _, _, cache = net.forward(np.ones((4, 3)))
    grads = net.backward(cache, np.zeros((4, 2)), np.zeros((4, 1, 2)))
    assert all(np.all(g == 0) for g in grads)


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(1)
    net = small_net(seed=2)
    net.set_normalization(rng.normal(size=(20, 3)) * 3 + 1)
    Z = rng.normal(size=(6, 3))
    A = rng.normal(size=(6, 2))
    B = rng.normal(size=(6, 2))
    _, _, cache = net.forward(Z)
    grads = net.backward(cache, A, B)
    for P, G in zip(net.params, grads):
        def loss_at(v, P=P):
            old = P.copy()
            P[...] = v
            out = scalar_loss(net, Z, A, B)
            P[...] = old
            return out

        fd = central_diff(loss_at, P.copy())
        scale = np.maximum(np.abs(fd), 1e-3)
        assert np.max(np.abs(G - fd) / scale) <= 1e-5


def test_duplicate_samples_double_gradient():
    rng = np.random.default_rng(3)
    net = small_net()
    z = rng.normal(size=(1, 3))
    a, b = rng.normal(size=(1, 2)), rng.normal(size=(1, 2))
    g1 = net.backward(net.forward(z)[2], a, b)
    g2 = net.backward(net.forward(np.vstack([z, z]))[2], np.vstack([a, a]), np.vstack([b, b]))
    for x, y in zip(g1, g2):
        assert np.allclose(y, 2 * x, rtol=1e-14, atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(z=arrays(np.float64, 3, elements=st.floats(-1e6, 1e6)), seed=st.integers(0, 1000))
def test_penalties_strictly_inside_range(z, seed):
    net = small_net(seed=seed)
    for W in net.weights:
        W *= 50.0  # push the heads into saturation
    _, p, _ = net.forward(z)
    assert np.all(p > 0) and np.all(p < net.c_max)


def test_input_dimension_checked():
    with pytest.raises(ValueError):
        small_net().forward(np.ones((2, 4)))


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(4)
    net = small_net(seed=5)
    net.set_normalization(rng.normal(size=(10, 3)))
    save_checkpoint(tmp_path / "m.json", net, epoch=3, note="x")
    back, extra = load_checkpoint(tmp_path / "m.json")
    assert extra == {"epoch": 3, "note": "x"}
    for a, b in zip(net.params, back.params):
        assert np.array_equal(a, b)
    Z = rng.normal(size=(5, 3))
    f0, p0, _ = net.forward(Z)
    f1, p1, _ = back.forward(Z)
    assert np.array_equal(f0, f1) and np.array_equal(p0, p1)


def test_checkpoint_version_checked():
    doc = small_net().to_dict()
    doc["version"] = 99
    with pytest.raises(ValueError):
        Mlp.from_dict(doc)


def test_optimizers_descend_quadratic():
    for opt_cls, lr in ((Adam, 0.05), (Sgd, 0.1)):
        x = np.array([3.0, -2.0])
        opt = opt_cls([x], lr=lr)
        for _ in range(300):
            opt.step([x], [2 * x])
        assert np.linalg.norm(x) < 1e-2


def test_adam_state_round_trip():
    x = np.array([1.0, 2.0])
    opt = Adam([x], lr=0.1)
    for _ in range(5):
        opt.step([x], [x.copy()])
    y = x.copy()
    twin = Adam([y], lr=0.1)
    twin.load_state(opt.state())
    opt.step([x], [x.copy()])
    twin.step([y], [y.copy()])
    assert np.array_equal(x, y)
