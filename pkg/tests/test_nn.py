import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from scorecal.errors import FormatError, ValidationError
from scorecal.modelfile import parse_fields
from scorecal.nn import PRELU_INIT, Adam, AffineLayer, Network, PReLU, Standardizer


def _random_net(rng, dims=(5, 7, 6), head="softplus", std=True):
    s = Standardizer(rng.normal(size=dims[0]), rng.uniform(0.5, 2.0, dims[0])) if std else None
    net = Network.init(dims[0], dims[1:], head, rng, s)
    for layer in net.layers:  # move slopes and biases off their initial values
        for p in layer.params():
            p += rng.normal(scale=0.3, size=p.shape)
    return net


def _scalar_reference(net, x):
    """Step-by-step evaluation with Python floats."""
    h = [(xi - m) / s for xi, m, s in zip(x, net.standardizer.mean, net.standardizer.std)]
    for layer in net.layers:
        if isinstance(layer, AffineLayer):
            h = [sum(w * v for w, v in zip(row, h)) + b for row, b in zip(layer.weight.tolist(), layer.bias)]
        else:
            h = [v if v > 0 else a * v for v, a in zip(h, layer.slope)]
    u = h[0]
    return math.log1p(math.exp(u)) if net.head == "softplus" else u


def test_zero_net_softplus_outputs_ln2(rng):
    net = Network.init(4, (3,), "softplus", rng)
    for p in net.params():
        p[...] = 0.0
    np.testing.assert_allclose(net.predict(rng.normal(size=(5, 4))), math.log(2), atol=1e-15)


def test_single_linear_layer():
    std = Standardizer(np.array([1.0, -2.0]), np.array([2.0, 4.0]))
    net = Network([AffineLayer(np.array([[3.0, -1.0]]), np.array([0.5]))], "linear", std)
    x = np.array([5.0, 2.0])
    assert net.predict(x) == pytest.approx(3 * 2.0 - 1 * 1.0 + 0.5)


@pytest.mark.parametrize("head", ["linear", "softplus"])
def test_matches_scalar_reference(rng, head):
    net = _random_net(rng, head=head)
    for _ in range(5):
        x = rng.normal(size=5)
        assert net.predict(x) == pytest.approx(_scalar_reference(net, x), rel=1e-12, abs=1e-12)


def _fd_check(net, x, upstream, h=1e-5):
    out, cache = net.forward(x)
    grads = net.backward(cache, upstream)
    worst = 0.0
    for p, g in zip(net.params(), grads):
        flat, gf = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = float(np.dot(upstream, net.predict(x)))
            flat[i] = old - h
            fm = float(np.dot(upstream, net.predict(x)))
            flat[i] = old
            fd = (fp - fm) / (2 * h)
            worst = max(worst, abs(gf[i] - fd) / (abs(gf[i]) + 1e-8))
    return worst


@pytest.mark.parametrize("head", ["linear", "softplus"])
def test_gradient_check_random_points(head):
    for seed in range(10):
        rng = np.random.default_rng(seed)
        net = _random_net(rng, dims=(4, 6, 5), head=head)
        x = rng.normal(size=(8, 4))
        assert _fd_check(net, x, rng.normal(size=8)) <= 1e-4


def test_gradient_names_align(rng):
    net = _random_net(rng)
    grads = net.backward(net.forward(rng.normal(size=(3, 5)))[1], np.ones(3))
    assert [g.shape for g in grads] == [p.shape for p in net.params()]
    assert len(net.param_names()) == len(grads)
    assert net.n_params() == sum(p.size for p in net.params())


def test_zero_upstream_gives_zero_grads(rng):
    net = _random_net(rng)
    _, cache = net.forward(rng.normal(size=(4, 5)))
    assert all(not g.any() for g in net.backward(cache, np.zeros(4)))


def test_prelu_slope_gradient_at_negative_input():
    z = -1.7
    net = Network([AffineLayer(np.array([[1.0]]), np.array([0.0])), PReLU(np.array([PRELU_INIT])),
                   AffineLayer(np.array([[1.0]]), np.array([0.0]))], "linear")
    out, cache = net.forward(np.array([z]))
    assert out == pytest.approx(PRELU_INIT * z)
    grads = net.backward(cache, [2.5])
    assert grads[2][0] == pytest.approx(z * 2.5)


def test_backward_validation(rng):
    net = _random_net(rng)
    _, cache = net.forward(rng.normal(size=(2, 5)))
    with pytest.raises(ValidationError, match="upstream"):
        net.backward(cache, np.ones(3))
    with pytest.raises(ValidationError, match="cache"):
        net.backward(None, np.ones(2))
    with pytest.raises(ValidationError, match="dimension"):
        net.forward(np.ones(4))


def test_init_is_seeded_and_bounded():
    a = Network.init(9, (4,), "linear", np.random.default_rng(3))
    b = Network.init(9, (4,), "linear", np.random.default_rng(3))
    assert all(np.array_equal(p, q) for p, q in zip(a.params(), b.params()))
    w = a.layers[0].weight
    assert np.all(np.abs(w) <= 1 / 3) and not a.layers[0].bias.any()
    assert np.all(a.layers[1].slope == PRELU_INIT)


def test_standardizer_fit_moments(rng):
    x = rng.normal(3.0, 5.0, size=(500, 4))
    z = Standardizer.fit(x)(x)
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-10)
    np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-10)
    const = Standardizer.fit(np.ones((5, 2)))
    assert np.all(np.isfinite(const(np.ones((1, 2)))))


def test_serialization_round_trip_bit_exact(rng):
    net = _random_net(rng)
    back = Network.from_fields(parse_fields("\n".join(net.to_lines("net"))), "net")
    assert back.to_lines("net") == net.to_lines("net")
    x = rng.normal(size=(6, 5))
    assert back.predict(x).tobytes() == net.predict(x).tobytes()


def test_serialization_errors(rng):
    fields = parse_fields("\n".join(_random_net(rng).to_lines("net")))
    bad = dict(fields, **{"net.layer0.weight": "0x1p+0"})
    with pytest.raises(FormatError, match="expected"):
        Network.from_fields(bad, "net")
    del fields["net.head"]
    with pytest.raises(FormatError, match="missing"):
        Network.from_fields(fields, "net")


def test_adam_first_step_closed_form():
    g = np.array([0.5, -2.0, 1e-9, 0.0])
    p = np.zeros(4)
    opt = Adam([p], lr=0.01)
    opt.step([p], [g])
    np.testing.assert_allclose(p, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)


@given(st.floats(-10, 10).filter(lambda v: abs(v) > 1e-3))
def test_adam_moves_against_constant_gradient(gv):
    p = np.array([1.0])
    opt = Adam([p])
    for _ in range(20):
        opt.step([p], [np.array([gv])])
    assert np.sign(p[0] - 1.0) == -np.sign(gv)


def test_adam_zero_gradient_keeps_params():
    p = np.array([1.0, -2.0])
    opt = Adam([p])
    for _ in range(3):
        opt.step([p], [np.zeros(2)])
    np.testing.assert_array_equal(p, [1.0, -2.0])
