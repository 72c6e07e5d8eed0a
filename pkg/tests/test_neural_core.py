import numpy as np
import pytest

from zdt.neural_core import (
    AdamState,
    AutoencoderConfig,
    DenseNetwork,
    Layer,
    ShapeError,
    adam_step,
    backward,
    forward,
    init_autoencoder,
    init_network,
    mse_loss,
    train_autoencoder,
)


def numeric_grad(f, arr, h=1e-5):
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-7, np.abs(a) + np.abs(b)))


def random_net(seed):
    rng = np.random.default_rng(seed)
    sizes = [int(rng.integers(2, 6)) for _ in range(4)]
    net = init_network(sizes, rng)
    for layer in net.layers:
        layer.b[:] = rng.normal(size=layer.b.shape)
    x = rng.normal(size=(5, sizes[0]))
    target = rng.normal(size=(5, sizes[-1]))
    return net, x, target


def check_gradients(seed):
    net, x, target = random_net(seed)

    def loss():
        return mse_loss(forward(net, x).output, target)[0]

    cache = forward(net, x)
    _, g = mse_loss(cache.output, target)
    grads, gx = backward(net, cache, g)
    worst = 0.0
    for p, gp in zip(net.params(), grads):
        worst = max(worst, rel_err(gp, numeric_grad(loss, p)))
    worst = max(worst, rel_err(gx, numeric_grad(loss, x)))
    return worst


def test_linear_layer_forward_backward():
    net = DenseNetwork([Layer(np.array([[2.0]]), np.array([1.0]), "linear")])
    cache = forward(net, np.array([[3.0]]))
    assert cache.output.tolist() == [[7.0]]
    grads, gx = backward(net, cache, np.ones((1, 1)))
    assert grads[0].tolist() == [[3.0]]
    assert grads[1].tolist() == [1.0]
    assert gx.tolist() == [[2.0]]


def test_leaky_relu_negative_slope():
    net = DenseNetwork([Layer(np.array([[1.0]]), np.array([0.0]), "leaky_relu")])
    assert forward(net, [[-1.0]]).output[0, 0] == pytest.approx(-0.01)


def test_identity_two_layer():
    eye = np.eye(3)
    net = DenseNetwork([Layer(eye.copy(), np.zeros(3)), Layer(eye.copy(), np.zeros(3))])
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(net(x), x)


def test_zero_upstream_gradient():
    net, x, _ = random_net(3)
    cache = forward(net, x)
    grads, gx = backward(net, cache, np.zeros_like(cache.output))
    assert all(np.all(g == 0) for g in grads) and np.all(gx == 0)


@pytest.mark.parametrize("seed", range(20))
def test_gradient_check(seed):
    assert check_gradients(seed) < 1e-4


def test_shape_errors():
    net, x, _ = random_net(0)
    with pytest.raises(ShapeError):
        forward(net, np.ones((2, x.shape[1] + 1)))
    cache = forward(net, x)
    with pytest.raises(ShapeError):
        backward(net, cache, np.ones((1, 1, 1)))
    with pytest.raises(ShapeError):
        mse_loss(np.ones(3), np.ones(4))
    with pytest.raises(ShapeError):
        DenseNetwork([Layer(np.ones((3, 2)), np.zeros(3)), Layer(np.ones((2, 4)), np.zeros(2))])


def test_mse_values_and_gradient(rng):
    assert mse_loss([[1.0, 2.0]], [[1.0, 2.0]])[0] == 0.0
    assert mse_loss([1.0, 1.0], [0.0, 0.0])[0] == 1.0
    pred, target = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    _, g = mse_loss(pred, target)
    num = numeric_grad(lambda: mse_loss(pred, target)[0], pred)
    assert rel_err(g, num) < 1e-6


def test_adam_first_step_is_lr_times_sign():
    for g in (3.0, -0.002, 1e4):
        p = [np.array([1.0])]
        adam_step(p, [np.array([g])], st := AdamState())
        assert p[0][0] == pytest.approx(1.0 - 1e-3 * np.sign(g), abs=1e-8)
        assert st.step == 1


def test_adam_zero_gradient_noop():
    p = [np.array([0.5, -2.0])]
    adam_step(p, [np.zeros(2)], AdamState())
    np.testing.assert_array_equal(p[0], [0.5, -2.0])


def test_adam_two_steps_closed_form():
    g, lr, b1, b2, eps = 0.7, 1e-3, 0.9, 0.999, 1e-8
    p = [np.array([0.0])]
    st = AdamState()
    adam_step(p, [np.array([g])], st)
    first = -p[0][0]
    adam_step(p, [np.array([g])], st)
    second = -p[0][0] - first
    # constant gradient: m_hat = g, v_hat = g^2 at every step
    expected = lr * g / (abs(g) + eps)
    assert st.step == 2
    assert first == pytest.approx(expected, rel=1e-12)
    assert second == pytest.approx(expected, rel=1e-9)
    assert second <= first + 1e-9


def test_determinism(rng):
    x = rng.normal(size=(300, 6))
    cfg = AutoencoderConfig(widths=(4,), latent_dim=3, epochs=5, seed=11)
    a, _ = train_autoencoder(x, x[:50], cfg)
    b, _ = train_autoencoder(x, x[:50], cfg)
    for p, q in zip(a.params(), b.params()):
        assert p.tobytes() == q.tobytes()


def test_linear_autoencoder_recovers_subspace(rng):
    basis = rng.normal(size=(2, 6))
    x = rng.normal(size=(1000, 2)) @ basis
    ae = init_autoencoder(6, widths=(), latent_dim=2, rng=rng)
    st = AdamState(lr=1e-2)
    params = ae.params()
    from zdt.neural_core import autoencoder_step
    for _ in range(3000):
        batch = x[rng.integers(len(x), size=128)]
        loss, grads = autoencoder_step(ae, batch)
        adam_step(params, grads, st)
    assert ae.reconstruction_loss(x).mean() < 1e-3


def test_early_stopping_keeps_best():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(200, 4))
    cfg = AutoencoderConfig(widths=(3,), latent_dim=2, epochs=200, patience=2, min_delta=1.0, seed=0)
    _, hist = train_autoencoder(x, x, cfg)
    assert len(hist) == 3
