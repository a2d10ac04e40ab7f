import math

import numpy as np
import pytest

from oracles import conv2d_naive, finite_diff_grad, max_rel_err
from ssc3od import nn
from ssc3od.pillars import NUM_FEATURES


def test_conv_identity_kernel(rng):
    x = rng.normal(size=(3, 5, 6))
    w = np.eye(3).reshape(3, 3, 1, 1)
    np.testing.assert_array_equal(nn.conv2d(x, w), x)


def test_conv_ones_kernel_on_constant():
    x = np.full((1, 6, 6), 2.5)
    out = nn.conv2d(x, np.ones((1, 1, 3, 3)))
    assert out.shape == (1, 4, 4)
    np.testing.assert_allclose(out, 9 * 2.5)


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 2), (1, 2, 5)])
def test_conv_matches_naive(rng, stride, pad, k):
    x = rng.normal(size=(2, 5, 5))
    w = rng.normal(size=(3, 2, k, k))
    b = rng.normal(size=3)
    np.testing.assert_allclose(nn.conv2d(x, w, b, stride, pad), conv2d_naive(x, w, b, stride, pad), atol=1e-12)


def test_conv_shape_mismatch():
    with pytest.raises(ValueError):
        nn.conv2d(np.zeros((2, 4, 4)), np.zeros((1, 3, 3, 3)))
    with pytest.raises(ValueError):
        nn.deconv2d(np.zeros((2, 4, 4)), np.zeros((3, 1, 2, 2)))
    with pytest.raises(ValueError):
        nn.conv2d(np.zeros((1, 2, 2)), np.zeros((1, 1, 5, 5)))


def test_deconv_identity_and_shape(rng):
    x = rng.normal(size=(2, 4, 5))
    np.testing.assert_allclose(nn.deconv2d(x, np.eye(2).reshape(2, 2, 1, 1)), x)
    assert nn.deconv2d(x, rng.normal(size=(2, 3, 2, 2)), stride=2).shape == (3, 8, 10)
    assert nn.deconv2d(x, rng.normal(size=(2, 1, 4, 4)), stride=2, padding=1).shape == (1, 8, 10)


@pytest.mark.parametrize("hx,k,s,p", [(8, 4, 2, 1), (6, 3, 1, 1), (7, 3, 2, 1), (9, 3, 1, 0), (8, 2, 2, 0)])
def test_deconv_is_adjoint_of_conv(rng, hx, k, s, p):
    cin, cout = 3, 2
    w = rng.normal(size=(cout, cin, k, k))
    x = rng.normal(size=(cin, hx, hx))
    y_shape = nn.conv2d(x, w, stride=s, padding=p).shape
    y = rng.normal(size=y_shape)
    dx = nn.deconv2d(y, w, stride=s, padding=p)
    if dx.shape != x.shape:
        pytest.skip("shapes need output padding")
    lhs = np.sum(nn.conv2d(x, w, stride=s, padding=p) * y)
    rhs = np.sum(x * dx)
    assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


def _check_layer(layer, x, rng, tol=1e-5):
    """Finite-difference check of input and parameter gradients of sum(out * proj)."""
    out = layer.forward(x)
    proj = rng.normal(size=out.shape)
    for p in layer.params():
        p.zero_grad()
    dx = layer.backward(proj)

    def f():
        return float(np.sum(layer.forward(x) * proj))

    errs = []
    if dx is not None:
        errs.append(max_rel_err(dx, finite_diff_grad(f, x)))
    for p in layer.params():
        errs.append(max_rel_err(p.grad, finite_diff_grad(f, p.data)))
    return max(errs)


@pytest.mark.parametrize("seed", range(4))
def test_conv_layer_gradcheck(seed):
    rng = np.random.default_rng(seed)
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    layer = nn.Conv2d("c", cin, cout, k, stride, rng=rng)
    layer.bias.data[:] = rng.normal(size=cout)
    x = rng.normal(size=(2, int(rng.integers(3, 7)), int(rng.integers(3, 7)), cin))
    assert _check_layer(layer, x, rng) < 1e-5


@pytest.mark.parametrize("seed", range(4))
def test_deconv_layer_gradcheck(seed):
    rng = np.random.default_rng(100 + seed)
    layer = nn.Deconv2d("d", 3, 2, 4, stride=2, padding=1, rng=rng)
    layer.bias.data[:] = rng.normal(size=2)
    x = rng.normal(size=(2, 3, 4, 3))
    assert _check_layer(layer, x, rng) < 1e-5


def test_activation_gradcheck(rng):
    x = rng.normal(size=(2, 3, 3, 2))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    assert _check_layer(nn.LeakyReLU(), x, rng) < 1e-5
    assert _check_layer(nn.Sigmoid(), x, rng) < 1e-5


def test_backward_constant_and_quadratic(rng):
    seq = nn.Sequential([nn.Conv2d("c", 2, 2, 3, rng=rng)])
    x = rng.normal(size=(1, 4, 4, 2))
    out = seq.forward(x)
    grads = nn.backward(seq, np.zeros_like(out))
    assert all(np.all(g == 0) for g in grads.values())
    # 0.5 * ||w||^2 through an identity 1x1 conv on a one-hot input: d/dw = w
    v = rng.normal(size=3)
    lay = nn.Conv2d("q", 3, 3, 1, rng=rng)
    lay.weight.data[...] = np.diag(v).reshape(3, 3, 1, 1)
    lay.forward(np.eye(3).reshape(3, 1, 1, 3))
    lay.weight.zero_grad()
    lay.backward(lay.forward(np.eye(3).reshape(3, 1, 1, 3)))
    np.testing.assert_allclose(np.diag(lay.weight.grad[:, :, 0, 0]), v)


def test_bce_cases(rng):
    eps = 1e-9
    t = np.array([0.0, 1.0, 1.0, 0.0])
    assert nn.bce_loss(np.where(t > 0, 1 - eps, eps), t) < 2.1e-8
    assert nn.bce_loss(np.full(4, 0.5), t) == pytest.approx(math.log(2), abs=1e-15)
    p = rng.uniform(0.01, 0.99, 20)
    tt = (rng.random(20) > 0.5).astype(float)
    direct = -sum(ti * math.log(pi) + (1 - ti) * math.log(1 - pi) for pi, ti in zip(p, tt)) / 20
    assert nn.bce_loss(p, tt) == pytest.approx(direct, rel=1e-12)
    _, g = nn.bce_loss(p, tt, with_grad=True)

    def f():
        return nn.bce_loss(p, tt)

    assert max_rel_err(g, finite_diff_grad(f, p)) < 1e-5


def test_bce_with_logits_matches_prob_form(rng):
    z = rng.normal(scale=3, size=50)
    t = (rng.random(50) > 0.7).astype(float)
    loss, g = nn.bce_with_logits(z, t)
    assert loss == pytest.approx(nn.bce_loss(nn.sigmoid(z), t, reduction="sum"), rel=1e-10)
    assert max_rel_err(g, finite_diff_grad(lambda: nn.bce_with_logits(z, t, with_grad=False), z)) < 1e-5


def test_smooth_l1(rng):
    assert nn.smooth_l1(np.ones(3), np.ones(3)) == 0.0
    assert nn.smooth_l1(np.array([0.5]), np.array([0.0]), beta=1.0) == pytest.approx(0.125)
    assert nn.smooth_l1(np.array([2.0]), np.array([0.0]), beta=1.0) == pytest.approx(1.5)
    p = rng.normal(scale=2, size=30)
    t = rng.normal(size=30)
    _, g = nn.smooth_l1(p, t, with_grad=True)
    fd = finite_diff_grad(lambda: nn.smooth_l1(p, t), p)
    assert max_rel_err(g, fd) < 1e-6


def test_adam_zero_grad_and_limit():
    w = np.array([1.0, -2.0])
    state = {"m": np.array([0.5, 0.5]), "v": np.array([1.0, 1.0]), "t": 3}
    out = nn.adam_step(w, np.zeros(2), state)
    np.testing.assert_allclose(state["m"], [0.45, 0.45])
    np.testing.assert_allclose(state["v"], [0.999, 0.999])
    # moments decay but a nonzero first moment still moves the parameter
    assert np.all(np.isfinite(out))
    out = nn.adam_step(w, np.zeros(2), {})
    np.testing.assert_array_equal(out, w)
    st = {}
    p = np.array([0.0])
    for _ in range(200):
        prev = p.copy()
        p = nn.adam_step(p, np.array([3.0]), st, lr=0.01)
    assert (prev - p)[0] == pytest.approx(0.01, rel=1e-6)


def test_adam_three_steps_hand_unrolled():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    grads = [1.0, -2.0, 0.5]
    # unrolled by hand
    m = v = 0.0
    w = 1.0
    expected = []
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        expected.append(w)
    # step 1 in closed form: m̂ = g, v̂ = g², so w1 = 1 - 0.1 * 1/(1+1e-8)
    assert expected[0] == pytest.approx(1 - 0.1 / (1 + 1e-8), abs=1e-15)
    st = {}
    p = np.array([1.0])
    opt_t = nn.Tensor("w", np.array([1.0]))
    opt = nn.Adam([opt_t], lr=lr)
    for g, e in zip(grads, expected):
        p = nn.adam_step(p, np.array([g]), st, lr=lr)
        opt_t.grad[:] = g
        opt.step()
        assert p[0] == pytest.approx(e, abs=1e-15)
        assert opt_t.data[0] == pytest.approx(e, abs=1e-15)


def test_checkpoint_roundtrip(tmp_path, rng):
    arrays = {"a.weight": rng.normal(size=(2, 3, 1, 1)), "b": rng.normal(size=4), "s": np.array(3.5)}
    path = tmp_path / "m.ckpt"
    nn.save_checkpoint(path, arrays)
    blob = path.read_bytes()
    assert blob[:4] == b"SSC3" and blob[4:6] == (1).to_bytes(2, "little")
    back = nn.load_checkpoint(path)
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].shape == np.shape(arrays[k])
        np.testing.assert_array_equal(back[k], arrays[k])
    path.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ValueError):
        nn.load_checkpoint(path)


def test_float32_layers_stay_float32(rng):
    enc = nn.build_encoder(rng, dtype=np.float32)
    x = rng.normal(size=(1, 8, 8, NUM_FEATURES)).astype(np.float32)
    y = enc.forward(x)
    assert y.dtype == np.float32 and y.shape == (1, 4, 4, 64)
    enc.backward(np.ones_like(y))
    assert all(p.grad.dtype == np.float32 for p in enc.params())
