import numpy as np
import pytest

from m3s.errors import NonFinite, ShapeError
from m3s.nn import (
    Conv2D,
    Dense,
    MaxPool2D,
    Sequential,
    ReLU,
    Flatten,
    conv2d_backward,
    conv2d_forward,
    dense_backward,
    dense_forward,
    finite_diff_check,
    layer_from_spec,
    maxpool2d_backward,
    maxpool2d_forward,
    out_size,
    sgd_step,
    softmax,
    softmax_cross_entropy,
)


def naive_conv(x, w, b, s, p):
    c_out, c_in, f, _ = w.shape
    _, h, wd = x.shape
    xp = np.zeros((c_in, h + 2 * p, wd + 2 * p))
    xp[:, p:p + h, p:p + wd] = x
    ho, wo = (h + 2 * p - f) // s + 1, (wd + 2 * p - f) // s + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = b[o]
                for c in range(c_in):
                    for di in range(f):
                        for dj in range(f):
                            acc += xp[c, i * s + di, j * s + dj] * w[o, c, di, dj]
                out[o, i, j] = acc
    return out


def naive_maxpool(x, f, s):
    c, h, w = x.shape
    ho, wo = (h - f) // s + 1, (w - f) // s + 1
    out = np.empty((c, ho, wo))
    for k in range(c):
        for i in range(ho):
            for j in range(wo):
                out[k, i, j] = max(x[k, i * s + a, j * s + b] for a in range(f) for b in range(f))
    return out


# --------------------------------------------------------------------- conv2d

def test_conv_sum_of_ones():
    out, _ = conv2d_forward(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1))
    assert out.tolist() == [[[[9.0]]]]


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((1, 1, 6, 5))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1
    out, _ = conv2d_forward(x, w, np.zeros(1), 1, 1)
    np.testing.assert_array_equal(out, x)


@pytest.mark.parametrize("s, p, f", [(1, 0, 3), (1, 1, 3), (2, 0, 2), (2, 1, 3), (1, 2, 5), (3, 1, 2)])
def test_conv_matches_naive(s, p, f):
    rng = np.random.default_rng(s * 10 + p + f)
    x = rng.standard_normal((2, 2, 8, 8))
    w = rng.standard_normal((4, 2, f, f))
    b = rng.standard_normal(4)
    out, _ = conv2d_forward(x, w, b, s, p)
    for n in range(2):
        np.testing.assert_allclose(out[n], naive_conv(x[n], w, b, s, p), atol=1e-12)


def test_conv_shape_errors():
    with pytest.raises(ShapeError):
        conv2d_forward(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(ShapeError):
        conv2d_forward(np.ones((1, 1, 2, 2)), np.ones((1, 1, 3, 3)), np.zeros(1))
    _, cache = conv2d_forward(np.ones((1, 1, 4, 4)), np.ones((1, 1, 3, 3)), np.zeros(1))
    with pytest.raises(ShapeError):
        conv2d_backward(np.ones((1, 1, 3, 3)), cache)


def test_conv_backward_zero_and_single_pixel():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    out, cache = conv2d_forward(x, w, np.zeros(3), 1, 0)
    dx, dw, db = conv2d_backward(np.zeros_like(out), cache)
    assert not dx.any() and not dw.any() and not db.any()
    g = np.zeros_like(out)
    g[0, 1, 2, 3] = 1.0
    dx, dw, db = conv2d_backward(g, cache)
    np.testing.assert_array_equal(dw[1], x[0, :, 2:5, 3:6])
    assert not dw[[0, 2]].any()
    assert db.tolist() == [0.0, 1.0, 0.0]


@pytest.mark.parametrize("seed", range(10))
def test_conv_gradcheck(seed):
    rng = np.random.default_rng(seed)
    s, p = [(1, 1), (2, 0), (1, 0)][seed % 3]
    x = rng.standard_normal((2, 2, 7, 7))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    r = rng.standard_normal(conv2d_forward(x, w, b, s, p)[0].shape)
    loss = lambda: float((conv2d_forward(x, w, b, s, p)[0] * r).sum())
    dx, dw, db = conv2d_backward(r, conv2d_forward(x, w, b, s, p)[1])
    report = finite_diff_check(loss, {"x": (x, dx), "w": (w, dw), "b": (b, db)}, 1e-5, 1e-4)
    assert report["passed"], report


@pytest.mark.parametrize("h, f, s, p", [(32, 3, 1, 1), (64, 5, 1, 2), (16, 2, 2, 0), (9, 4, 3, 1), (7, 7, 1, 0)])
def test_output_size_formula(h, f, s, p):
    out, _ = conv2d_forward(np.zeros((1, 1, h, h)), np.zeros((1, 1, f, f)), np.zeros(1), s, p)
    assert out.shape[2:] == (out_size(h, f, s, p),) * 2 == ((h + 2 * p - f) // s + 1,) * 2
    layer = Conv2D(1, 2, f, s, p)
    assert layer.output_shape((1, h, h)) == (2,) + out.shape[2:]


# -------------------------------------------------------------------- maxpool

def test_maxpool_small():
    out, _ = maxpool2d_forward(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), 2, 2)
    assert out.tolist() == [[[[4.0]]]]


def test_maxpool_ties_route_to_first_element():
    x = np.full((1, 1, 4, 4), 2.0)
    out, cache = maxpool2d_forward(x, 2, 2)
    assert np.all(out == 2.0)
    dx = maxpool2d_backward(np.ones_like(out), cache)
    expected = np.zeros((4, 4))
    expected[::2, ::2] = 1.0
    np.testing.assert_array_equal(dx[0, 0], expected)


@pytest.mark.parametrize("f, s", [(2, 2), (3, 1), (3, 2), (2, 3)])
def test_maxpool_matches_naive(f, s):
    x = np.random.default_rng(f + s).standard_normal((2, 3, 9, 9))
    out, _ = maxpool2d_forward(x, f, s)
    for n in range(2):
        np.testing.assert_array_equal(out[n], naive_maxpool(x[n], f, s))


@pytest.mark.parametrize("seed", range(10))
def test_maxpool_routing_gradcheck(seed):
    rng = np.random.default_rng(100 + seed)
    f, s = [(2, 2), (3, 1)][seed % 2]
    x = rng.standard_normal((1, 2, 6, 6))
    out, cache = maxpool2d_forward(x, f, s)
    r = rng.standard_normal(out.shape)
    dx = maxpool2d_backward(r, cache)
    loss = lambda: float((maxpool2d_forward(x, f, s)[0] * r).sum())
    assert finite_diff_check(loss, {"x": (x, dx)}, 1e-5, 1e-4)["passed"]


# ---------------------------------------------------------------------- dense

def test_dense_identity_and_bias():
    x = np.array([1.0, -2.0, 3.0])
    assert dense_forward(x, np.eye(3), np.zeros(3))[0].tolist() == x.tolist()
    assert dense_forward(x, np.zeros((2, 3)), np.array([4.0, 5.0]))[0].tolist() == [4.0, 5.0]
    with pytest.raises(ShapeError):
        dense_forward(x, np.zeros((2, 4)), np.zeros(2))


@pytest.mark.parametrize("seed", range(10))
def test_dense_gradcheck(seed):
    rng = np.random.default_rng(200 + seed)
    x = rng.standard_normal((3, 6))
    w = rng.standard_normal((4, 6))
    b = rng.standard_normal(4)
    r = rng.standard_normal((3, 4))
    loss = lambda: float((dense_forward(x, w, b)[0] * r).sum())
    dx, dw, db = dense_backward(r, x, w)
    assert finite_diff_check(loss, {"x": (x, dx), "w": (w, dw), "b": (b, db)}, 1e-5, 1e-4)["passed"]


# -------------------------------------------------------------------- softmax

def test_softmax_ce_examples():
    loss, grad = softmax_cross_entropy(np.zeros(4), 2)
    assert loss == pytest.approx(np.log(4), abs=1e-12)
    loss, grad = softmax_cross_entropy(np.array([1000.0, 0, 0, 0]), 0)
    assert np.isfinite(loss) and loss < 1e-12 and np.all(np.isfinite(grad))
    with pytest.raises(NonFinite):
        softmax_cross_entropy(np.array([np.nan, 0.0]), 0)
    with pytest.raises(ShapeError):
        softmax_cross_entropy(np.array([1.0]), 0)


@pytest.mark.parametrize("seed", range(10))
def test_softmax_ce_gradcheck(seed):
    rng = np.random.default_rng(300 + seed)
    z = rng.standard_normal(4) * 3
    t = int(rng.integers(4))
    loss, grad = softmax_cross_entropy(z, t)
    assert abs(grad.sum()) < 1e-12
    p = softmax(z)
    assert abs(p.sum() - 1) < 1e-12 and np.all(p > 0)
    report = finite_diff_check(lambda: softmax_cross_entropy(z, t)[0], {"z": (z, grad)}, 1e-5, 1e-4)
    assert report["passed"]


def test_softmax_ce_batch_is_mean():
    z = np.random.default_rng(1).standard_normal((5, 4))
    t = np.array([0, 1, 2, 3, 0])
    loss, grad = softmax_cross_entropy(z, t)
    singles = [softmax_cross_entropy(z[k], t[k]) for k in range(5)]
    assert loss == pytest.approx(np.mean([s[0] for s in singles]), abs=1e-14)
    np.testing.assert_allclose(grad, np.stack([s[1] for s in singles]) / 5, atol=1e-15)


# ------------------------------------------------------------------------ sgd

def test_sgd_examples():
    p = np.array([1.0])
    sgd_step([p], [np.array([1.0])], 0.001)
    assert p[0] == pytest.approx(0.999, abs=1e-15)
    q = np.array([2.0, 3.0])
    sgd_step([q], [np.zeros(2)], 0.1)
    assert q.tolist() == [2.0, 3.0]
    a, b, g = np.array([0.3]), np.array([0.3]), np.array([0.7])
    sgd_step([a], [g], 0.01)
    sgd_step([b], [g], 0.005)
    sgd_step([b], [g], 0.005)
    assert a[0] == pytest.approx(b[0], abs=1e-15)
    with pytest.raises(ShapeError):
        sgd_step([np.zeros(2)], [np.zeros(3)], 0.1)


# --------------------------------------------------------------------- layers

def test_layer_stack_gradcheck_and_determinism():
    rng = np.random.default_rng(7)
    net = Sequential([Conv2D(1, 3, 3, 1, 1, rng), ReLU(), MaxPool2D(2, 2), Flatten(), Dense(3 * 4 * 4, 4, rng)])
    x = rng.standard_normal((2, 1, 8, 8))
    r = rng.standard_normal((2, 4))
    out1 = net.forward(x)
    assert out1.tobytes() == net.forward(x).tobytes()
    for p in net.params():
        p.zero_grad()
    net.backward(r)
    loss = lambda: float((net.forward(x) * r).sum())
    blocks = {p.name: (p.value, p.grad.copy()) for p in net.params()}
    assert finite_diff_check(loss, blocks, 1e-5, 1e-4)["passed"]


def test_layer_spec_round_trip():
    net = Sequential([Conv2D(1, 2, 3, 1, 1), ReLU(), MaxPool2D(2, 2), Flatten(), Dense(8, 4)])
    assert layer_from_spec(net.spec()).spec() == net.spec()
    assert net.macs((1, 4, 4)) == 2 * 4 * 4 * 9 + 8 * 4
