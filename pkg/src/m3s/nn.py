"""A small numpy neural-network engine: conv2d, maxpool2d, relu, dense and
flatten layers with hand-written reverse-mode gradients, plain SGD, and a
central-difference gradient checker.

All activations are batched float64 arrays; images are ``(N, C, H, W)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFinite, ShapeError


def out_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


@dataclass
class Param:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0.0


# ------------------------------------------------------------------ functional

def conv2d_forward(x, w, b, stride=1, padding=0):
    """Cross-correlation with zero padding.

    x: (N, C_in, H, W); w: (C_out, C_in, f, f); b: (C_out,).
    Returns ``(out, cache)`` with out of shape (N, C_out, H', W').
    """
    if x.ndim != 4 or w.ndim != 4 or b.ndim != 1:
        raise ShapeError(f"conv2d expects 4-D input/weights and 1-D bias, got {x.shape}, {w.shape}, {b.shape}")
    n, c, h, wd = x.shape
    c_out, c_in, f, f2 = w.shape
    if c != c_in or f != f2 or b.shape[0] != c_out:
        raise ShapeError(f"incompatible conv2d shapes {x.shape}, {w.shape}, {b.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError("stride must be >= 1 and padding >= 0")
    ho, wo = out_size(h, f, stride, padding), out_size(wd, f, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {f} does not fit a {h}x{wd} input with padding {padding}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = sliding_window_view(xp, (f, f), axis=(2, 3))[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # win: (N, C, H', W', f, f)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, H', W', C_out)
    out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
    return np.ascontiguousarray(out), (x.shape, xp.shape, win, w, stride, padding)


def conv2d_backward(dout, cache):
    """Gradients ``(dx, dw, db)`` of a conv2d_forward call."""
    x_shape, xp_shape, win, w, stride, padding = cache
    n, c_out, ho, wo = dout.shape
    if (n, ho, wo) != (win.shape[0], win.shape[2], win.shape[3]) or c_out != w.shape[0]:
        raise ShapeError(f"upstream gradient {dout.shape} does not match forward output")
    f = w.shape[2]
    db = dout.sum(axis=(0, 2, 3))
    dw = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))  # (C_out, C, f, f)
    dcol = np.tensordot(dout, w, axes=([1], [0]))  # (N, H', W', C, f, f)
    dcol = dcol.transpose(0, 3, 1, 2, 4, 5)
    dxp = np.zeros(xp_shape)
    hs, ws = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    for i in range(f):
        for j in range(f):
            dxp[:, :, i : i + hs : stride, j : j + ws : stride] += dcol[..., i, j]
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return dxp, dw, db


def maxpool2d_forward(x, kernel=2, stride=2):
    """Windowed max; ties resolve to the first element in row-major order."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = out_size(h, kernel, stride, 0), out_size(w, kernel, stride, 0)
    if ho < 1 or wo < 1:
        raise ShapeError(f"pool window {kernel} larger than {h}x{w} input")
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)  # argmax returns the first maximal index
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg, kernel, stride)


def maxpool2d_backward(dout, cache):
    x_shape, arg, kernel, stride = cache
    if dout.shape != arg.shape:
        raise ShapeError(f"upstream gradient {dout.shape} does not match pooled output {arg.shape}")
    dx = np.zeros(x_shape)
    ho, wo = arg.shape[2:]
    hs, ws = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    for k in range(kernel * kernel):
        i, j = divmod(k, kernel)
        dx[:, :, i : i + hs : stride, j : j + ws : stride] += np.where(arg == k, dout, 0.0)
    return dx


def dense_forward(x, w, b):
    """x: (N, n_in) or (n_in,); w: (n_out, n_in); b: (n_out,)."""
    if w.ndim != 2 or b.shape != (w.shape[0],) or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"incompatible dense shapes {x.shape}, {w.shape}, {b.shape}")
    return x @ w.T + b, x


def dense_backward(dout, x, w):
    x2, d2 = np.atleast_2d(x), np.atleast_2d(dout)
    dw = d2.T @ x2
    db = d2.sum(axis=0)
    dx = dout @ w
    return dx, dw, db


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dp, p):
    """Vector-Jacobian product of softmax given its output ``p``."""
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, target):
    """Loss ``-log softmax(logits)[target]`` and its gradient.

    Batched logits ``(N, K)`` give the mean loss and a gradient scaled by 1/N.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[-1] < 2:
        raise ShapeError("need at least two classes")
    if not np.all(np.isfinite(z)):
        raise NonFinite("logits contain NaN or Inf")
    shifted = z - z.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - log_norm
    onehot = np.zeros_like(z)
    if z.ndim == 1:
        onehot[int(target)] = 1.0
        return float(-logp[int(target)]), np.exp(logp) - onehot
    target = np.asarray(target, dtype=int)
    onehot[np.arange(z.shape[0]), target] = 1.0
    n = z.shape[0]
    loss = -logp[np.arange(n), target].mean()
    return float(loss), (np.exp(logp) - onehot) / n


def sgd_step(params, grads, lr):
    """In-place ``p -= lr * g`` for paired arrays; returns ``params``."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for p, g in zip(params, grads, strict=True):
        if p.shape != g.shape:
            raise ShapeError(f"parameter {p.shape} and gradient {g.shape} differ")
        p -= lr * g
    return params


# ---------------------------------------------------------------------- layers

class Layer:
    kind = ""

    def params(self):
        return []

    def spec(self):
        return {"kind": self.kind}

    def output_shape(self, shape):
        return shape

    def macs(self, shape):
        return 0


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0, rng=None, name="conv"):
        if kernel < 1 or stride < 1 or padding < 0:
            raise ShapeError("kernel and stride must be >= 1, padding >= 0")
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.padding = kernel, stride, padding
        fan_in = in_channels * kernel * kernel
        bound = np.sqrt(6.0 / fan_in)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Param(f"{name}.weight", rng.uniform(-bound, bound, (out_channels, in_channels, kernel, kernel)))
        self.bias = Param(f"{name}.bias", np.zeros(out_channels))
        self._cache = None

    def params(self):
        return [self.weight, self.bias]

    def spec(self):
        return {"kind": self.kind, "in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel": self.kernel, "stride": self.stride, "padding": self.padding}

    def forward(self, x):
        out, self._cache = conv2d_forward(x, self.weight.value, self.bias.value, self.stride, self.padding)
        return out

    def backward(self, dout):
        dx, dw, db = conv2d_backward(dout, self._cache)
        self.weight.grad += dw
        self.bias.grad += db
        return dx

    def output_shape(self, shape):
        c, h, w = shape
        return (self.out_channels, out_size(h, self.kernel, self.stride, self.padding),
                out_size(w, self.kernel, self.stride, self.padding))

    def macs(self, shape):
        _, ho, wo = self.output_shape(shape)
        return self.out_channels * ho * wo * self.in_channels * self.kernel ** 2


class MaxPool2D(Layer):
    kind = "maxpool2d"

    def __init__(self, kernel=2, stride=2):
        if kernel < 1 or stride < 1:
            raise ShapeError("kernel and stride must be >= 1")
        self.kernel, self.stride = kernel, stride
        self._cache = None

    def spec(self):
        return {"kind": self.kind, "kernel": self.kernel, "stride": self.stride}

    def forward(self, x):
        out, self._cache = maxpool2d_forward(x, self.kernel, self.stride)
        return out

    def backward(self, dout):
        return maxpool2d_backward(dout, self._cache)

    def output_shape(self, shape):
        c, h, w = shape
        return (c, out_size(h, self.kernel, self.stride, 0), out_size(w, self.kernel, self.stride, 0))


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dout):
        return np.where(self._mask, dout, 0.0)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)

    def output_shape(self, shape):
        return (int(np.prod(shape)),)


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features, out_features, rng=None, name="dense"):
        self.in_features, self.out_features = in_features, out_features
        bound = np.sqrt(6.0 / in_features)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Param(f"{name}.weight", rng.uniform(-bound, bound, (out_features, in_features)))
        self.bias = Param(f"{name}.bias", np.zeros(out_features))

    def params(self):
        return [self.weight, self.bias]

    def spec(self):
        return {"kind": self.kind, "in_features": self.in_features, "out_features": self.out_features}

    def forward(self, x):
        out, self._x = dense_forward(x, self.weight.value, self.bias.value)
        return out

    def backward(self, dout):
        dx, dw, db = dense_backward(dout, self._x, self.weight.value)
        self.weight.grad += dw
        self.bias.grad += db
        return dx

    def output_shape(self, shape):
        return (self.out_features,)

    def macs(self, shape):
        return self.in_features * self.out_features


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, layers):
        self.layers = list(layers)

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def spec(self):
        return {"kind": self.kind, "layers": [layer.spec() for layer in self.layers]}

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def output_shape(self, shape):
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def macs(self, shape):
        total = 0
        for layer in self.layers:
            total += layer.macs(shape)
            shape = layer.output_shape(shape)
        return total


def layer_from_spec(spec, rng=None, name="layer"):
    kind = spec["kind"]
    if kind == "conv2d":
        return Conv2D(spec["in_channels"], spec["out_channels"], spec["kernel"], spec["stride"], spec["padding"], rng, name)
    if kind == "maxpool2d":
        return MaxPool2D(spec["kernel"], spec["stride"])
    if kind == "relu":
        return ReLU()
    if kind == "flatten":
        return Flatten()
    if kind == "dense":
        return Dense(spec["in_features"], spec["out_features"], rng, name)
    if kind == "sequential":
        return Sequential(layer_from_spec(s, rng, f"{name}.{k}") for k, s in enumerate(spec["layers"]))
    raise ValueError(f"unknown layer kind {kind!r}")


# ------------------------------------------------------------- gradient check

def relative_error(analytic, numeric):
    """Norm-wise relative error ``|a - n| / max(|a| + |n|, tiny)``."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    denom = np.linalg.norm(a) + np.linalg.norm(n)
    if denom < 1e-300:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def numeric_grad(loss_fn, array, eps=1e-5):
    """Central differences of ``loss_fn()`` w.r.t. every entry of ``array`` (mutated in place and restored)."""
    grad = np.zeros_like(array)
    flat, gflat = array.reshape(-1), grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        up = loss_fn()
        flat[k] = orig - eps
        down = loss_fn()
        flat[k] = orig
        gflat[k] = (up - down) / (2 * eps)
    return grad


def finite_diff_check(loss_fn, blocks, epsilon=1e-5, tolerance=None):
    """Compare analytic gradients against central differences.

    ``loss_fn()`` must recompute the scalar loss from the current contents of
    the arrays in ``blocks``, a mapping ``name -> (array, analytic_grad)``.
    Returns ``{"errors": {name: rel_err}, "max_error": float, "passed": bool}``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    errors = {}
    for name, (array, analytic) in blocks.items():
        errors[name] = relative_error(analytic, numeric_grad(loss_fn, array, epsilon))
    worst = max(errors.values()) if errors else 0.0
    return {"errors": errors, "max_error": worst, "passed": tolerance is None or worst < tolerance}
