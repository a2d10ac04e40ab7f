"""Dense NCHW kernels with hand-written backward passes, losses and Adam.

Every layer keeps what it needs from ``forward`` and consumes it in
``backward``; a model is a fixed sequence of such layers, so the reverse
pass is just the sequence walked backwards.
"""
from __future__ import annotations

import math
import struct
from collections import OrderedDict
from typing import Iterable

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .pillars import NUM_FEATURES

DTYPE = np.float64
PROB_EPS = 1e-9
LEAKY_SLOPE = 0.1


class Tensor:
    """Named parameter array with a gradient buffer of the same shape."""

    def __init__(self, name: str, data: np.ndarray, dtype=DTYPE):
        self.name = name
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad = np.zeros_like(self.data)

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad.fill(0.0)

    def __repr__(self):
        return f"Tensor({self.name!r}, shape={self.data.shape})"


# ----------------------------------------------------------------- im2col --
# Layers work on channels-last (N, H, W, C) arrays; the functional conv2d /
# deconv2d entry points accept (C, H, W) or (N, C, H, W) like the rest of the
# package and convert at the boundary.

def _pad(x, p):
    if p == 0:
        return np.ascontiguousarray(x)
    n, h, w, c = x.shape
    out = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
    out[:, p:p + h, p:p + w] = x
    return out


def _im2col(xp, kh, kw, stride, ho, wo):
    """(N, Hp, Wp, C) -> (N*Ho*Wo, kh*kw*C) patch matrix."""
    n, _, _, c = xp.shape
    sn, sh, sw, sc = xp.strides
    view = as_strided(xp, (n, ho, wo, kh, kw, c), (sn, sh * stride, sw * stride, sh, sw, sc), writeable=False)
    return view.reshape(n * ho * wo, kh * kw * c)


def _col2im(cols, shape_p, kh, kw, stride, ho, wo):
    """Adjoint of ``_im2col``: scatter-add patches into an (N, Hp, Wp, C) array."""
    n, _, _, c = shape_p
    out = np.zeros(shape_p, dtype=cols.dtype)
    cols = cols.reshape(n, ho, wo, kh, kw, c)
    for u in range(kh):
        for v in range(kw):
            out[:, u:u + stride * ho:stride, v:v + stride * wo:stride] += cols[:, :, :, u, v]
    return out


def conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _conv_wmat(weight):
    # (O, C, kh, kw) -> (kh*kw*C, O), matching the patch layout
    o = weight.shape[0]
    return weight.transpose(2, 3, 1, 0).reshape(-1, o)


def _deconv_wmat(weight):
    # (Ci, Co, kh, kw) -> (Ci, kh*kw*Co)
    return weight.transpose(0, 2, 3, 1).reshape(weight.shape[0], -1)


def _conv_nhwc(x, weight, bias, stride, padding):
    o, c, kh, kw = weight.shape
    if x.shape[-1] != c:
        raise ValueError(f"conv2d: input has {x.shape[-1]} channels, kernel expects {c}")
    n, h, w, _ = x.shape
    ho = conv_out_size(h, kh, stride, padding)
    wo = conv_out_size(w, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {(h, w)}")
    xp = _pad(x, padding)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    out = cols @ _conv_wmat(weight)
    if bias is not None:
        out += bias
    return out.reshape(n, ho, wo, o), cols, xp.shape


def _deconv_nhwc(x, weight, bias, stride, padding):
    ci, co, kh, kw = weight.shape
    if x.shape[-1] != ci:
        raise ValueError(f"deconv2d: input has {x.shape[-1]} channels, kernel expects {ci}")
    n, h, w, _ = x.shape
    hf, wf = (h - 1) * stride + kh, (w - 1) * stride + kw
    if hf - 2 * padding <= 0 or wf - 2 * padding <= 0:
        raise ValueError("deconv2d: padding larger than output")
    cols = x.reshape(n * h * w, ci) @ _deconv_wmat(weight)
    full = _col2im(cols, (n, hf, wf, co), kh, kw, stride, h, w)
    out = full[:, padding:hf - padding, padding:wf - padding]
    if bias is not None:
        out = out + bias
    return np.ascontiguousarray(out)


def _to_nhwc(x):
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 3:
        return x.transpose(1, 2, 0)[None], True
    if x.ndim != 4:
        raise ValueError(f"expected CHW or NCHW input, got shape {x.shape}")
    return x.transpose(0, 2, 3, 1), False


def _from_nhwc(y, squeeze):
    y = np.ascontiguousarray(y.transpose(0, 3, 1, 2))
    return y[0] if squeeze else y


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of (C, H, W) or (N, C, H, W) input with (O, C, k, k) weights."""
    xb, squeeze = _to_nhwc(x)
    out, _, _ = _conv_nhwc(np.ascontiguousarray(xb), np.asarray(weight, dtype=DTYPE), bias, stride, padding)
    return _from_nhwc(out, squeeze)


def deconv2d(x, weight, bias=None, stride=1, padding=0):
    """Transposed convolution; weight is (C_in, C_out, k, k).

    With the same weight array this is the exact adjoint of ``conv2d``
    (weight read as (O, C, k, k)) for the same stride and padding.
    """
    xb, squeeze = _to_nhwc(x)
    out = _deconv_nhwc(np.ascontiguousarray(xb), np.asarray(weight, dtype=DTYPE), bias, stride, padding)
    return _from_nhwc(out, squeeze)


# ----------------------------------------------------------------- layers --

class Layer:
    """Base for (N, H, W, C) layers."""

    def params(self) -> list[Tensor]:
        return []

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)


def he_normal(rng, shape, fan_in, slope=LEAKY_SLOPE):
    std = math.sqrt(2.0 / ((1.0 + slope ** 2) * fan_in))
    return rng.normal(0.0, std, size=shape)


class Conv2d(Layer):
    def __init__(self, name, cin, cout, k, stride=1, padding=None, rng=None, init="he", dtype=DTYPE):
        self.stride = stride
        self.padding = (k - 1) // 2 if padding is None else padding
        rng = rng if rng is not None else np.random.default_rng(0)
        if init == "zeros":
            w = np.zeros((cout, cin, k, k))
        elif init == "identity":
            if k != 1 or cin != cout:
                raise ValueError("identity init needs a square 1x1 kernel")
            w = np.eye(cout).reshape(cout, cin, 1, 1)
        else:
            w = he_normal(rng, (cout, cin, k, k), cin * k * k)
        self.weight = Tensor(f"{name}.weight", w, dtype)
        self.bias = Tensor(f"{name}.bias", np.zeros(cout), dtype)
        self.input_grad = True
        self._cache = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x):
        out, cols, shape_p = _conv_nhwc(x, self.weight.data, self.bias.data, self.stride, self.padding)
        self._cache = (cols, shape_p, out.shape[1], out.shape[2])
        return out

    def backward(self, dout):
        cols, shape_p, ho, wo = self._cache
        o, c, kh, kw = self.weight.shape
        d2 = dout.reshape(-1, o)
        self.weight.grad += (cols.T @ d2).reshape(kh, kw, c, o).transpose(3, 2, 0, 1)
        self.bias.grad += d2.sum(0)
        if not self.input_grad:
            return None
        dcols = d2 @ _conv_wmat(self.weight.data).T
        dxp = _col2im(dcols, shape_p, kh, kw, self.stride, ho, wo)
        p = self.padding
        if p:
            dxp = dxp[:, p:shape_p[1] - p, p:shape_p[2] - p]
        return np.ascontiguousarray(dxp)


class Deconv2d(Layer):
    def __init__(self, name, cin, cout, k, stride=1, padding=0, rng=None, dtype=DTYPE):
        self.stride = stride
        self.padding = padding
        rng = rng if rng is not None else np.random.default_rng(0)
        # each output pixel sees about cin * (k / stride)^2 inputs
        fan_in = max(1, cin * (k // stride) ** 2)
        self.weight = Tensor(f"{name}.weight", rng.normal(0.0, math.sqrt(1.0 / fan_in), (cin, cout, k, k)), dtype)
        self.bias = Tensor(f"{name}.bias", np.zeros(cout), dtype)
        self._x = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x):
        self._x = x
        return _deconv_nhwc(x, self.weight.data, self.bias.data, self.stride, self.padding)

    def backward(self, dout):
        x = self._x
        n, h, w, ci = x.shape
        _, co, kh, kw = self.weight.shape
        cols = _im2col(_pad(dout, self.padding), kh, kw, self.stride, h, w)  # (N*H*W, k*k*Co)
        x2 = x.reshape(n * h * w, ci)
        self.weight.grad += (x2.T @ cols).reshape(ci, kh, kw, co).transpose(0, 3, 1, 2)
        self.bias.grad += dout.sum(axis=(0, 1, 2))
        dx = cols @ _deconv_wmat(self.weight.data).T
        return dx.reshape(n, h, w, ci)


class LeakyReLU(Layer):
    def __init__(self, slope=LEAKY_SLOPE):
        self.slope = slope
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.maximum(x, x * x.dtype.type(self.slope))

    def backward(self, dout):
        out = dout * dout.dtype.type(self.slope)
        np.copyto(out, dout, where=self._mask)
        return out


def sigmoid(z):
    z = np.asarray(z)
    if z.dtype.kind != "f":
        z = z.astype(DTYPE)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class Sigmoid(Layer):
    def __init__(self):
        self._y = None

    def forward(self, x):
        self._y = sigmoid(x)
        return self._y

    def backward(self, dout):
        return dout * self._y * (1.0 - self._y)


class Sequential(Layer):
    def __init__(self, layers: Iterable[Layer]):
        self.layers = list(layers)

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout


def backward(layers: Sequential, dloss) -> dict[str, np.ndarray]:
    """Run the reverse pass of a forward-recorded sequence; returns grads by name."""
    for p in layers.params():
        p.zero_grad()
    layers.backward(dloss)
    return {p.name: p.grad.copy() for p in layers.params()}


# ------------------------------------------------------------------ losses --

def _reduce(values, reduction):
    if reduction == "mean":
        return float(values.mean()), 1.0 / values.size
    if reduction == "sum":
        return float(values.sum()), 1.0
    if reduction == "none":
        return values, 1.0
    raise ValueError(f"unknown reduction {reduction!r}")


def bce_loss(pred, target, reduction="mean", with_grad=False):
    """Binary cross entropy on probabilities clamped to [1e-9, 1 - 1e-9]."""
    pred = np.asarray(pred, dtype=DTYPE)
    target = np.asarray(target, dtype=DTYPE)
    if pred.shape != target.shape:
        raise ValueError(f"bce_loss: shape mismatch {pred.shape} vs {target.shape}")
    p = np.clip(pred, PROB_EPS, 1.0 - PROB_EPS)
    values = -(target * np.log(p) + (1.0 - target) * np.log1p(-p))
    loss, scale = _reduce(values, reduction)
    if not with_grad:
        return loss
    inside = (pred > PROB_EPS) & (pred < 1.0 - PROB_EPS)
    grad = np.where(inside, (p - target) / (p * (1.0 - p)), 0.0) * scale
    return loss, grad


LOGIT_CLAMP = math.log((1.0 - PROB_EPS) / PROB_EPS)


def bce_with_logits(z, target, weight=None, with_grad=True):
    """Summed BCE of sigmoid(z) against target, same clamp as ``bce_loss``.

    Returns (sum of weighted per-element losses, gradient w.r.t. z). The
    gradient is taken through the clamp, i.e. zero where |z| exceeds it.
    """
    z = np.asarray(z, dtype=DTYPE)
    zc = np.clip(z, -LOGIT_CLAMP, LOGIT_CLAMP)
    # softplus(z) - t z == -[t log s + (1 - t) log(1 - s)]
    values = np.logaddexp(0.0, zc) - target * zc
    w = 1.0 if weight is None else weight
    loss = float(np.sum(w * values))
    if not with_grad:
        return loss
    grad = w * (sigmoid(zc) - target) * (np.abs(z) < LOGIT_CLAMP)
    return loss, grad


def smooth_l1(pred, target, beta=1.0, reduction="sum", with_grad=False):
    d = np.asarray(pred, dtype=DTYPE) - np.asarray(target, dtype=DTYPE)
    ad = np.abs(d)
    small = ad < beta
    values = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta)
    loss, scale = _reduce(values, reduction)
    if not with_grad:
        return loss
    grad = np.where(small, d / beta, np.sign(d)) * scale
    return loss, grad


# --------------------------------------------------------------- optimizer --

class Adam:
    def __init__(self, params: list[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if not np.all(np.isfinite(p.data)):
                raise FloatingPointError(f"non-finite values in {p.name} after Adam step {self.t}")


def adam_step(param, grad, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Functional single-array Adam update; ``state`` is a dict (m, v, t) updated in place."""
    t = state.get("t", 0) + 1
    m = beta1 * state.get("m", np.zeros_like(param)) + (1.0 - beta1) * grad
    v = beta2 * state.get("v", np.zeros_like(param)) + (1.0 - beta2) * grad * grad
    state.update(m=m, v=v, t=t)
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    return param - lr * mhat / (np.sqrt(vhat) + eps)


# -------------------------------------------------------------- checkpoints --

MAGIC = b"SSC3"
CKPT_VERSION = 1


def save_checkpoint(path, arrays: "OrderedDict[str, np.ndarray] | dict") -> None:
    """Binary format: magic, u16 version, then per array
    u16 name length, utf-8 name, u8 rank, u32 dims, little-endian f64 data."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", CKPT_VERSION))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    out = OrderedDict()
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 6
    while pos < len(blob):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    return out


def state_dict(params: Iterable[Tensor]) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((p.name, p.data.copy()) for p in params)


def load_state(params: Iterable[Tensor], arrays, strict=True, prefix_filter=None) -> list[str]:
    """Copy arrays into matching params; returns the names loaded."""
    loaded = []
    for p in params:
        if prefix_filter and not p.name.startswith(prefix_filter):
            continue
        if p.name not in arrays:
            if strict:
                raise KeyError(f"checkpoint is missing {p.name}")
            continue
        arr = arrays[p.name]
        if arr.shape != p.data.shape:
            raise ValueError(f"{p.name}: checkpoint shape {arr.shape} != model shape {p.data.shape}")
        p.data[...] = arr  # casts to the model's dtype
        loaded.append(p.name)
    return loaded


# ----------------------------------------------------------------- encoder --

ENCODER_STRIDE = 2
ENCODER_CHANNELS = 64


def build_encoder(rng, in_channels=NUM_FEATURES, dtype=DTYPE) -> Sequential:
    """conv(C->32, s1) -> conv(32->64, s2) -> conv(64->64, s1), 3x3, leaky ReLU after each."""
    c1 = Conv2d("encoder.conv1", in_channels, 32, 3, 1, rng=rng, dtype=dtype)
    c1.input_grad = False  # the pseudo image is data, not a parameter
    return Sequential([
        c1, LeakyReLU(),
        Conv2d("encoder.conv2", 32, 64, 3, 2, rng=rng, dtype=dtype), LeakyReLU(),
        Conv2d("encoder.conv3", 64, ENCODER_CHANNELS, 3, 1, rng=rng, dtype=dtype), LeakyReLU(),
    ])
