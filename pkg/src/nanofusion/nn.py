"""
Minimal neural-network engine for the pose-estimation CNNs.

Only the fixed layer vocabulary the fusion models need is supported:
conv2d, batchnorm, relu, maxpool, fully_connected, flatten, dropout and a
channel/feature concat helper. Every layer works in the dtype of its input,
so the same code runs float32 for training and float64 for gradient checks.

Layout: shapes are always reported logically as (C, H, W), but batches of
feature maps are stored channel-last, ``(N, H, W, C)``, which keeps the
im2col copies and per-channel reductions contiguous. ``Flatten`` emits
features in (C, H, W) order, so fully-connected weights do not depend on
the storage layout. Feature batches are ``(N, F)``.

Parameters live in a flat ``dict`` keyed ``"<layer name>.<param>"``.
BatchNorm running statistics are stored in the same dict but are buffers,
not trainable parameters: they never appear in a gradient set.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import as_strided

Params = Dict[str, np.ndarray]
GradientSet = Dict[str, np.ndarray]
Shape = Tuple[int, ...]


class ShapeError(ValueError):
    """Input shape does not match what a layer expects."""

    def __init__(self, layer: str, msg: str):
        super().__init__(f"layer {layer!r}: {msg}")
        self.layer = layer


class MissingCacheError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, layer: str):
        super().__init__(f"non-finite gradient in layer {layer!r}")
        self.layer = layer


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------

@dataclass
class Layer:
    name: str
    kind = "layer"
    trainable = ()

    def output_shape(self, in_shape: Shape) -> Shape:
        return tuple(in_shape)

    def init_params(self, in_shape: Shape, rng: np.random.Generator,
                    dtype=np.float32) -> Params:
        return {}

    def forward(self, params: Params, x: np.ndarray, training: bool = False,
                rng: Optional[np.random.Generator] = None):
        raise NotImplementedError

    def backward(self, params: Params, cache, dy: np.ndarray,
                 need_dx: bool = True):
        raise NotImplementedError

    def macs(self, in_shape: Shape) -> int:
        return 0

    def p(self, key: str) -> str:
        return f"{self.name}.{key}"


KAIMING_A = np.sqrt(5.0)


def _kaiming_uniform(rng, shape, fan_in, dtype, a=KAIMING_A):
    """Kaiming-uniform over fan-in with leaky-ReLU slope ``a``.

    The default ``a = sqrt(5)`` (bound ``1/sqrt(fan_in)``) is the common
    framework default; it keeps the untrained regression head quiet enough
    for plain SGD at a small learning rate.
    """
    bound = np.sqrt(6.0 / ((1.0 + a * a) * fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _conv_out(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _windows(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    n, _, _, c = xp.shape
    sn, sh, sw, sc = xp.strides
    return as_strided(xp, (n, ho, wo, k, k, c), (sn, sh * s, sw * s, sh, sw, sc),
                      writeable=False)


def logical_shape(x: np.ndarray) -> Shape:
    """(C, H, W) of a channel-last batch, or (F,) of a feature batch."""
    if x.ndim == 4:
        return (x.shape[3], x.shape[1], x.shape[2])
    return tuple(x.shape[1:])


@dataclass
class Conv2d(Layer):
    in_ch: int = 1
    out_ch: int = 1
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    kind = "conv2d"
    trainable = ("weight", "bias")

    def __post_init__(self):
        if self.stride < 1 or self.in_ch < 1 or self.out_ch < 1 or self.kernel < 1:
            raise ValueError(f"invalid conv hyperparameters in {self.name!r}")

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_ch:
            raise ShapeError(self.name, f"expected ({self.in_ch}, H, W), got {tuple(in_shape)}")
        _, h, w = in_shape
        ho = _conv_out(h, self.kernel, self.stride, self.padding)
        wo = _conv_out(w, self.kernel, self.stride, self.padding)
        if ho < 1 or wo < 1:
            raise ShapeError(self.name, f"input {tuple(in_shape)} smaller than kernel")
        return (self.out_ch, ho, wo)

    def init_params(self, in_shape, rng, dtype=np.float32):
        fan_in = self.in_ch * self.kernel * self.kernel
        return {
            self.p("weight"): _kaiming_uniform(
                rng, (self.out_ch, self.in_ch, self.kernel, self.kernel), fan_in, dtype),
            self.p("bias"): np.zeros(self.out_ch, dtype=dtype),
        }

    def macs(self, in_shape):
        c, ho, wo = self.output_shape(in_shape)
        return c * ho * wo * self.in_ch * self.kernel * self.kernel

    def _wmat(self, params):
        # (Cout, Cin, k, k) -> (Cout, k*k*Cin) matching the im2col column order
        return params[self.p("weight")].transpose(0, 2, 3, 1).reshape(self.out_ch, -1)

    def forward(self, params, x, training=False, rng=None):
        _, ho, wo = self.output_shape(logical_shape(x))
        k, s, pad = self.kernel, self.stride, self.padding
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
        n = x.shape[0]
        cols = _windows(xp, k, s, ho, wo).reshape(n * ho * wo, -1)
        y = cols @ self._wmat(params).T
        y += params[self.p("bias")]
        return y.reshape(n, ho, wo, self.out_ch), (cols, xp.shape, x.shape)

    def backward(self, params, cache, dy, need_dx=True):
        cols, xpshape, xshape = cache
        k, s, pad = self.kernel, self.stride, self.padding
        n, ho, wo, cout = dy.shape
        dym = dy.reshape(-1, cout)
        dw = (dym.T @ cols).reshape(cout, k, k, self.in_ch).transpose(0, 3, 1, 2)
        grads = {self.p("weight"): np.ascontiguousarray(dw),
                 self.p("bias"): dym.sum(axis=0)}
        if not need_dx:
            return None, grads
        dcols = (dym @ self._wmat(params)).reshape(n, ho, wo, k, k, self.in_ch)
        dxp = np.zeros(xpshape, dtype=dy.dtype)
        he, we = s * (ho - 1) + 1, s * (wo - 1) + 1
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + he:s, j:j + we:s, :] += dcols[:, :, :, i, j, :]
        if pad:
            dxp = dxp[:, pad:pad + xshape[1], pad:pad + xshape[2], :]
        return dxp, grads


@dataclass
class BatchNorm2d(Layer):
    channels: int = 1
    momentum: float = 0.1
    eps: float = 1e-5
    kind = "batchnorm"
    trainable = ("gamma", "beta")

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.channels:
            raise ShapeError(self.name, f"expected ({self.channels}, H, W), got {tuple(in_shape)}")
        return tuple(in_shape)

    def init_params(self, in_shape, rng, dtype=np.float32):
        c = self.channels
        return {
            self.p("gamma"): np.ones(c, dtype=dtype),
            self.p("beta"): np.zeros(c, dtype=dtype),
            self.p("running_mean"): np.zeros(c, dtype=dtype),
            self.p("running_var"): np.ones(c, dtype=dtype),
        }

    def forward(self, params, x, training=False, rng=None):
        self.output_shape(logical_shape(x))
        xf = x.reshape(-1, self.channels)
        m = xf.shape[0]
        if training:
            ones = np.ones(m, dtype=x.dtype)
            mu = (ones @ xf) / m
            xc = xf - mu
            var = np.einsum("ij,ij->j", xc, xc) / m
            rm, rv = params[self.p("running_mean")], params[self.p("running_var")]
            rm *= 1 - self.momentum
            rm += (self.momentum * mu).astype(rm.dtype)
            rv *= 1 - self.momentum
            rv += (self.momentum * var * m / max(m - 1, 1)).astype(rv.dtype)
        else:
            xc = xf - params[self.p("running_mean")]
            var = params[self.p("running_var")]
        inv = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xc *= inv
        y = xc * params[self.p("gamma")]
        y += params[self.p("beta")]
        return y.reshape(x.shape), (xc, inv, training)

    def backward(self, params, cache, dy, need_dx=True):
        xhat, inv, training = cache
        gamma = params[self.p("gamma")]
        dyf = dy.reshape(-1, self.channels)
        m = dyf.shape[0]
        dbeta = np.ones(m, dtype=dy.dtype) @ dyf
        dgamma = np.einsum("ij,ij->j", dyf, xhat)
        grads = {self.p("gamma"): dgamma, self.p("beta"): dbeta}
        if not need_dx:
            return None, grads
        scale = gamma * inv
        if not training:
            return (dyf * scale).reshape(dy.shape), grads
        dx = xhat * (-dgamma / m)
        dx += dyf
        dx -= dbeta / m
        dx *= scale
        return dx.reshape(dy.shape), grads


@dataclass
class ReLU(Layer):
    kind = "relu"

    def forward(self, params, x, training=False, rng=None):
        mask = x > 0
        return np.maximum(x, 0), mask

    def backward(self, params, cache, dy, need_dx=True):
        return dy * cache, {}


@dataclass
class MaxPool2d(Layer):
    size: int = 2
    kind = "maxpool"

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(self.name, f"expected (C, H, W), got {tuple(in_shape)}")
        c, h, w = in_shape
        if h < self.size or w < self.size:
            raise ShapeError(self.name, f"input {tuple(in_shape)} smaller than pool window")
        return (c, h // self.size, w // self.size)

    def forward(self, params, x, training=False, rng=None):
        c, ho, wo = self.output_shape(logical_shape(x))
        k = self.size
        n = x.shape[0]
        win = x[:, :ho * k, :wo * k, :].reshape(n, ho, k, wo, k, c)
        y = win[:, :, 0, :, 0, :].copy()
        for t in range(1, k * k):
            np.maximum(y, win[:, :, t // k, :, t % k, :], out=y)
        return y, (x, y)

    def backward(self, params, cache, dy, need_dx=True):
        x, y = cache
        k = self.size
        n, ho, wo, c = dy.shape
        win = x[:, :ho * k, :wo * k, :].reshape(n, ho, k, wo, k, c)
        dx = np.zeros(x.shape, dtype=dy.dtype)
        dwin = dx[:, :ho * k, :wo * k, :].reshape(n, ho, k, wo, k, c)
        # first maximum in window scan order takes the whole gradient
        taken = np.zeros(y.shape, dtype=bool)
        for t in range(k * k):
            hit = win[:, :, t // k, :, t % k, :] == y
            hit &= ~taken
            taken |= hit
            np.multiply(dy, hit, out=dwin[:, :, t // k, :, t % k, :])
        return dx, {}


@dataclass
class Linear(Layer):
    in_features: int = 1
    out_features: int = 1
    kind = "fully_connected"
    trainable = ("weight", "bias")

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ShapeError(self.name, f"expected ({self.in_features},), got {tuple(in_shape)}")
        return (self.out_features,)

    def init_params(self, in_shape, rng, dtype=np.float32):
        return {
            self.p("weight"): _kaiming_uniform(
                rng, (self.out_features, self.in_features), self.in_features, dtype),
            self.p("bias"): np.zeros(self.out_features, dtype=dtype),
        }

    def macs(self, in_shape):
        self.output_shape(in_shape)
        return self.in_features * self.out_features

    def forward(self, params, x, training=False, rng=None):
        self.output_shape(logical_shape(x))
        w, b = params[self.p("weight")], params[self.p("bias")]
        return x @ w.T + b, x

    def backward(self, params, cache, dy, need_dx=True):
        x = cache
        grads = {self.p("weight"): dy.T @ x, self.p("bias"): dy.sum(axis=0)}
        dx = dy @ params[self.p("weight")] if need_dx else None
        return dx, grads


@dataclass
class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, params, x, training=False, rng=None):
        if x.ndim == 4:
            # emit features in (C, H, W) order regardless of storage layout
            return x.transpose(0, 3, 1, 2).reshape(x.shape[0], -1), x.shape
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params, cache, dy, need_dx=True):
        if len(cache) == 4:
            n, h, w, c = cache
            return np.ascontiguousarray(dy.reshape(n, c, h, w).transpose(0, 2, 3, 1)), {}
        return dy.reshape(cache), {}


@dataclass
class Dropout(Layer):
    rate: float = 0.5
    kind = "dropout"

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")

    def forward(self, params, x, training=False, rng=None):
        if not training or self.rate == 0.0:
            return x, None
        if rng is None:
            raise ValueError(f"layer {self.name!r}: training dropout needs an rng")
        keep = (rng.random(x.shape) >= self.rate).astype(x.dtype) / (1.0 - self.rate)
        return x * keep, keep

    def backward(self, params, cache, dy, need_dx=True):
        return (dy if cache is None else dy * cache), {}


def concat(parts: Sequence[np.ndarray], axis: int = -1) -> np.ndarray:
    """Join branch outputs along the channel (or feature) axis."""
    return np.concatenate(parts, axis=axis)


def split_grad(dy: np.ndarray, sizes: Sequence[int], axis: int = -1) -> List[np.ndarray]:
    """Backward of :func:`concat`."""
    return np.split(dy, np.cumsum(sizes)[:-1], axis=axis)


# --------------------------------------------------------------------------
# chains
# --------------------------------------------------------------------------

@dataclass
class Tape:
    """Activations recorded by a forward pass, consumed by :func:`backward`."""
    caches: List = field(default_factory=list)
    input_shape: Optional[Shape] = None


def chain_output_shape(layers: Sequence[Layer], in_shape: Shape) -> Shape:
    shape = tuple(in_shape)
    for layer in layers:
        shape = layer.output_shape(shape)
    return shape


def init_params(layers: Sequence[Layer], in_shape: Shape, rng: np.random.Generator,
                dtype=np.float32) -> Params:
    params: Params = {}
    shape = tuple(in_shape)
    for layer in layers:
        params.update(layer.init_params(shape, rng, dtype))
        shape = layer.output_shape(shape)
    return params


def forward(layers: Sequence[Layer], params: Params, x: np.ndarray,
            training: bool = False, rng: Optional[np.random.Generator] = None,
            tape: Optional[Tape] = None) -> np.ndarray:
    """Run ``x`` (batched, ``(N, H, W, C)`` or ``(N, F)``) through ``layers``.

    If ``tape`` is given the per-layer caches are appended to it so that
    :func:`backward` can be called afterwards.
    """
    if tape is not None:
        tape.caches.clear()
        tape.input_shape = x.shape
    for layer in layers:
        x, cache = layer.forward(params, x, training=training, rng=rng)
        if tape is not None:
            tape.caches.append(cache)
    return x


def backward(layers: Sequence[Layer], params: Params, tape: Optional[Tape],
             upstream: np.ndarray, need_input_grad: bool = True,
             check_finite: bool = True) -> Tuple[Optional[np.ndarray], GradientSet]:
    """Backpropagate ``upstream`` through ``layers``.

    Returns ``(input_gradient, gradients)``. ``input_gradient`` is ``None``
    when ``need_input_grad`` is false (saves the col2im of the first conv).
    """
    if tape is None or len(tape.caches) != len(layers):
        raise MissingCacheError("backward called without a matching forward tape")
    grads: GradientSet = {}
    dy = upstream
    first_with_grad = 0
    if not need_input_grad:
        while first_with_grad < len(layers) and not layers[first_with_grad].trainable:
            first_with_grad += 1
    for i in range(len(layers) - 1, first_with_grad - 1, -1):
        layer = layers[i]
        dy, g = layer.backward(params, tape.caches[i], dy,
                               need_dx=need_input_grad or i > first_with_grad)
        if check_finite:
            for v in g.values():
                if not np.all(np.isfinite(v)):
                    raise NonFiniteGradientError(layer.name)
        grads.update(g)
    return (dy if need_input_grad else None), grads


def sgd_step(params: Params, grads: GradientSet, lr: float) -> Params:
    """Return a new parameter dict with ``param - lr * grad`` for every graded key."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    out = dict(params)
    for k, g in grads.items():
        if k not in params:
            raise KeyError(f"gradient for unknown parameter {k!r}")
        if params[k].shape != g.shape:
            raise ShapeError(k, f"gradient shape {g.shape} != parameter shape {params[k].shape}")
        out[k] = params[k] - np.asarray(lr * g, dtype=params[k].dtype)
    return out


def mac_count(layers: Sequence[Layer], input_shape: Shape) -> int:
    """Exact multiply-accumulate count of conv and fully-connected layers."""
    total = 0
    shape = tuple(input_shape)
    for layer in layers:
        total += layer.macs(shape)
        shape = layer.output_shape(shape)
    return total


# --------------------------------------------------------------------------
# building blocks of the backbone
# --------------------------------------------------------------------------

def conv_bn_relu(name: str, in_ch: int, out_ch: int, kernel: int, stride: int,
                 padding: int) -> List[Layer]:
    return [
        Conv2d(f"{name}.conv", in_ch=in_ch, out_ch=out_ch, kernel=kernel,
               stride=stride, padding=padding),
        BatchNorm2d(f"{name}.bn", channels=out_ch),
        ReLU(f"{name}.relu"),
    ]


def block(name: str, in_ch: int, out_ch: int) -> List[Layer]:
    """Strided 3x3 conv followed by a 3x3 conv, each with BN and ReLU."""
    return (conv_bn_relu(f"{name}.a", in_ch, out_ch, 3, 2, 1)
            + conv_bn_relu(f"{name}.b", out_ch, out_ch, 3, 1, 1))
