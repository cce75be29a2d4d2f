"""Central finite-difference checks for the layer vocabulary (double precision)."""
from __future__ import annotations

from typing import Callable, List, NamedTuple

import numpy as np

from . import nn

LAYER_KINDS = ("conv2d", "batchnorm", "relu", "maxpool", "fully_connected", "flatten",
               "concat", "dropout")


class CheckResult(NamedTuple):
    kind: str
    seed: int
    max_rel_error: float
    description: str


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.ravel(a)
    b = np.ravel(b)
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den == 0 else float(np.linalg.norm(a - b) / den)


def _spread(rng, shape, gap=0.05):
    """Values pairwise separated by ``gap`` with random signs: no ReLU or max ties."""
    n = int(np.prod(shape))
    v = (np.arange(n) - n / 2 + 0.5) * gap
    v = np.where(np.abs(v) < gap / 2, gap / 2, v)
    return rng.permutation(v).reshape(shape)


def _numeric(f: Callable[[], float], arr: np.ndarray, idx, eps: float) -> np.ndarray:
    out = np.empty(len(idx))
    for j, i in enumerate(idx):
        old = arr.flat[i]
        arr.flat[i] = old + eps
        hi = f()
        arr.flat[i] = old - eps
        lo = f()
        arr.flat[i] = old
        out[j] = (hi - lo) / (2 * eps)
    return out


def _sample_idx(rng, size, limit):
    return np.arange(size) if size <= limit else np.sort(rng.choice(size, limit, replace=False))


def _random_case(kind: str, rng: np.random.Generator):
    """A small random layer (or concat) configuration and an input batch."""
    n = int(rng.integers(1, 4))
    if kind == "conv2d":
        k = int(rng.integers(1, 4))
        s = int(rng.integers(1, 3))
        p = int(rng.integers(0, k))
        cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        h, w = int(rng.integers(k, k + 5)), int(rng.integers(k, k + 5))
        layer = nn.Conv2d("l", in_ch=cin, out_ch=cout, kernel=k, stride=s, padding=p)
        return [layer], rng.standard_normal((n, h, w, cin)), f"conv k{k} s{s} p{p} {cin}->{cout} {h}x{w}"
    if kind == "batchnorm":
        c = int(rng.integers(1, 5))
        shape = (n + 1, int(rng.integers(1, 4)), int(rng.integers(1, 4)), c)
        layer = nn.BatchNorm2d("l", channels=c)
        return [layer], rng.standard_normal(shape), f"batchnorm {c} ch {shape}"
    if kind == "relu":
        shape = (n, int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(1, 4)))
        return [nn.ReLU("l")], _spread(rng, shape), f"relu {shape}"
    if kind == "maxpool":
        size = int(rng.integers(2, 4))
        shape = (n, size * int(rng.integers(1, 4)) + int(rng.integers(0, size)),
                 size * int(rng.integers(1, 4)) + int(rng.integers(0, size)), int(rng.integers(1, 4)))
        return [nn.MaxPool2d("l", size=size)], _spread(rng, shape), f"maxpool {size} {shape}"
    if kind == "fully_connected":
        fi, fo = int(rng.integers(1, 12)), int(rng.integers(1, 6))
        layer = nn.Linear("l", in_features=fi, out_features=fo)
        return [layer], rng.standard_normal((n, fi)), f"linear {fi}->{fo}"
    if kind == "flatten":
        shape = (n, int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        return [nn.Flatten("l")], rng.standard_normal(shape), f"flatten {shape}"
    if kind == "dropout":
        rate = float(rng.uniform(0.1, 0.9))
        shape = (n, int(rng.integers(1, 10)))
        return [nn.Dropout("l", rate=rate)], rng.standard_normal(shape), f"dropout {rate:.2f}"
    raise ValueError(kind)


def check_layer(kind: str, seed: int, eps: float = 1e-5, max_coords: int = 48) -> CheckResult:
    """Compare analytic parameter and input gradients with central differences."""
    rng = np.random.default_rng([seed, LAYER_KINDS.index(kind)])
    if kind == "concat":
        return _check_concat(rng, seed, eps)
    layers, x, desc = _random_case(kind, rng)
    params = nn.init_params(layers, nn.logical_shape(x), rng, np.float64)
    for k in params:
        if not k.endswith("running_mean") and not k.endswith("running_var"):
            params[k] = params[k] + rng.normal(0, 0.3, params[k].shape)
    training = kind in ("batchnorm", "dropout")
    drop_seed = int(rng.integers(1 << 31))

    def run(x_):
        r = np.random.default_rng(drop_seed) if training else None
        tape = nn.Tape()
        return nn.forward(layers, params, x_, training, r, tape), tape

    y, tape = run(x)
    g = rng.standard_normal(y.shape)
    dx, grads = nn.backward(layers, params, tape, g)

    def loss() -> float:
        return float(np.sum(run(x)[0] * g))

    errs = []
    for key, grad in grads.items():
        idx = _sample_idx(rng, params[key].size, max_coords)
        num = _numeric(loss, params[key], idx, eps)
        errs.append(relative_error(grad.ravel()[idx], num))
    idx = _sample_idx(rng, x.size, max_coords)
    errs.append(relative_error(dx.ravel()[idx], _numeric(loss, x, idx, eps)))
    return CheckResult(kind, seed, max(errs), desc)


def _check_concat(rng, seed, eps):
    n, h, w = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    sizes = [int(v) for v in rng.integers(1, 4, size=int(rng.integers(2, 4)))]
    parts = [rng.standard_normal((n, h, w, c)) for c in sizes]
    y = nn.concat(parts)
    g = rng.standard_normal(y.shape)
    grads = nn.split_grad(g, sizes)
    errs = []
    for p, an in zip(parts, grads):
        idx = _sample_idx(rng, p.size, 48)
        num = _numeric(lambda: float(np.sum(nn.concat(parts) * g)), p, idx, eps)
        errs.append(relative_error(an.ravel()[idx], num))
    return CheckResult("concat", seed, max(errs), f"concat {sizes}")


def check_all(seeds=range(100), kinds=LAYER_KINDS) -> List[CheckResult]:
    return [check_layer(k, s) for k in kinds for s in seeds]
