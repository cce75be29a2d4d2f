"""
Int8 post-training quantization and integer-only inference.

A trained :class:`~nanofusion.models.FusionModel` is first lowered to a flat
list of fused float units (conv + folded BN + optional ReLU, linear +
optional ReLU, maxpool, flatten, concat). Calibration records one max-abs
scale per named tensor. Quantization then turns every unit into an integer
op:

* weights: symmetric per-tensor int8, ``q = rint(w / s_w)`` (half-to-even)
* biases: int32 at scale ``s_in * s_w``
* accumulation in int32 (checked), requantization to int8 by a fixed-point
  multiplier ``m`` in ``[2^30, 2^31)`` and a right shift, rounding half-up
* ReLU fused into the requantization clamp

Activation tensors are symmetric int8 with zero point 0. Kernels operate on
channel-last batches, exactly like the float engine.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import nn
from .models import (AverageEnsemble, FusionModel, PoseEstimate, average_arrays,
                     depth_to_block3_channel, normalize_depth, normalize_image, wrap_angle)

QMAX = 127
MIN_SCALE = 1e-8
INT32_MAX = 2 ** 31 - 1


class QuantizationError(ValueError):
    """Model cannot be lowered or quantized (e.g. a non-foldable BatchNorm)."""


class AccumulatorOverflowError(OverflowError):
    def __init__(self, layer: str, peak: int):
        super().__init__(f"{layer}: int32 accumulator overflow (|acc| = {peak})")
        self.layer = layer


# --------------------------------------------------------------------------
# lowering: layer chains -> fused float units
# --------------------------------------------------------------------------

@dataclass
class Unit:
    """One fused float op reading ``srcs`` and writing ``dst``."""
    kind: str                       # conv | linear | maxpool | flatten | concat
    name: str
    srcs: Tuple[str, ...]
    dst: str
    weight: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: int = 0
    size: int = 2
    relu: bool = False

    def run(self, xs: Sequence[np.ndarray]) -> np.ndarray:
        x = xs[0]
        if self.kind == "conv":
            cout, cin, k, _ = self.weight.shape
            conv = nn.Conv2d(self.name, in_ch=cin, out_ch=cout, kernel=k, stride=self.stride,
                             padding=self.padding)
            y, _ = conv.forward({conv.p("weight"): self.weight, conv.p("bias"): self.bias}, x)
        elif self.kind == "linear":
            y = x @ self.weight.T + self.bias
        elif self.kind == "maxpool":
            y, _ = nn.MaxPool2d(self.name, size=self.size).forward({}, x)
        elif self.kind == "flatten":
            y, _ = nn.Flatten(self.name).forward({}, x)
        elif self.kind == "concat":
            y = np.concatenate(xs, axis=-1)
        else:
            raise QuantizationError(f"{self.name}: unknown unit kind {self.kind!r}")
        return np.maximum(y, 0) if self.relu else y


def fold_batchnorm(weight, bias, gamma, beta, mean, var, eps):
    """Absorb an inference-mode BatchNorm into the preceding conv."""
    g = gamma / np.sqrt(var + eps)
    return weight * g[:, None, None, None], (bias - mean) * g + beta


def _lower_chain(layers: Sequence[nn.Layer], params: nn.Params, src: str,
                 dtype=np.float64) -> Tuple[List[Unit], str]:
    units: List[Unit] = []
    i = 0
    cur = src

    def get(layer, key):
        return np.asarray(params[layer.p(key)], dtype=dtype)

    while i < len(layers):
        layer = layers[i]
        j = i + 1
        if isinstance(layer, nn.Conv2d):
            w, b = get(layer, "weight"), get(layer, "bias")
            if j < len(layers) and isinstance(layers[j], nn.BatchNorm2d):
                bn = layers[j]
                w, b = fold_batchnorm(w, b, get(bn, "gamma"), get(bn, "beta"),
                                      get(bn, "running_mean"), get(bn, "running_var"), bn.eps)
                j += 1
            relu = j < len(layers) and isinstance(layers[j], nn.ReLU)
            j += relu
            unit = Unit("conv", layer.name, (cur,), layer.name, w, b, layer.stride,
                        layer.padding, relu=relu)
        elif isinstance(layer, nn.Linear):
            relu = j < len(layers) and isinstance(layers[j], nn.ReLU)
            j += relu
            unit = Unit("linear", layer.name, (cur,), layer.name, get(layer, "weight"),
                        get(layer, "bias"), relu=relu)
        elif isinstance(layer, nn.MaxPool2d):
            unit = Unit("maxpool", layer.name, (cur,), layer.name, size=layer.size)
        elif isinstance(layer, nn.Flatten):
            unit = Unit("flatten", layer.name, (cur,), layer.name)
        elif isinstance(layer, nn.Dropout):
            i = j
            continue
        elif isinstance(layer, nn.BatchNorm2d):
            raise QuantizationError(f"{layer.name}: BatchNorm must directly follow a conv")
        else:
            raise QuantizationError(f"{layer.name}: {layer.kind} cannot be fused into a "
                                    "preceding conv or linear layer")
        units.append(unit)
        cur = unit.dst
        i = j
    return units, cur


@dataclass
class FloatGraph:
    """Folded float network: the reference the integer model is built from."""
    tag: str
    inputs: Tuple[str, ...]
    units: List[Unit]
    output: str
    model: FusionModel

    def run(self, feeds: Dict[str, np.ndarray], record: Optional[Dict[str, float]] = None):
        env = dict(feeds)
        if record is not None:
            for k, v in feeds.items():
                record[k] = max(record.get(k, 0.0), float(np.max(np.abs(v), initial=0.0)))
        for u in self.units:
            env[u.dst] = u.run([env[s] for s in u.srcs])
            if record is not None:
                record[u.dst] = max(record.get(u.dst, 0.0),
                                    float(np.max(np.abs(env[u.dst]), initial=0.0)))
        return env[self.output]

    def feeds(self, image_u8, depth_m) -> Dict[str, np.ndarray]:
        img, dep = self.model.prepare(image_u8, depth_m)
        out = {}
        if img is not None:
            out["image"] = img.astype(np.float64)
        if dep is not None:
            out["depth"] = dep.astype(np.float64)
        return out

    def predict(self, image_u8, depth_m) -> np.ndarray:
        y = self.run(self.feeds(image_u8, depth_m))
        y[:, 3] = wrap_angle(y[:, 3])
        return y


def lower(model: FusionModel) -> FloatGraph:
    if not isinstance(model, FusionModel):
        raise QuantizationError("lower() expects a single FusionModel")
    units: List[Unit] = []
    heads = []
    inputs = []
    if model.uses_image:
        inputs.append("image")
        u, out = _lower_chain(model.image, model.params, "image")
        units += u
        heads.append(out)
    if model.uses_depth:
        inputs.append("depth")
        u, out = _lower_chain(model.depth, model.params, "depth")
        units += u
        heads.append(out)
    src = heads[0]
    if len(heads) > 1:
        units.append(Unit("concat", "join", tuple(heads), "join"))
        src = "join"
    u, out = _lower_chain(model.trunk, model.params, src)
    units += u
    return FloatGraph(model.tag, tuple(inputs), units, out, model)


# --------------------------------------------------------------------------
# calibration
# --------------------------------------------------------------------------

def scale_from_maxabs(m: float) -> float:
    return max(float(m) / QMAX, MIN_SCALE)


def calibrate(model: Union[FusionModel, FloatGraph], images=None, depths=None,
              batch_size: int = 128, feeds: Optional[Dict[str, np.ndarray]] = None,
              min_samples: int = 64) -> Dict[str, float]:
    """Max-abs activation scales for every named tensor of the folded graph.

    Inputs are raw ``(N, 96, 160)`` uint8 images and ``(N, 8, 8)`` depth
    maps in meters, or already prepared float ``feeds`` keyed by input name.
    """
    graph = model if isinstance(model, FloatGraph) else lower(model)
    if feeds is None:
        feeds = graph.feeds(images, depths)
    n = len(next(iter(feeds.values()))) if feeds else 0
    if n == 0:
        raise ValueError("empty calibration set")
    if n < min_samples:
        raise ValueError(f"calibration needs at least {min_samples} samples, got {n}")
    record: Dict[str, float] = {}
    for s in range(0, n, batch_size):
        graph.run({k: v[s:s + batch_size] for k, v in feeds.items()}, record)
    # max commutes with a positive scale, so pool/flatten outputs share their input scale
    for u in graph.units:
        if u.kind in ("maxpool", "flatten"):
            record[u.dst] = record[u.srcs[0]]
    return {k: scale_from_maxabs(v) for k, v in record.items()}


# --------------------------------------------------------------------------
# integer primitives
# --------------------------------------------------------------------------

def quantize_tensor(x, scale: float) -> np.ndarray:
    """Symmetric int8, round-half-to-even, saturating at +-127."""
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) / scale), -QMAX, QMAX).astype(np.int8)


def dequantize(q, scale: float) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) * scale


def weight_scale(w) -> float:
    return scale_from_maxabs(np.max(np.abs(w), initial=0.0))


def quantize_multiplier(real: float) -> Tuple[int, int]:
    """``real ~= m * 2**-shift`` with ``m`` in ``[2^30, 2^31)``; ``(0, 0)`` for 0."""
    if real < 0:
        raise ValueError("requantization multiplier must be non-negative")
    if real == 0.0:
        return 0, 0
    mant, exp = math.frexp(real)            # real = mant * 2**exp, mant in [0.5, 1)
    m = int(round(mant * 2 ** 31))
    shift = 31 - exp
    if m == 2 ** 31:
        m //= 2
        shift -= 1
    if shift > 62:                         # below int8 resolution for any int32 accumulator
        return 0, 0
    if shift < 1:
        raise QuantizationError(f"requantization multiplier {real} too large")
    return m, shift


def requantize(acc: np.ndarray, m: int, shift: int, relu: bool = False) -> np.ndarray:
    """Fixed-point ``acc * m >> shift`` with round-half-up, clamped to int8."""
    acc = np.asarray(acc, dtype=np.int64)
    if m == 0:
        out = np.zeros_like(acc)
    else:
        out = (acc * m + (1 << (shift - 1))) >> shift
    return np.clip(out, 0 if relu else -QMAX, QMAX).astype(np.int8)


def check_accumulator(acc: np.ndarray, layer: str) -> None:
    peak = int(np.max(np.abs(acc), initial=0))
    if peak > INT32_MAX:
        raise AccumulatorOverflowError(layer, peak)


def int_gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact integer matrix product of int8 operands.

    Each product is below 2^14 and every reduction here is shorter than
    2^20 terms, so float64 BLAS arithmetic is exact.
    """
    return (np.asarray(a, dtype=np.float64) @ np.asarray(b, dtype=np.float64)).astype(np.int64)


def conv_accumulate(xq: np.ndarray, wq: np.ndarray, bq: np.ndarray, stride: int,
                    padding: int) -> np.ndarray:
    """int32 accumulators of a conv on a channel-last int8 batch."""
    n, h, w, c = xq.shape
    cout, cin, k, _ = wq.shape
    if c != cin:
        raise nn.ShapeError("conv", f"expected {cin} channels, got {c}")
    xp = np.pad(xq, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xq
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise nn.ShapeError("conv", "input smaller than kernel")
    cols = nn._windows(np.ascontiguousarray(xp), k, stride, ho, wo).reshape(n * ho * wo, -1)
    wmat = wq.transpose(0, 2, 3, 1).reshape(cout, -1)
    acc = int_gemm(cols, wmat.T) + bq.astype(np.int64)
    return acc.reshape(n, ho, wo, cout)


def maxpool_int(xq: np.ndarray, size: int) -> np.ndarray:
    n, h, w, c = xq.shape
    ho, wo = h // size, w // size
    v = xq[:, :ho * size, :wo * size].reshape(n, ho, size, wo, size, c)
    return v.max(axis=(2, 4))


def flatten_chw(xq: np.ndarray) -> np.ndarray:
    if xq.ndim == 4:
        return xq.transpose(0, 3, 1, 2).reshape(xq.shape[0], -1)
    return xq.reshape(xq.shape[0], -1)


# --------------------------------------------------------------------------
# quantized ops
# --------------------------------------------------------------------------

@dataclass
class QOp:
    kind: str
    name: str
    srcs: Tuple[str, ...]
    dst: str
    weight: Optional[np.ndarray] = None      # int8
    bias: Optional[np.ndarray] = None        # int32
    weight_scale: float = 1.0
    stride: int = 1
    padding: int = 0
    size: int = 2
    relu: bool = False
    mults: Tuple[int, ...] = ()
    shifts: Tuple[int, ...] = ()

    def run(self, xs: Sequence[np.ndarray]) -> np.ndarray:
        x = xs[0]
        if self.kind == "conv":
            acc = conv_accumulate(x, self.weight, self.bias, self.stride, self.padding)
            check_accumulator(acc, self.name)
            return requantize(acc, self.mults[0], self.shifts[0], self.relu)
        if self.kind == "linear":
            acc = int_gemm(x, self.weight.T) + self.bias.astype(np.int64)
            check_accumulator(acc, self.name)
            return requantize(acc, self.mults[0], self.shifts[0], self.relu)
        if self.kind == "maxpool":
            return maxpool_int(x, self.size)
        if self.kind == "flatten":
            return flatten_chw(x)
        if self.kind == "concat":
            return np.concatenate([requantize(v, m, s) for v, m, s
                                   in zip(xs, self.mults, self.shifts)], axis=-1)
        raise QuantizationError(f"{self.name}: unknown op kind {self.kind!r}")


@dataclass
class QuantizedModel:
    tag: str
    inputs: Tuple[str, ...]
    ops: List[QOp]
    scales: Dict[str, float]
    output: str
    depth_input: Optional[str] = None       # "block3" | "zones"

    @property
    def output_scale(self) -> float:
        return self.scales[self.output]

    uses_image = property(lambda self: "image" in self.inputs)
    uses_depth = property(lambda self: "depth" in self.inputs)

    def input_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes = {}
        if self.uses_image:
            shapes["image"] = (96, 160, 1)
        if self.uses_depth:
            shapes["depth"] = (6, 10, 1) if self.depth_input == "block3" else (8, 8, 1)
        return shapes

    def quantize_inputs(self, image_u8, depth_m) -> Dict[str, np.ndarray]:
        """Raw batch -> int8 channel-last feeds at the calibrated input scales."""
        feeds = {}
        if self.uses_image:
            img = normalize_image(image_u8)
            if img.ndim == 2:
                img = img[None]
            feeds["image"] = quantize_tensor(img[..., None], self.scales["image"])
        if self.uses_depth:
            d = normalize_depth(depth_m)
            if d.ndim == 2:
                d = d[None]
            if self.depth_input == "block3":
                d = depth_to_block3_channel(d)
            feeds["depth"] = quantize_tensor(d[..., None], self.scales["depth"])
        return feeds

    def run_int(self, feeds: Dict[str, np.ndarray]) -> np.ndarray:
        env = dict(feeds)
        for op in self.ops:
            env[op.dst] = op.run([env[s] for s in op.srcs])
        return env[self.output]

    def predict(self, image_u8, depth_m, batch_size: int = 256) -> np.ndarray:
        ref = image_u8 if self.uses_image else depth_m
        ref = np.asarray(ref)
        single = ref.ndim == 2
        n = 1 if single else len(ref)
        out = np.empty((n, 4))
        for s in range(0, n, batch_size):
            sl = slice(None) if single else slice(s, s + batch_size)
            feeds = self.quantize_inputs(None if image_u8 is None else np.asarray(image_u8)[sl],
                                         None if depth_m is None else np.asarray(depth_m)[sl])
            out[s:s + batch_size] = dequantize(self.run_int(feeds), self.output_scale)
        out[:, 3] = wrap_angle(out[:, 3])
        return out[0] if single else out


@dataclass
class QuantizedEnsemble:
    tag: str
    camera: QuantizedModel
    depth: QuantizedModel

    uses_image = True
    uses_depth = True

    def predict(self, image_u8, depth_m, batch_size: int = 256) -> np.ndarray:
        return average_arrays(self.camera.predict(image_u8, None, batch_size),
                              self.depth.predict(None, depth_m, batch_size))


def quantize_graph(graph: FloatGraph, scales: Dict[str, float]) -> QuantizedModel:
    missing = [n for n in list(graph.inputs) + [u.dst for u in graph.units] if n not in scales]
    if missing:
        raise QuantizationError(f"scale table lacks tensors: {missing}")
    ops = []
    for u in graph.units:
        s_out = scales[u.dst]
        if u.kind in ("conv", "linear"):
            s_in = scales[u.srcs[0]]
            s_w = weight_scale(u.weight)
            wq = quantize_tensor(u.weight, s_w)
            bq = np.rint(u.bias / (s_in * s_w))
            if np.max(np.abs(bq), initial=0) > INT32_MAX:
                raise QuantizationError(f"{u.name}: bias does not fit int32")
            m, sh = quantize_multiplier(s_in * s_w / s_out)
            ops.append(QOp(u.kind, u.name, u.srcs, u.dst, wq, bq.astype(np.int32), s_w,
                           u.stride, u.padding, relu=u.relu, mults=(m,), shifts=(sh,)))
        elif u.kind == "concat":
            ms = [quantize_multiplier(scales[s] / s_out) for s in u.srcs]
            ops.append(QOp("concat", u.name, u.srcs, u.dst, mults=tuple(m for m, _ in ms),
                           shifts=tuple(s for _, s in ms)))
        elif u.kind in ("maxpool", "flatten"):
            if scales[u.srcs[0]] != s_out:
                raise QuantizationError(f"{u.name}: {u.kind} must keep its input scale")
            ops.append(QOp(u.kind, u.name, u.srcs, u.dst, size=u.size))
        else:
            raise QuantizationError(f"{u.name}: unknown unit kind {u.kind!r}")
    return QuantizedModel(graph.tag, graph.inputs, ops, dict(scales), graph.output,
                          graph.model.depth_input)


def quantize_model(model: Union[FusionModel, AverageEnsemble], calibration_images=None,
                   calibration_depths=None, scales: Optional[Dict[str, float]] = None):
    """Calibrate (unless ``scales`` is given) and quantize a trained model."""
    if isinstance(model, AverageEnsemble):
        return QuantizedEnsemble(model.tag,
                                 quantize_model(model.camera, calibration_images, None),
                                 quantize_model(model.depth, None, calibration_depths))
    graph = lower(model)
    if scales is None:
        scales = calibrate(graph, calibration_images, calibration_depths)
    return quantize_graph(graph, scales)


def quantized_forward(qmodel: QuantizedModel, image_u8, depth_m) -> PoseEstimate:
    """Integer inference on one sample, dequantized to a pose estimate."""
    return PoseEstimate.from_array(qmodel.predict(
        None if image_u8 is None else np.asarray(image_u8)[None],
        None if depth_m is None else np.asarray(depth_m)[None])[0])


def quantized_output_int8(qmodel: QuantizedModel, image_u8, depth_m) -> np.ndarray:
    """Raw int8 output vector of one sample (before dequantization)."""
    feeds = qmodel.quantize_inputs(None if image_u8 is None else np.asarray(image_u8)[None],
                                   None if depth_m is None else np.asarray(depth_m)[None])
    return qmodel.run_int(feeds)[0]
