"""
L1/L2 memory tiling for the quantized network.

Every op's output is cut into a uniform grid of tiles: output rows first,
then output channels. A tile's working set is everything that must sit in
the fast L1 scratchpad while it is computed (input slice including the conv
halo and padding, weight and bias slice, output slice). Whole tensors live in
L2; the executor copies slices in and results out through an L1 arena that
tracks peak occupancy.

Working sets in bytes (int8 activations and weights, int32 biases), for a
tile of ``r`` output rows and ``c`` output channels:

* conv:     ``C_in*((r-1)*s + k)*(W_in + 2p) + c*C_in*k*k + 4c + c*r*W_out``
* maxpool:  ``c*(k*r)*W_in + c*r*W_out``
* linear:   ``F_in + c*F_in + 4c + c``  (one "row")
* flatten / concat: ``2*c*r*W``
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .models import PoseEstimate
from .quant import (QOp, QuantizedModel, check_accumulator, conv_accumulate, dequantize,
                    int_gemm, maxpool_int, requantize)

KB = 1024


class TilingError(ValueError):
    """A layer cannot be tiled into L1, or the model does not fit L2."""

    def __init__(self, msg: str, layer: Optional[str] = None):
        super().__init__(msg)
        self.layer = layer


class PlanMismatchError(ValueError):
    """The plan was produced for a different model."""


class L1OverflowError(MemoryError):
    pass


@dataclass(frozen=True)
class MemoryBudget:
    l1_bytes: int = 64 * KB
    l2_bytes: int = 512 * KB

    def __post_init__(self):
        if self.l1_bytes <= 0 or self.l2_bytes <= 0:
            raise ValueError("memory sizes must be positive")
        if self.l1_bytes >= self.l2_bytes:
            raise ValueError("L1 must be smaller than L2")


# --------------------------------------------------------------------------
# shapes and per-op working sets
# --------------------------------------------------------------------------

def tensor_shapes(qmodel: QuantizedModel) -> Dict[str, Tuple[int, ...]]:
    """Per-sample storage shape of every tensor: ``(H, W, C)`` or ``(F,)``."""
    shapes: Dict[str, Tuple[int, ...]] = dict(qmodel.input_shapes())
    for op in qmodel.ops:
        x = shapes[op.srcs[0]]
        if op.kind == "conv":
            h, w, _ = x
            cout, _, k, _ = op.weight.shape
            shapes[op.dst] = ((h + 2 * op.padding - k) // op.stride + 1,
                              (w + 2 * op.padding - k) // op.stride + 1, cout)
        elif op.kind == "maxpool":
            shapes[op.dst] = (x[0] // op.size, x[1] // op.size, x[2])
        elif op.kind == "linear":
            shapes[op.dst] = (op.weight.shape[0],)
        elif op.kind == "flatten":
            shapes[op.dst] = (int(np.prod(x)),)
        elif op.kind == "concat":
            parts = [shapes[s] for s in op.srcs]
            shapes[op.dst] = parts[0][:-1] + (sum(p[-1] for p in parts),)
        else:
            raise PlanMismatchError(f"unknown op kind {op.kind!r}")
    return shapes


def _hwc(shape):
    return shape if len(shape) == 3 else (1, 1, shape[0])


@dataclass(frozen=True)
class Geometry:
    """Tiling domain of one op: output rows x output channels."""
    kind: str
    rows: int
    channels: int
    breakdown: Callable[[int, int], Dict[str, int]]

    def working_set(self, r: int, c: int) -> int:
        return sum(self.breakdown(r, c).values())


def geometry(op: QOp, shapes: Dict[str, Tuple[int, ...]]) -> Geometry:
    x = shapes[op.srcs[0]]
    y = shapes[op.dst]
    if op.kind == "conv":
        h, w, cin = x
        ho, wo, cout = y
        k, s, p = op.weight.shape[2], op.stride, op.padding
        return Geometry("conv", ho, cout, lambda r, c: {
            "input": cin * ((r - 1) * s + k) * (w + 2 * p),
            "weights": c * cin * k * k, "bias": 4 * c, "output": c * r * wo})
    if op.kind == "maxpool":
        h, w, _ = x
        ho, wo, cc = y
        k = op.size
        return Geometry("maxpool", ho, cc, lambda r, c: {
            "input": c * k * r * w, "output": c * r * wo})
    if op.kind == "linear":
        fin = x[0]
        return Geometry("linear", 1, y[0], lambda r, c: {
            "input": fin, "weights": c * fin, "bias": 4 * c, "output": c})
    if op.kind == "flatten":
        h, w, cc = _hwc(x)
        return Geometry("flatten", h, cc, lambda r, c: {"input": c * r * w, "output": c * r * w})
    if op.kind == "concat":
        h, w, cc = _hwc(y)
        return Geometry("concat", h, cc, lambda r, c: {"input": c * r * w, "output": c * r * w})
    raise PlanMismatchError(f"unknown op kind {op.kind!r}")


# --------------------------------------------------------------------------
# planning
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Tile:
    rows: Tuple[int, int]
    channels: Tuple[int, int]
    bytes: int
    residency: Dict[str, int]      # L1 bytes per buffer; everything else stays in L2


@dataclass
class LayerPlan:
    name: str
    kind: str
    rows: int
    channels: int
    tile_rows: int
    tile_channels: int
    tiles: List[Tile]

    @property
    def peak_bytes(self) -> int:
        return max(t.bytes for t in self.tiles)


@dataclass
class TilingPlan:
    tag: str
    budget: MemoryBudget
    layers: List[LayerPlan]
    l2_weights: int
    l2_activations: int

    def tile_counts(self) -> Dict[str, int]:
        return {lp.name: len(lp.tiles) for lp in self.layers}

    @property
    def peak_l1(self) -> int:
        return max(lp.peak_bytes for lp in self.layers)

    def report(self) -> str:
        lines = [f"tiling plan for {self.tag}: L1 {self.budget.l1_bytes} B, "
                 f"L2 {self.budget.l2_bytes} B",
                 f"L2 usage: weights {self.l2_weights} B, peak activations "
                 f"{self.l2_activations} B",
                 f"{'layer':<16}{'kind':<9}{'out rows':>9}{'out ch':>8}{'tile':>10}"
                 f"{'tiles':>7}{'peak L1':>9}"]
        for lp in self.layers:
            lines.append(f"{lp.name:<16}{lp.kind:<9}{lp.rows:>9}{lp.channels:>8}"
                         f"{f'{lp.tile_rows}x{lp.tile_channels}':>10}{len(lp.tiles):>7}"
                         f"{lp.peak_bytes:>9}")
        lines.append(f"total tiles {sum(len(lp.tiles) for lp in self.layers)}, "
                     f"peak L1 {self.peak_l1} B")
        return "\n".join(lines) + "\n"


def tile_count(rows: int, channels: int, r: int, c: int) -> int:
    return math.ceil(rows / r) * math.ceil(channels / c)


def choose_tile(g: Geometry, l1_bytes: int, name: str = "") -> Tuple[int, int]:
    """Tile size with the fewest tiles that fits L1.

    For each channel count the working set is affine in the row count, so
    the largest fitting row count has a closed form. Ties prefer whole
    channel ranges (fewer channel splits), then taller tiles.
    """
    best = None
    for c in range(g.channels, 0, -1):
        a = g.working_set(0, c)
        b = g.working_set(1, c) - a
        if a + b > l1_bytes:
            continue
        r = g.rows if b <= 0 else min(g.rows, (l1_bytes - a) // b)
        key = (tile_count(g.rows, g.channels, r, c), -c, -r)
        if best is None or key < best[0]:
            best = (key, r, c)
    if best is None:
        raise TilingError(f"{name}: minimal tile (1 row, 1 channel) needs "
                          f"{g.working_set(1, 1)} B > L1 {l1_bytes} B", name)
    return best[1], best[2]


def make_tiles(g: Geometry, r: int, c: int) -> List[Tile]:
    tiles = []
    for r0 in range(0, g.rows, r):
        r1 = min(r0 + r, g.rows)
        for c0 in range(0, g.channels, c):
            c1 = min(c0 + c, g.channels)
            res = g.breakdown(r1 - r0, c1 - c0)
            tiles.append(Tile((r0, r1), (c0, c1), sum(res.values()), res))
    return tiles


def weight_bytes(qmodel: QuantizedModel) -> int:
    return sum(op.weight.size + 4 * op.bias.size for op in qmodel.ops if op.weight is not None)


def peak_live_activations(qmodel: QuantizedModel) -> int:
    """Peak bytes of simultaneously live activation tensors (batch of one)."""
    shapes = tensor_shapes(qmodel)
    last_use: Dict[str, int] = {}
    for i, op in enumerate(qmodel.ops):
        for s in op.srcs:
            last_use[s] = i
    live = {name: int(np.prod(shapes[name])) for name in qmodel.inputs}
    peak = sum(live.values())
    for i, op in enumerate(qmodel.ops):
        live[op.dst] = int(np.prod(shapes[op.dst]))
        peak = max(peak, sum(live.values()))
        for s in op.srcs:
            if last_use.get(s) == i:
                live.pop(s, None)
    return peak


def plan_tiling(qmodel: QuantizedModel, budget: MemoryBudget = MemoryBudget()) -> TilingPlan:
    if not isinstance(qmodel, QuantizedModel):
        raise TypeError("plan_tiling expects a QuantizedModel; plan ensemble members separately")
    w = weight_bytes(qmodel)
    act = peak_live_activations(qmodel)
    if w + act > budget.l2_bytes:
        raise TilingError(f"model needs {w} B weights + {act} B activations "
                          f"> L2 {budget.l2_bytes} B")
    shapes = tensor_shapes(qmodel)
    layers = []
    for op in qmodel.ops:
        g = geometry(op, shapes)
        r, c = choose_tile(g, budget.l1_bytes, op.name)
        layers.append(LayerPlan(op.name, op.kind, g.rows, g.channels, r, c, make_tiles(g, r, c)))
    return TilingPlan(qmodel.tag, budget, layers, w, act)


# --------------------------------------------------------------------------
# execution
# --------------------------------------------------------------------------

class L1Arena:
    """Byte-accounting model of the L1 scratchpad."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.used = 0
        self.peak = 0

    def load(self, a: np.ndarray) -> np.ndarray:
        """Copy an L2 slice into L1."""
        self.alloc(a.nbytes)
        return np.array(a, copy=True)

    def alloc(self, nbytes: int) -> None:
        self.used += int(nbytes)
        if self.used > self.capacity:
            raise L1OverflowError(f"L1 occupancy {self.used} B > {self.capacity} B")
        self.peak = max(self.peak, self.used)

    def release(self) -> None:
        self.used = 0


def _run_tile(op: QOp, tile: Tile, xs: List[np.ndarray], out: np.ndarray,
              arena: L1Arena) -> None:
    (r0, r1), (c0, c1) = tile.rows, tile.channels
    if op.kind == "conv":
        k, s = op.weight.shape[2], op.stride
        xp = xs[0]                         # padded in L2
        xin = arena.load(xp[:, r0 * s:(r1 - 1) * s + k])
        w = arena.load(op.weight[c0:c1])
        b = arena.load(op.bias[c0:c1])
        arena.alloc(out[:, r0:r1, :, c0:c1].nbytes)
        acc = conv_accumulate(xin, w, b, s, 0)
        check_accumulator(acc, op.name)
        out[:, r0:r1, :, c0:c1] = requantize(acc, op.mults[0], op.shifts[0], op.relu)
    elif op.kind == "maxpool":
        k = op.size
        xin = arena.load(xs[0][:, r0 * k:r1 * k, :out.shape[2] * k, c0:c1])
        arena.alloc(out[:, r0:r1, :, c0:c1].nbytes)
        out[:, r0:r1, :, c0:c1] = maxpool_int(xin, k)
    elif op.kind == "linear":
        xin = arena.load(xs[0])
        w = arena.load(op.weight[c0:c1])
        b = arena.load(op.bias[c0:c1])
        arena.alloc(out[:, c0:c1].nbytes)
        acc = int_gemm(xin, w.T) + b.astype(np.int64)
        check_accumulator(acc, op.name)
        out[:, c0:c1] = requantize(acc, op.mults[0], op.shifts[0], op.relu)
    elif op.kind == "flatten":
        x = xs[0] if xs[0].ndim == 4 else xs[0].reshape(xs[0].shape[0], 1, 1, -1)
        n, h, w, c = x.shape
        xin = arena.load(x[:, r0:r1, :, c0:c1])
        arena.alloc(xin.nbytes)
        out.reshape(n, c, h, w)[:, c0:c1, r0:r1, :] = xin.transpose(0, 3, 1, 2)
    elif op.kind == "concat":
        view = out if out.ndim == 4 else out.reshape(out.shape[0], 1, 1, -1)
        start = 0
        for x, m, sh in zip(xs, op.mults, op.shifts):
            x4 = x if x.ndim == 4 else x.reshape(x.shape[0], 1, 1, -1)
            lo, hi = max(c0, start), min(c1, start + x4.shape[3])
            if lo < hi:
                xin = arena.load(x4[:, r0:r1, :, lo - start:hi - start])
                arena.alloc(xin.nbytes)
                view[:, r0:r1, :, lo:hi] = requantize(xin, m, sh)
            start += x4.shape[3]
    else:
        raise PlanMismatchError(f"unknown op kind {op.kind!r}")


def run_tiled_int(qmodel: QuantizedModel, plan: TilingPlan,
                  feeds: Dict[str, np.ndarray]) -> Tuple[np.ndarray, int]:
    """Execute the plan on int8 feeds; returns ``(int8 output, peak L1 bytes)``.

    Plans are sized for a single sample, so a batch runs one sample at a time.
    """
    if plan.tag != qmodel.tag or [lp.name for lp in plan.layers] != [op.name for op in qmodel.ops]:
        raise PlanMismatchError("tiling plan does not belong to this model")
    shapes = tensor_shapes(qmodel)
    for op, lp in zip(qmodel.ops, plan.layers):
        g = geometry(op, shapes)
        if (g.rows, g.channels, g.kind) != (lp.rows, lp.channels, lp.kind):
            raise PlanMismatchError(f"{op.name}: plan geometry does not match the model")
    arena = L1Arena(plan.budget.l1_bytes)
    n = len(next(iter(feeds.values())))
    outs = []
    for i in range(n):
        env = {k: v[i:i + 1] for k, v in feeds.items()}
        for op, lp in zip(qmodel.ops, plan.layers):
            xs = [env[s] for s in op.srcs]
            if op.kind == "conv" and op.padding:
                p = op.padding
                xs = [np.pad(xs[0], ((0, 0), (p, p), (p, p), (0, 0)))]
            out = np.zeros((1,) + shapes[op.dst], dtype=np.int8)
            for tile in lp.tiles:
                _run_tile(op, tile, xs, out, arena)
                arena.release()
            env[op.dst] = out
        outs.append(env[qmodel.output])
    return np.concatenate(outs), arena.peak


def run_tiled(qmodel: QuantizedModel, plan: TilingPlan, image_u8, depth_m) -> PoseEstimate:
    """Tiled integer inference on one sample."""
    feeds = qmodel.quantize_inputs(None if image_u8 is None else np.asarray(image_u8)[None],
                                   None if depth_m is None else np.asarray(depth_m)[None])
    q, _ = run_tiled_int(qmodel, plan, feeds)
    return PoseEstimate.from_array(dequantize(q[0], qmodel.output_scale))
