"""
Binary model files (little-endian).

``NFF1`` float model::

    magic "NFF1" | str variant tag | u32 layer count
    per layer: u8 kind | str name | u32 n_attr, f64 attrs | u32 n_tensors
    per tensor: str key | u8 dtype | u8 ndim | u32 dims... |
                u32 n_scales, f64 scales | u32 n_zero_points, i32 zps | payload

``NFQ1`` quantized model::

    magic "NFQ1" | str variant tag | u32 member count (1, or 2 for ensembles)
    per member: str tag | str depth input | u32 n_inputs, str names | str output
    | u32 n_scales, (str tensor, f64 scale, i32 zero point)... | u32 op count
    per op: u8 kind | str name | u32 n_src, str srcs | str dst
            | u32 n_attr, f64 attrs | u32 n_tensors, tensors (as above)

Op tensors are ``weight`` (int8), ``bias`` (int32) and ``requant``
(int64 pairs of multiplier and shift). Strings are u16 length + UTF-8.
Float ensembles store both members' layers with ``camera/`` and ``depth/``
name prefixes.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from . import models, nn
from .dataset import FormatError, atomic_write
from .quant import QOp, QuantizedEnsemble, QuantizedModel

FLOAT_MAGIC = b"NFF1"
QUANT_MAGIC = b"NFQ1"

LAYER_KINDS = {"conv2d": 1, "batchnorm": 2, "relu": 3, "maxpool": 4, "fully_connected": 5,
               "flatten": 6, "dropout": 7}
OP_KINDS = {"conv": 11, "linear": 12, "maxpool": 13, "flatten": 14, "concat": 15}
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("i1"), 4: np.dtype("<i4"),
          5: np.dtype("<i8")}
DTYPE_CODES = {v: k for k, v in DTYPES.items()}


class _Writer:
    def __init__(self, magic: bytes):
        self.parts = [magic]

    def pack(self, fmt: str, *v):
        self.parts.append(struct.pack("<" + fmt, *v))

    def str(self, s: str):
        b = s.encode()
        self.pack("H", len(b))
        self.parts.append(b)

    def tensor(self, key: str, a: np.ndarray, scales=(), zps=()):
        a = np.asarray(a)
        dt = a.dtype.newbyteorder("<") if a.dtype.itemsize > 1 else a.dtype
        self.str(key)
        self.pack("BB", DTYPE_CODES[np.dtype(dt)], a.ndim)
        self.pack(f"{a.ndim}I", *a.shape)
        self.pack("I", len(scales))
        self.pack(f"{len(scales)}d", *scales)
        self.pack("I", len(zps))
        self.pack(f"{len(zps)}i", *zps)
        self.parts.append(np.ascontiguousarray(a, dtype=dt).tobytes())

    def bytes(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, raw: bytes, magic: bytes, path=""):
        if raw[:4] != magic:
            raise FormatError(f"{path}: expected magic {magic!r}, found {raw[:4]!r}")
        self.raw = raw
        self.pos = 4
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated file")
        b = self.raw[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def str(self) -> str:
        (n,) = self.unpack("H")
        return self.take(n).decode()

    def tensor(self):
        key = self.str()
        code, ndim = self.unpack("BB")
        if code not in DTYPES:
            raise FormatError(f"{self.path}: unknown dtype code {code}")
        shape = self.unpack(f"{ndim}I")
        (ns,) = self.unpack("I")
        scales = self.unpack(f"{ns}d")
        (nz,) = self.unpack("I")
        zps = self.unpack(f"{nz}i")
        dt = DTYPES[code]
        count = int(np.prod(shape))
        a = np.frombuffer(self.take(count * dt.itemsize), dtype=dt).reshape(shape)
        return key, a.astype(dt.newbyteorder("=")), scales, zps

    def done(self):
        if self.pos != len(self.raw):
            raise FormatError(f"{self.path}: {len(self.raw) - self.pos} trailing bytes")


# --------------------------------------------------------------------------
# float models
# --------------------------------------------------------------------------

def _layer_attrs(layer: nn.Layer) -> Tuple[float, ...]:
    if isinstance(layer, nn.Conv2d):
        return (layer.in_ch, layer.out_ch, layer.kernel, layer.stride, layer.padding)
    if isinstance(layer, nn.BatchNorm2d):
        return (layer.channels, layer.momentum, layer.eps)
    if isinstance(layer, nn.MaxPool2d):
        return (layer.size,)
    if isinstance(layer, nn.Linear):
        return (layer.in_features, layer.out_features)
    if isinstance(layer, nn.Dropout):
        return (layer.rate,)
    return ()


def _members(model) -> List[Tuple[str, models.FusionModel]]:
    if isinstance(model, models.AverageEnsemble):
        return [("camera/", model.camera), ("depth/", model.depth)]
    return [("", model)]


def float_model_bytes(model) -> bytes:
    w = _Writer(FLOAT_MAGIC)
    w.str(model.tag)
    records = [(prefix, m, layer) for prefix, m in _members(model) for layer in m.layers()]
    w.pack("I", len(records))
    for prefix, m, layer in records:
        w.pack("B", LAYER_KINDS[layer.kind])
        w.str(prefix + layer.name)
        attrs = _layer_attrs(layer)
        w.pack("I", len(attrs))
        w.pack(f"{len(attrs)}d", *attrs)
        keys = [k for k in m.params if k.rsplit(".", 1)[0] == layer.name]
        w.pack("I", len(keys))
        for k in keys:
            w.tensor(k, m.params[k].astype(np.float32))
    return w.bytes()


def save_float_model(model, path) -> None:
    atomic_write(path, float_model_bytes(model))


def load_float_model(path):
    r = _Reader(Path(path).read_bytes(), FLOAT_MAGIC, path)
    tag = r.str()
    if tag not in models.VARIANT_TAGS:
        raise FormatError(f"{path}: unknown variant tag {tag!r}")
    (count,) = r.unpack("I")
    records = []
    dropout = None
    for _ in range(count):
        (kind,) = r.unpack("B")
        name = r.str()
        (na,) = r.unpack("I")
        attrs = r.unpack(f"{na}d")
        (nt,) = r.unpack("I")
        tensors = {}
        for _ in range(nt):
            k, a, _, _ = r.tensor()
            tensors[k] = a
        if kind == LAYER_KINDS["dropout"] and name.endswith("head.dropout"):
            dropout = attrs[0]
        records.append((kind, name, attrs, tensors))
    r.done()
    model = models.build(tag, 0, head_dropout=0.5 if dropout is None else dropout)
    expected = [(prefix, m, layer) for prefix, m in _members(model) for layer in m.layers()]
    if len(expected) != len(records):
        raise FormatError(f"{path}: layer count {len(records)} does not match variant {tag}")
    for (prefix, m, layer), (kind, name, attrs, tensors) in zip(expected, records):
        if (LAYER_KINDS[layer.kind], prefix + layer.name) != (kind, name) or \
                not np.allclose(_layer_attrs(layer), attrs):
            raise FormatError(f"{path}: layer {name!r} does not match variant {tag}")
        for k, a in tensors.items():
            if k not in m.params or m.params[k].shape != a.shape:
                raise FormatError(f"{path}: unexpected tensor {k!r} {a.shape}")
            m.params[k] = a.astype(np.float32)
    return model


# --------------------------------------------------------------------------
# quantized models
# --------------------------------------------------------------------------

def _write_qmodel(w: _Writer, q: QuantizedModel):
    w.str(q.tag)
    w.str(q.depth_input or "")
    w.pack("I", len(q.inputs))
    for name in q.inputs:
        w.str(name)
    w.str(q.output)
    w.pack("I", len(q.scales))
    for name, s in q.scales.items():
        w.str(name)
        w.pack("di", s, 0)
    w.pack("I", len(q.ops))
    for op in q.ops:
        w.pack("B", OP_KINDS[op.kind])
        w.str(op.name)
        w.pack("I", len(op.srcs))
        for s in op.srcs:
            w.str(s)
        w.str(op.dst)
        attrs = (op.stride, op.padding, op.size, int(op.relu))
        w.pack("I", len(attrs))
        w.pack(f"{len(attrs)}d", *attrs)
        tensors = []
        if op.weight is not None:
            s_in = q.scales[op.srcs[0]]
            tensors.append(("weight", op.weight, (op.weight_scale,), (0,)))
            tensors.append(("bias", op.bias, (op.weight_scale * s_in,), (0,)))
        if op.mults:
            tensors.append(("requant", np.array([op.mults, op.shifts], dtype=np.int64).T, (), ()))
        w.pack("I", len(tensors))
        for key, a, sc, zp in tensors:
            w.tensor(key, a, sc, zp)


def _read_qmodel(r: _Reader) -> QuantizedModel:
    tag = r.str()
    depth_input = r.str() or None
    (ni,) = r.unpack("I")
    inputs = tuple(r.str() for _ in range(ni))
    output = r.str()
    (ns,) = r.unpack("I")
    scales = {}
    for _ in range(ns):
        name = r.str()
        s, zp = r.unpack("di")
        if zp != 0:
            raise FormatError(f"{r.path}: non-zero activation zero point for {name!r}")
        scales[name] = s
    (nops,) = r.unpack("I")
    kinds = {v: k for k, v in OP_KINDS.items()}
    ops = []
    for _ in range(nops):
        (code,) = r.unpack("B")
        if code not in kinds:
            raise FormatError(f"{r.path}: unknown op kind code {code}")
        name = r.str()
        (nsrc,) = r.unpack("I")
        srcs = tuple(r.str() for _ in range(nsrc))
        dst = r.str()
        (na,) = r.unpack("I")
        stride, padding, size, relu = (int(v) for v in r.unpack(f"{na}d"))
        (nt,) = r.unpack("I")
        op = QOp(kinds[code], name, srcs, dst, stride=stride, padding=padding, size=size,
                 relu=bool(relu))
        for _ in range(nt):
            key, a, sc, _ = r.tensor()
            if key == "weight":
                op.weight, op.weight_scale = a.astype(np.int8), sc[0]
            elif key == "bias":
                op.bias = a.astype(np.int32)
            elif key == "requant":
                op.mults = tuple(int(v) for v in a[:, 0])
                op.shifts = tuple(int(v) for v in a[:, 1])
        ops.append(op)
    return QuantizedModel(tag, inputs, ops, scales, output, depth_input)


def quant_model_bytes(q: Union[QuantizedModel, QuantizedEnsemble]) -> bytes:
    w = _Writer(QUANT_MAGIC)
    members = [q.camera, q.depth] if isinstance(q, QuantizedEnsemble) else [q]
    w.str(q.tag)
    w.pack("I", len(members))
    for m in members:
        _write_qmodel(w, m)
    return w.bytes()


def save_quant_model(q, path) -> None:
    atomic_write(path, quant_model_bytes(q))


def load_quant_model(path):
    r = _Reader(Path(path).read_bytes(), QUANT_MAGIC, path)
    tag = r.str()
    (n,) = r.unpack("I")
    members = [_read_qmodel(r) for _ in range(n)]
    r.done()
    if n == 2:
        return QuantizedEnsemble(tag, members[0], members[1])
    if n != 1:
        raise FormatError(f"{path}: expected 1 or 2 member models, found {n}")
    return members[0]


def read_magic(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read(4)
