"""
Fusion model variants for drone-relative human pose estimation.

Every variant maps a grayscale image (96 x 160) and an 8 x 8 depth map to
four outputs ``(x, y, z, theta)``. A variant is described by up to three
layer chains:

* ``image`` - vision layers applied to the image,
* ``depth`` - layers applied to the prepared depth input,
* ``trunk`` - layers applied after the two branch outputs are joined.

Branch outputs are concatenated along the channel axis (mid fusion) or the
feature axis (late fusion). Input dropout is realized by multiplying each
branch output by a per-sample keep mask before the join.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from . import nn

IMAGE_H, IMAGE_W = 96, 160
DEPTH_ZONES = 8
DEPTH_MAX_M = 4.0
DEPTH_MIN_M = 0.02
BACKBONE_FEATURES = 1920
MLP_HIDDEN = 64

VARIANT_TAGS = ("cam", "depth-mid", "depth-late", "mid-fusion", "late-fusion",
                "avg-mid", "avg-late")


def wrap_angle(a):
    """Wrap radians to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    # values already in range pass through exactly
    w = np.where((a > -np.pi) & (a <= np.pi), a, w)
    return w if w.ndim else float(w)


class PoseEstimate(NamedTuple):
    x: float
    y: float
    z: float
    theta: float

    @classmethod
    def from_array(cls, a) -> "PoseEstimate":
        a = np.asarray(a, dtype=float).reshape(4)
        if not np.all(np.isfinite(a)):
            raise ValueError("pose estimate must be finite")
        return cls(float(a[0]), float(a[1]), float(a[2]), float(wrap_angle(a[3])))

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=float)


@dataclass
class DepthMap:
    """8x8 multi-zone ranges in meters with a per-zone validity mask."""
    zones: np.ndarray
    valid: np.ndarray

    @classmethod
    def from_meters(cls, zones) -> "DepthMap":
        """Build from raw readings; NaN or out-of-range zones become invalid."""
        z = np.asarray(zones, dtype=float).reshape(DEPTH_ZONES, DEPTH_ZONES)
        valid = np.isfinite(z) & (z >= DEPTH_MIN_M) & (z <= DEPTH_MAX_M)
        return cls(np.where(valid, z, np.nan), valid)

    def normalized(self) -> np.ndarray:
        return np.where(self.valid, self.zones / DEPTH_MAX_M, 0.0)


def normalize_depth(depth_m: np.ndarray) -> np.ndarray:
    """Readings in meters (NaN = invalid) -> [0, 1], invalid -> 0. Any leading shape."""
    d = np.asarray(depth_m, dtype=np.float32)
    ok = np.isfinite(d) & (d >= DEPTH_MIN_M) & (d <= DEPTH_MAX_M)
    return np.where(ok, d / DEPTH_MAX_M, 0.0).astype(np.float32)


def normalize_image(image_u8: np.ndarray) -> np.ndarray:
    return np.asarray(image_u8, dtype=np.float32) / 255.0


def depth_to_block3_channel(depth) -> np.ndarray:
    """Crop rows 8 -> 6 (drop first and last) and zero-pad columns 8 -> 10.

    Accepts a :class:`DepthMap`, a single normalized ``(8, 8)`` map, or a
    batch ``(N, 8, 8)``. Returns ``(6, 10)`` or ``(N, 6, 10)``.
    """
    if isinstance(depth, DepthMap):
        depth = depth.normalized()
    d = np.asarray(depth)
    cropped = d[..., 1:DEPTH_ZONES - 1, :]
    pad = [(0, 0)] * (d.ndim - 1) + [(1, 1)]
    return np.pad(cropped, pad)


# --------------------------------------------------------------------------
# architectures
# --------------------------------------------------------------------------

def stem() -> List[nn.Layer]:
    return nn.conv_bn_relu("stem", 1, 32, 5, 2, 0) + [nn.MaxPool2d("stem.pool", size=2)]


def backbone(block2_out: int = 64) -> List[nn.Layer]:
    """Vision layers up to (and including) Block 2."""
    return stem() + nn.block("block1", 32, 32) + nn.block("block2", 32, block2_out)


def block3(in_ch: int = 64) -> List[nn.Layer]:
    return nn.block("block3", in_ch, 128) + [nn.Flatten("flatten")]


def head(in_features: int, dropout: float = 0.5) -> List[nn.Layer]:
    layers: List[nn.Layer] = []
    if dropout > 0:
        layers.append(nn.Dropout("head.dropout", rate=dropout))
    layers.append(nn.Linear("head.fc", in_features=in_features, out_features=4))
    return layers


def depth_mlp() -> List[nn.Layer]:
    return [
        nn.Flatten("mlp.flatten"),
        nn.Linear("mlp.fc1", in_features=DEPTH_ZONES * DEPTH_ZONES, out_features=MLP_HIDDEN),
        nn.ReLU("mlp.relu"),
        nn.Linear("mlp.fc2", in_features=MLP_HIDDEN, out_features=4),
    ]


@dataclass
class FusionModel:
    """One trainable network: optional image branch, optional depth branch, trunk.

    ``fuse`` is ``"channel"`` (mid fusion), ``"feature"`` (late fusion) or
    ``None`` for single-input variants. ``depth_input`` says how the depth map
    is prepared: ``"block3"`` (cropped/padded 6x10 channel) or ``"zones"``
    (the full 8x8 grid).
    """
    tag: str
    image: List[nn.Layer]
    depth: List[nn.Layer]
    trunk: List[nn.Layer]
    fuse: Optional[str]
    depth_input: Optional[str]
    uses_image: bool
    uses_depth: bool
    params: nn.Params = field(default_factory=dict)

    # ---- shapes --------------------------------------------------------
    def image_shape(self) -> Tuple[int, int, int]:
        return (1, IMAGE_H, IMAGE_W)

    def depth_shape(self) -> Tuple[int, ...]:
        if self.depth_input == "block3":
            return (1, 6, 10)
        return (1, DEPTH_ZONES, DEPTH_ZONES)

    def branch_shapes(self):
        img = nn.chain_output_shape(self.image, self.image_shape()) if self.uses_image else None
        dep = nn.chain_output_shape(self.depth, self.depth_shape()) if self.uses_depth else None
        return img, dep

    def trunk_input_shape(self) -> Tuple[int, ...]:
        img, dep = self.branch_shapes()
        if self.fuse == "channel":
            return (img[0] + dep[0],) + tuple(img[1:])
        if self.fuse == "feature":
            return (img[0] + dep[0],)
        return img if self.uses_image else dep

    def layers(self) -> List[nn.Layer]:
        return list(self.image) + list(self.depth) + list(self.trunk)

    def init(self, seed: int, dtype=np.float32) -> "FusionModel":
        rng = np.random.default_rng(seed)
        params: nn.Params = {}
        if self.uses_image:
            params.update(nn.init_params(self.image, self.image_shape(), rng, dtype))
        if self.uses_depth:
            params.update(nn.init_params(self.depth, self.depth_shape(), rng, dtype))
        params.update(nn.init_params(self.trunk, self.trunk_input_shape(), rng, dtype))
        self.params = params
        return self

    def mac_count(self) -> int:
        total = nn.mac_count(self.trunk, self.trunk_input_shape())
        if self.uses_image:
            total += nn.mac_count(self.image, self.image_shape())
        if self.uses_depth:
            total += nn.mac_count(self.depth, self.depth_shape())
        return total

    # ---- inputs --------------------------------------------------------
    def prepare(self, image_u8, depth_m):
        """Normalize raw inputs into channel-last batches for the branches."""
        img = dep = None
        if self.uses_image:
            img = normalize_image(image_u8)
            if img.ndim == 2:
                img = img[None]
            img = img[..., None]
        if self.uses_depth:
            d = normalize_depth(depth_m)
            if d.ndim == 2:
                d = d[None]
            if self.depth_input == "block3":
                d = depth_to_block3_channel(d)
            dep = np.ascontiguousarray(d[..., None])
        return img, dep

    # ---- forward / backward -------------------------------------------
    def forward(self, image, depth, params=None, training=False, rng=None,
                keep_image=None, keep_depth=None, tapes=None) -> np.ndarray:
        """Forward pass on prepared inputs (see :meth:`prepare`).

        ``keep_image`` / ``keep_depth`` are optional per-sample 0/1 masks
        applied to the branch outputs before the join (input dropout).
        ``tapes`` is a dict that receives the per-chain activation caches.
        """
        params = self.params if params is None else params
        t = tapes if tapes is not None else {}
        parts = []
        sizes = []
        if self.uses_image:
            t["image"] = nn.Tape()
            a = nn.forward(self.image, params, image, training, rng, t["image"])
            if keep_image is not None:
                a = a * _bcast(keep_image, a)
            parts.append(a)
            sizes.append(a.shape[-1])
        if self.uses_depth:
            t["depth"] = nn.Tape()
            b = nn.forward(self.depth, params, depth, training, rng, t["depth"])
            if keep_depth is not None:
                b = b * _bcast(keep_depth, b)
            parts.append(b)
            sizes.append(b.shape[-1])
        joined = nn.concat(parts) if len(parts) > 1 else parts[0]
        t["sizes"] = sizes
        t["trunk"] = nn.Tape()
        return nn.forward(self.trunk, params, joined, training, rng, t["trunk"])

    def backward(self, tapes, upstream, params=None, keep_image=None,
                 keep_depth=None) -> nn.GradientSet:
        params = self.params if params is None else params
        grads: nn.GradientSet = {}
        djoin, g = nn.backward(self.trunk, params, tapes.get("trunk"), upstream)
        grads.update(g)
        pieces = nn.split_grad(djoin, tapes["sizes"]) if len(tapes["sizes"]) > 1 else [djoin]
        i = 0
        if self.uses_image:
            d = pieces[i]
            i += 1
            if keep_image is not None:
                d = d * _bcast(keep_image, d)
            if self.image:
                _, g = nn.backward(self.image, params, tapes.get("image"), d,
                                   need_input_grad=False)
                grads.update(g)
        if self.uses_depth:
            d = pieces[i]
            if keep_depth is not None:
                d = d * _bcast(keep_depth, d)
            if self.depth:
                _, g = nn.backward(self.depth, params, tapes.get("depth"), d,
                                   need_input_grad=False)
                grads.update(g)
        return grads

    def predict(self, image_u8, depth_m, params=None, batch_size: int = 128) -> np.ndarray:
        """Inference on raw inputs: ``(N, 4)`` array with theta wrapped."""
        image_u8 = None if image_u8 is None else np.asarray(image_u8)
        depth_m = None if depth_m is None else np.asarray(depth_m)
        ref = image_u8 if self.uses_image else depth_m
        single = ref.ndim == 2
        if single:
            image_u8 = None if image_u8 is None else image_u8[None]
            depth_m = None if depth_m is None else depth_m[None]
        n = len(image_u8) if self.uses_image else len(depth_m)
        out = np.empty((n, 4))
        for s in range(0, n, batch_size):
            img, dep = self.prepare(
                None if not self.uses_image else image_u8[s:s + batch_size],
                None if not self.uses_depth else depth_m[s:s + batch_size])
            out[s:s + batch_size] = self.forward(img, dep, params=params)
        out[:, 3] = wrap_angle(out[:, 3])
        return out[0] if single else out


def _bcast(mask, a):
    m = np.asarray(mask, dtype=a.dtype)
    return m.reshape((-1,) + (1,) * (a.ndim - 1))


@dataclass
class AverageEnsemble:
    """Two independently trained sub-models whose outputs are averaged."""
    tag: str
    camera: FusionModel
    depth: FusionModel

    uses_image = True
    uses_depth = True

    def mac_count(self) -> int:
        return self.camera.mac_count() + self.depth.mac_count()

    def predict(self, image_u8, depth_m, params=None, batch_size: int = 128) -> np.ndarray:
        a = self.camera.predict(image_u8, None, batch_size=batch_size)
        b = self.depth.predict(None, depth_m, batch_size=batch_size)
        return average_arrays(a, b)


def average_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Average ``(..., 4)`` pose arrays; theta by circular mean."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    out = (a + b) / 2.0
    out[..., 3] = np.arctan2(np.sin(a[..., 3]) + np.sin(b[..., 3]),
                             np.cos(a[..., 3]) + np.cos(b[..., 3]))
    out[..., 3] = wrap_angle(out[..., 3])
    return out


def average_ensemble(a: PoseEstimate, b: PoseEstimate) -> PoseEstimate:
    return PoseEstimate.from_array(average_arrays(np.array(a), np.array(b)))


# --------------------------------------------------------------------------
# builders
# --------------------------------------------------------------------------

def build_camera_only(head_dropout: float = 0.5) -> FusionModel:
    return FusionModel("cam", image=backbone(64) + block3(64), depth=[],
                       trunk=head(BACKBONE_FEATURES, head_dropout), fuse=None,
                       depth_input=None, uses_image=True, uses_depth=False)


def build_mid_fusion(head_dropout: float = 0.5) -> FusionModel:
    """Block 2 emits 63 channels; the depth channel restores 64 for Block 3."""
    return FusionModel("mid-fusion", image=backbone(63), depth=[],
                       trunk=block3(64) + head(BACKBONE_FEATURES, head_dropout),
                       fuse="channel", depth_input="block3",
                       uses_image=True, uses_depth=True)


def build_late_fusion(head_dropout: float = 0.5) -> FusionModel:
    return FusionModel("late-fusion", image=backbone(64) + block3(64), depth=depth_mlp(),
                       trunk=head(BACKBONE_FEATURES + 4, head_dropout), fuse="feature",
                       depth_input="zones", uses_image=True, uses_depth=True)


def build_depth_mid(head_dropout: float = 0.5) -> FusionModel:
    """Block 3 onward, fed only the cropped/padded depth channel."""
    return FusionModel("depth-mid", image=[], depth=block3(1),
                       trunk=head(BACKBONE_FEATURES, head_dropout), fuse=None,
                       depth_input="block3", uses_image=False, uses_depth=True)


def build_depth_late(head_dropout: float = 0.5) -> FusionModel:
    # no head dropout here: masking half of a 4-wide vector wrecks the signal
    return FusionModel("depth-late", image=[], depth=depth_mlp(),
                       trunk=head(4, 0.0), fuse=None,
                       depth_input="zones", uses_image=False, uses_depth=True)


_BUILDERS = {
    "cam": build_camera_only,
    "mid-fusion": build_mid_fusion,
    "late-fusion": build_late_fusion,
    "depth-mid": build_depth_mid,
    "depth-late": build_depth_late,
}


def build(tag: str, seed: int = 0, head_dropout: float = 0.5):
    """Build and initialize a variant by its tag string."""
    if tag in _BUILDERS:
        return _BUILDERS[tag](head_dropout).init(seed)
    if tag == "avg-mid":
        return AverageEnsemble(tag, build("cam", seed, head_dropout),
                               build("depth-mid", seed + 1, head_dropout))
    if tag == "avg-late":
        return AverageEnsemble(tag, build("cam", seed, head_dropout),
                               build("depth-late", seed + 1, head_dropout))
    raise ValueError(f"unknown variant tag {tag!r}; expected one of {VARIANT_TAGS}")
