"""Sample collections and the ``NFD1`` dataset file."""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence

import numpy as np

from . import augment as aug
from .models import IMAGE_H, IMAGE_W
from .scenegen import (CameraModel, PoseBalance, Sample, ToFModel, generate_sample,
                       sample_seed)

MAGIC = b"NFD1"
IMAGE_BYTES = IMAGE_H * IMAGE_W


class FormatError(ValueError):
    """File does not start with the expected magic or is truncated."""


def atomic_write(path, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        # mkstemp creates 0600 files; use the mode a plain open() would give
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def check_magic(path, magic: bytes) -> None:
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head != magic:
        raise FormatError(f"{path}: expected magic {magic!r}, found {head!r}")


@dataclass
class Dataset:
    images: np.ndarray     # (N, 96, 160) uint8
    depths: np.ndarray     # (N, 8, 8) float32 meters, NaN = invalid
    labels: np.ndarray     # (N, 4) float32
    seeds: np.ndarray      # (N,) uint32

    def __post_init__(self):
        n = len(self.images)
        if not (len(self.depths) == len(self.labels) == len(self.seeds) == n):
            raise ValueError("dataset arrays differ in length")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.depths[idx], self.labels[idx], self.seeds[idx])

    def samples(self) -> Iterable[Sample]:
        for i in range(len(self)):
            yield Sample(self.images[i], self.depths[i], self.labels[i], int(self.seeds[i]))

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> "Dataset":
        if not samples:
            return cls(np.zeros((0, IMAGE_H, IMAGE_W), np.uint8), np.zeros((0, 8, 8), np.float32),
                       np.zeros((0, 4), np.float32), np.zeros(0, np.uint32))
        return cls(np.stack([s.image for s in samples]).astype(np.uint8),
                   np.stack([s.depth for s in samples]).astype(np.float32),
                   np.stack([s.label for s in samples]).astype(np.float32),
                   np.array([s.seed for s in samples], dtype=np.uint32))

    @classmethod
    def concat(cls, parts: Sequence["Dataset"]) -> "Dataset":
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("images", "depths", "labels", "seeds")))

    # ---- NFD1 ----------------------------------------------------------
    def to_bytes(self) -> bytes:
        n = len(self)
        rec = np.zeros(n, dtype=np.dtype([("img", "u1", IMAGE_BYTES), ("depth", "<f4", 64),
                                          ("label", "<f4", 4), ("seed", "<u4")]))
        rec["img"] = self.images.reshape(n, IMAGE_BYTES)
        rec["depth"] = self.depths.reshape(n, 64)
        rec["label"] = self.labels
        rec["seed"] = self.seeds
        return MAGIC + struct.pack("<I", n) + rec.tobytes()

    def save(self, path) -> None:
        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "Dataset":
        raw = Path(path).read_bytes()
        if raw[:4] != MAGIC:
            raise FormatError(f"{path}: expected magic {MAGIC!r}, found {raw[:4]!r}")
        (n,) = struct.unpack_from("<I", raw, 4)
        dt = np.dtype([("img", "u1", IMAGE_BYTES), ("depth", "<f4", 64),
                       ("label", "<f4", 4), ("seed", "<u4")])
        if len(raw) != 8 + n * dt.itemsize:
            raise FormatError(f"{path}: size does not match {n} samples")
        rec = np.frombuffer(raw, dtype=dt, offset=8, count=n)
        return cls(rec["img"].reshape(n, IMAGE_H, IMAGE_W).copy(),
                   rec["depth"].reshape(n, 8, 8).copy(),
                   rec["label"].copy(), rec["seed"].copy())


def generate_raw(master_seed: int, count: int, start: int = 0,
                 balance: PoseBalance = PoseBalance(), camera: CameraModel = CameraModel(),
                 tof: ToFModel = ToFModel()) -> Dataset:
    """Noise-free renders; sample ``i`` depends only on ``(master_seed, start + i)``."""
    samples = [generate_sample(sample_seed(master_seed, start + i), balance, camera, tof)
               for i in range(count)]
    return Dataset.from_samples(samples)


def expand(raw: Dataset, copies: int, master_seed: int,
           recipe: aug.AugmentationRecipe = aug.AugmentationRecipe(),
           tof: ToFModel = ToFModel(), flip_p: float = 0.5) -> Dataset:
    """Augment every raw render ``copies`` times with noised depth and random flips."""
    out: List[Sample] = []
    for i, s in enumerate(raw.samples()):
        s.depth_clean = s.depth
        out.extend(aug.expand_sample(s, copies, [int(master_seed), 0xA06, int(s.seed), i],
                                     recipe, tof, flip_p))
    return Dataset.from_samples(out)
