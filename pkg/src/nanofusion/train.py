"""
Training with input dropout, L1 pose loss, and MAE / Pearson evaluation.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, NamedTuple, Sequence, Tuple

import numpy as np

from . import nn
from .dataset import Dataset
from .models import AverageEnsemble, FusionModel, wrap_angle

log = logging.getLogger(__name__)

OUTPUTS = ("x", "y", "z", "theta")


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite training loss in epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class DropoutScheme:
    p_keep: float = 1.0
    p_drop_image: float = 0.0
    p_drop_depth: float = 0.0

    def __post_init__(self):
        p = (self.p_keep, self.p_drop_image, self.p_drop_depth)
        if min(p) < 0 or not math.isclose(sum(p), 1.0, abs_tol=1e-9):
            raise ValueError(f"dropout probabilities must be >= 0 and sum to 1, got {p}")

    @property
    def probs(self) -> Tuple[float, float, float]:
        return (self.p_keep, self.p_drop_image, self.p_drop_depth)


NO_DROPOUT = DropoutScheme(1.0, 0.0, 0.0)
UNIFORM_DROPOUT = DropoutScheme(1 / 3, 1 / 3, 1 / 3)
NON_UNIFORM_DROPOUT = DropoutScheme(0.5, 0.25, 0.25)
SCHEMES = {"none": NO_DROPOUT, "uniform": UNIFORM_DROPOUT, "non-uniform": NON_UNIFORM_DROPOUT}

KEEP, DROP_IMAGE, DROP_DEPTH = 0, 1, 2


def draw_dropout_branches(n: int, scheme: DropoutScheme, rng: np.random.Generator) -> np.ndarray:
    """Per-sample branch: 0 keep both, 1 mask the image, 2 mask the depth."""
    u = rng.random(n)
    p = scheme.probs
    return np.where(u < p[0], KEEP, np.where(u < p[0] + p[1], DROP_IMAGE, DROP_DEPTH))


def apply_input_dropout(n: int, scheme: DropoutScheme,
                        rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Keep masks ``(image, depth)``; never both zero for the same sample."""
    b = draw_dropout_branches(n, scheme, rng)
    return (b != DROP_IMAGE).astype(np.float32), (b != DROP_DEPTH).astype(np.float32)


# --------------------------------------------------------------------------
# loss and metrics
# --------------------------------------------------------------------------

def pose_errors(pred, truth, wrap_theta: bool = True) -> np.ndarray:
    d = np.asarray(pred, dtype=float) - np.asarray(truth, dtype=float)
    if wrap_theta:
        d[..., 3] = wrap_angle(d[..., 3])
    return d


def loss(pred, truth, wrap_theta: bool = True) -> float:
    """Sum over the four outputs of the mean absolute error."""
    d = pose_errors(np.atleast_2d(pred), np.atleast_2d(truth), wrap_theta)
    return float(np.abs(d).mean(axis=0).sum())


def loss_and_grad(pred: np.ndarray, truth: np.ndarray, wrap_theta: bool = True):
    d = pred.astype(np.float64) - truth
    if wrap_theta:
        d[:, 3] = wrap_angle(d[:, 3])
    n = len(pred)
    return float(np.abs(d).sum() / n), (np.sign(d) / n).astype(pred.dtype)


def mae(pred, truth, wrap_theta: bool = True) -> np.ndarray:
    return np.abs(pose_errors(pred, truth, wrap_theta)).mean(axis=0)


def pearson(a, b) -> float:
    """Pearson correlation; 0 when either side has zero variance."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    da = a - a.mean()
    db = b - b.mean()
    den = math.sqrt(float(da @ da) * float(db @ db))
    if den == 0.0:
        return 0.0
    return float(np.clip((da @ db) / den, -1.0, 1.0))


class Metrics(NamedTuple):
    mae_x: float
    mae_y: float
    mae_z: float
    mae_theta: float
    pearson_x: float
    pearson_y: float
    pearson_z: float
    pearson_theta: float

    @property
    def mae(self) -> np.ndarray:
        return np.array(self[:4])

    @property
    def pearson(self) -> np.ndarray:
        return np.array(self[4:])


METRICS_HEADER = ["model", "seed"] + list(Metrics._fields)


def metrics_from_predictions(pred, truth, wrap_theta: bool = True) -> Metrics:
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if len(truth) == 0:
        raise ValueError("empty test set")
    m = mae(pred, truth, wrap_theta)
    p = [pearson(pred[:, i], truth[:, i]) for i in range(4)]
    return Metrics(*(float(v) for v in m), *p)


def evaluate(model, test: Dataset, depth_scale: float = 1.0, image_scale: float = 1.0) -> Metrics:
    """Per-output MAE and Pearson on ``test``.

    ``depth_scale=0`` zeroes the depth input (every zone invalid), which is how
    a missing depth sensor is simulated; ``image_scale=0`` blanks the image.
    """
    images, depths = _scaled_inputs(test, image_scale, depth_scale)
    return metrics_from_predictions(model.predict(images, depths), test.labels)


def _scaled_inputs(test: Dataset, image_scale: float, depth_scale: float):
    images = test.images
    depths = test.depths
    if image_scale != 1.0:
        images = np.clip(np.round(images * image_scale), 0, 255).astype(np.uint8)
    if depth_scale == 0.0:
        depths = np.full(depths.shape, np.nan, dtype=np.float32)
    elif depth_scale != 1.0:
        depths = depths * depth_scale
    return images, depths


def metrics_csv(rows: Sequence[Tuple[str, int, Metrics]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for name, seed, m in rows:
        w.writerow([name, seed] + [repr(float(v)) for v in m])
    return buf.getvalue()


def read_metrics_csv(text: str) -> List[Tuple[str, int, Metrics]]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != METRICS_HEADER:
        raise ValueError("unexpected metrics CSV header")
    return [(r[0], int(r[1]), Metrics(*(float(v) for v in r[2:]))) for r in rows[1:]]


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    epochs: int = 20
    subsample: float = 0.25          # fraction of the train set per epoch (or a count if > 1)
    batch_size: int = 64
    dropout: DropoutScheme = NON_UNIFORM_DROPOUT
    head_dropout: float = 0.5
    seed: int = 0
    wrap_theta: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be >= 1")
        if self.subsample <= 0:
            raise ValueError("subsample must be positive")

    def per_epoch(self, n_train: int) -> int:
        k = int(round(self.subsample * n_train)) if self.subsample <= 1 else int(self.subsample)
        if not 0 < k <= n_train:
            raise ValueError(f"per-epoch subsample {k} outside 1..{n_train}")
        return k


class EpochRecord(NamedTuple):
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    model: object
    history: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    def history_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss"]
        lines += [f"{r.epoch},{r.train_loss!r},{r.val_loss!r}" for r in self.history]
        return "\n".join(lines) + "\n"


def _streams(seed: int):
    ss = np.random.SeedSequence([int(seed), 0x7A1])
    order, drop, inputs = ss.spawn(3)
    return (np.random.default_rng(order), np.random.default_rng(drop),
            np.random.default_rng(inputs))


def validation_loss(model: FusionModel, params, data: Dataset, wrap_theta: bool = True) -> float:
    pred = model.predict(data.images if model.uses_image else None,
                         data.depths if model.uses_depth else None, params=params)
    return loss(pred, data.labels, wrap_theta)


def train_network(model: FusionModel, train_set: Dataset, val_set: Dataset,
                  config: TrainConfig) -> TrainResult:
    """SGD on one network; returns the snapshot with the lowest validation loss."""
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train and validation sets must be non-empty")
    order_rng, drop_rng, input_rng = _streams(config.seed)
    fused = model.uses_image and model.uses_depth
    params = {k: v.copy() for k, v in model.params.items()}
    best = None
    best_val = math.inf
    result = TrainResult(model)
    per_epoch = config.per_epoch(len(train_set))
    for epoch in range(1, config.epochs + 1):
        idx = order_rng.permutation(len(train_set))[:per_epoch]
        total, count = 0.0, 0
        for s in range(0, per_epoch, config.batch_size):
            bi = np.sort(idx[s:s + config.batch_size])
            img, dep = model.prepare(train_set.images[bi] if model.uses_image else None,
                                     train_set.depths[bi] if model.uses_depth else None)
            keep_i = keep_d = None
            if fused:
                keep_i, keep_d = apply_input_dropout(len(bi), config.dropout, input_rng)
            tapes: Dict = {}
            pred = model.forward(img, dep, params=params, training=True, rng=drop_rng,
                                 keep_image=keep_i, keep_depth=keep_d, tapes=tapes)
            batch_loss, dpred = loss_and_grad(pred, train_set.labels[bi], config.wrap_theta)
            if not math.isfinite(batch_loss):
                raise DivergenceError(epoch)
            grads = model.backward(tapes, dpred, params=params, keep_image=keep_i,
                                   keep_depth=keep_d)
            params = nn.sgd_step(params, grads, config.lr)
            total += batch_loss * len(bi)
            count += len(bi)
        train_loss = total / count
        val = validation_loss(model, params, val_set, config.wrap_theta)
        if not math.isfinite(train_loss) or not math.isfinite(val):
            raise DivergenceError(epoch)
        result.history.append(EpochRecord(epoch, train_loss, val))
        log.info("%s epoch %d train %.4f val %.4f", model.tag, epoch, train_loss, val)
        if val < best_val:
            best_val = val
            best = {k: v.copy() for k, v in params.items()}
            result.best_epoch = epoch
    model.params = best
    return result


def train(variant, train_set: Dataset, val_set: Dataset, config: TrainConfig) -> TrainResult:
    """Train a built variant. Ensembles train their two sub-models independently."""
    if isinstance(variant, AverageEnsemble):
        a = train_network(variant.camera, train_set, val_set, config)
        b = train_network(variant.depth, train_set, val_set,
                          _replace_seed(config, config.seed + 1))
        hist = [EpochRecord(ra.epoch, (ra.train_loss + rb.train_loss) / 2,
                            (ra.val_loss + rb.val_loss) / 2)
                for ra, rb in zip(a.history, b.history)]
        return TrainResult(variant, hist, a.best_epoch)
    return train_network(variant, train_set, val_set, config)


def _replace_seed(config: TrainConfig, seed: int) -> TrainConfig:
    return replace(config, seed=seed)
