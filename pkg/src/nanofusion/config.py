"""
Pipeline configuration: an INI file (``[section]`` headers, ``key = value``
lines) parsed with :mod:`configparser`. Unknown sections or keys are
rejected. Overrides use ``section.key=value`` strings.
"""
from __future__ import annotations

import configparser
import io
import math
import zlib
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from . import augment, closedloop, models, train, scenegen, tiling


class ConfigError(ValueError):
    pass


DEFAULTS: Dict[str, Dict[str, str]] = {
    "general": {
        "seed": "0",
        "workdir": "run",
    },
    "data": {
        "train_renders": "5000",
        "val_renders": "500",
        "test_renders": "500",
        "copies": "4",
        "flip_probability": "0.5",
    },
    "scene": {
        "x_range": "0.5, 3.5",
        "y_range": "-1.5, 1.5",
        "z_range": "-0.5, 0.5",
        "attitude_jitter_deg": "3.0",
    },
    "augment": {
        "distortion": "-0.15, 0.15",
        "motion_length": "1, 9",
        "gaussian_sigma": "0, 1.5",
        "vignette": "0, 0.4",
        "gain": "0.6, 1.4",
        "offset": "-25, 25",
        "noise_sigma": "0, 12",
    },
    "train": {
        "variants": "cam, depth-mid, depth-late, mid-fusion, late-fusion, avg-mid, avg-late",
        "seeds": "0",
        "lr": "0.001",
        "epochs": "20",
        "subsample": "0.25",
        "batch_size": "64",
        "dropout": "non-uniform",
        "head_dropout": "0.5",
        "wrap_theta": "true",
    },
    "quant": {
        "calibration_samples": "256",
    },
    "tiling": {
        "l1_bytes": "65536",
        "l2_bytes": "524288",
    },
    "sim": {
        "model": "mocap",
        "path": "default",
        "runs": "1",
        "dt": str(1 / 30),
        "k_pos": "1.0",
        "k_yaw": "2.0",
        "v_max": "1.5",
        "omega_max": "2.0",
        "depth_period": "2",
    },
}


def stream_seed(master: int, name: str) -> int:
    """Named 32-bit sub-stream of the master seed (e.g. ``data``, ``train``, ``sim``)."""
    ss = np.random.SeedSequence([int(master), zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


class Config:
    """Resolved configuration with typed accessors."""

    def __init__(self, parser: configparser.ConfigParser):
        self.parser = parser

    # ---- construction -----------------------------------------------------
    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Iterable[str] = ()) -> "Config":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        parser.read_dict(DEFAULTS)
        if path is not None:
            try:
                text = Path(path).read_text()
            except OSError as e:
                raise ConfigError(f"cannot read config {path}: {e}") from e
            user = configparser.ConfigParser(interpolation=None)
            user.optionxform = str
            try:
                user.read_string(text, source=str(path))
            except configparser.Error as e:
                raise ConfigError(f"malformed config {path}: {e}") from e
            for section in user.sections():
                for key, value in user.items(section):
                    cls._set(parser, section, key, value)
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"override {item!r} must look like section.key=value")
            lhs, value = item.split("=", 1)
            section, key = lhs.strip().split(".", 1)
            cls._set(parser, section, key.strip(), value.strip())
        cfg = cls(parser)
        cfg.validate()
        return cfg

    @staticmethod
    def _set(parser, section, key, value):
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        parser.set(section, key, value)

    def text(self) -> str:
        buf = io.StringIO()
        self.parser.write(buf)
        return buf.getvalue()

    # ---- typed getters ---------------------------------------------------------
    def get(self, section: str, key: str) -> str:
        return self.parser.get(section, key)

    def int(self, section: str, key: str) -> int:
        try:
            return self.parser.getint(section, key)
        except ValueError as e:
            raise ConfigError(f"{section}.{key}: expected an integer") from e

    def float(self, section: str, key: str) -> float:
        try:
            v = self.parser.getfloat(section, key)
        except ValueError as e:
            raise ConfigError(f"{section}.{key}: expected a number") from e
        if not math.isfinite(v):
            raise ConfigError(f"{section}.{key}: must be finite")
        return v

    def bool(self, section: str, key: str) -> bool:
        try:
            return self.parser.getboolean(section, key)
        except ValueError as e:
            raise ConfigError(f"{section}.{key}: expected true or false") from e

    def list(self, section: str, key: str):
        return [v.strip() for v in self.get(section, key).split(",") if v.strip()]

    def pair(self, section: str, key: str) -> Optional[Tuple[float, float]]:
        raw = self.get(section, key).strip().lower()
        if raw == "off":
            return None
        try:
            lo, hi = (float(v) for v in raw.split(","))
        except ValueError as e:
            raise ConfigError(f"{section}.{key}: expected 'low, high' or 'off'") from e
        if lo > hi:
            raise ConfigError(f"{section}.{key}: low > high")
        return lo, hi

    # ---- derived objects ---------------------------------------------------------
    @property
    def seed(self) -> int:
        return self.int("general", "seed")

    @property
    def workdir(self) -> Path:
        return Path(self.get("general", "workdir"))

    def balance(self) -> scenegen.PoseBalance:
        theta = (-math.pi, math.pi)
        return scenegen.PoseBalance(self.pair("scene", "x_range"), self.pair("scene", "y_range"),
                                    self.pair("scene", "z_range"), theta,
                                    math.radians(self.float("scene", "attitude_jitter_deg")))

    def recipe(self) -> augment.AugmentationRecipe:
        def stage(key):
            p = self.pair("augment", key)
            return augment.Stage(False) if p is None else augment.Stage(True, *p)
        motion = stage("motion_length")
        angle = augment.Stage(motion.enabled, 0.0, math.pi)
        return augment.AugmentationRecipe(stage("distortion"), motion, angle,
                                          stage("gaussian_sigma"), stage("vignette"),
                                          stage("gain"), stage("offset"), stage("noise_sigma"))

    def variants(self):
        tags = self.list("train", "variants")
        bad = [t for t in tags if t not in models.VARIANT_TAGS]
        if bad:
            raise ConfigError(f"train.variants: unknown tags {bad}")
        return tags

    def train_seeds(self):
        try:
            return [int(s) for s in self.list("train", "seeds")]
        except ValueError as e:
            raise ConfigError("train.seeds: expected integers") from e

    def train_config(self, seed: int) -> train.TrainConfig:
        scheme = self.get("train", "dropout")
        if scheme not in train.SCHEMES:
            raise ConfigError(f"train.dropout must be one of {sorted(train.SCHEMES)}")
        return train.TrainConfig(lr=self.float("train", "lr"), epochs=self.int("train", "epochs"),
                                 subsample=self.float("train", "subsample"),
                                 batch_size=self.int("train", "batch_size"),
                                 dropout=train.SCHEMES[scheme],
                                 head_dropout=self.float("train", "head_dropout"),
                                 wrap_theta=self.bool("train", "wrap_theta"),
                                 seed=stream_seed(self.seed, f"train/{seed}"))

    def budget(self) -> tiling.MemoryBudget:
        return tiling.MemoryBudget(self.int("tiling", "l1_bytes"), self.int("tiling", "l2_bytes"))

    def sim_config(self, run: int) -> closedloop.SimConfig:
        return closedloop.SimConfig(dt=self.float("sim", "dt"), k_pos=self.float("sim", "k_pos"),
                                    k_yaw=self.float("sim", "k_yaw"),
                                    v_max=self.float("sim", "v_max"),
                                    omega_max=self.float("sim", "omega_max"),
                                    depth_period=self.int("sim", "depth_period"),
                                    seed=stream_seed(self.seed, f"sim/{run}"))

    def path(self) -> closedloop.SubjectPath:
        name = self.get("sim", "path")
        if name == "default":
            return closedloop.default_path()
        if name.startswith("straight"):
            _, _, dur = name.partition(":")
            return closedloop.straight_path(float(dur) if dur else 20.0)
        raise ConfigError("sim.path must be 'default' or 'straight[:seconds]'")

    def validate(self) -> None:
        """Build every derived object once so bad values fail early."""
        try:
            self.seed
            for k in ("train_renders", "val_renders", "test_renders", "copies"):
                if self.int("data", k) < 1:
                    raise ConfigError(f"data.{k} must be >= 1")
            p = self.float("data", "flip_probability")
            if not 0 <= p <= 1:
                raise ConfigError("data.flip_probability must be in [0, 1]")
            self.balance()
            self.recipe()
            self.variants()
            for s in self.train_seeds():
                self.train_config(s)
            if self.int("quant", "calibration_samples") < 64:
                raise ConfigError("quant.calibration_samples must be >= 64")
            self.budget()
            self.sim_config(0)
            self.path()
            if self.int("sim", "runs") < 1:
                raise ConfigError("sim.runs must be >= 1")
        except ConfigError:
            raise
        except (ValueError, TypeError) as e:
            raise ConfigError(str(e)) from e
