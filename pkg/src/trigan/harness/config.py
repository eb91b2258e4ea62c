"""Experiment configuration, hashing and dataset resolution.

Precedence, lowest to highest: built-in defaults, ``TRIGAN_OUT`` (output root
only), JSON config file, command-line flags.
"""
from __future__ import annotations

import dataclasses
import functools
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from ..data import Dataset, SyntheticSpec, load_image_dir, make_synthetic, subsample_balanced
from ..losses import KL_DIRECTIONS, LossWeights
from ..seeding import derive_seed
from ..training import TrainerKind

PROTOCOL_SIZES = (200, 500, 750, 1000, 2000)
ALL_TRAINERS = tuple(k.value for k in TrainerKind)

# fields that locate or schedule a run but do not change its numbers
_UNHASHED = {"out_dir", "jobs", "record_wall_time", "sample_every", "trainers", "train_sizes", "repeats"}
_ALIASES = {"lambda": "lam", "algo": "trainer"}


def default_out_dir() -> str:
    return os.environ.get("TRIGAN_OUT", "runs")


@dataclass
class ExperimentConfig:
    """Every knob of a run or a sweep.

    The defaults are the reference protocol: 100 epochs, batch 10,
    five repeats over training sizes 200-2000, 64x64 inputs, tau=0.9,
    alpha=0.3, lambda=0.01, Adam(2e-4, 0.5, 0.999).
    """

    trainer: str = "tri_gan"
    tau: float = 0.9
    alpha: float = 0.3
    lam: float = 0.01
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    latent_dim: int = 100
    image_size: int = 64
    base_width: int = 64
    epochs: int = 100
    batch_size: int = 10
    n_train: int = 200
    seed: int = 0
    kl_direction: str = "real-to-fake"
    update_order: str = "DGC"
    # data source: a directory tree, or the synthetic proxy when data_dir is empty
    data_dir: str = ""
    val_dir: str = ""
    synthetic_pool_per_class: int = 1000
    synthetic_val_per_class: int = 200
    data_seed: int = 0
    # sweep grid
    trainers: list = field(default_factory=lambda: list(ALL_TRAINERS))
    train_sizes: list = field(default_factory=lambda: list(PROTOCOL_SIZES))
    repeats: int = 5
    # bookkeeping
    out_dir: str = field(default_factory=default_out_dir)
    sample_every: int = 10
    record_wall_time: bool = False
    jobs: int = 1

    def validate(self) -> "ExperimentConfig":
        self.trainer = TrainerKind.parse(self.trainer).value
        self.trainers = [TrainerKind.parse(t).value for t in self.trainers]
        LossWeights(self.tau, self.alpha, self.lam)
        checks = {
            "epochs": self.epochs >= 0,
            "batch_size": self.batch_size >= 1,
            "n_train": self.n_train >= 1,
            "repeats": self.repeats >= 1,
            "latent_dim": self.latent_dim >= 1,
            "base_width": self.base_width >= 1,
            "image_size": self.image_size >= 32 and not self.image_size & (self.image_size - 1),
            "lr": self.lr >= 0,
            "beta1": 0 <= self.beta1 < 1,
            "beta2": 0 <= self.beta2 < 1,
            "eps": self.eps > 0,
            "kl_direction": self.kl_direction in KL_DIRECTIONS,
            "update_order": sorted(self.update_order) == sorted("DGC"),
            "train_sizes": bool(self.train_sizes) and all(int(s) >= 1 for s in self.train_sizes),
            "jobs": self.jobs >= 1,
            "sample_every": self.sample_every >= 0,
            "synthetic_pool_per_class": self.synthetic_pool_per_class >= 1,
            "synthetic_val_per_class": self.synthetic_val_per_class >= 1,
        }
        bad = [k for k, ok in checks.items() if not ok]
        if bad:
            raise ValueError("invalid config field(s): " + ", ".join(f"{k}={getattr(self, k)!r}" for k in bad))
        return self

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.tau, self.alpha, self.lam)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        data = {}
        for key, value in raw.items():
            key = _ALIASES.get(key, key)
            if key not in known:
                raise ValueError(f"unknown config field {key!r}")
            data[key] = value
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        return cls.from_dict(raw)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def run_hash(self) -> str:
        """Stable 12-hex-digit digest of the fields that affect a single run."""
        payload = {k: v for k, v in self.to_dict().items() if k not in _UNHASHED}
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def sweep_hash(self) -> str:
        payload = {k: v for k, v in self.to_dict().items() if k not in {"out_dir", "jobs", "record_wall_time"}}
        payload.pop("trainer")
        payload.pop("n_train")
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return "sweep-" + hashlib.sha256(blob.encode()).hexdigest()[:12]


@functools.lru_cache(maxsize=8)
def _synthetic(image_size, n_per_class, seed):
    return make_synthetic(SyntheticSpec(image_size=image_size, n_per_class=n_per_class, seed=seed))


@functools.lru_cache(maxsize=4)
def _directory(path, image_size):
    return load_image_dir(path, image_size)


def resolve_pool(config: ExperimentConfig):
    """Return ``(train_pool, val_set)`` before subsampling.

    A ``data_dir`` holding ``train/`` and ``test/`` (the layout of the public
    pneumonia X-ray release) uses ``test/`` as the external validation split;
    otherwise ``val_dir`` must be given.
    """
    if not config.data_dir:
        pool = _synthetic(
            config.image_size, config.synthetic_pool_per_class, derive_seed(config.data_seed, "synthetic_train")
        )
        val = _synthetic(
            config.image_size, config.synthetic_val_per_class, derive_seed(config.data_seed, "synthetic_val")
        )
        return pool, val
    root = Path(config.data_dir)
    train_dir, val_dir = root, Path(config.val_dir) if config.val_dir else None
    if val_dir is None and (root / "train").is_dir() and (root / "test").is_dir():
        train_dir, val_dir = root / "train", root / "test"
    if val_dir is None:
        raise ValueError(f"{root}: no validation split; pass val_dir or use a train/ + test/ layout")
    return _directory(str(train_dir), config.image_size), _directory(str(val_dir), config.image_size)


def resolve_datasets(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Training subset of ``n_train`` balanced samples and the validation set."""
    pool, val = resolve_pool(config)
    if pool.class_names != val.class_names:
        raise ValueError(f"train classes {pool.class_names} differ from validation classes {val.class_names}")
    train = subsample_balanced(pool, config.n_train, derive_seed(config.seed, "subsample"))
    return train, val
