"""Image datasets: directory loading, synthetic proxy, subsampling, batching.

Every image is stored as float64 in [-1, 1] with shape (1, H, W), the range of
the generator's tanh output, so real and generated batches share support.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".pgm", ".bmp", ".jpg", ".jpeg", ".ppm", ".tif", ".tiff"}


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    class_names: tuple
    provenance: str = "synthetic"
    skipped: int = 0

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if self.images.size and (self.images.min() < -1.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [-1, 1]")
        C = len(self.class_names)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= C):
            raise ValueError(f"labels must lie in [0, {C})")

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.class_names, self.provenance)


@dataclass
class LabeledBatch:
    images: np.ndarray
    labels: np.ndarray
    indices: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return len(self.labels)


# ---------------------------------------------------------------------------
# preprocessing


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centres and edge clamping.

    Resizing to the same size returns the input unchanged.
    """
    H, W = img.shape

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        i0 = np.floor(src).astype(np.intp)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, wy = axis(H, out_h)
    x0, x1, wx = axis(W, out_w)
    wy = wy[:, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def to_unit_range(gray: np.ndarray) -> np.ndarray:
    """Map 8-bit intensities 0..255 onto [-1, 1]."""
    return np.clip(np.asarray(gray, dtype=np.float64) / 127.5 - 1.0, -1.0, 1.0)


def load_image(path, image_size: int) -> np.ndarray:
    """Read one image as luminance, resize, normalise. Returns (1, S, S)."""
    from PIL import Image

    with Image.open(path) as im:
        gray = np.asarray(im.convert("L"), dtype=np.float64)
    gray = bilinear_resize(gray, image_size, image_size)
    return to_unit_range(gray)[None]


def load_image_dir(root, image_size: int) -> Dataset:
    """Load ``root/<class_name>/*`` with classes indexed in sorted name order.

    Unreadable files are skipped with a warning and counted in ``skipped``.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ValueError(f"{root}: expected one subdirectory per class, found none")
    images, labels, skipped = [], [], 0
    for label, cdir in enumerate(class_dirs):
        n_class = 0
        for f in sorted(cdir.iterdir()):
            if not f.is_file() or f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                images.append(load_image(f, image_size))
            except Exception as exc:  # PIL raises a zoo of types for bad files
                skipped += 1
                logger.warning("skipping unreadable image %s: %s", f, exc)
                continue
            labels.append(label)
            n_class += 1
        if n_class == 0:
            raise ValueError(f"{cdir}: class directory holds no readable images")
    return Dataset(
        np.stack(images),
        np.array(labels),
        tuple(p.name for p in class_dirs),
        provenance="directory",
        skipped=skipped,
    )


# ---------------------------------------------------------------------------
# synthetic pneumonia proxy


@dataclass(frozen=True)
class SyntheticSpec:
    image_size: int = 32
    n_per_class: int = 100
    seed: int = 0
    blob_count_range: tuple = (3, 6)
    noise_std: float = 0.05


SYNTHETIC_CLASSES = ("normal", "opacity")


def _synthetic_image(rng, size, with_blobs, spec):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    yy = (yy + 0.5) / size
    xx = (xx + 0.5) / size
    cy, cx = 0.5 + rng.uniform(-0.04, 0.04, size=2)
    ay, ax = rng.uniform(0.30, 0.45, size=2)
    r = np.sqrt(((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2)
    body = 1.0 / (1.0 + np.exp((r - 1.0) * 12.0))
    img = 0.08 + rng.uniform(0.35, 0.5) * body
    if with_blobs:
        lo, hi = spec.blob_count_range
        for _ in range(rng.integers(lo, hi + 1)):
            rad = 0.7 * np.sqrt(rng.uniform())
            ang = rng.uniform(0, 2 * np.pi)
            by, bx = cy + rad * ay * np.sin(ang), cx + rad * ax * np.cos(ang)
            sigma = rng.uniform(0.05, 0.10)
            amp = rng.uniform(0.20, 0.40)
            img = img + amp * np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * sigma**2))
    img = img + rng.normal(0.0, spec.noise_std, size=img.shape)
    return np.clip(img, 0.0, 1.0) * 2.0 - 1.0


def make_synthetic(spec: SyntheticSpec) -> Dataset:
    """Balanced two-class proxy for chest X-rays, deterministic per seed.

    Class 0 ("normal") is a dark field with a soft bright ellipse; class 1
    ("opacity") adds 3-6 bright Gaussian blobs inside the ellipse. Both get
    Gaussian pixel noise.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n_per_class
    images = np.empty((2 * n, 1, spec.image_size, spec.image_size))
    labels = np.repeat([0, 1], n)
    for i, lab in enumerate(labels):
        images[i, 0] = _synthetic_image(rng, spec.image_size, bool(lab), spec)
    return Dataset(images, labels, SYNTHETIC_CLASSES, provenance="synthetic")


# ---------------------------------------------------------------------------
# sampling


def subsample_balanced(ds: Dataset, n_total: int, seed: int) -> Dataset:
    """Draw exactly ``n_total / C`` samples per class without replacement."""
    C = ds.num_classes
    if n_total <= 0 or n_total % C:
        raise ValueError(f"n_total={n_total} must be a positive multiple of the class count {C}")
    per_class = n_total // C
    counts = ds.class_counts()
    if counts.min() < per_class:
        raise ValueError(
            f"cannot draw {per_class} per class; class counts are "
            + ", ".join(f"{name}={c}" for name, c in zip(ds.class_names, counts))
        )
    rng = np.random.default_rng(seed)
    chosen = [rng.choice(np.flatnonzero(ds.labels == c), per_class, replace=False) for c in range(C)]
    idx = rng.permutation(np.concatenate(chosen))
    return ds.subset(idx)


def batch_iter(ds: Dataset, batch_size: int, seed: int, epoch: int) -> Iterator[LabeledBatch]:
    """Shuffled minibatches for one epoch; the short final batch is dropped."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    N = len(ds)
    if batch_size > N:
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {N}")
    rng = np.random.default_rng(np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=(int(epoch),)))
    order = rng.permutation(N)
    for start in range(0, N - batch_size + 1, batch_size):
        idx = order[start : start + batch_size]
        yield LabeledBatch(ds.images[idx], ds.labels[idx], idx)


def batches_per_epoch(n: int, batch_size: int) -> int:
    return n // batch_size
