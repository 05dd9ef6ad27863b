"""Samples, the synthetic shape generator and the PNG directory format.

Directory layout::

    images/<name>.png   8-bit grayscale
    masks/<name>.png    8-bit grayscale, tumour pixels >= 128
    labels.csv          header ``filename,label``; label is a class name
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, FormatError
from .model import CLASS_NAMES

NOISE_AMPLITUDE = 0.2
SHAPE_INTENSITY = 0.5
MASK_THRESHOLD = 128


@dataclass
class Sample:
    image: np.ndarray  # (h, w, 1) in [0, 1]
    mask: np.ndarray  # (h, w, 1) in {0, 1}
    label: int
    name: str = ""

    def __post_init__(self):
        if self.image.ndim == 2:
            self.image = self.image[..., None]
        if self.mask.ndim == 2:
            self.mask = self.mask[..., None]
        if self.label not in range(len(CLASS_NAMES)):
            raise DataError(f"sample {self.name!r}: label {self.label} out of range")


@dataclass
class Dataset:
    samples: List[Sample]
    seed: Optional[int] = None
    # positions of these samples in the dataset they were split from
    indices: Optional[List[int]] = None
    name: str = ""

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def __getitem__(self, i) -> Sample:
        return self.samples[i]

    def subset(self, idx: Sequence[int], name: str = "") -> "Dataset":
        return Dataset([self.samples[i] for i in idx], self.seed, list(idx), name)

    def images(self, idx=None) -> np.ndarray:
        picked = self.samples if idx is None else [self.samples[i] for i in idx]
        return np.stack([s.image for s in picked])

    def masks(self, idx=None) -> np.ndarray:
        picked = self.samples if idx is None else [self.samples[i] for i in idx]
        return np.stack([s.mask for s in picked])

    def labels(self, idx=None) -> np.ndarray:
        picked = self.samples if idx is None else [self.samples[i] for i in idx]
        return np.array([s.label for s in picked], dtype=int)

    @property
    def image_size(self) -> Tuple[int, int]:
        return self.samples[0].image.shape[:2]


# ----------------------------------------------------------------------
# synthetic shapes


def _ellipse(yy, xx, cy, cx, a, b, theta):
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    return u * u + v * v <= 1.0


def _draw_shape(label: int, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    s = min(h, w)
    cy, cx = rng.uniform(0.35, 0.65) * (h - 1), rng.uniform(0.35, 0.65) * (w - 1)
    if label == 0:
        a = rng.uniform(0.13, 0.22) * s
        b = a * rng.uniform(0.6, 1.0)
        return _ellipse(yy, xx, cy, cx, a, b, rng.uniform(0, np.pi))
    if label == 1:
        mask = np.zeros((h, w), dtype=bool)
        for k in range(int(rng.integers(3, 5))):
            angle = 2 * np.pi * k / 4 + rng.uniform(-0.4, 0.4)
            reach = rng.uniform(0.08, 0.14) * s
            a = rng.uniform(0.07, 0.11) * s
            mask |= _ellipse(yy, xx, cy + reach * np.sin(angle), cx + reach * np.cos(angle),
                             a, a * rng.uniform(0.5, 0.9), rng.uniform(0, np.pi))
        return mask
    outer = rng.uniform(0.15, 0.23) * s
    inner = outer * rng.uniform(0.45, 0.6)
    r = np.hypot(yy - cy, xx - cx)
    return (r <= outer) & (r > inner)


def synthetic_dataset(n: int, h: int = 64, w: int = 64, seed: int = 0) -> Dataset:
    """Noisy background plus one shape per image: ellipse, blob or ring.

    Labels cycle 0, 1, 2 before a seeded shuffle, so every class count is
    within one of n/3.
    """
    if n < 10:
        raise ConfigError(f"synthetic_dataset needs n >= 10, got {n}")
    if h < 16 or w < 16:
        raise ConfigError(f"synthetic images must be at least 16x16, got {h}x{w}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation([i % 3 for i in range(n)])
    samples = []
    for i, label in enumerate(labels):
        mask = _draw_shape(int(label), h, w, rng)
        while not mask.any():
            mask = _draw_shape(int(label), h, w, rng)
        image = rng.uniform(0.0, NOISE_AMPLITUDE, (h, w)) + SHAPE_INTENSITY * mask
        samples.append(Sample(np.clip(image, 0.0, 1.0)[..., None], mask.astype(np.uint8)[..., None],
                              int(label), f"sample_{i:04d}"))
    return Dataset(samples, seed, name="synthetic")


def split(ds: Dataset, ratio: float = 0.8, seed: int = 0) -> Tuple[Dataset, Dataset]:
    """Seeded shuffle, then the first round(ratio * n) samples train."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must lie in (0, 1), got {ratio}")
    order = np.random.default_rng(seed).permutation(len(ds))
    n_train = int(round(ratio * len(ds)))
    return (ds.subset(order[:n_train].tolist(), "train"),
            ds.subset(order[n_train:].tolist(), "validation"))


# ----------------------------------------------------------------------
# PNG directory format


def read_gray_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.format != "PNG" or im.mode != "L":
                raise FormatError(f"{path.name}: expected 8-bit grayscale PNG, got {im.format} mode {im.mode}")
            return np.asarray(im, dtype=np.uint8)
    except FormatError:
        raise
    except OSError as exc:
        raise FormatError(f"{path.name}: cannot decode image ({exc})") from None


def write_gray_png(path: Path, pixels: np.ndarray) -> None:
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="L").save(path, format="PNG")


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_dataset(ds: Dataset, root) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    with open(root / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["filename", "label"])
        for i, s in enumerate(ds):
            fname = f"{s.name or f'sample_{i:04d}'}.png"
            write_gray_png(root / "images" / fname, to_uint8(s.image[..., 0]))
            write_gray_png(root / "masks" / fname, s.mask[..., 0].astype(np.uint8) * 255)
            writer.writerow([fname, CLASS_NAMES[s.label]])
    return root


def _read_labels(path: Path) -> dict:
    if not path.is_file():
        raise DataError(f"missing labels file {path}")
    labels = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["filename", "label"]:
            raise DataError(f"{path.name}: header must be 'filename,label'")
        for row in reader:
            name, label = row["filename"].strip(), (row["label"] or "").strip().lower()
            if label not in CLASS_NAMES:
                raise DataError(f"{path.name}: unknown label {label!r} for {name}")
            labels[name] = CLASS_NAMES.index(label)
    return labels


def load_dataset(root) -> Dataset:
    """Load every image/mask/label triple under ``root``."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    image_dir, mask_dir = root / "images", root / "masks"
    images = sorted(image_dir.glob("*.png")) if image_dir.is_dir() else []
    if not images:
        raise DataError(f"no images found under {image_dir}")
    labels = _read_labels(root / "labels.csv")
    stray = sorted(set(labels) - {p.name for p in images})
    if stray:
        raise DataError(f"labels.csv lists {stray[0]} but images/{stray[0]} is missing")

    samples, size = [], None
    for path in images:
        mask_path = mask_dir / path.name
        if not mask_path.is_file():
            raise DataError(f"{path.name}: missing mask masks/{path.name}")
        if path.name not in labels:
            raise DataError(f"{path.name}: no row in labels.csv")
        image = read_gray_png(path)
        mask = read_gray_png(mask_path)
        if mask.shape != image.shape:
            raise DataError(f"{path.name}: mask shape {mask.shape} differs from image {image.shape}")
        if size is not None and image.shape != size:
            raise DataError(f"{path.name}: size {image.shape} differs from {size}")
        size = image.shape
        samples.append(Sample((image / 255.0)[..., None], (mask >= MASK_THRESHOLD).astype(np.uint8)[..., None],
                              labels[path.name], path.stem))
    return Dataset(samples, name=root.name)
