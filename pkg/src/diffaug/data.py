"""Tiny-dataset supply: procedural shapes, folder loading, subsampling, batches.

The validation split (20%) is carved from the full dataset before any
subsampling, so diagnostics computed against it stay comparable across data
fractions. Horizontal flips of real images happen in the batch iterator; they
are plain data augmentation, not part of the differentiable policy.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .rng import stream
from .tensor import Tensor

_f32 = np.float32

VAL_FRACTION = 0.2

# (background, foreground) palette per class, values in [-1, 1]; the wide
# per-image jitter below keeps within-class variety high so a small train
# split covers the distribution only sparsely
_PALETTES = [
    ((-0.80, -0.60, 0.20), (0.90, 0.80, -0.50)),
    ((0.30, -0.70, -0.70), (-0.50, 0.80, 0.90)),
    ((-0.60, 0.40, -0.60), (0.80, -0.40, 0.70)),
    ((-0.10, -0.10, -0.10), (0.90, 0.90, 0.90)),
    ((0.60, 0.30, -0.70), (-0.80, -0.20, 0.80)),
    ((-0.30, 0.10, 0.60), (0.70, 0.60, -0.80)),
]
_JITTER = 0.7


class DataError(ValueError):
    pass


@dataclass
class SyntheticSpec:
    n: int
    resolution: int
    seed: int
    kind: str = "colored-shapes"


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, R, R) float32 in [-1, 1]
    name: str
    train_indices: np.ndarray
    val_indices: np.ndarray

    @property
    def resolution(self) -> int:
        return self.images.shape[2]

    def train_images(self) -> np.ndarray:
        return self.images[self.train_indices]

    def val_images(self) -> np.ndarray:
        return self.images[self.val_indices]


def _split_indices(n: int, seed: int):
    perm = stream(seed, "split").permutation(n)
    n_val = max(1, int(round(n * VAL_FRACTION)))
    val = np.sort(perm[:n_val])
    train = np.sort(perm[n_val:])
    return train, val


def make_synthetic(spec: SyntheticSpec) -> Dataset:
    """Colored ellipses/rectangles on class-colored backgrounds."""
    if spec.kind != "colored-shapes":
        raise DataError(f"unknown synthetic kind {spec.kind!r}")
    if spec.n < 80:
        raise DataError(f"synthetic dataset needs n >= 80, got {spec.n}")
    if spec.resolution not in (16, 32):
        raise DataError(f"resolution must be 16 or 32, got {spec.resolution}")
    r = spec.resolution
    rng = stream(spec.seed, "dataset")
    yy, xx = np.mgrid[0:r, 0:r].astype(np.float64)
    images = np.empty((spec.n, 3, r, r), dtype=_f32)
    for i in range(spec.n):
        cls = int(rng.integers(0, len(_PALETTES)))
        bg, fg = _PALETTES[cls]
        img = np.empty((3, r, r), dtype=np.float64)
        bg_jit = rng.uniform(-_JITTER, _JITTER, size=3)
        for c in range(3):
            img[c] = bg[c] + bg_jit[c]
        n_shapes = int(rng.integers(1, 4))
        for _ in range(n_shapes):
            is_rect = rng.integers(0, 2) == 1
            cy = rng.uniform(0.15 * r, 0.85 * r)
            cx = rng.uniform(0.15 * r, 0.85 * r)
            ry = rng.uniform(0.10 * r, 0.38 * r)
            rx = rng.uniform(0.10 * r, 0.38 * r)
            color = np.asarray(fg) + rng.uniform(-_JITTER, _JITTER, size=3)
            if is_rect:
                mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
            else:
                mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
            for c in range(3):
                img[c][mask] = color[c]
        images[i] = np.clip(img, -1.0, 1.0)
    train, val = _split_indices(spec.n, spec.seed)
    return Dataset(images, f"synthetic-{spec.kind}-{spec.n}", train, val)


def _load_image(path: Path, resolution: int) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB")
        w, h = im.size
        side = min(w, h)
        left = (w - side) // 2
        top = (h - side) // 2
        im = im.crop((left, top, left + side, top + side))
        if im.size != (resolution, resolution):
            im = im.resize((resolution, resolution), Image.BILINEAR)
        arr = np.asarray(im, dtype=_f32)
    return (arr / 127.5 - 1.0).transpose(2, 0, 1)


def load_folder(path, resolution: int, split_seed: int = 0) -> Dataset:
    """Load an image folder: center-crop to square, bilinear resize, [-1, 1]."""
    folder = Path(path)
    if not folder.is_dir():
        raise DataError(f"not a directory: {folder}")
    images = []
    for f in sorted(folder.iterdir()):
        if not f.is_file():
            continue
        try:
            images.append(_load_image(f, resolution))
        except Exception as e:
            warnings.warn(f"skipping unreadable image {f.name}: {e}")
    if not images:
        raise DataError(f"no decodable images in {folder}")
    stack = np.stack(images).astype(_f32)
    train, val = _split_indices(len(images), split_seed)
    return Dataset(stack, folder.name, train, val)


def subsample(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """Keep ceil(fraction * train) images, chosen by seeded shuffle.

    Smaller fractions of the same seed are nested subsets of larger ones;
    the validation split is untouched.
    """
    if not 0.0 < fraction <= 1.0:
        raise DataError(f"fraction must be in (0, 1], got {fraction}")
    n_train = len(dataset.train_indices)
    k = math.ceil(fraction * n_train)
    if k < 1:
        raise DataError("subsample would keep zero train images")
    perm = np.random.default_rng(seed).permutation(n_train)
    chosen = np.sort(dataset.train_indices[perm[:k]])
    return Dataset(dataset.images, dataset.name, chosen, dataset.val_indices)


def hflip(images: np.ndarray) -> np.ndarray:
    """Left-right flip (an involution: hflip(hflip(x)) == x bit-exactly)."""
    return np.ascontiguousarray(images[..., ::-1])


def batch_iter(dataset: Dataset, batch_size: int, flip: bool,
               rng: np.random.Generator) -> Iterator[Tensor]:
    """Endless stream of training batches from seeded shuffled epochs.

    Each real image is independently flipped left-right with probability 0.5
    when flip is on. Falls back to sampling with replacement when the train
    split is smaller than the batch.
    """
    train = dataset.images[dataset.train_indices]
    n = len(train)
    if n == 0:
        raise DataError("empty train split")
    while True:
        if batch_size > n:
            idx_stream = [rng.integers(0, n, size=batch_size)]
        else:
            perm = rng.permutation(n)
            idx_stream = [perm[i : i + batch_size]
                          for i in range(0, n - batch_size + 1, batch_size)]
        for idx in idx_stream:
            batch = train[idx].copy()
            if flip:
                which = rng.random(len(idx)) < 0.5
                batch[which] = batch[which][..., ::-1]
            yield Tensor(batch)


_CACHE_MAGIC = b"DAUG"
_CACHE_VERSION = 1


def save_cache(path, dataset: Dataset) -> None:
    """Flat binary dump: magic, version, shape header, raw float32 images,
    then the two index lists."""
    n, c, h, w = dataset.images.shape
    with open(path, "wb") as f:
        f.write(_CACHE_MAGIC)
        f.write(struct.pack("<5i", _CACHE_VERSION, n, c, h, w))
        f.write(struct.pack("<2i", len(dataset.train_indices), len(dataset.val_indices)))
        f.write(dataset.images.astype("<f4").tobytes())
        f.write(dataset.train_indices.astype("<i8").tobytes())
        f.write(dataset.val_indices.astype("<i8").tobytes())


def load_cache(path, name: str = "cached") -> Dataset:
    with open(path, "rb") as f:
        if f.read(4) != _CACHE_MAGIC:
            raise DataError(f"not a dataset cache: {path}")
        version, n, c, h, w = struct.unpack("<5i", f.read(20))
        if version != _CACHE_VERSION:
            raise DataError(f"unsupported cache version {version}")
        n_train, n_val = struct.unpack("<2i", f.read(8))
        images = np.frombuffer(f.read(n * c * h * w * 4), dtype="<f4").reshape(n, c, h, w)
        train = np.frombuffer(f.read(n_train * 8), dtype="<i8").copy()
        val = np.frombuffer(f.read(n_val * 8), dtype="<i8").copy()
    return Dataset(np.ascontiguousarray(images), name, train, val)
