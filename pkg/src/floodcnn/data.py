"""Loading the damage / no_damage folder layout, augmentation, batching and k-fold splits."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, InputError, LayoutError
from .model import CLASS_NAMES
from .optim import make_rng

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".jpeg", ".jpg", ".png", ".ppm"}
DEFAULT_IMAGE_SHAPE = (128, 128, 3)


@dataclass
class Sample:
    image: np.ndarray
    label: int
    path: str | None = None


@dataclass
class Dataset:
    """Images stacked as ``[N, H, W, 3]`` floats in [0, 1] with integer labels.

    Class 0 is ``damage`` (the positive class), class 1 ``no_damage``.
    """

    images: np.ndarray
    labels: np.ndarray
    paths: list = field(default_factory=list)
    class_names: tuple = CLASS_NAMES
    split: str | None = None
    skipped: int = 0

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise InputError(f"{len(self.images)} images but {len(self.labels)} labels")
        if not self.paths:
            self.paths = [None] * len(self.labels)

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> Sample:
        return Sample(self.images[i], int(self.labels[i]), self.paths[i])

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def class_counts(self) -> dict[str, int]:
        counts = np.bincount(self.labels, minlength=len(self.class_names))
        return {name: int(c) for name, c in zip(self.class_names, counts)}

    def subset(self, indices, split=None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.images[indices],
            self.labels[indices],
            [self.paths[i] for i in indices],
            self.class_names,
            split or self.split,
        )

    @classmethod
    def concat(cls, parts: Sequence["Dataset"], split=None) -> "Dataset":
        return cls(
            np.concatenate([p.images for p in parts]),
            np.concatenate([p.labels for p in parts]),
            [path for p in parts for path in p.paths],
            parts[0].class_names,
            split,
        )


def _read_image(path: Path, shape, resize: str | None) -> np.ndarray:
    with Image.open(path) as img:
        img.load()
        h, w, c = shape
        if img.mode != "RGB" or img.size != (w, h):
            if resize is None:
                raise InputError(f"{path}: image is {img.size[0]}x{img.size[1]} {img.mode}, expected {w}x{h} RGB")
            if resize != "bilinear":
                raise ConfigError(f"unsupported resize mode {resize!r}")
            img = img.convert("RGB").resize((w, h), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.uint8)
    return arr.astype(np.float32) / np.float32(255.0)


def load_dataset(root, resize: str | None = None, image_shape=DEFAULT_IMAGE_SHAPE, split: str | None = None) -> Dataset:
    """Read ``root/damage`` and ``root/no_damage`` into a normalized Dataset.

    Files are visited in lexicographic path order.  Undecodable files are
    skipped with a warning and counted in ``Dataset.skipped``; images of the
    wrong size raise unless ``resize="bilinear"``.
    """
    root = Path(root)
    files: list[tuple[Path, int]] = []
    for label, name in enumerate(CLASS_NAMES):
        folder = root / name
        if not folder.is_dir():
            raise LayoutError(f"{root}: missing class folder '{name}/'")
        found = sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())
        if not found:
            log.warning("%s: class folder '%s/' is empty", root, name)
        files += [(p, label) for p in found]
    files.sort(key=lambda item: str(item[0]))

    images = np.empty((len(files), *image_shape), dtype=np.float32)
    labels, paths = [], []
    skipped = 0
    for path, label in files:
        try:
            arr = _read_image(path, image_shape, resize)
        except (UnidentifiedImageError, OSError, SyntaxError) as exc:
            log.warning("skipping undecodable image %s: %s", path, exc)
            skipped += 1
            continue
        images[len(labels)] = arr
        labels.append(label)
        paths.append(str(path))
    ds = Dataset(images[: len(labels)], np.array(labels, dtype=np.int64), paths, CLASS_NAMES, split or root.name, skipped)
    log.info("loaded %s: %s (%d skipped)", root, ds.class_counts(), skipped)
    return ds


def save_dataset(dataset: Dataset, root, fmt: str = "png") -> list[Path]:
    """Write a dataset back out in the folder layout (lossless by default)."""
    root = Path(root)
    written = []
    for name in dataset.class_names:
        (root / name).mkdir(parents=True, exist_ok=True)
    for i, (img, label) in enumerate(zip(dataset.images, dataset.labels)):
        path = root / dataset.class_names[label] / f"{i:06d}.{fmt}"
        Image.fromarray(np.round(img * 255).astype(np.uint8)).save(path)
        written.append(path)
    return written


# augmentation


@dataclass
class AugmentConfig:
    hflip: bool = True
    vflip: bool = True
    rotate: bool = True
    translate: bool = True
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_rotate: float = 0.5
    p_translate: float = 0.5
    shift_max: int = 8

    def __post_init__(self):
        for name in ("p_hflip", "p_vflip", "p_rotate", "p_translate"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {p}")
        if self.shift_max < 0:
            raise ConfigError("shift_max must be >= 0")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(hflip=False, vflip=False, rotate=False, translate=False)


def translate(image: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Shift content by (dy, dx) pixels, filling the uncovered border with zeros."""
    h, w = image.shape[:2]
    out = np.zeros_like(image)
    if abs(dy) >= h or abs(dx) >= w:
        return out
    src_y = slice(max(0, -dy), h - max(0, dy))
    dst_y = slice(max(0, dy), h - max(0, -dy))
    src_x = slice(max(0, -dx), w - max(0, dx))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    out[dst_y, dst_x] = image[src_y, src_x]
    return out


def augment_image(image: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    # a uniform draw per transform keeps the random stream layout fixed
    # regardless of which transforms are enabled
    u = rng.random(4)
    if config.hflip and u[0] < config.p_hflip:
        image = image[:, ::-1]
    if config.vflip and u[1] < config.p_vflip:
        image = image[::-1]
    k = int(rng.integers(1, 4))
    if config.rotate and u[2] < config.p_rotate:
        if image.shape[0] != image.shape[1] and k % 2:
            k = 2
        image = np.rot90(image, k, axes=(0, 1))
    dy, dx = (int(v) for v in rng.integers(-config.shift_max, config.shift_max + 1, size=2))
    if config.translate and u[3] < config.p_translate:
        image = translate(image, dy, dx)
    return np.ascontiguousarray(image)


def augment(sample: Sample, config: AugmentConfig, rng: np.random.Generator) -> Sample:
    return Sample(augment_image(sample.image, config, rng), sample.label, sample.path)


# batching


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    one_hot: np.ndarray
    indices: np.ndarray


def one_hot(labels: np.ndarray, num_classes: int = 2, dtype=np.float32) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1
    return out


def make_batches(
    dataset: Dataset,
    batch_size: int,
    shuffle: bool = False,
    rng: np.random.Generator | None = None,
    augment_config: AugmentConfig | None = None,
    epoch: int = 0,
    seed: int = 0,
    dtype=None,
) -> Iterator[Batch]:
    """Yield mini-batches covering every sample exactly once.

    With ``augment_config`` each sample is warped with a generator seeded
    from ``(seed, epoch, sample index)``, so the stream does not depend on
    batch size or iteration order.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    if shuffle:
        if rng is None:
            raise ConfigError("shuffle=True needs an rng")
        order = rng.permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        images = dataset.images[idx]
        if augment_config is not None:
            images = np.stack(
                [augment_image(img, augment_config, make_rng([seed, epoch, int(i)])) for img, i in zip(images, idx)]
            )
        if dtype is not None:
            images = images.astype(dtype, copy=False)
        labels = dataset.labels[idx]
        yield Batch(images, labels, one_hot(labels, len(dataset.class_names), images.dtype), idx)


def kfold_split(data, k: int, rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    """Stratified k-fold index split.

    ``data`` is a Dataset or a label array.  Each class is shuffled and dealt
    round-robin into the folds, continuing the deal across classes, so
    folds differ in size by at most one overall and per class.
    """
    labels = np.asarray(data.labels if isinstance(data, Dataset) else data)
    n = len(labels)
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    if k > n:
        raise ConfigError(f"k={k} exceeds dataset size {n}")
    fold_of = np.empty(n, dtype=np.int64)
    dealt = 0
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        members = members[rng.permutation(len(members))]
        fold_of[members] = (dealt + np.arange(len(members))) % k
        dealt += len(members)
    all_idx = np.arange(n)
    return [(all_idx[fold_of != f], all_idx[fold_of == f]) for f in range(k)]


def synthetic_dataset(n: int, size: int = 32, seed: int = 0, noise: float = 0.25) -> Dataset:
    """Two-class images whose classes differ by where the brightness sits.

    ``damage`` images have a bright central disk, ``no_damage`` images a
    bright border ring; both survive flips and quarter turns unchanged in
    label.  Gaussian pixel noise is added and the result clipped to [0, 1].
    """
    rng = make_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2
    r = np.hypot(yy - c, xx - c) / (size / 2)
    labels = np.arange(n) % 2
    labels = labels[rng.permutation(n)]
    images = np.empty((n, size, size, 3), dtype=np.float32)
    for i, lab in enumerate(labels):
        radius = rng.uniform(0.35, 0.6)
        inside = r < radius
        pattern = inside if lab == 0 else ~inside
        base = rng.uniform(0.25, 0.45)
        contrast = rng.uniform(0.08, 0.2)
        tint = rng.uniform(0.85, 1.15, size=3)
        img = (base + contrast * pattern)[..., None] * tint
        img = img + rng.normal(0.0, noise, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, [], CLASS_NAMES, "synthetic")
