"""Source/target datasets for partial domain adaptation.

Two ingestion paths are provided: a synthetic generator rendering
class-dependent oriented gratings (with a systematic appearance shift on the
target side), and a folder loader for the ``<root>/<class_name>/<images>``
layout used by Office-31 and Office-Home.
"""

from __future__ import annotations

import enum
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterator, Sequence

import numpy as np

from selpda.errors import ConfigurationError, ContractError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff"}


class Domain(str, enum.Enum):
    SOURCE = "source"
    TARGET = "target"


@dataclass(frozen=True)
class DomainSample:
    image: np.ndarray
    label: int | None
    domain: Domain


@dataclass(frozen=True)
class Batch:
    images: np.ndarray
    labels: np.ndarray | None
    domain: Domain

    def __post_init__(self):
        if len(self.images) < 1:
            raise ContractError("a batch holds at least one image")
        if (self.labels is not None) != (self.domain is Domain.SOURCE):
            raise ContractError("labels must be present iff the batch is from the source domain")

    def __len__(self):
        return len(self.images)


class DomainDataset:
    """Immutable array-backed dataset of images in [0, 1], shape (N, C, H, W)."""

    def __init__(self, images, labels, domain, class_names=()):
        images = np.ascontiguousarray(images, dtype=np.float32)
        if images.ndim != 4:
            raise ContractError(f"images must be (N, C, H, W), got shape {images.shape}")
        domain = Domain(domain)
        if labels is not None:
            labels = np.ascontiguousarray(labels, dtype=np.int64)
            if labels.shape != (len(images),):
                raise ContractError("one label per image required")
        if domain is Domain.SOURCE and labels is None:
            raise ContractError("source samples always carry a label")
        if domain is Domain.TARGET and labels is not None:
            raise ContractError("target labels are held out, not stored on the dataset")
        if labels is not None and len(labels) and class_names:
            if labels.min() < 0 or labels.max() >= len(class_names):
                raise ContractError("label out of range of class_names")
        images.setflags(write=False)
        if labels is not None:
            labels.setflags(write=False)
        self.images = images
        self.labels = labels
        self.domain = domain
        self.class_names = tuple(class_names)

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i) -> DomainSample:
        label = None if self.labels is None else int(self.labels[i])
        return DomainSample(self.images[i], label, self.domain)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def as_target(self):
        """Strip labels, returning ``(unlabeled target dataset, held-out labels)``."""
        labels = None if self.labels is None else self.labels.copy()
        return DomainDataset(self.images, None, Domain.TARGET, self.class_names), labels


@dataclass(frozen=True)
class ShiftParams:
    """Appearance shift applied to synthetic target images."""

    rotation_deg: float = 6.0
    brightness: float = 0.05
    contrast: float = 0.8
    tint: tuple[float, float, float] = (0.05, 0.0, -0.05)
    noise_std: float = 0.1
    zoom: float = 1.15


@dataclass(frozen=True)
class PartialTaskSpec:
    source_classes: tuple[Hashable, ...]
    target_classes: tuple[Hashable, ...]
    n_source: int = 600
    n_target: int = 300
    shift: ShiftParams = field(default_factory=ShiftParams)
    image_size: int = 32
    channels: int = 3

    @classmethod
    def simple(cls, n_source_classes=6, n_target_classes=3, **kwargs):
        """Classes ``c0..c{n-1}`` with the first ``n_target_classes`` shared."""
        names = tuple(f"c{i}" for i in range(n_source_classes))
        return cls(names, names[:n_target_classes], **kwargs)

    def validate(self):
        src, tgt = list(self.source_classes), list(self.target_classes)
        if not src or not tgt:
            raise ConfigurationError("source and target class lists must be non-empty")
        if len(set(src)) != len(src) or len(set(tgt)) != len(tgt):
            raise ConfigurationError("class identifiers must be unique")
        if not set(tgt) < set(src):
            raise ConfigurationError("target classes must be a strict subset of source classes")
        if self.n_source < len(src) or self.n_target < len(tgt):
            raise ConfigurationError("need at least one sample per class")
        if self.image_size < 8 or self.channels < 1:
            raise ConfigurationError("image_size >= 8 and channels >= 1 required")

    def target_indices(self):
        return [list(self.source_classes).index(c) for c in self.target_classes]


def _render_gratings(labels, n_classes, rng, size, channels, shift=None):
    n = len(labels)
    coords = np.linspace(-1.0, 1.0, size)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")

    theta = np.pi * labels / n_classes + rng.normal(0.0, np.deg2rad(4.0), n)
    freq = rng.uniform(2.0, 2.6, n)
    phase = rng.normal(0.0, 0.4, n)
    gain = rng.uniform(0.7, 1.0, (n, channels))
    contrast, brightness, noise = 1.0, 0.0, 0.05
    tint = np.zeros(channels)
    if shift is not None:
        theta = theta + np.deg2rad(shift.rotation_deg)
        freq = freq * shift.zoom
        contrast, brightness, noise = shift.contrast, shift.brightness, shift.noise_std
        tint[: min(channels, len(shift.tint))] = shift.tint[:channels]

    proj = xx[None] * np.cos(theta)[:, None, None] + yy[None] * np.sin(theta)[:, None, None]
    wave = np.sin(2 * np.pi * freq[:, None, None] * proj / 2 + phase[:, None, None])
    envelope = np.exp(-(xx**2 + yy**2)[None] / 1.2)
    base = 0.5 + 0.45 * contrast * wave * envelope
    images = base[:, None] * gain[:, :, None, None] + brightness + tint[None, :, None, None]
    images = images + rng.normal(0.0, noise, images.shape)
    return np.clip(images, 0.0, 1.0).astype(np.float32)


def generate_synthetic_task(spec: PartialTaskSpec, seed: int):
    """Render a partial-adaptation task.

    Returns ``(source, target, target_labels)``; target labels index into
    ``spec.source_classes`` and are meant for evaluation only.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    n_classes = len(spec.source_classes)
    tgt_idx = np.asarray(spec.target_indices(), dtype=np.int64)

    src_labels = rng.permutation(np.arange(spec.n_source) % n_classes)
    tgt_labels = tgt_idx[rng.permutation(np.arange(spec.n_target) % len(tgt_idx))]

    src_images = _render_gratings(src_labels, n_classes, rng, spec.image_size, spec.channels)
    tgt_images = _render_gratings(tgt_labels, n_classes, rng, spec.image_size, spec.channels, spec.shift)

    source = DomainDataset(src_images, src_labels, Domain.SOURCE, spec.source_classes)
    target = DomainDataset(tgt_images, None, Domain.TARGET, spec.source_classes)
    return source, target, tgt_labels


def _decode(path, image_size, channels):
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            im = im.convert("RGB" if channels == 3 else "L")
            im = im.resize((image_size, image_size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        logger.warning("skipping undecodable image %s: %s", path, exc)
        return None
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr


def load_folder_dataset(root, class_names: Sequence[str], image_size: int, channels: int = 3,
                        label_names: Sequence[str] | None = None, workers: int = 4) -> DomainDataset:
    """Load ``root/<class>/<image>`` files for the listed classes only.

    Labels follow the order of ``label_names`` (defaults to ``class_names``),
    never directory enumeration order. Directories not listed are ignored.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    label_names = list(class_names if label_names is None else label_names)
    missing = [c for c in class_names if c not in label_names]
    if missing:
        raise ConfigurationError(f"classes {missing} not in label space")

    paths, labels = [], []
    for name in class_names:
        class_dir = root / name
        if not class_dir.is_dir():
            raise FileNotFoundError(f"class directory not found: {class_dir}")
        files = sorted(p for p in class_dir.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        paths.extend(files)
        labels.extend([label_names.index(name)] * len(files))

    with ThreadPoolExecutor(max_workers=workers) as pool:
        arrays = list(pool.map(lambda p: _decode(p, image_size, channels), paths))

    images, kept = [], []
    for arr, label in zip(arrays, labels):
        if arr is not None:
            images.append(arr)
            kept.append(label)
    counts = np.bincount(np.asarray(kept, dtype=np.int64), minlength=len(label_names))
    empty = [name for name in class_names if counts[label_names.index(name)] == 0]
    if empty:
        raise ConfigurationError(f"no decodable images for classes {empty} under {root}")
    return DomainDataset(np.stack(images), np.asarray(kept), Domain.SOURCE, label_names)


def standardize(dataset: DomainDataset, mean=None, std=None):
    """Per-channel standardization; statistics default to the dataset's own."""
    imgs = dataset.images
    mean = imgs.mean(axis=(0, 2, 3)) if mean is None else np.asarray(mean)
    std = imgs.std(axis=(0, 2, 3)) if std is None else np.asarray(std)
    out = (imgs - mean[None, :, None, None]) / np.maximum(std, 1e-8)[None, :, None, None]
    return DomainDataset(out, dataset.labels, dataset.domain, dataset.class_names)


def batch_iterator(dataset: DomainDataset, batch_size: int, seed: int | None = None,
                   epoch: int = 0) -> Iterator[Batch]:
    """One pass over ``dataset``; the last partial batch is kept.

    With a seed, the order is a deterministic permutation of ``(seed, epoch)``.
    """
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    n = len(dataset)
    order = np.arange(n) if seed is None else np.random.default_rng([seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        labels = None if dataset.labels is None else dataset.labels[idx]
        yield Batch(dataset.images[idx], labels, dataset.domain)


def n_batches(n_samples, batch_size):
    return math.ceil(n_samples / batch_size)
