"""Image datasets: folder ingestion, splitting, resizing, augmentation and batching.

Images are float32 arrays shaped [C,H,W] with values in [0,1]. Resizing is
bilinear with the align-corners=false convention (pixel centers at
``i + 0.5``).
"""

from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import IngestionError, ParameterError, SplitError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".ppm", ".pgm", ".pnm", ".jpg", ".jpeg", ".bmp"}


@dataclass
class Dataset:
    images: list
    labels: np.ndarray
    class_names: list
    max_resolution: int = 250
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ParameterError("images and labels differ in length")
        if self.labels.size and self.labels.max() >= len(self.class_names):
            raise ParameterError("label index outside class_names")

    def __len__(self):
        return len(self.images)

    @property
    def num_classes(self):
        return len(self.class_names)

    @property
    def channels(self):
        return self.images[0].shape[0]

    def subset(self, indices) -> "Dataset":
        indices = list(indices)
        return Dataset([self.images[i] for i in indices], self.labels[indices],
                       list(self.class_names), self.max_resolution)

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in self.class_names:
            h.update(name.encode() + b"\0")
        for img, label in zip(self.images, self.labels):
            h.update(np.int64(label).tobytes())
            h.update(np.asarray(img.shape, dtype=np.int64).tobytes())
            h.update(np.ascontiguousarray(img, dtype=np.float32).tobytes())
        return h.hexdigest()

    def square_images(self, resolution: int) -> np.ndarray:
        """All images as one [N,C,r,r] array (resize shorter side, center crop); cached."""
        key = int(resolution)
        if key not in self._cache:
            self._cache[key] = np.stack([to_square(img, key) for img in self.images]) if self.images else None
        return self._cache[key]


# resizing

def _axis_weights(n_in, n_out):
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    t = (src - lo).astype(np.float32)
    return lo, hi, t


def resize_to(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a [C,H,W] image to exactly ``height`` x ``width``."""
    c, h, w = image.shape
    if (h, w) == (height, width):
        return image.copy()
    if height < 1 or width < 1:
        raise ParameterError("target size must be positive")
    img = image.astype(np.float32, copy=False)
    lo, hi, t = _axis_weights(h, height)
    a, b = img[:, lo, :], img[:, hi, :]
    rows = a + t[None, :, None] * (b - a)
    lo, hi, t = _axis_weights(w, width)
    a, b = rows[:, :, lo], rows[:, :, hi]
    out = a + t[None, None, :] * (b - a)
    # exact convex-combination bounds despite rounding
    return np.clip(out, img.min(), img.max())


def resize_bilinear(image: np.ndarray, target: int) -> np.ndarray:
    """Resize so the height becomes ``target``; width follows the aspect ratio."""
    if target < 1:
        raise ParameterError("target must be at least 1")
    _, h, w = image.shape
    return resize_to(image, target, max(1, int(round(target * w / h))))


def to_square(image: np.ndarray, resolution: int) -> np.ndarray:
    """Resize the shorter side to ``resolution`` then center-crop to a square."""
    _, h, w = image.shape
    if h <= w:
        nh, nw = resolution, max(resolution, int(round(resolution * w / h)))
    else:
        nh, nw = max(resolution, int(round(resolution * h / w))), resolution
    out = resize_to(image, nh, nw)
    top, left = (nh - resolution) // 2, (nw - resolution) // 2
    return out[:, top:top + resolution, left:left + resolution]


def cap_resolution(image: np.ndarray, max_resolution: int) -> np.ndarray:
    """Downscale so that max(H, W) <= max_resolution, preserving aspect ratio."""
    _, h, w = image.shape
    longest = max(h, w)
    if longest <= max_resolution:
        return image
    scale = max_resolution / longest
    return resize_to(image, max(1, int(round(h * scale))), max(1, int(round(w * scale))))


# ingestion

def decode_image(path) -> np.ndarray:
    """Decode an image file to a float32 [3,H,W] array in [0,1]; grayscale is replicated."""
    with Image.open(path) as im:
        im.load()
        if im.mode not in ("RGB", "L"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.uint8)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return (arr.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))


def load_image_folder(path, max_resolution: int = 250) -> Dataset:
    """Read ``<root>/<class>/<image>`` into a Dataset; class names are sorted directory names."""
    root = Path(path)
    if not root.is_dir():
        raise IngestionError(f"{root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise IngestionError(f"{root} has no class subdirectories")
    images, labels = [], []
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise IngestionError(f"class directory {cdir} is empty")
        kept = 0
        for f in files:
            try:
                img = decode_image(f)
            except (UnidentifiedImageError, OSError, ValueError) as exc:
                warnings.warn(f"skipping undecodable image {f}: {exc}", stacklevel=2)
                continue
            images.append(cap_resolution(img, max_resolution))
            labels.append(label)
            kept += 1
        if kept == 0:
            raise IngestionError(f"no decodable images left in {cdir}")
    log.info("loaded %d images in %d classes from %s", len(images), len(class_dirs), root)
    return Dataset(images, labels, [d.name for d in class_dirs], max_resolution)


def save_image_folder(dataset: Dataset, path) -> None:
    """Write a dataset as PNG files in the directory-per-class layout."""
    root = Path(path)
    counters = {}
    for img, label in zip(dataset.images, dataset.labels):
        name = dataset.class_names[label]
        idx = counters.get(name, 0)
        counters[name] = idx + 1
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        arr = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(arr, "RGB").save(d / f"{idx:05d}.png")


# splitting

def split(dataset: Dataset, train_fraction: float = 0.9, seed: int = 0):
    """Stratified random split into (train, val); every class lands in both."""
    if not 0 < train_fraction < 1:
        raise SplitError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    counts = dataset.class_counts()
    if (counts < 2).any():
        small = [dataset.class_names[i] for i in np.flatnonzero(counts < 2)]
        raise SplitError(f"classes {small} have fewer than 2 samples and cannot appear in both splits")
    n = len(dataset)
    n_val = n - int(round(train_fraction * n))
    ideal = counts * (1 - train_fraction)
    per_class = np.floor(ideal).astype(int)
    order = np.argsort(-(ideal - per_class), kind="stable")
    for c in order[: max(0, n_val - per_class.sum())]:
        per_class[c] += 1
    per_class = np.clip(per_class, 1, counts - 1)

    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        perm = idx[rng.permutation(len(idx))]
        val_idx.extend(perm[: per_class[c]].tolist())
        train_idx.extend(perm[per_class[c]:].tolist())
    return dataset.subset(sorted(train_idx)), dataset.subset(sorted(val_idx))


# augmentation

@dataclass(frozen=True)
class AugmentationPolicy:
    vertical_flip_prob: float = 0.5
    zoom_range: tuple = (1.0, 1.1)
    distortion_magnitude: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "zoom_range", tuple(float(z) for z in self.zoom_range))
        lo, hi = self.zoom_range
        if lo != 1.0 or hi < lo:
            raise ParameterError(f"zoom_range must be [1.0, z_max] with z_max >= 1, got {self.zoom_range}")
        if not 0 <= self.vertical_flip_prob <= 1:
            raise ParameterError("vertical_flip_prob must lie in [0, 1]")
        if not 0 <= self.distortion_magnitude < 0.5:
            raise ParameterError("distortion_magnitude must lie in [0, 0.5)")

    @classmethod
    def null(cls):
        return cls(0.0, (1.0, 1.0), 0.0)

    @property
    def is_null(self):
        return self.vertical_flip_prob == 0 and self.zoom_range[1] == 1.0 and self.distortion_magnitude == 0

    @property
    def has_geometry(self):
        return self.zoom_range[1] > 1.0 or self.distortion_magnitude > 0


def _sample(image, ys, xs):
    """Bilinear lookup of ``image`` at float coordinates (clamped to the border)."""
    _, h, w = image.shape
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    ty = (ys - y0).astype(np.float32)
    tx = (xs - x0).astype(np.float32)
    top = image[:, y0, x0] + tx * (image[:, y0, x1] - image[:, y0, x0])
    bot = image[:, y1, x0] + tx * (image[:, y1, x1] - image[:, y1, x0])
    return top + ty * (bot - top)


def augment(image: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    """Random vertical flip, center-biased zoom crop and smooth warp; same shape out.

    A fixed number of random draws is consumed per call whatever the policy,
    so streams stay aligned across policies.
    """
    u = rng.random(9)
    _, h, w = image.shape
    out = image
    if policy.has_geometry:
        lo, hi = policy.zoom_range
        zoom = lo + u[1] * (hi - lo)
        ch, cw = h / zoom, w / zoom
        # mean of two uniforms: offsets cluster around the center
        top = (h - ch) * (u[2] + u[3]) / 2
        left = (w - cw) * (u[4] + u[5]) / 2
        gy, gx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
        ys = top + (gy + 0.5) * (ch / h) - 0.5
        xs = left + (gx + 0.5) * (cw / w) - 0.5
        amp = policy.distortion_magnitude * u[6]
        if amp > 0:
            ys = ys + amp * h * np.sin(2 * np.pi * (gx / w + u[7]))
            xs = xs + amp * w * np.sin(2 * np.pi * (gy / h + u[8]))
        out = _sample(image, ys, xs).astype(np.float32)
    if u[0] < policy.vertical_flip_prob:
        out = out[:, ::-1, :]
    return np.ascontiguousarray(out) if out is not image else image.copy()


# batching

def batch_iterator(dataset: Dataset, resolution: int, batch_size: int, shuffle_seed=None, policy=None):
    """Yield ``(images [N,C,r,r] float32, labels)`` for one pass over ``dataset``.

    ``shuffle_seed=None`` keeps dataset order. The seed also drives augmentation.
    """
    if batch_size < 1:
        raise ParameterError("batch_size must be at least 1")
    n = len(dataset)
    rng = np.random.default_rng(shuffle_seed) if shuffle_seed is not None else None
    order = rng.permutation(n) if rng is not None else np.arange(n)
    if policy is None or policy.is_null:
        cached = dataset.square_images(resolution)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            yield cached[idx], dataset.labels[idx]
        return
    aug_rng = rng if rng is not None else np.random.default_rng(0)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        batch = np.stack([to_square(augment(dataset.images[i], policy, aug_rng), resolution) for i in idx])
        yield batch, dataset.labels[idx]


def num_batches(n: int, batch_size: int) -> int:
    return -(-n // batch_size)
