"""Procedurally generated shape/texture image classes.

Each class is a combination of a shape outline, a stripe texture frequency
and a color family. Position, scale, orientation, texture phase, colors and
pixel noise vary per sample, so a class is recognizable by its structure
rather than by any fixed pixel. Generation is a pure function of
``(spec, seed)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset
from .errors import SpecError

SHAPES = ("disk", "square", "triangle", "ring", "cross", "bar")

# RGB anchors; samples draw their foreground around the class anchor
COLOR_FAMILIES = {
    "red": (0.80, 0.30, 0.25),
    "green": (0.30, 0.70, 0.35),
    "blue": (0.25, 0.40, 0.80),
    "amber": (0.85, 0.65, 0.20),
    "violet": (0.60, 0.35, 0.75),
    "teal": (0.20, 0.65, 0.65),
}


@dataclass(frozen=True)
class ClassGeometry:
    shape: str
    texture_frequency: float
    color: str

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise SpecError(f"unknown shape {self.shape!r}; choose from {SHAPES}")
        if self.color not in COLOR_FAMILIES:
            raise SpecError(f"unknown color family {self.color!r}")
        if self.texture_frequency < 0:
            raise SpecError("texture_frequency must be non-negative")


def default_geometry(num_classes: int):
    """Classes come in pairs sharing shape and color and differing in stripe frequency."""
    colors = list(COLOR_FAMILIES)
    return tuple(
        ClassGeometry(SHAPES[(i // 2) % len(SHAPES)], 1.0 if i % 2 == 0 else 3.0, colors[(i // 2) % len(colors)])
        for i in range(num_classes)
    )


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 3
    samples_per_class: int = 200
    base_resolution: int = 32
    classes: tuple = field(default=())
    noise: float = 0.08
    color_jitter: float = 0.15
    check_resolution: int = 12
    min_pair_separation: float = 0.6

    def __post_init__(self):
        if self.num_classes < 2:
            raise SpecError("need at least 2 classes")
        if self.samples_per_class < 1:
            raise SpecError("samples_per_class must be positive")
        if self.base_resolution < 8:
            raise SpecError("base_resolution must be at least 8")
        classes = self.classes or default_geometry(self.num_classes)
        classes = tuple(c if isinstance(c, ClassGeometry) else ClassGeometry(**c) for c in classes)
        if len(classes) != self.num_classes:
            raise SpecError(f"{len(classes)} class geometries given for {self.num_classes} classes")
        object.__setattr__(self, "classes", classes)
        if self.noise < 0 or self.color_jitter < 0:
            raise SpecError("noise and color_jitter must be non-negative")

    def to_dict(self):
        d = asdict(self)
        d["classes"] = [asdict(c) for c in self.classes]
        return d


def _shape_mask(kind, gy, gx, cy, cx, radius, angle):
    dy, dx = gy - cy, gx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    ry, rx = ca * dy - sa * dx, sa * dy + ca * dx
    if kind == "disk":
        return (ry ** 2 + rx ** 2) <= radius ** 2
    if kind == "square":
        return (np.abs(ry) <= radius * 0.85) & (np.abs(rx) <= radius * 0.85)
    if kind == "triangle":
        return (ry <= radius * 0.7) & (ry >= -radius) & (np.abs(rx) <= (ry + radius) * 0.6)
    if kind == "ring":
        r2 = ry ** 2 + rx ** 2
        return (r2 <= radius ** 2) & (r2 >= (radius * 0.55) ** 2)
    if kind == "cross":
        arm = radius * 0.3
        return ((np.abs(ry) <= arm) & (np.abs(rx) <= radius)) | ((np.abs(rx) <= arm) & (np.abs(ry) <= radius))
    if kind == "bar":
        return (np.abs(ry) <= radius * 0.3) & (np.abs(rx) <= radius * 1.1)
    raise SpecError(f"unknown shape {kind!r}")


def render_sample(geom: ClassGeometry, spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    r = spec.base_resolution
    gy, gx = np.meshgrid(np.arange(r) + 0.5, np.arange(r) + 0.5, indexing="ij")
    radius = r * rng.uniform(0.26, 0.38)
    cy, cx = r / 2 + rng.uniform(-0.12, 0.12, size=2) * r
    angle = rng.uniform(0, 2 * np.pi)
    mask = _shape_mask(geom.shape, gy, gx, cy, cx, radius, angle)

    fg = np.asarray(COLOR_FAMILIES[geom.color]) + rng.uniform(-spec.color_jitter, spec.color_jitter, 3)
    bg = rng.uniform(0.1, 0.6, 3)
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * geom.texture_frequency * (gx * np.cos(theta) + gy * np.sin(theta)) / r * 2 + phase)
    texture = 0.7 + 0.3 * wave

    img = bg[:, None, None] * np.ones((3, r, r))
    img = np.where(mask[None], fg[:, None, None] * texture[None], img)
    img = img + rng.normal(0, spec.noise, img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


def pixel_statistics(images: np.ndarray) -> np.ndarray:
    """Per-image features: channel means and spreads, gradient energy, center contrast."""
    n, c, h, w = images.shape
    x = images.astype(np.float64)
    means = x.mean(axis=(2, 3))
    stds = x.std(axis=(2, 3))
    gy = np.abs(np.diff(x, axis=2)).mean(axis=(1, 2, 3))
    gx = np.abs(np.diff(x, axis=3)).mean(axis=(1, 2, 3))
    ch, cw = slice(h // 4, h - h // 4), slice(w // 4, w - w // 4)
    center = x[:, :, ch, cw].mean(axis=(1, 2, 3)) - x.mean(axis=(1, 2, 3))
    return np.column_stack([means, stds, gy, gx, center])


def separation_scores(dataset: Dataset, resolution: int) -> dict:
    """Nearest-class-mean accuracy on standardized pixel statistics, per class pair."""
    feats = pixel_statistics(dataset.square_images(resolution))
    feats = (feats - feats.mean(axis=0)) / (feats.std(axis=0) + 1e-12)
    y = dataset.labels
    scores = {}
    for a in range(dataset.num_classes):
        for b in range(a + 1, dataset.num_classes):
            sel = (y == a) | (y == b)
            ca, cb = feats[y == a].mean(axis=0), feats[y == b].mean(axis=0)
            da = ((feats[sel] - ca) ** 2).sum(axis=1)
            db = ((feats[sel] - cb) ** 2).sum(axis=1)
            pred = np.where(da <= db, a, b)
            scores[(a, b)] = float((pred == y[sel]).mean())
    return scores


def generate_synthetic(spec: SyntheticSpec, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for label, geom in enumerate(spec.classes):
        for _ in range(spec.samples_per_class):
            images.append(render_sample(geom, spec, rng))
            labels.append(label)
    names = [f"{g.shape}-{g.color}-f{g.texture_frequency:g}" for g in spec.classes]
    dataset = Dataset(images, labels, names, spec.base_resolution)
    check = min(spec.check_resolution, spec.base_resolution)
    scores = separation_scores(dataset, check)
    worst = min(scores, key=scores.get)
    if scores[worst] < spec.min_pair_separation:
        raise SpecError(
            f"classes {worst} are not separable at {check}px "
            f"(nearest-mean accuracy {scores[worst]:.3f} < {spec.min_pair_separation})"
        )
    dataset._cache.pop(check, None)
    return dataset


def nearest_neighbor_accuracy(train: Dataset, test: Dataset, resolution: int) -> float:
    """1-NN accuracy on raw pixels; a learnability floor for a dataset."""
    xt = train.square_images(resolution).reshape(len(train), -1).astype(np.float64)
    xv = test.square_images(resolution).reshape(len(test), -1).astype(np.float64)
    d = (xv ** 2).sum(1)[:, None] - 2 * xv @ xt.T + (xt ** 2).sum(1)[None, :]
    pred = train.labels[np.argmin(d, axis=1)]
    return float((pred == test.labels).mean())

