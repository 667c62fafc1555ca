"""Synthetic shape-motif dataset used as a desk-scale stand-in for natural images.

Every class is a pair of sub-parts (for example a ring next to a dot) drawn
as one rigid object at a random position, scale and rotation over a
randomized background. Class identity is therefore position invariant and
each class has at least two localized parts that concepts can latch onto.
"""

from dataclasses import dataclass
from itertools import combinations

import numpy as np

IMAGE_SIZE = 64

PARTS = ("ring", "disc", "bar", "square", "cross", "triangle", "checker", "stripes")

# hand-picked so the default 4 classes share no part
_BASE_MOTIFS = [("ring", "disc"), ("bar", "square"), ("cross", "triangle"), ("checker", "stripes")]

# characteristic colour per part; rendered with per-image jitter
_PART_COLORS = {
    "ring": (0.95, 0.25, 0.20),
    "disc": (0.20, 0.80, 0.30),
    "bar": (0.25, 0.40, 0.95),
    "square": (0.95, 0.85, 0.20),
    "cross": (0.85, 0.30, 0.85),
    "triangle": (0.20, 0.85, 0.85),
    "checker": (0.98, 0.98, 0.98),
    "stripes": (0.95, 0.55, 0.10),
}


@dataclass(frozen=True)
class LabeledImage:
    """An H x W x C image with values in [0, 1] and its integer class label."""

    pixels: np.ndarray
    label: int
    image_id: int = 0

    def __post_init__(self):
        if self.pixels.ndim != 3:
            raise ValueError(f"pixels must be H x W x C, got shape {self.pixels.shape}")
        if self.pixels.min() < 0 or self.pixels.max() > 1:
            raise ValueError("pixel values must lie in [0, 1]")
        if self.label < 0:
            raise ValueError("label must be non-negative")


def class_motifs(num_classes):
    """Return the (part_a, part_b) pair that defines each class."""
    motifs = list(_BASE_MOTIFS)
    for pair in combinations(PARTS, 2):
        if len(motifs) >= num_classes:
            break
        if pair not in motifs and pair[::-1] not in motifs:
            motifs.append(pair)
    if num_classes > len(motifs):
        raise ValueError(f"at most {len(motifs)} distinct classes are available")
    return motifs[:num_classes]


def class_names(num_classes):
    return [f"{a}-{b}" for a, b in class_motifs(num_classes)]


def _part_mask(name, u, v):
    # u, v are object-local coordinates in pixels, part centred at the origin
    r = np.hypot(u, v)
    if name == "ring":
        return (r >= 4.0) & (r <= 7.0)
    if name == "disc":
        return r <= 4.5
    if name == "bar":
        return (np.abs(u) <= 8.0) & (np.abs(v) <= 2.0)
    if name == "square":
        return (np.abs(u) <= 5.0) & (np.abs(v) <= 5.0)
    if name == "cross":
        return ((np.abs(u) <= 7.0) & (np.abs(v) <= 1.5)) | ((np.abs(v) <= 7.0) & (np.abs(u) <= 1.5))
    if name == "triangle":
        # equilateral, circumradius 7
        return (v >= -3.5) & (v <= 7.0 - np.sqrt(3.0) * np.abs(u))
    if name == "checker":
        inside = (np.abs(u) <= 6.0) & (np.abs(v) <= 6.0)
        return inside & ((np.floor(u / 3.0) + np.floor(v / 3.0)) % 2 == 0)
    if name == "stripes":
        inside = (np.abs(u) <= 6.0) & (np.abs(v) <= 6.0)
        return inside & (np.floor(u / 2.5) % 2 == 0)
    raise ValueError(f"unknown part {name!r}")


def render_image(motif, rng, size=IMAGE_SIZE):
    """Draw one object made of the two parts in ``motif`` over a random background."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5

    base = rng.uniform(0.2, 0.5) + rng.uniform(-0.06, 0.06, size=3)
    gx, gy = rng.uniform(-0.15, 0.15, size=2)
    img = base + gx * (xx / size - 0.5)[..., None] + gy * (yy / size - 0.5)[..., None]
    img = img + rng.normal(0.0, 0.03, size=img.shape)

    cx, cy = rng.uniform(22, size - 22, size=2)
    scale = rng.uniform(0.8, 1.2)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    cos, sin = np.cos(angle), np.sin(angle)
    du, dv = (xx - cx) / scale, (yy - cy) / scale
    u = cos * du + sin * dv
    v = -sin * du + cos * dv

    for part, offset in zip(motif, (-8.0, 8.0)):
        mask = _part_mask(part, u - offset, v)
        color = np.asarray(_PART_COLORS[part]) + rng.uniform(-0.12, 0.12, size=3)
        img[mask] = color
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synthetic_dataset(num_classes, per_class, seed):
    """Generate ``num_classes * per_class`` images, class-major, deterministic per seed.

    Image ids are the list positions.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    if per_class < 1:
        raise ValueError("per_class must be at least 1")
    motifs = class_motifs(num_classes)
    rng = np.random.default_rng(seed)
    images = []
    for k, motif in enumerate(motifs):
        for _ in range(per_class):
            images.append(LabeledImage(render_image(motif, rng), k, len(images)))
    return images


def split_dataset(images, fractions, seed):
    """Stratified split into len(fractions) parts; ids are preserved."""
    fractions = np.asarray(fractions, dtype=float)
    if np.any(fractions <= 0) or abs(fractions.sum() - 1) > 1e-9:
        raise ValueError("fractions must be positive and sum to 1")
    rng = np.random.default_rng(seed)
    parts = [[] for _ in fractions]
    labels = np.array([im.label for im in images])
    for k in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == k))
        bounds = np.round(np.cumsum(fractions) * len(idx)).astype(int)
        for part, chunk in zip(parts, np.split(idx, bounds[:-1])):
            part.extend(images[i] for i in chunk)
    return [sorted(p, key=lambda im: im.image_id) for p in parts]


def stack(images):
    """Return (pixels N x H x W x C float32, labels N, ids N)."""
    pixels = np.stack([im.pixels for im in images])
    labels = np.array([im.label for im in images], dtype=np.int64)
    ids = np.array([im.image_id for im in images], dtype=np.int64)
    return pixels, labels, ids


def save_dataset(path, images, meta=None):
    pixels, labels, ids = stack(images)
    from .checkpoint import save_archive

    save_archive(path, {"pixels": pixels, "labels": labels, "ids": ids}, meta or {})


def load_dataset(path):
    from .checkpoint import load_archive

    arrays, meta = load_archive(path)
    images = [
        LabeledImage(p, int(l), int(i))
        for p, l, i in zip(arrays["pixels"], arrays["labels"], arrays["ids"])
    ]
    return images, meta
