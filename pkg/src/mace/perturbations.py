"""Image perturbations used by the robustness sweep. Images are H x W x C in [0, 1]."""

import numpy as np
from scipy import ndimage


def brightness(image, delta):
    return np.clip(image + delta, 0.0, 1.0)


def contrast(image, scale):
    mean = image.mean(axis=(0, 1), keepdims=True)
    return np.clip((image - mean) * scale + mean, 0.0, 1.0)


def gaussian_noise(image, std, seed=0):
    rng = np.random.default_rng(seed)
    return np.clip(image + rng.normal(0.0, std, size=image.shape), 0.0, 1.0)


def rotation(image, degrees):
    out = ndimage.rotate(image, degrees, axes=(1, 0), reshape=False, order=1, mode="nearest")
    return np.clip(out, 0.0, 1.0)


PERTURBATIONS = {
    "brightness": brightness,
    "contrast": contrast,
    "gaussian-noise": gaussian_noise,
    "rotation": rotation,
}

DEFAULT_GRID = {
    "brightness": (-0.2, -0.1, 0.1, 0.2),
    "contrast": (0.8, 1.2),
    "gaussian-noise": (0.02, 0.05),
    "rotation": (-15.0, -5.0, 5.0, 15.0),
}

# intensity at which each perturbation is the identity
IDENTITY = {"brightness": 0.0, "contrast": 1.0, "gaussian-noise": 0.0, "rotation": 0.0}


def perturb(image, kind, intensity, seed=0):
    if kind not in PERTURBATIONS:
        raise ValueError(f"unknown perturbation {kind!r}; choose from {sorted(PERTURBATIONS)}")
    image = np.asarray(image, dtype=np.float64)
    if kind == "gaussian-noise":
        return gaussian_noise(image, intensity, seed)
    return PERTURBATIONS[kind](image, intensity)
