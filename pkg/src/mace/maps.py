"""Map generator: per-pixel channel mixing of the tap followed by ReLU."""

import math

import torch


MAP_INITS = ("gaussian", "half-normal")


def init_map_weights(num_concepts, depth, generator=None, dtype=torch.float64, scheme="gaussian"):
    """Zero-mean Gaussian filters with std 1/sqrt(D); ``half-normal`` takes absolute values.

    Tap activations are post-ReLU, so a zero-mean filter can be negative at
    every site and its concept then never receives a gradient; ``half-normal``
    starts every concept alive.
    """
    if scheme not in MAP_INITS:
        raise ValueError(f"unknown map init {scheme!r}")
    w = torch.randn(num_concepts, depth, generator=generator, dtype=dtype) / math.sqrt(depth)
    return w.abs() if scheme == "half-normal" else w


def generate_concept_maps(x, weights):
    """Concept maps ``relu(sum_d x[..., h, w, d] * weights[..., c, d])``.

    ``x`` is H x W x D (or N x H x W x D). ``weights`` is C x D for one class or
    K x C x D for all classes; the result is (N x) C x H x W or (N x) K x C x H x W.
    No bias is applied, so the maps are positively homogeneous in ``x``.
    """
    x = torch.as_tensor(x)
    weights = torch.as_tensor(weights, dtype=x.dtype)
    if x.shape[-1] != weights.shape[-1]:
        raise ValueError(f"tap depth {x.shape[-1]} does not match filter depth {weights.shape[-1]}")
    if weights.dim() == 2:
        mixed = torch.einsum("...hwd,cd->...chw", x, weights)
    elif weights.dim() == 3:
        mixed = torch.einsum("...hwd,kcd->...kchw", x, weights)
    else:
        raise ValueError(f"weights must be C x D or K x C x D, got shape {tuple(weights.shape)}")
    return torch.relu(mixed)


def count_parameters(num_classes, num_concepts, depth):
    return num_classes * num_concepts * depth
