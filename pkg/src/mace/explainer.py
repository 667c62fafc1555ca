"""Turn a trained MACE unit and an image into viewable, thresholdable explanations."""

import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from matplotlib import colormaps
from PIL import Image

from .model import DTYPE

OVERLAY_CMAP = "viridis"
OVERLAY_ALPHA = 0.5


def upscale_and_normalize(concept_map, height, width, mode="bilinear"):
    """Resize (... x) H x W maps to height x width and min-max normalise each to [0, 1].

    Bilinear resizing uses half-pixel centres (``align_corners=False``) with
    edge clamping. A constant map becomes all zeros.
    """
    m = torch.as_tensor(concept_map, dtype=DTYPE)
    lead = m.shape[:-2]
    if m.numel() == 0:
        return torch.zeros(*lead, height, width, dtype=DTYPE)
    flat = m.reshape(-1, 1, *m.shape[-2:])
    if mode == "bilinear":
        up = F.interpolate(flat, size=(height, width), mode="bilinear", align_corners=False)
    elif mode == "nearest":
        up = F.interpolate(flat, size=(height, width), mode="nearest")
    else:
        raise ValueError(f"unknown resize mode {mode!r}")
    up = up.reshape(up.shape[0], -1)
    lo = up.min(1, keepdim=True).values
    hi = up.max(1, keepdim=True).values
    span = hi - lo
    out = torch.where(span > 0, (up - lo) / torch.where(span > 0, span, 1.0), torch.zeros_like(up))
    return out.reshape(*lead, height, width)


def threshold_mask(heatmap, t):
    """Binary mask: pixel set iff heatmap >= t."""
    if not 0 < t < 1:
        raise ValueError("threshold must lie in (0, 1)")
    return torch.as_tensor(heatmap) >= t


def union_mask(masks, shape=None):
    """Element-wise OR of a list of masks; an empty list gives an all-false mask of ``shape``."""
    masks = list(masks)
    if not masks:
        if shape is None:
            raise ValueError("shape is required for an empty mask list")
        return torch.zeros(shape, dtype=torch.bool)
    out = torch.as_tensor(masks[0]).clone()
    for m in masks[1:]:
        m = torch.as_tensor(m)
        if m.shape != out.shape:
            raise ValueError("masks must share one shape")
        out |= m
    return out


def class_heatmaps(model, x, k, height, width, mode="bilinear"):
    """Normalised heatmaps N x C_k x height x width for class ``k`` from taps N x H x W x D."""
    with torch.no_grad():
        maps = model.concept_maps(torch.as_tensor(x, dtype=DTYPE), k)
    return upscale_and_normalize(maps, height, width, mode)


def render_overlay(image, heatmap, alpha=OVERLAY_ALPHA, cmap=OVERLAY_CMAP):
    """Alpha-blend a colour-mapped heatmap over an H x W x 3 image; returns uint8 H x W x 3."""
    image = np.asarray(image, dtype=np.float64)
    heatmap = np.asarray(heatmap, dtype=np.float64)
    if image.shape[:2] != heatmap.shape:
        raise ValueError(f"heatmap shape {heatmap.shape} does not match image {image.shape[:2]}")
    if image.ndim == 2:
        image = image[..., None]
    if image.shape[2] == 1:
        image = np.repeat(image, 3, axis=2)
    colored = colormaps[cmap](np.clip(heatmap, 0, 1))[..., :3]
    blended = (1 - alpha) * image + alpha * colored
    return np.round(np.clip(blended, 0, 1) * 255).astype(np.uint8)


def save_png(path, rgb):
    Image.fromarray(np.asarray(rgb, dtype=np.uint8)).save(path, format="PNG")


@dataclass
class ConceptExplanation:
    concept: int  # original concept index
    concept_map: np.ndarray  # H x W tap resolution
    heatmap: np.ndarray  # image resolution, in [0, 1]
    relevance: float
    mask: np.ndarray  # bool, image resolution


@dataclass
class ExplanationBundle:
    image_id: int
    class_index: int
    class_name: str
    threshold: float
    probability: float
    predicted_class: int
    concepts: list = field(default_factory=list)  # sorted by descending relevance
    union: np.ndarray = None

    @property
    def positive(self):
        return [c for c in self.concepts if c.relevance > 0]

    def metadata(self):
        return {
            "image_id": self.image_id,
            "class_index": self.class_index,
            "class_name": self.class_name,
            "threshold": self.threshold,
            "probability": self.probability,
            "predicted_class": self.predicted_class,
            "union_coverage": float(self.union.mean()),
            "concepts": [
                {
                    "concept": c.concept,
                    "relevance": c.relevance,
                    "positive": c.relevance > 0,
                    "mask_coverage": float(c.mask.mean()),
                    "overlay": f"{self.image_id}_{self.class_name}_{c.concept}.png",
                }
                for c in self.concepts
            ],
        }

    def save(self, directory, image):
        """Write one overlay per concept plus ``bundle.json``; returns the written paths."""
        os.makedirs(directory, exist_ok=True)
        written = []
        for c in self.concepts:
            path = os.path.join(directory, f"{self.image_id}_{self.class_name}_{c.concept}.png")
            save_png(path, render_overlay(image, c.heatmap))
            written.append(path)
        path = os.path.join(directory, f"{self.image_id}_{self.class_name}_union.png")
        save_png(path, render_overlay(image, self.union.astype(float)))
        written.append(path)
        meta = os.path.join(directory, "bundle.json")
        with open(meta, "w") as fh:
            json.dump(self.metadata(), fh, indent=2)
        written.append(meta)
        return written


def explain(model, blackbox, image, k, threshold=0.5, image_id=None, mode="bilinear"):
    """Explain class ``k`` for one image, predicted or not."""
    k = blackbox.spec.class_index(k)
    pixels = np.asarray(getattr(image, "pixels", image))
    if image_id is None:
        image_id = getattr(image, "image_id", 0)
    tap = blackbox.forward_tap(pixels)
    x = torch.as_tensor(tap.x, dtype=DTYPE)[None]
    with torch.no_grad():
        maps = model.concept_maps(x, k)[0]
        out = model(x)
    rel = out.relevances[k][0].numpy()
    heat = upscale_and_normalize(maps, pixels.shape[0], pixels.shape[1], mode)
    masks = threshold_mask(heat, threshold)
    concepts = [
        ConceptExplanation(model.concept_ids[k][j], maps[j].numpy(), heat[j].numpy(), float(rel[j]),
                           masks[j].numpy())
        for j in range(model.concept_counts[k])
    ]
    concepts.sort(key=lambda c: (-c.relevance, c.concept))
    return ExplanationBundle(
        image_id=int(image_id),
        class_index=k,
        class_name=blackbox.spec.class_names[k],
        threshold=threshold,
        probability=float(tap.probs[k]),
        predicted_class=int(tap.probs.argmax()),
        concepts=concepts,
        union=union_mask(list(masks), shape=pixels.shape[:2]).numpy(),
    )
