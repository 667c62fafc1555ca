"""Quantitative protocols: faithfulness, robustness, stability, relevance ranks, ablation."""

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from .explainer import threshold_mask, upscale_and_normalize
from .maps import generate_concept_maps, init_map_weights
from .model import DTYPE
from .perturbations import DEFAULT_GRID, perturb
from .synthetic import stack
from .trainer import TapCache

log = logging.getLogger(__name__)

THRESHOLDS = (0.3, 0.4, 0.5, 0.6, 0.7)


def write_csv(path, rows):
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)


def iou(a, b):
    """Intersection over union of two boolean masks; two empty masks give 1."""
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def _pixels(images):
    if isinstance(images, list):
        return stack(images)
    pixels = np.asarray(images)
    if pixels.ndim == 3:
        pixels = pixels[None]
    n = len(pixels)
    return pixels, np.zeros(n, dtype=np.int64), np.arange(n)


def union_masks(maps, classes, threshold, height, width, mode="bilinear"):
    """Union of thresholded heatmaps. ``maps`` is per image a C x H x W tensor."""
    out = []
    for m in maps:
        heat = upscale_and_normalize(m, height, width, mode)
        out.append(threshold_mask(heat, threshold).any(0) if len(heat) else torch.zeros(height, width, dtype=torch.bool))
    return torch.stack(out)


def mace_maps(model, x, classes):
    with torch.no_grad():
        return [model.concept_maps(x[i:i + 1], int(k))[0] for i, k in enumerate(classes)]


def random_maps(x, counts, seed, ids):
    """Concept maps from fresh Gaussian filters, seeded per image id."""
    out = []
    for i, (c, image_id) in enumerate(zip(counts, ids)):
        gen = torch.Generator().manual_seed(int(np.random.SeedSequence([seed, int(image_id)]).generate_state(1)[0]))
        w = init_map_weights(int(c), x.shape[-1], gen, DTYPE)
        out.append(generate_concept_maps(x[i], w))
    return out


def mask_images(pixels, masks, fill=0.0):
    """Set masked pixels to ``fill`` (a scalar or a per-channel vector)."""
    pixels = torch.as_tensor(pixels, dtype=DTYPE).clone()
    fill = torch.as_tensor(fill, dtype=DTYPE)
    m = torch.as_tensor(masks)[..., None].expand_as(pixels)
    return torch.where(m, fill.expand_as(pixels) if fill.dim() else fill, pixels)


def _drops(blackbox, pixels, masks, classes, p_before, fill):
    with torch.no_grad():
        p_after = blackbox.predict_proba(mask_images(pixels, masks, fill))
    p_after = p_after[torch.arange(len(classes)), torch.as_tensor(classes)].numpy()
    return p_before - p_after, p_after


@dataclass
class FaithfulnessReport:
    thresholds: tuple
    rows: list = field(default_factory=list)  # image, threshold, method, p_before, p_after, drop, empty_mask

    def mean_drop(self, method, threshold):
        vals = [r["drop"] for r in self.rows if r["method"] == method and r["threshold"] == threshold]
        return float(np.mean(vals))

    def summary(self):
        methods = sorted({r["method"] for r in self.rows})
        return [{"threshold": t, **{m: self.mean_drop(m, t) for m in methods}} for t in self.thresholds]

    def to_csv(self, path):
        write_csv(path, self.rows)

    def to_json(self, path):
        write_json(path, {"thresholds": list(self.thresholds), "summary": self.summary(), "rows": self.rows})


def faithfulness_sweep(model, blackbox, images, thresholds=THRESHOLDS, seed=0, fill=0.0,
                       baseline=True, mode="bilinear"):
    """Probability drop of the predicted class after removing the union of its concept masks.

    The random baseline replaces the map filters with fresh Gaussian ones
    (same count as the model's kept concepts for that class), seeded per image.
    """
    pixels, _, ids = _pixels(images)
    cache_x, _, probs = blackbox.tap_dataset(pixels)
    probs = probs.numpy()
    classes = probs.argmax(1)
    p_before = probs[np.arange(len(classes)), classes]
    h, w = pixels.shape[1:3]
    methods = {"mace": mace_maps(model, cache_x, classes)}
    if baseline:
        methods["random"] = random_maps(cache_x, [model.concept_counts[k] for k in classes], seed, ids)
    report = FaithfulnessReport(tuple(thresholds))
    for t in thresholds:
        for name, maps in methods.items():
            masks = union_masks(maps, classes, t, h, w, mode)
            drop, p_after = _drops(blackbox, pixels, masks, classes, p_before, fill)
            empty = ~masks.flatten(1).any(1).numpy()
            drop[empty] = 0.0
            for i in range(len(ids)):
                report.rows.append({
                    "image_id": int(ids[i]), "threshold": t, "method": name,
                    "p_before": float(p_before[i]), "p_after": float(p_before[i] - drop[i]),
                    "drop": float(drop[i]), "empty_mask": bool(empty[i]),
                })
    return report


def faithfulness_drop(model, blackbox, image, threshold, fill=0.0):
    """Drop for one image; 0 (flagged in sweep rows) when the union mask is empty."""
    rep = faithfulness_sweep(model, blackbox, [image] if hasattr(image, "pixels") else image,
                             (threshold,), fill=fill, baseline=False)
    return rep.rows[0]["drop"]


def random_baseline_drop(model, blackbox, image, threshold, seed=0, fill=0.0):
    rep = faithfulness_sweep(model, blackbox, [image] if hasattr(image, "pixels") else image,
                             (threshold,), seed=seed, fill=fill)
    return [r for r in rep.rows if r["method"] == "random"][0]["drop"]


def explanation_masks(model, blackbox, pixels, classes, threshold, mode="bilinear"):
    x, _, _ = blackbox.tap_dataset(pixels)
    return union_masks(mace_maps(model, x, classes), classes, threshold, *pixels.shape[1:3], mode).numpy()


def robustness_iou(model, blackbox, image, kind, intensity, threshold, seed=0):
    """IoU between the predicted-class union masks of an image and its perturbed copy."""
    pixels = np.asarray(getattr(image, "pixels", image), dtype=np.float64)
    k = int(blackbox.forward_tap(pixels).probs.argmax())
    both = np.stack([pixels, perturb(pixels, kind, intensity, seed)])
    masks = explanation_masks(model, blackbox, both, [k, k], threshold)
    return iou(masks[0], masks[1])


@dataclass
class RobustnessReport:
    rows: list = field(default_factory=list)  # perturbation, intensity, threshold, mean_iou, n

    def to_csv(self, path):
        write_csv(path, self.rows)

    def to_json(self, path):
        write_json(path, {"rows": self.rows})


def robustness_sweep(model, blackbox, images, grid=None, thresholds=THRESHOLDS, seed=0):
    """Mean IoU per (perturbation, intensity, threshold).

    Both explanations are taken for the class predicted on the original image.
    """
    grid = grid or DEFAULT_GRID
    pixels, _, ids = _pixels(images)
    pixels = pixels.astype(np.float64)
    _, _, probs = blackbox.tap_dataset(pixels)
    classes = probs.argmax(1).numpy()
    report = RobustnessReport()
    base = {t: explanation_masks(model, blackbox, pixels, classes, t) for t in thresholds}
    for kind, intensities in grid.items():
        for intensity in intensities:
            perturbed = np.stack([perturb(p, kind, intensity, seed + int(i)) for p, i in zip(pixels, ids)])
            for t in thresholds:
                masks = explanation_masks(model, blackbox, perturbed, classes, t)
                scores = [iou(a, b) for a, b in zip(base[t], masks)]
                report.rows.append({"perturbation": kind, "intensity": float(intensity), "threshold": t,
                                    "mean_iou": float(np.mean(scores)), "n": len(scores)})
    return report


def embeddings_by_class(model, blackbox, images):
    pixels, labels, ids = _pixels(images)
    x, _, probs = blackbox.tap_dataset(pixels)
    with torch.no_grad():
        out = model(x)
    return out, labels, probs.numpy(), ids


def stability_matrix(embeddings):
    """Pairwise Euclidean distances for embeddings C x n x Q, ordered concept-major.

    Row/column index c * n + i is concept c on image i.
    """
    e = torch.as_tensor(embeddings, dtype=DTYPE)
    flat = e.reshape(-1, e.shape[-1])
    return torch.cdist(flat, flat).numpy()


def block_means(matrix, num_concepts, num_images):
    """(diagonal-block mean, off-diagonal-block mean, intra mean without self pairs)."""
    concept = np.repeat(np.arange(num_concepts), num_images)
    same = concept[:, None] == concept[None, :]
    self_pair = np.eye(len(concept), dtype=bool)
    return (float(matrix[same].mean()), float(matrix[~same].mean()),
            float(matrix[same & ~self_pair].mean()))


def stability_report(model, blackbox, images, num_images=10, num_concepts=5, seed=0):
    """Per class: distance matrix over ``num_images`` in-class images and up to ``num_concepts`` concepts."""
    out, labels, _, _ = embeddings_by_class(model, blackbox, images)
    rng = np.random.default_rng(seed)
    rows = []
    for k in range(model.num_classes):
        idx = np.flatnonzero(labels == k)
        if len(idx) < 2 or model.concept_counts[k] < 2:
            continue
        idx = np.sort(rng.choice(idx, size=min(num_images, len(idx)), replace=False))
        cs = np.sort(rng.choice(model.concept_counts[k], size=min(num_concepts, model.concept_counts[k]),
                                replace=False))
        e = out.embeddings[k][torch.as_tensor(idx)][:, torch.as_tensor(cs)].transpose(0, 1)
        mat = stability_matrix(e)
        diag, off, intra = block_means(mat, len(cs), len(idx))
        rows.append({"class": k, "concepts": [model.concept_ids[k][c] for c in cs],
                     "images": [int(i) for i in idx], "diag_block_mean": diag,
                     "off_block_mean": off, "intra_mean": intra, "inter_mean": off, "matrix": mat.tolist()})
    return rows


@dataclass
class RankAnalyticsReport:
    ranks: list  # rows: rank, mean_percentage, classes
    concepts: list  # rows: class, concept, class_average, avg_true, avg_others
    denominator: str = "positive"

    def to_json(self, path):
        write_json(path, asdict(self))

    def to_csv(self, path):
        write_csv(path, self.concepts)


def rank_statistics(relevances, probs, labels, concept_ids=None, denominator="positive"):
    """Rank analytics from per-class relevance arrays (N x C_k), black-box probs N x K and labels.

    For class k at rank m (1 = top) the percentage counts, over images where k
    has rank m, concept relevances that are positive yet below the concept's
    class average (mean over images labelled k). The denominator is the number
    of positive relevances, or all relevances with ``denominator="all"``.
    Ranks are averaged over the classes that have data; empty ranks are omitted.
    """
    if denominator not in ("positive", "all"):
        raise ValueError("denominator must be 'positive' or 'all'")
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    K = probs.shape[1]
    order = np.argsort(-probs, axis=1, kind="stable")
    rank = np.empty_like(order)
    rank[np.arange(len(order))[:, None], order] = np.arange(1, K + 1)
    concepts = []
    per_rank = {m: [] for m in range(1, K + 1)}
    for k in range(K):
        r = np.asarray(relevances[k], dtype=float)
        in_class = labels == k
        if not in_class.any():
            continue
        avg = r[in_class].mean(0)
        for j in range(r.shape[1]):
            cid = concept_ids[k][j] if concept_ids else j
            concepts.append({
                "class": k, "concept": cid, "class_average": float(avg[j]),
                "avg_true": float(r[in_class, j].mean()),
                "avg_others": float(r[~in_class, j].mean()) if (~in_class).any() else float("nan"),
            })
        for m in range(1, K + 1):
            sel = rank[:, k] == m
            if not sel.any():
                continue
            rs = r[sel]
            positive = rs > 0
            below = positive & (rs < avg)
            denom = positive.sum() if denominator == "positive" else rs.size
            if denom == 0:
                continue
            per_rank[m].append((k, 100.0 * below.sum() / denom))
    ranks = [
        {"rank": m, "mean_percentage": float(np.mean([p for _, p in v])), "classes": [k for k, _ in v]}
        for m, v in per_rank.items() if v
    ]
    return RankAnalyticsReport(ranks, concepts, denominator)


def rank_analytics(model, blackbox, images, denominator="positive", labels=None):
    out, true_labels, probs, _ = embeddings_by_class(model, blackbox, images)
    labels = true_labels if labels is None else np.asarray(labels)
    rels = [r.numpy() for r in out.relevances]
    return rank_statistics(rels, probs, labels, model.concept_ids, denominator)


def relevance_gap(report):
    """Fraction of concepts with AVG True > AVG Others, and the mean gap."""
    gaps = np.array([c["avg_true"] - c["avg_others"] for c in report.concepts])
    return float(np.mean(gaps > 0)), float(np.mean(gaps))


def output_fidelity(model, blackbox, images):
    """Agreement of argmax f(z_hat) with argmax f(z) and mean KL(f(z_hat) || f(z))."""
    from .output import output_divergence

    pixels, _, _ = _pixels(images)
    x, _, probs = blackbox.tap_dataset(pixels)
    with torch.no_grad():
        p_hat = blackbox.head(model(x).z_hat)
        kl = [output_divergence(p_hat[i], probs[i]).item() for i in range(len(probs))]
    agree = (p_hat.argmax(1) == probs.argmax(1)).double().mean().item()
    return agree, float(np.mean(kl))


@dataclass
class AblationReport:
    seeds: list
    rows: list = field(default_factory=list)  # seed, variant, threshold, mean_drop

    def means(self):
        variants = sorted({r["variant"] for r in self.rows})
        thresholds = sorted({r["threshold"] for r in self.rows})
        out = []
        for t in thresholds:
            row = {"threshold": t}
            for v in variants:
                row[v] = float(np.mean([r["mean_drop"] for r in self.rows if r["variant"] == v and r["threshold"] == t]))
            out.append(row)
        return out

    def overall(self, variant):
        return float(np.mean([r["mean_drop"] for r in self.rows if r["variant"] == variant]))

    def to_csv(self, path):
        write_csv(path, self.rows)

    def to_json(self, path):
        write_json(path, {"seeds": self.seeds, "means": self.means(), "rows": self.rows})


ABLATIONS = {
    "full": {"use_lo": True, "use_ld": True},
    "no_LO": {"use_lo": False, "use_ld": True},
    "no_LD": {"use_lo": True, "use_ld": False},
}


def ablation_compare(blackbox, train_images, eval_images, base_config, seeds=(0, 1, 2, 3, 4),
                     thresholds=THRESHOLDS, prune_images=None, prune_config=None):
    """Train full / no-L^O / no-L^D models per seed and compare mean faithfulness drops.

    With ``prune_images`` every variant is pruned on that split and fine-tuned
    before evaluation.
    """
    from .pruning import prune_and_finetune
    from .trainer import train

    report = AblationReport(list(seeds))
    train_cache = TapCache.build(blackbox, train_images)
    for seed in seeds:
        for variant, switches in ABLATIONS.items():
            config = replace(base_config, seed=seed, **switches)
            model, _ = train(blackbox, train_images, config)
            if prune_images is not None:
                model, _, _ = prune_and_finetune(model, blackbox, train_cache, prune_images, prune_config, config)
            faith = faithfulness_sweep(model, blackbox, eval_images, thresholds, seed=seed, baseline=False)
            for t in thresholds:
                report.rows.append({"seed": seed, "variant": variant, "threshold": t,
                                    "mean_drop": faith.mean_drop("mace", t)})
            log.info("ablation seed %d %s done", seed, variant)
    return report
