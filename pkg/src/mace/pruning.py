"""Concept pruning rules and the prune-then-fine-tune step.

All rules are evaluated on one frozen model; the pruned set is the union of
the rules' verdicts and is removed in a single shrink.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .explainer import class_heatmaps, threshold_mask
from .model import DTYPE
from .trainer import TapCache, fit

log = logging.getLogger(__name__)

RULES = ("top_relevance_mismatch", "promiscuous_positive", "whole_image_mask", "in_class_negative")


class PruningError(RuntimeError):
    pass


@dataclass
class PruneConfig:
    top_T: int = 10
    mismatch_S: int = 5
    positive_fraction_max: float = 0.50
    mask_coverage_max: float = 0.95
    in_class_positive_min: float = 0.05
    mask_threshold: float = 0.5
    fine_tune_epochs: int = 8

    def __post_init__(self):
        # 1 for a maximum (or 0 for the minimum) switches a rule off
        for name in ("positive_fraction_max", "mask_coverage_max", "in_class_positive_min"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0 < self.mask_threshold < 1:
            raise ValueError("mask_threshold must lie in (0, 1)")
        if self.fine_tune_epochs < 0:
            raise ValueError("fine_tune_epochs must be >= 0")
        if self.top_T < self.mismatch_S:
            raise ValueError("top_T must be >= mismatch_S")


@dataclass(frozen=True)
class Verdict:
    fired: bool
    statistic: float
    threshold: float


def rule_top_relevance_mismatch(relevances, labels, image_ids, k, top_T=10, mismatch_S=5):
    """Prune if more than S of the top-T images by relevance are not of class ``k``.

    Ties in relevance go to the smaller image id. With fewer than T images the
    allowance scales to ceil(S * n / T).
    """
    relevances = np.asarray(relevances, dtype=float)
    labels = np.asarray(labels)
    order = np.lexsort((np.asarray(image_ids), -relevances))
    n = min(top_T, len(order))
    allowed = mismatch_S if n == top_T else math.ceil(mismatch_S * n / top_T)
    off_class = int(np.sum(labels[order[:n]] != k))
    return Verdict(off_class > allowed, off_class, allowed)


def rule_promiscuous_positive(relevances, positive_fraction_max=0.5):
    """Prune if the concept is positive on more than the given fraction of all images."""
    frac = float(np.mean(np.asarray(relevances) > 0))
    return Verdict(frac > positive_fraction_max, frac, positive_fraction_max)


def rule_whole_image_mask(coverages, mask_coverage_max=0.95):
    """Prune if the mean mask coverage over in-class images exceeds the limit."""
    cov = float(np.mean(coverages)) if len(coverages) else 0.0
    return Verdict(cov > mask_coverage_max, cov, mask_coverage_max)


def rule_in_class_negative(in_class_relevances, in_class_positive_min=0.05):
    """Prune if fewer than the given fraction of in-class images give positive relevance."""
    r = np.asarray(in_class_relevances)
    frac = float(np.mean(r > 0)) if len(r) else 0.0
    return Verdict(frac < in_class_positive_min, frac, in_class_positive_min)


@dataclass
class ConceptVerdicts:
    class_index: int
    concept: int  # original index
    local_index: int
    verdicts: dict  # rule name -> Verdict

    @property
    def pruned(self):
        return any(v.fired for v in self.verdicts.values())


@dataclass
class PruneReport:
    config: dict
    concepts: list = field(default_factory=list)

    def keep_indices(self, num_classes):
        keep = [[] for _ in range(num_classes)]
        for c in self.concepts:
            if not c.pruned:
                keep[c.class_index].append(c.local_index)
        return keep

    def kept_counts(self, num_classes):
        return [len(k) for k in self.keep_indices(num_classes)]

    @property
    def num_pruned(self):
        return sum(c.pruned for c in self.concepts)

    def to_dict(self):
        return {
            "config": self.config,
            "concepts": [
                {
                    "class": c.class_index,
                    "concept": c.concept,
                    "pruned": c.pruned,
                    "rules": {name: asdict(v) for name, v in c.verdicts.items()},
                }
                for c in self.concepts
            ],
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def table(self):
        head = f"{'class':>5} {'concept':>7} " + " ".join(f"{r[:12]:>12}" for r in RULES) + "  verdict"
        lines = [head]
        for c in self.concepts:
            cells = []
            for r in RULES:
                v = c.verdicts[r]
                cells.append(f"{v.statistic:>11.3f}{'*' if v.fired else ' '}")
            lines.append(f"{c.class_index:>5} {c.concept:>7} " + " ".join(cells)
                         + ("  pruned" if c.pruned else "  kept"))
        return "\n".join(lines)


@dataclass
class ConceptStatistics:
    """Per-class relevances (N x C_k) and in-class mask coverages on a held-out split."""

    relevances: list
    coverages: list  # per class: n_k x C_k
    labels: np.ndarray
    ids: np.ndarray


def concept_statistics(model, cache, image_size, mask_threshold, batch_size=256):
    rels = [[] for _ in range(model.num_classes)]
    with torch.no_grad():
        for start in range(0, len(cache), batch_size):
            out = model(cache.x[start:start + batch_size])
            for k in range(model.num_classes):
                rels[k].append(out.relevances[k])
    rels = [torch.cat(r).numpy() for r in rels]
    labels = cache.labels.numpy()
    coverages = []
    for k in range(model.num_classes):
        x_in = cache.x[torch.as_tensor(labels == k)]
        heat = class_heatmaps(model, x_in, k, *image_size)
        coverages.append(threshold_mask(heat, mask_threshold).to(DTYPE).mean((-2, -1)).numpy())
    return ConceptStatistics(rels, coverages, labels, cache.ids)


def evaluate_rules(model, stats, config):
    report = PruneReport(config=asdict(config))
    for k in range(model.num_classes):
        in_class = stats.labels == k
        for j in range(model.concept_counts[k]):
            r = stats.relevances[k][:, j]
            verdicts = {
                "top_relevance_mismatch": rule_top_relevance_mismatch(
                    r, stats.labels, stats.ids, k, config.top_T, config.mismatch_S),
                "promiscuous_positive": rule_promiscuous_positive(r, config.positive_fraction_max),
                "whole_image_mask": rule_whole_image_mask(stats.coverages[k][:, j], config.mask_coverage_max),
                "in_class_negative": rule_in_class_negative(r[in_class], config.in_class_positive_min),
            }
            report.concepts.append(ConceptVerdicts(k, model.concept_ids[k][j], j, verdicts))
    return report


def evaluate_pruning(model, blackbox, heldout, config=None):
    config = config or PruneConfig()
    cache = heldout if isinstance(heldout, TapCache) else TapCache.build(blackbox, heldout)
    size = (blackbox.spec.input_height, blackbox.spec.input_width)
    return evaluate_rules(model, concept_statistics(model, cache, size, config.mask_threshold), config)


def apply_pruning(model, report):
    keep = report.keep_indices(model.num_classes)
    if not any(keep):
        raise PruningError("every concept of every class would be pruned; review the pruning thresholds")
    for k, idx in enumerate(keep):
        if not idx:
            log.warning("class %r loses all %d concepts", model.class_names[k], model.concept_counts[k])
    return model.subset(keep)


def prune_and_finetune(model, blackbox, train_images, heldout, prune_config=None, train_config=None):
    """Prune on ``heldout``, shrink, then fine-tune on ``train_images``.

    Returns (pruned model, PruneReport, fine-tuning TrainReport).
    """
    from .trainer import TrainConfig

    prune_config = prune_config or PruneConfig()
    train_config = train_config or TrainConfig()
    report = evaluate_pruning(model, blackbox, heldout, prune_config)
    pruned = apply_pruning(model, report)
    cache = train_images if isinstance(train_images, TapCache) else TapCache.build(blackbox, train_images)
    ft = fit(pruned, blackbox, cache, train_config, epochs=prune_config.fine_tune_epochs)
    return pruned, report, ft
