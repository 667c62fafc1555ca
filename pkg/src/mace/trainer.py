"""Joint optimisation of the four MACE loss families with Adam."""

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch

from .blackbox import TrainingError
from .embedding import triplet_loss
from .model import DTYPE, MaceModel
from .output import output_divergence, reconstruction_loss
from .relevance import RELEVANCE_MODES, relevance_loss
from .synthetic import stack

log = logging.getLogger(__name__)

TERMS = ("embedding", "relevance", "reconstruction", "divergence")


@dataclass
class TrainConfig:
    num_concepts: int = 10
    embed_dim: int = 32
    margin: float = 1.0
    learning_rate: float = 1e-4
    epochs: int = 64
    batch_size: int = 40
    seed: int = 0
    use_lo: bool = True
    use_ld: bool = True
    relevance_loss_mode: str = "full-bce"
    loss_weights: dict = field(default_factory=lambda: {t: 1.0 for t in TERMS})
    hidden: tuple = (256, 64)
    map_init: str = "gaussian"
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        self.betas = tuple(self.betas)
        self.loss_weights = {**{t: 1.0 for t in TERMS}, **self.loss_weights}
        if min(self.num_concepts, self.embed_dim, self.batch_size) < 1:
            raise ValueError("num_concepts, embed_dim and batch_size must be >= 1")
        if self.learning_rate <= 0 or self.margin <= 0:
            raise ValueError("learning_rate and margin must be positive")
        if self.relevance_loss_mode not in RELEVANCE_MODES:
            raise ValueError(f"relevance_loss_mode must be one of {RELEVANCE_MODES}")

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class TrainReport:
    config: dict
    seed: int
    epochs: list = field(default_factory=list)  # one dict of mean losses per epoch
    wall_time: float = 0.0

    @property
    def totals(self):
        return [row["total"] for row in self.epochs]

    def columns(self):
        return list(self.epochs[0]) if self.epochs else []

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.columns())
            writer.writeheader()
            writer.writerows(self.epochs)


@dataclass
class TapCache:
    """Frozen black-box outputs for a dataset, computed once before training."""

    x: torch.Tensor
    z: torch.Tensor
    probs: torch.Tensor
    labels: torch.Tensor
    ids: np.ndarray

    @classmethod
    def build(cls, blackbox, images):
        pixels, labels, ids = stack(images)
        x, z, probs = blackbox.tap_dataset(pixels)
        return cls(x.to(DTYPE), z.to(DTYPE), probs.to(DTYPE), torch.as_tensor(labels), ids)

    def __len__(self):
        return len(self.labels)


def make_batches(labels, batch_size, seed, epoch=0):
    """Class-stratified shuffled batches covering every index exactly once.

    Each class is shuffled and dealt round-robin across ceil(N / B) batches,
    so each batch gets about n_k * B / N images of class k. The permutation is
    drawn from ``default_rng([seed, epoch])``.
    """
    labels = np.asarray(labels)
    n = len(labels)
    num_batches = max(1, math.ceil(n / batch_size))
    rng = np.random.default_rng([seed, epoch])
    batches = [[] for _ in range(num_batches)]
    slot = 0
    for k in np.unique(labels):
        for i in rng.permutation(np.flatnonzero(labels == k)):
            batches[slot % num_batches].append(i)
            slot += 1
    return [rng.permutation(np.array(b, dtype=np.int64)) for b in batches if b]


def mining_generators(seed, num_classes):
    """One torch generator per class for negative mining."""
    seeds = np.random.SeedSequence([seed, 7]).spawn(num_classes)
    return [torch.Generator().manual_seed(int(s.generate_state(1)[0])) for s in seeds]


def total_loss(model, blackbox, x, z, probs, labels, config, generators=None):
    """Weighted sum of the four loss families on one batch.

    Returns (scalar, breakdown) where the breakdown holds the unweighted
    per-class embedding and relevance terms plus the reconstruction and
    divergence terms. Switched-off terms are reported as 0.
    """
    w = config.loss_weights
    out = model(x)
    breakdown = {}
    total = out.z_hat.new_zeros(())
    for k in range(model.num_classes):
        in_class = out.embeddings[k][labels == k]
        if model.concept_counts[k] < 2:
            le = total.new_zeros(())
        else:
            gen = generators[k] if generators is not None else None
            le = triplet_loss(in_class, config.margin, generator=gen)
        lr = relevance_loss(out.relevances[k], probs[:, k], config.relevance_loss_mode)
        breakdown[f"L_E[{k}]"] = le
        breakdown[f"L_R[{k}]"] = lr
        total = total + w["embedding"] * le + w["relevance"] * lr
    if config.use_ld:
        ld = reconstruction_loss(z, out.z_hat)
        total = total + w["reconstruction"] * ld
    else:
        ld = total.new_zeros(())
    if config.use_lo:
        lo = output_divergence(blackbox.head(out.z_hat), probs, validate=False)
        total = total + w["divergence"] * lo
    else:
        lo = total.new_zeros(())
    breakdown["L_D"] = ld
    breakdown["L_O"] = lo
    for name, value in breakdown.items():
        if not torch.isfinite(value):
            raise TrainingError(f"loss term {name} is not finite ({value.item()})")
    return total, breakdown


def fit(model, blackbox, cache, config, epochs=None, report=None):
    """Run Adam over ``model`` for ``epochs`` epochs on a TapCache; returns the report."""
    epochs = config.epochs if epochs is None else epochs
    report = report or TrainReport(config=config.to_dict(), seed=config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=config.betas, eps=config.eps)
    generators = mining_generators(config.seed, model.num_classes)
    for k, c in enumerate(model.concept_counts):
        if c < 2:
            log.warning("class %d has %d concept(s); its triplet term is skipped", k, c)
    start = time.perf_counter()
    for epoch in range(epochs):
        sums = {}
        batches = make_batches(cache.labels.numpy(), config.batch_size, config.seed, epoch)
        for idx in batches:
            idx = torch.as_tensor(idx)
            total, parts = total_loss(model, blackbox, cache.x[idx], cache.z[idx], cache.probs[idx],
                                      cache.labels[idx], config, generators)
            if not torch.isfinite(total):
                raise TrainingError("total loss is not finite")
            opt.zero_grad()
            total.backward()
            opt.step()
            for name, value in parts.items():
                sums[name] = sums.get(name, 0.0) + value.item()
            sums["total"] = sums.get("total", 0.0) + total.item()
        row = {"epoch": len(report.epochs) + 1}
        row.update({name: v / len(batches) for name, v in sums.items()})
        if not config.use_lo:
            row.pop("L_O")
        if not config.use_ld:
            row.pop("L_D")
        report.epochs.append(row)
        log.info("epoch %d total %.4f", row["epoch"], row["total"])
    report.wall_time += time.perf_counter() - start
    return report


def train(blackbox, dataset, config=None):
    """Train a fresh MACE unit on ``dataset`` (list of LabeledImage) against a frozen black box."""
    config = config or TrainConfig()
    counts = np.bincount([im.label for im in dataset], minlength=blackbox.spec.num_classes)
    if counts.min() < 2:
        raise ValueError("every class needs at least 2 training images")
    model = MaceModel.for_blackbox(blackbox.spec, num_concepts=config.num_concepts,
                                   embed_dim=config.embed_dim, hidden=config.hidden, seed=config.seed,
                                   map_init=config.map_init)
    cache = TapCache.build(blackbox, dataset)
    report = fit(model, blackbox, cache, config)
    return model, report
