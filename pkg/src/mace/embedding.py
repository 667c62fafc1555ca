"""Embedding generator and the semi-hard triplet loss used to train it."""

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

log = logging.getLogger(__name__)

NORM_GUARD = 1e-12


class ConfigurationError(ValueError):
    pass


def make_embedding_net(in_features, embed_dim, hidden=(256, 64)):
    """Dense net with tanh after every layer, shared by all concepts of one class."""
    layers = []
    widths = [in_features, *hidden, embed_dim]
    for a, b in zip(widths[:-1], widths[1:]):
        layers += [nn.Linear(a, b), nn.Tanh()]
    return nn.Sequential(*layers)


def l2_normalize(v):
    norm = v.norm(dim=-1, keepdim=True)
    norm = torch.where(norm < NORM_GUARD, norm + NORM_GUARD, norm)
    return v / norm


def embed(concept_maps, net):
    """Flatten each H x W concept map, run the class network, L2-normalise.

    ``concept_maps`` is (N x) C x H x W; returns (N x) C x Q unit vectors.
    """
    concept_maps = torch.as_tensor(concept_maps)
    in_features = net[0].in_features
    if concept_maps.dim() < 3 or concept_maps.shape[-2] * concept_maps.shape[-1] != in_features:
        raise ValueError(f"concept maps of shape {tuple(concept_maps.shape)} do not flatten to {in_features}")
    flat = concept_maps.reshape(*concept_maps.shape[:-2], in_features)
    return l2_normalize(net(flat))


@dataclass(frozen=True)
class NegativeChoice:
    index: int
    sq_distance: float
    fallback: bool


def select_semi_hard_negative(anchor, positive, negative_pool, margin=1.0, rng=None, keys=None):
    """Pick a semi-hard negative for one (anchor, positive) pair.

    Qualifying negatives satisfy d_ap < d_an < d_ap + margin (squared
    Euclidean distances); one is drawn uniformly. ``keys`` (one uniform draw
    per pool entry) replaces ``rng``: the qualifying entry with the largest key
    wins. With no qualifying entry the hardest negative is returned and
    flagged as a fallback.
    """
    pool = np.atleast_2d(np.asarray(negative_pool, dtype=float))
    if pool.shape[0] == 0 or pool.size == 0:
        raise ConfigurationError("negative pool is empty")
    anchor = np.asarray(anchor, dtype=float)
    d_ap = float(np.sum((anchor - np.asarray(positive, dtype=float)) ** 2))
    d_an = np.sum((pool - anchor) ** 2, axis=1)
    ok = np.flatnonzero((d_an > d_ap) & (d_an < d_ap + margin))
    if ok.size == 0:
        i = int(np.argmin(d_an))
        return NegativeChoice(i, float(d_an[i]), True)
    if keys is not None:
        i = int(ok[np.argmax(np.asarray(keys)[ok])])
    else:
        rng = rng if rng is not None else np.random.default_rng()
        i = int(rng.choice(ok))
    return NegativeChoice(i, float(d_an[i]), False)


def mine_negatives(embeddings, margin, keys):
    """Vectorised semi-hard mining for all (anchor image, positive image, concept) triples.

    ``embeddings`` is B x C x Q for one class, ``keys`` B x B x C x C uniforms.
    Returns (chosen B x B x C negative concept indices, fallback mask B x B x C).
    """
    e = embeddings.detach()
    B, C, _ = e.shape
    d_ap = ((e[:, None] - e[None, :]) ** 2).sum(-1)  # [a, p, j]
    d_an = ((e[:, :, None] - e[:, None, :]) ** 2).sum(-1)  # [a, j, n]
    dap = d_ap[..., None]
    dan = d_an[:, None]
    not_self = ~torch.eye(C, dtype=torch.bool)
    semi = not_self & (dan > dap) & (dan < dap + margin)
    has = semi.any(-1)
    by_key = torch.where(semi, keys, torch.full_like(keys, -1.0)).argmax(-1)
    hardest = torch.where(not_self, dan, torch.full_like(dan, float("inf"))).argmin(-1)
    return torch.where(has, by_key, hardest), ~has


def mining_keys(num_images, num_concepts, generator=None, dtype=torch.float64):
    return torch.rand(num_images, num_images, num_concepts, num_concepts, generator=generator, dtype=dtype)


def triplet_loss(embeddings, margin=1.0, generator=None, keys=None):
    """Triplet loss for one class over a mini-batch of its images.

    Every in-class image's concept-j embedding anchors once against every
    other in-class image's concept-j embedding (all anchor-positive pairs);
    negatives are the anchor image's other concepts, mined semi-hard.
    ``embeddings`` is B x C x Q. Returns a scalar tensor.
    """
    B, C, _ = embeddings.shape
    if C < 2:
        raise ConfigurationError("triplet loss needs at least two concepts per class")
    if B < 2:
        log.warning("triplet loss skipped: %d in-class image(s) in batch, need 2", B)
        return embeddings.sum() * 0.0
    if keys is None:
        keys = mining_keys(B, C, generator, embeddings.dtype)
    chosen, _ = mine_negatives(embeddings, margin, keys)
    d_ap = ((embeddings[:, None] - embeddings[None, :]) ** 2).sum(-1)  # [a, p, j]
    d_an = ((embeddings[:, :, None] - embeddings[:, None, :]) ** 2).sum(-1)  # [a, j, n]
    idx_a = torch.arange(B)[:, None, None].expand(B, B, C)
    idx_j = torch.arange(C)[None, None, :].expand(B, B, C)
    d_neg = d_an[idx_a, idx_j, chosen]
    hinge = torch.relu(d_ap - d_neg + margin)
    off_diag = ~torch.eye(B, dtype=torch.bool)[..., None]
    return (hinge * off_diag).sum()
