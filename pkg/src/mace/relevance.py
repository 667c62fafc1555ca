"""Relevance estimator: per-concept evidence scores and the matching loss."""

import torch

PROB_CLAMP = 1e-7
RELEVANCE_MODES = ("full-bce", "literal")


def compute_relevances(embeddings, weights):
    """r_j = <weights[j], embeddings[..., j, :]> for (N x) C x Q embeddings and C x Q weights."""
    embeddings = torch.as_tensor(embeddings)
    weights = torch.as_tensor(weights, dtype=embeddings.dtype)
    if embeddings.shape[-2:] != weights.shape:
        raise ValueError(f"embeddings {tuple(embeddings.shape)} do not match weights {tuple(weights.shape)}")
    return (embeddings * weights).sum(-1)


def class_probability_estimate(relevances):
    """Sigmoid of the summed concept relevances (last axis)."""
    return torch.sigmoid(torch.as_tensor(relevances).sum(-1))


def relevance_loss(relevances, target_probs, mode="full-bce"):
    """Match sigmoid(sum_j r_j) to the black box's class probability, summed over the batch.

    ``full-bce`` is the two-sided binary cross-entropy; ``literal`` keeps only
    the ``-f log(sigma)`` term.
    """
    if mode not in RELEVANCE_MODES:
        raise ValueError(f"unknown relevance loss mode {mode!r}")
    relevances = torch.as_tensor(relevances)
    f = torch.as_tensor(target_probs, dtype=relevances.dtype)
    if torch.any(f < 0) or torch.any(f > 1):
        raise ValueError("target probabilities must lie in [0, 1]")
    s = class_probability_estimate(relevances).clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    loss = -(f * torch.log(s))
    if mode == "full-bce":
        loss = loss - (1 - f) * torch.log(1 - s)
    return loss.sum()
