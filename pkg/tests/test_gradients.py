"""Autograd versus central finite differences for every loss term of the training objective."""

import time

import numpy as np
import pytest
import torch

from helpers import LinearHead, random_batch
from mace.model import MaceModel
from mace.trainer import TrainConfig, mining_generators, total_loss

STEP = 1e-5
TOLERANCE = 1e-4
NUM_INSTANCES = 20


def flat_params(model):
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()])


def set_params(model, flat):
    offset = 0
    with torch.no_grad():
        for p in model.parameters():
            n = p.numel()
            p.copy_(flat[offset:offset + n].reshape(p.shape))
            offset += n


def term_values(model, bb, batch, config):
    # fresh mining generators on every call keep the sampled negatives fixed
    _, parts = total_loss(model, bb, *batch, config, mining_generators(config.seed, model.num_classes))
    return parts


def relative_error(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale < 1e-10 else np.linalg.norm(a - b) / scale


def check_instance(seed):
    rng = np.random.default_rng(seed)
    K, tap, L = 2, (2, 2, 3), 4
    model = MaceModel(K, *tap, L, num_concepts=[3, 2], embed_dim=3, hidden=(5,), seed=seed)
    bb = LinearHead(K, L, seed)
    batch = random_batch(rng, 4, tap, K, L)
    config = TrainConfig(seed=seed, relevance_loss_mode=("full-bce", "literal")[seed % 2])
    names = list(term_values(model, bb, batch, config))
    theta = flat_params(model)
    numeric = {name: np.zeros(len(theta)) for name in names}
    with torch.no_grad():
        for i in range(len(theta)):
            for sign in (1, -1):
                shifted = theta.clone()
                shifted[i] += sign * STEP
                set_params(model, shifted)
                parts = term_values(model, bb, batch, config)
                for name in names:
                    numeric[name][i] += sign * parts[name].item() / (2 * STEP)
        set_params(model, theta)
    errors = {}
    for name in names:
        model.zero_grad()
        term_values(model, bb, batch, config)[name].backward()
        analytic = torch.cat([(p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1)
                              for p in model.parameters()]).numpy()
        errors[name] = relative_error(analytic, numeric[name])
    return errors


@pytest.mark.parametrize("seed", range(NUM_INSTANCES))
def test_gradients_match_finite_differences(seed):
    errors = check_instance(seed)
    assert set(errors) == {"L_E[0]", "L_E[1]", "L_R[0]", "L_R[1]", "L_D", "L_O"}
    bad = {k: v for k, v in errors.items() if v >= TOLERANCE}
    assert not bad, bad


def test_gradient_suite_runtime():
    start = time.perf_counter()
    check_instance(123)
    assert (time.perf_counter() - start) * NUM_INSTANCES < 60
