"""Small fixtures shared by several test modules."""

import numpy as np
import torch

from mace.blackbox import BlackBox, BlackBoxSpec


class LinearHead(BlackBox):
    """A black box whose head is a fixed softmax layer; taps are supplied directly."""

    def __init__(self, num_classes, dense_dim, seed=0, tap=(2, 2, 3)):
        rng = np.random.default_rng(seed)
        self.spec = BlackBoxSpec(num_classes=num_classes, tap_height=tap[0], tap_width=tap[1], tap_depth=tap[2],
                                 dense_dim=dense_dim, input_height=8, input_width=8, input_channels=3,
                                 class_names=[f"c{k}" for k in range(num_classes)])
        self.W = torch.tensor(rng.normal(size=(num_classes, dense_dim)))
        self.b = torch.tensor(rng.normal(size=num_classes))

    def tap(self, images):
        raise NotImplementedError

    def dense(self, x):
        raise NotImplementedError

    def head(self, z):
        return torch.softmax(z @ self.W.T + self.b, dim=-1)


def random_batch(rng, n, tap, num_classes, dense_dim):
    """Non-negative taps, dense activations and a probability table."""
    x = torch.tensor(np.abs(rng.normal(size=(n, *tap))))
    z = torch.tensor(np.abs(rng.normal(size=(n, dense_dim))))
    probs = torch.tensor(rng.dirichlet(np.ones(num_classes), size=n))
    labels = torch.tensor(np.arange(n) % num_classes)
    return x, z, probs, labels
