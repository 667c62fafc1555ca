import logging

import pytest

from mace.blackbox import train_toy_classifier
from mace.synthetic import generate_synthetic_dataset, split_dataset
from mace.trainer import TrainConfig, train


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.ERROR, logger="mace.trainer")


@pytest.fixture(scope="session")
def small_data():
    """4 classes x 40 images, split train / prune / eval."""
    images = generate_synthetic_dataset(4, 40, seed=11)
    return split_dataset(images, (0.6, 0.2, 0.2), seed=11)


@pytest.fixture(scope="session")
def small_blackbox(small_data):
    tr, _, ev = small_data
    return train_toy_classifier(tr, epochs=12, seed=0, heldout=ev, min_accuracy=0.0)


@pytest.fixture(scope="session")
def small_mace(small_blackbox, small_data):
    config = TrainConfig(num_concepts=4, embed_dim=8, hidden=(16,), epochs=3, batch_size=16, seed=0)
    model, report = train(small_blackbox, small_data[0], config)
    return model, report, config
