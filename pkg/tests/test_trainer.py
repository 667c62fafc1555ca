import json
import logging

import numpy as np
import pytest
import torch

from helpers import LinearHead, random_batch
from mace.blackbox import TrainingError
from mace.model import MaceModel
from mace.trainer import TrainConfig, make_batches, mining_generators, total_loss, train


def test_batches_cover_everything_once_and_are_stratified():
    labels = np.repeat(np.arange(4), 30)
    batches = make_batches(labels, 40, seed=0, epoch=0)
    flat = np.concatenate(batches)
    assert sorted(flat.tolist()) == list(range(120))
    assert len(batches) == 3
    for b in batches:
        assert np.bincount(labels[b], minlength=4).tolist() == [10] * 4
    again = make_batches(labels, 40, seed=0, epoch=0)
    assert all(np.array_equal(a, b) for a, b in zip(batches, again))
    other = make_batches(labels, 40, seed=0, epoch=1)
    assert not all(np.array_equal(a, b) for a, b in zip(batches, other))


def test_config_validation_and_round_trip(tmp_path):
    with pytest.raises(ValueError):
        TrainConfig(relevance_loss_mode="hinge")
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"bogus": 1})
    c = TrainConfig(seed=3, use_lo=False)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(c.to_dict()))
    assert TrainConfig.from_json(path) == c


def setup_case(seed=0, **kw):
    rng = np.random.default_rng(seed)
    model = MaceModel(2, 2, 2, 3, 4, 3, embed_dim=3, hidden=(5,), seed=seed)
    return model, LinearHead(2, 4, seed), random_batch(rng, 6, (2, 2, 3), 2, 4), TrainConfig(seed=seed, **kw)


def test_switches_remove_terms():
    model, bb, batch, config = setup_case()
    total, parts = total_loss(model, bb, *batch, config)
    expected = sum(v for v in parts.values())
    assert total.item() == pytest.approx(expected.item())
    _, parts = total_loss(model, bb, *batch, TrainConfig(use_lo=False, use_ld=False))
    assert parts["L_O"].item() == 0 and parts["L_D"].item() == 0


def test_loss_weights_scale_terms():
    model, bb, batch, config = setup_case()
    base, parts = total_loss(model, bb, *batch, config, mining_generators(0, 2))
    scaled, _ = total_loss(model, bb, *batch, TrainConfig(loss_weights={"reconstruction": 2.0}),
                           mining_generators(0, 2))
    assert scaled.item() == pytest.approx(base.item() + parts["L_D"].item())


def test_non_finite_term_names_itself():
    model, bb, (x, z, probs, labels), config = setup_case()
    z = z.clone()
    z[0, 0] = float("nan")
    with pytest.raises(TrainingError, match="L_D"):
        total_loss(model, bb, x, z, probs, labels, config)


def test_single_concept_class_warns_and_trains(small_blackbox, small_data, caplog):
    caplog.set_level(logging.WARNING, logger="mace.trainer")
    config = TrainConfig(num_concepts=1, embed_dim=4, hidden=(8,), epochs=1, batch_size=64)
    model, report = train(small_blackbox, small_data[0], config)
    assert all(row["L_E[0]"] == 0 for row in report.epochs)
    assert "triplet term is skipped" in caplog.text


def test_report_columns_and_ablation_columns(small_mace, tmp_path):
    _, report, _ = small_mace
    assert report.columns()[0] == "epoch" and "total" in report.columns()
    assert {"L_D", "L_O", "L_E[0]", "L_R[3]"} <= set(report.columns())
    report.to_csv(tmp_path / "r.csv")
    report.to_json(tmp_path / "r.json")
    assert len((tmp_path / "r.csv").read_text().splitlines()) == len(report.epochs) + 1


def test_training_is_deterministic(small_blackbox, small_data, tmp_path):
    config = TrainConfig(num_concepts=3, embed_dim=4, hidden=(8,), epochs=2, batch_size=16, seed=4)
    a, ra = train(small_blackbox, small_data[0], config)
    b, rb = train(small_blackbox, small_data[0], config)
    a.save(tmp_path / "a.npz")
    b.save(tmp_path / "b.npz")
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    assert ra.totals == rb.totals


def test_ablated_run_omits_columns(small_blackbox, small_data):
    config = TrainConfig(num_concepts=2, embed_dim=4, hidden=(8,), epochs=1, batch_size=64, use_lo=False)
    _, report = train(small_blackbox, small_data[0], config)
    assert "L_O" not in report.columns() and "L_D" in report.columns()


def test_needs_two_images_per_class(small_blackbox, small_data):
    one_each = [next(im for im in small_data[0] if im.label == k) for k in range(4)]
    with pytest.raises(ValueError):
        train(small_blackbox, one_each, TrainConfig(epochs=1))
