import numpy as np
import pytest
import torch

from mace.pruning import (
    RULES,
    ConceptStatistics,
    PruneConfig,
    PruningError,
    apply_pruning,
    evaluate_pruning,
    evaluate_rules,
    prune_and_finetune,
    rule_in_class_negative,
    rule_promiscuous_positive,
    rule_top_relevance_mismatch,
    rule_whole_image_mask,
)
from mace.model import MaceModel
from mace.trainer import TapCache, TrainConfig


class TestTopRelevanceMismatch:
    def test_six_off_class_fires(self):
        rel = np.arange(10, 0, -1.0)
        labels = np.array([1] * 6 + [0] * 4)
        v = rule_top_relevance_mismatch(rel, labels, np.arange(10), k=0)
        assert v.fired and v.statistic == 6

    def test_exactly_S_off_class_is_silent(self):
        rel = np.arange(12, 0, -1.0)
        labels = np.array([1] * 5 + [0] * 5 + [1, 1])
        v = rule_top_relevance_mismatch(rel, labels, np.arange(12), k=0)
        assert not v.fired and v.statistic == 5

    def test_only_top_T_count(self):
        rel = np.concatenate([np.full(10, 5.0), np.zeros(20)])
        labels = np.array([0] * 10 + [1] * 20)
        assert not rule_top_relevance_mismatch(rel, labels, np.arange(30), k=0).fired

    def test_ties_go_to_smaller_id(self):
        # 12 tied images; ids 0..5 are off-class, so the top ten hold all six of them
        rel = np.ones(12)
        ids = np.arange(12)
        labels = np.array([1] * 6 + [0] * 6)
        assert rule_top_relevance_mismatch(rel, labels, ids, k=0).fired
        # reversed ids: the off-class images now have the largest ids and two fall outside the top ten
        assert not rule_top_relevance_mismatch(rel, labels, ids[::-1], k=0).fired

    def test_small_split_scales_allowance(self):
        v = rule_top_relevance_mismatch(np.ones(4), np.array([1, 1, 1, 0]), np.arange(4), k=0)
        assert v.threshold == 2 and v.fired


class TestPromiscuousPositive:
    def test_sixty_percent_fires(self):
        assert rule_promiscuous_positive(np.array([1.0] * 6 + [-1.0] * 4)).fired

    def test_exactly_half_is_silent(self):
        assert not rule_promiscuous_positive(np.array([1.0] * 5 + [-1.0] * 5)).fired

    def test_zero_relevance_is_not_positive(self):
        assert not rule_promiscuous_positive(np.array([0.0] * 10)).fired


class TestWholeImageMask:
    def test_high_coverage_fires(self):
        assert rule_whole_image_mask(np.array([0.96, 0.96])).fired

    def test_exact_limit_is_silent(self):
        assert not rule_whole_image_mask(np.array([0.95, 0.95])).fired


class TestInClassNegative:
    def test_three_percent_fires(self):
        r = np.array([1.0] * 3 + [-1.0] * 97)
        assert rule_in_class_negative(r).fired

    def test_exactly_five_percent_is_silent(self):
        r = np.array([1.0] + [-1.0] * 19)
        assert not rule_in_class_negative(r).fired


def stats_with(concept_rel, coverage=0.3, n_per_class=20, seed=0):
    """Two classes; class 0 has a benign concept 0 and the given concept 1."""
    rng = np.random.default_rng(seed)
    labels = np.repeat([0, 1], n_per_class)
    benign = np.where(labels == 0, 1.0 + rng.random(2 * n_per_class), -1.0 - rng.random(2 * n_per_class))
    rel0 = np.stack([benign, concept_rel], 1)
    rel1 = np.stack([-benign, -benign], 1)
    cov0 = np.stack([np.full(n_per_class, 0.3), np.full(n_per_class, coverage)], 1)
    cov1 = np.full((n_per_class, 2), 0.3)
    return ConceptStatistics([rel0, rel1], [cov0, cov1], labels, np.arange(2 * n_per_class))


def toy_model():
    return MaceModel(2, 2, 2, 3, 4, 2, embed_dim=3, hidden=(4,))


@pytest.mark.parametrize("rule", RULES)
def test_each_rule_fires_alone_on_purpose_built_concept(rule):
    labels = np.repeat([0, 1], 20)
    if rule == "top_relevance_mismatch":
        # most relevant on class 1, yet positive on only 40% overall and 25% in class
        rel = np.where(labels == 1, -1.0, -2.0)
        rel[20:31] = 5.0
        rel[:5] = 1.0
        stats = stats_with(rel)
    elif rule == "promiscuous_positive":
        stats = stats_with(np.where(labels == 0, 2.0, 0.5))
    elif rule == "whole_image_mask":
        stats = stats_with(np.where(labels == 0, 1.0, -1.0), coverage=0.99)
    else:
        rel = np.where(labels == 0, -1.0, -2.0)
        rel[25] = 3.0
        stats = stats_with(rel)
    report = evaluate_rules(toy_model(), stats, PruneConfig())
    fired = {(c.class_index, c.local_index): [r for r, v in c.verdicts.items() if v.fired] for c in report.concepts}
    assert fired[(0, 1)] == [rule]
    assert all(not v for key, v in fired.items() if key != (0, 1))
    assert report.keep_indices(2) == [[0], [0, 1]]


def test_pruned_set_is_union_of_rules():
    stats = stats_with(np.where(np.repeat([0, 1], 20) == 0, 2.0, 0.5), coverage=0.99)
    report = evaluate_rules(toy_model(), stats, PruneConfig())
    c = next(c for c in report.concepts if (c.class_index, c.local_index) == (0, 1))
    assert {r for r, v in c.verdicts.items() if v.fired} == {"promiscuous_positive", "whole_image_mask"}
    assert report.num_pruned == 1
    assert "pruned" in report.table()


def test_engineered_always_positive_concept_is_pruned(small_mace, small_blackbox, small_data):
    model, _, _ = small_mace
    cache = TapCache.build(small_blackbox, small_data[1])
    with torch.no_grad():
        mean_e = model(cache.x).embeddings[0][:, 2].mean(0)
    engineered = model.subset([list(range(c)) for c in model.concept_counts])
    with torch.no_grad():
        engineered.relevance_weights[0][2] = 100.0 * mean_e
    report = evaluate_pruning(engineered, small_blackbox, cache)
    c = next(c for c in report.concepts if (c.class_index, c.local_index) == (0, 2))
    assert c.verdicts["promiscuous_positive"].statistic == 1.0
    assert c.pruned


def test_identity_pruning_keeps_model(small_mace, small_blackbox, small_data):
    model, _, config = small_mace
    off = PruneConfig(mismatch_S=10, positive_fraction_max=1.0, mask_coverage_max=1.0,
                      in_class_positive_min=0.0, fine_tune_epochs=1)
    pruned, report, ft = prune_and_finetune(model, small_blackbox, small_data[0], small_data[1], off, config)
    assert report.num_pruned == 0
    assert pruned.concept_counts == model.concept_counts
    assert len(ft.epochs) == 1


def test_shrink_matches_report(small_mace, small_blackbox, small_data):
    model, _, config = small_mace
    report = evaluate_pruning(model, small_blackbox, small_data[1])
    if report.num_pruned == len(report.concepts):
        with pytest.raises(PruningError):
            apply_pruning(model, report)
        return
    pruned = apply_pruning(model, report)
    assert pruned.concept_counts == report.kept_counts(model.num_classes)
    kept_ids = [[model.concept_ids[k][j] for j in idx] for k, idx in enumerate(report.keep_indices(4))]
    assert pruned.concept_ids == kept_ids
    total = sum(pruned.concept_counts)
    assert pruned.output.weight.shape[1] == total * model.embed_dim
    assert sum(w.shape[0] for w in pruned.relevance_weights) == total


def test_everything_pruned_raises():
    model = toy_model()
    stats = stats_with(np.ones(40), coverage=0.99)
    report = evaluate_rules(model, stats, PruneConfig(positive_fraction_max=0.0, in_class_positive_min=1.0))
    with pytest.raises(PruningError):
        apply_pruning(model, report)


def test_config_validation():
    with pytest.raises(ValueError):
        PruneConfig(mask_threshold=1.0)
    with pytest.raises(ValueError):
        PruneConfig(top_T=3, mismatch_S=5)
