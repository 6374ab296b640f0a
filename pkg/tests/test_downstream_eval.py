import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.metrics import accuracy_score, cohen_kappa_score, f1_score

import numerics_core as nc
from downstream_eval import (ProbeConfig, ProbeHead, SurvivalBatch, bandpower_features, c_index,
                             classification_metrics, confusion_frame, confusion_matrix, cox_ph_loss,
                             evaluate_probe, few_shot_curve, metrics_record, probe_train, sdb_class_weights,
                             stage_class_weights, wake_truncate, weighted_cross_entropy)
from errors import ConfigError, DataError, ShapeError
from numerics_core import NDValue
from signal_pipeline import standardize
from synthetic_cohort import GeneratorConfig, generate_record, generate_survival, sample_profile


def clusters(rng, n_classes, per_class, dim=6, spread=0.3):
    centers = rng.normal(scale=3.0, size=(n_classes, dim))
    labels = np.repeat(np.arange(n_classes), per_class)
    return centers[labels] + spread * rng.normal(size=(len(labels), dim)), labels


def cox_reference(h, times, events):
    total = 0.0
    for i in range(len(h)):
        if events[i]:
            at_risk = times >= times[i]
            total -= h[i] - np.log(np.exp(h[at_risk]).sum())
    return total / events.sum()


def test_stage_class_weights_follow_log5_rule():
    weights, zero = stage_class_weights([10, 0, 30, 5, 5])
    floored = np.array([10, 1, 30, 5, 5], dtype=float)
    np.testing.assert_allclose(weights, np.log(51 / floored) / math.log(5))
    assert zero


def test_sdb_class_weights_are_inverse_frequency():
    weights, zero = sdb_class_weights([90, 9, 1])
    np.testing.assert_allclose(weights, [100 / 90, 100 / 9, 100])
    assert not zero


def test_weighted_cross_entropy_matches_direct_sum(rng):
    logits = rng.normal(size=(4, 3))
    labels = np.array([0, 2, 2, 1])
    w = np.array([1.0, 3.0, 0.5])
    log_p = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    expected = -sum(w[y] * log_p[i, y] for i, y in enumerate(labels)) / w[labels].sum()
    assert weighted_cross_entropy(NDValue(logits), labels, w).item() == pytest.approx(expected)
    with pytest.raises(ShapeError):
        weighted_cross_entropy(NDValue(logits), labels[:3])


def test_wake_truncation_keeps_thirty_minutes_each_side():
    hypnogram = ['W'] * 100 + ['N2'] * 50 + ['W'] * 100
    window = wake_truncate(hypnogram)
    assert (window.start, window.end, window.all_wake) == (40, 210, False)
    assert wake_truncate([0] * 10 + [2] * 5 + [0] * 3) == wake_truncate(['W'] * 10 + ['N2'] * 5 + ['W'] * 3)
    assert wake_truncate([0] * 10 + [2] * 5 + [0] * 3).end == 18


def test_all_wake_record_is_kept_and_flagged():
    window = wake_truncate([0] * 20)
    assert (window.start, window.end, window.all_wake) == (0, 20, True)


def test_cox_loss_matches_reference_with_ties(rng):
    h = rng.normal(size=6)
    times = np.array([1.0, 1.0, 2.0, 3.0, 3.0, 5.0])
    events = np.array([1, 1, 0, 1, 0, 1])
    loss = cox_ph_loss(SurvivalBatch(NDValue(h), times, events)).item()
    assert loss == pytest.approx(cox_reference(h, times, events), rel=1e-12)


def test_cox_loss_is_shift_invariant_and_stable(rng):
    h = rng.normal(size=5)
    times = rng.uniform(1, 10, 5)
    events = np.array([1, 0, 1, 1, 0])
    base = cox_ph_loss(SurvivalBatch(NDValue(h), times, events)).item()
    shifted = cox_ph_loss(SurvivalBatch(NDValue(h + 800.0), times, events)).item()
    assert shifted == pytest.approx(base, rel=1e-9)


def test_cox_loss_gradients(rng):
    times = rng.uniform(1, 10, 6)
    events = np.array([1, 1, 0, 1, 0, 1])
    report = nc.grad_check(lambda inputs: cox_ph_loss(SurvivalBatch(inputs[0], times, events)),
                           [NDValue(rng.normal(size=6))])
    assert report.max_relative_error < 1e-6


def test_cox_loss_requires_an_event(rng):
    with pytest.raises(DataError, match="no events"):
        cox_ph_loss(SurvivalBatch(NDValue(rng.normal(size=3)), np.ones(3), np.zeros(3)))


def test_c_index_counts_concordant_pairs():
    times = np.array([1.0, 2.0, 3.0, 4.0])
    events = np.array([1, 1, 0, 1])
    assert c_index([4.0, 3.0, 2.0, 1.0], times, events) == 1.0
    assert c_index([1.0, 2.0, 3.0, 4.0], times, events) == 0.0
    assert c_index([1.0, 1.0, 1.0, 1.0], times, events) == 0.5
    with pytest.raises(DataError):
        c_index([1.0, 2.0], [1.0, 2.0], [0, 0])


def test_c_index_agrees_with_lifelines(rng):
    utils = pytest.importorskip('lifelines.utils')
    risks = rng.normal(size=40)
    times = rng.exponential(size=40)
    events = rng.integers(0, 2, 40)
    events[0] = 1
    expected = utils.concordance_index(times, -risks, events)
    assert c_index(risks, times, events) == pytest.approx(expected)


def test_classification_metrics_hand_computed():
    report = classification_metrics(np.array([[3, 1], [2, 4]]), ['a', 'b'])
    assert report.accuracy == pytest.approx(0.7)
    assert report.kappa == pytest.approx(0.4)
    assert report.macro_f1 == pytest.approx((6 / 9 + 8 / 11) / 2)
    assert report.per_class[1] == {'class': 'b', 'precision': pytest.approx(0.8), 'recall': pytest.approx(4 / 6),
                                   'f1': pytest.approx(8 / 11), 'support': 6}


def test_kappa_undefined_when_chance_agreement_is_one():
    report = classification_metrics(np.array([[10, 0], [0, 0]]))
    assert report.kappa == 0.0
    assert report.kappa_undefined


def test_classification_metrics_errors():
    with pytest.raises(ShapeError):
        classification_metrics(np.ones((2, 3)))
    with pytest.raises(DataError):
        classification_metrics(np.zeros((3, 3)))


def test_confusion_matrix_and_frame():
    matrix = confusion_matrix([0, 1, 2, 2], [0, 2, 2, 2], 3)
    np.testing.assert_array_equal(matrix, [[1, 0, 0], [0, 0, 1], [0, 0, 2]])
    frame = confusion_frame(matrix, ['x', 'y', 'z'])
    assert frame.loc['z', 'z'] == 2
    assert frame.index.name == 'true'


def test_metrics_agree_with_sklearn(rng):
    labels = rng.integers(0, 5, 400)
    labels[labels == 1] = 2
    predictions = np.where(rng.random(400) < 0.6, labels, rng.integers(0, 5, 400))
    report = classification_metrics(confusion_matrix(labels, predictions, 5))
    assert report.accuracy == pytest.approx(accuracy_score(labels, predictions))
    assert report.kappa == pytest.approx(cohen_kappa_score(labels, predictions))
    assert report.macro_f1 == pytest.approx(f1_score(labels, predictions, labels=range(5), average='macro',
                                                     zero_division=0))


def test_confusion_matrix_rejects_foreign_codes():
    with pytest.raises(DataError, match="outside"):
        confusion_matrix([0, 1, 5], [0, 1, 1], 3)
    with pytest.raises(ShapeError):
        confusion_matrix([0, 1], [0], 3)


def test_stage_probe_learns_separable_clusters(rng):
    x, y = clusters(rng, 5, 40)
    result = probe_train(x, y, 'stage5', ProbeConfig(steps=200), rng)
    assert result.losses[-1] < result.losses[0]
    evaluation = evaluate_probe(result.head, x, y)
    assert evaluation['report'].accuracy > 0.95
    assert evaluation['class_names'] == ['W', 'N1', 'N2', 'N3', 'REM']
    assert evaluation['confusion'].sum() == len(y)


def test_binary_probe_is_unweighted(rng):
    x, y = clusters(rng, 2, 30)
    result = probe_train(x, y, 'binary', ProbeConfig(steps=150), rng)
    assert result.class_weights is None
    assert evaluate_probe(result.head, x, y)['report'].accuracy == 1.0


def test_regression_probe_reduces_mae(rng):
    x = rng.normal(size=(200, 3))
    y = 3.0 * x[:, 0] + 50.0
    result = probe_train(x, y, 'regression', ProbeConfig(steps=600), rng)
    mae = evaluate_probe(result.head, x, y)['mae']
    assert mae < 0.25 * y.std()


def test_survival_probe_ranks_risk(rng):
    x = rng.normal(size=(200, 2))
    times = rng.exponential(1.0 / np.exp(1.5 * x[:, 0]))
    censor = rng.uniform(0, 3, 200)
    events = (times <= censor).astype(int)
    observed = np.minimum(times, censor)
    result = probe_train(x, observed, 'survival', ProbeConfig(steps=200), rng, events=events)
    assert evaluate_probe(result.head, x, observed, events)['c_index'] > 0.65


def test_survival_head_recovers_a_strong_age_hazard(rng):
    cfg = GeneratorConfig(hazard_age=4.0, hazard_bmi=0.0, hazard_male=0.0, censor_horizon=1e6)
    profiles = [sample_profile(rng, cfg) for _ in range(400)]
    labels = [generate_survival(p, rng, cfg) for p in profiles]
    features = np.array([[p.z_age, p.z_bmi, p.male] for p in profiles])
    features = np.hstack([features, rng.normal(size=(400, 3))])
    times = np.array([label.time for label in labels])
    events = np.array([label.event for label in labels])

    result = probe_train(features[:200], times[:200], 'survival', ProbeConfig(steps=300), rng, events=events[:200])
    held_out = evaluate_probe(result.head, features[200:], times[200:], events[200:])['c_index']
    assert held_out >= 0.8

    risks = result.head.predict(features[200:])
    shuffled = c_index(rng.permutation(risks), times[200:], events[200:])
    assert abs(shuffled - 0.5) < 0.1


def test_weighted_sdb_head_finds_rare_events(rng):
    def sample(counts):
        labels = np.repeat(np.arange(3), counts)
        return 2.0 * labels[:, None] + rng.normal(size=(len(labels), 1)), labels

    train_x, train_y = sample([3000, 90, 60])
    test_x, test_y = sample([500, 500, 500])
    base = ProbeConfig(steps=400, learning_rates={**ProbeConfig().learning_rates, 'sdb3': 5e-2})
    macro_f1 = {}
    for weighted in (True, False):
        cfg = replace(base, weighted=weighted)
        result = probe_train(train_x, train_y, 'sdb3', cfg, np.random.default_rng(0))
        macro_f1[weighted] = evaluate_probe(result.head, test_x, test_y)['report'].macro_f1
    assert macro_f1[True] > macro_f1[False] + 0.1


def test_probe_input_errors(rng):
    x = rng.normal(size=(10, 3))
    with pytest.raises(DataError, match="9 labels for 10 embeddings"):
        probe_train(x, np.zeros(9), 'binary')
    with pytest.raises(DataError, match="degenerate"):
        probe_train(x, np.zeros(10), 'binary')
    with pytest.raises(DataError):
        probe_train(x, np.ones(10), 'survival')
    with pytest.raises(ConfigError):
        ProbeHead(3, 'segmentation', rng)
    with pytest.raises(ConfigError):
        ProbeConfig(learning_rates={'stage5': 1e-2}).validate()


def test_stage_probe_flags_zero_count_classes(rng):
    x, y = clusters(rng, 3, 20)
    result = probe_train(x, y, 'stage5', ProbeConfig(steps=5), rng)
    assert result.zero_count_classes
    assert result.class_weights.shape == (5,)


def test_metrics_record_has_every_key():
    record = metrics_record('survival', 'test', {'c_index': 0.7}, 'abcd')
    assert record == {'task': 'survival', 'split': 'test', 'accuracy': None, 'macro_f1': None, 'kappa': None,
                      'c_index': 0.7, 'mae': None, 'per_class': [], 'config_hash': 'abcd'}


def test_bandpower_features(standard_record):
    features = bandpower_features(standard_record)
    assert features.shape == (standard_record.n_epochs, 3 * 6)
    assert np.all(np.isfinite(features))


def test_few_shot_curve_caps_sizes(rng):
    subjects = [clusters(rng, 5, 4) for _ in range(3)]
    test_x, test_y = clusters(rng, 5, 4)
    curve = few_shot_curve(subjects, test_x, test_y, ProbeConfig(steps=20), rng, sizes=(1, 2, 50))
    assert curve['n_subjects'].tolist() == [1, 2, 3]
    assert curve['accuracy'].between(0, 1).all()
    with pytest.raises(DataError):
        few_shot_curve([], test_x, test_y)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (5,), elements=st.floats(-5, 5)), st.floats(-300, 300))
def test_cox_loss_ignores_a_common_shift(h, shift):
    times = np.array([2.0, 1.0, 4.0, 3.0, 5.0])
    events = np.array([1, 0, 1, 1, 0])
    base = cox_ph_loss(SurvivalBatch(NDValue(h), times, events)).item()
    shifted = cox_ph_loss(SurvivalBatch(NDValue(h + shift), times, events)).item()
    assert shifted == pytest.approx(base, rel=1e-9, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(-10, 10), min_size=6, max_size=6), st.permutations(range(6)),
       st.lists(st.booleans(), min_size=6, max_size=6))
def test_c_index_depends_only_on_risk_order(risks, order, events):
    times = np.array(order, dtype=float)
    events = np.array(events, dtype=int)
    events[np.argmin(times)] = 1
    risks = np.array(risks, dtype=float)
    assert c_index(np.exp(risks), times, events) == c_index(risks, times, events)
    assert c_index(-risks, times, events) == pytest.approx(1.0 - c_index(risks, times, events))


def test_bandpower_probe_stages_synthetic_nights(small_cohort_cfg):
    records = [standardize(generate_record(i, np.random.SeedSequence(20 + i), small_cohort_cfg)) for i in range(4)]
    features = [bandpower_features(r) for r in records]
    train_x = np.concatenate(features[:3])
    train_y = np.concatenate([r.stages[:r.n_epochs] for r in records[:3]])
    result = probe_train(train_x, train_y, 'stage5', ProbeConfig(steps=300), np.random.default_rng(0))
    test = records[3]
    assert evaluate_probe(result.head, features[3], test.stages[:test.n_epochs])['report'].accuracy >= 0.85


def test_kappa_of_shuffled_predictions_averages_zero(rng):
    labels = rng.integers(0, 5, 500)
    kappas = [classification_metrics(confusion_matrix(labels, rng.permutation(labels), 5)).kappa
              for _ in range(1000)]
    assert abs(np.mean(kappas)) < 0.02


@pytest.mark.parametrize('fn', [weighted_cross_entropy, wake_truncate, cox_ph_loss, c_index, classification_metrics,
                                probe_train, evaluate_probe, bandpower_features, few_shot_curve])
def test_public_functions_document_returns(fn):
    assert 'Returns:' in fn.__doc__
