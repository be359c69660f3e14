"""Classifier training, evaluation metrics, and the rebalancing experiment."""

import numpy as np
import pytest

from steerdiff.classifier import (Classifier, FeatureExtractor, auc_from_scores,
                                  evaluate, lt_experiment,
                                  report_from_predictions, train_classifier)

from conftest import phantom_array_set


# --- auc oracle -------------------------------------------------------------------

def auc_pairwise(y_true, scores):
    """Counting oracle: fraction of (pos, neg) pairs ranked correctly, ties half."""
    pos = [s for s, t in zip(scores, y_true) if t]
    neg = [s for s, t in zip(scores, y_true) if not t]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def test_auc_six_sample_hand_case():
    y = [1, 0, 1, 0, 1, 0]
    s = [0.9, 0.8, 0.8, 0.3, 0.2, 0.1]
    got = auc_from_scores(y, s)
    assert got == auc_pairwise(y, s)


@pytest.mark.parametrize("seed", range(5))
def test_auc_matches_pairwise_oracle(seed):
    rng = np.random.default_rng(seed)
    y = rng.random(30) > 0.5
    if y.all() or not y.any():
        y[0] = ~y[0]
    s = np.round(rng.random(30), 1)  # coarse scores force ties
    assert abs(auc_from_scores(y, s) - auc_pairwise(y, s)) < 1e-12


def test_auc_constant_scores_is_half():
    assert auc_from_scores([1, 0, 1, 0], [0.5] * 4) == 0.5


def test_auc_none_when_class_absent():
    assert auc_from_scores([1, 1, 1], [0.1, 0.2, 0.3]) is None


def test_auc_invariant_under_monotone_transform():
    rng = np.random.default_rng(3)
    y = rng.random(40) > 0.4
    y[0], y[1] = True, False
    s = rng.standard_normal(40)
    base = auc_from_scores(y, s)
    assert auc_from_scores(y, np.exp(s)) == base
    assert auc_from_scores(y, 3 * s + 7) == base


# --- reports ----------------------------------------------------------------------

def test_perfect_predictions_report():
    y = [0, 0, 1, 1, 2, 2]
    scores = np.eye(3)[y]
    rep = report_from_predictions(["a", "b", "c"], y, y, scores)
    assert rep.balanced_accuracy == 1.0
    assert all(v == 1.0 for v in rep.auc.values())
    assert rep.macro_f1 == 1.0


def test_constant_predictor_has_half_auc():
    y = [0, 1, 2, 0, 1, 2]
    scores = np.full((6, 3), 1.0 / 3.0)
    rep = report_from_predictions(["a", "b", "c"], y, [0] * 6, scores)
    assert all(v == 0.5 for v in rep.auc.values())


def test_absent_class_excluded_with_note():
    y = [0, 0, 1, 1]
    scores = np.eye(3)[y]
    rep = report_from_predictions(["a", "b", "c"], y, y, scores)
    assert rep.auc["c"] is None
    assert any("absent" in n for n in rep.notes)
    assert rep.balanced_accuracy == 1.0  # mean over present classes only


def test_balanced_accuracy_equals_mean_recall_crosscheck():
    rng = np.random.default_rng(4)
    y = rng.integers(0, 3, 60)
    pred = rng.integers(0, 3, 60)
    rep = report_from_predictions(["a", "b", "c"], y, pred)
    recalls = []
    for c in range(3):
        sel = y == c
        if sel.any():
            recalls.append((pred[sel] == c).mean())
    assert abs(rep.balanced_accuracy - np.mean(recalls)) < 1e-12


def test_macro_f1_invariant_under_relabeling():
    rng = np.random.default_rng(5)
    y = rng.integers(0, 3, 80)
    pred = rng.integers(0, 3, 80)
    rep = report_from_predictions(["a", "b", "c"], y, pred)
    perm = np.array([2, 0, 1])
    rep2 = report_from_predictions(["c", "a", "b"], perm[y], perm[pred])
    assert abs(rep.macro_f1 - rep2.macro_f1) < 1e-12


def test_grouping_must_partition():
    with pytest.raises(ValueError, match="partition"):
        report_from_predictions(["a", "b"], [0, 1], [0, 1],
                                grouping={"g": ["a", "a"]})


def test_group_accuracy_reported(toy_classifier, toy_test_set):
    images, labels, _ = toy_test_set
    rep = evaluate(toy_classifier, images, labels,
                   grouping={"head": ["no_finding"], "medium": ["focal"],
                             "tail": ["streak"]})
    assert set(rep.group_accuracy) == {"head", "medium", "tail"}
    for v in rep.group_accuracy.values():
        assert 0.0 <= v <= 1.0


# --- training ---------------------------------------------------------------------

def test_training_is_deterministic(phantom_spec):
    images, labels, _ = phantom_array_set(phantom_spec, [8, 8, 8], "det")
    a, _ = train_classifier(images, labels, phantom_spec.class_names(), seed=3, epochs=2)
    b, _ = train_classifier(images, labels, phantom_spec.class_names(), seed=3, epochs=2)
    assert a.net.param_checksum() == b.net.param_checksum()
    c, _ = train_classifier(images, labels, phantom_spec.class_names(), seed=4, epochs=2)
    assert c.net.param_checksum() != a.net.param_checksum()


def test_single_class_training_rejected(phantom_spec):
    images, labels, _ = phantom_array_set(phantom_spec, [6, 0, 0], "single")
    with pytest.raises(ValueError, match="2 classes"):
        train_classifier(images, labels, phantom_spec.class_names(), seed=0, epochs=1)


def test_classifier_checkpoint_roundtrip(tmp_path, toy_classifier, toy_test_set):
    images, _, _ = toy_test_set
    toy_classifier.save(tmp_path / "clf")
    back = Classifier.load(tmp_path / "clf")
    assert back.trained and back.classes == toy_classifier.classes
    np.testing.assert_array_equal(back.logits(images[:4]),
                                  toy_classifier.logits(images[:4]))


@pytest.mark.slow
def test_balanced_phantom_separability(phantom_spec):
    """Criterion precondition: >=90% balanced accuracy on 300 train / 100 test."""
    images, labels, _ = phantom_array_set(phantom_spec, [100, 100, 100], "sep-train")
    test_images, test_labels, _ = phantom_array_set(phantom_spec, [34, 33, 33], "sep-test")
    clf, _ = train_classifier(images, labels, phantom_spec.class_names(),
                              seed=0, epochs=40)
    rep = evaluate(clf, test_images, test_labels)
    assert rep.balanced_accuracy >= 0.90, rep.confusion


@pytest.mark.slow
def test_label_shuffle_is_chance_level(phantom_spec):
    """Shuffled labels train to within 10 points of 1/K balanced accuracy."""
    images, labels, _ = phantom_array_set(phantom_spec, [30, 30, 30], "null-train")
    rng = np.random.default_rng(0)
    shuffled = labels.copy()
    rng.shuffle(shuffled)
    test_images, test_labels, _ = phantom_array_set(phantom_spec, [20, 20, 20], "null-test")
    clf, _ = train_classifier(images, shuffled, phantom_spec.class_names(),
                              seed=0, epochs=20)
    rep = evaluate(clf, test_images, test_labels)
    assert abs(rep.balanced_accuracy - 1.0 / 3.0) <= 0.10, rep.confusion


# --- long-tailed experiment ---------------------------------------------------------

def noise_generator(shape):
    def gen(label_id, count, rng):
        return rng.random((count, *shape)).astype(np.float32)
    return gen


def test_lt_experiment_target_below_counts_is_baseline(phantom_spec):
    images, labels, _ = phantom_array_set(phantom_spec, [10, 10, 10], "lt-eq")
    test_images, test_labels, _ = phantom_array_set(phantom_spec, [5, 5, 5], "lt-eq-te")
    out = lt_experiment(images, labels, test_images, test_labels,
                        phantom_spec.class_names(), target=5, seed=0,
                        generator=noise_generator((1, 64, 64)), epochs=2)
    assert out["added"] == {}
    assert out["baseline"].to_dict() == out["augmented"].to_dict()


def test_lt_experiment_tops_up_minorities(phantom_spec):
    images, labels, _ = phantom_array_set(phantom_spec, [12, 5, 2], "lt-top")
    test_images, test_labels, _ = phantom_array_set(phantom_spec, [4, 4, 4], "lt-top-te")
    out = lt_experiment(images, labels, test_images, test_labels,
                        phantom_spec.class_names(), target=8, seed=0,
                        generator=noise_generator((1, 64, 64)), epochs=2)
    assert out["added"] == {"focal": 3, "streak": 6}
    assert out["baseline_counts"] == {"no_finding": 12, "focal": 5, "streak": 2}


def test_lt_generator_count_mismatch_rejected(phantom_spec):
    images, labels, _ = phantom_array_set(phantom_spec, [6, 2, 2], "lt-bad")

    def bad_gen(label_id, count, rng):
        return np.zeros((count + 1, 1, 64, 64), dtype=np.float32)

    with pytest.raises(ValueError, match="generator returned"):
        lt_experiment(images, labels, images, labels, phantom_spec.class_names(),
                      target=4, seed=0, generator=bad_gen, epochs=1)
