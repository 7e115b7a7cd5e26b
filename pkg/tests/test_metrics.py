import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import rankdata

from osteofuse import metrics
from osteofuse.errors import LabelOutOfRangeError, UndefinedMetricWarning


def mann_whitney_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Rank-based AUC oracle: U statistic over n_pos * n_neg, ties half-credit."""
    ranks = rankdata(scores)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


class TestConfusion:
    def test_perfect_predictions_are_diagonal(self):
        cm = metrics.confusion([0, 1, 2, 1], [0, 1, 2, 1])
        assert np.array_equal(cm.counts, np.diag([1, 2, 1]))

    def test_direct_count(self):
        cm = metrics.confusion([0, 1, 2], [0, 2, 2])
        assert cm.counts[1, 2] == 1
        assert np.array_equal(np.diag(cm.counts), [1, 0, 1])

    def test_fold_accumulation_equals_pooled(self):
        rng = np.random.default_rng(0)
        y_true = rng.integers(0, 3, 100)
        y_pred = rng.integers(0, 3, 100)
        folds = np.array_split(np.arange(100), 5)
        total = metrics.ConfusionMatrix(np.zeros((3, 3), dtype=np.int64))
        for idx in folds:
            total = total.add(metrics.confusion(y_true[idx], y_pred[idx]))
        pooled = metrics.confusion(y_true, y_pred)
        assert np.array_equal(total.counts, pooled.counts)
        assert total.total == 100

    def test_label_out_of_range(self):
        with pytest.raises(LabelOutOfRangeError):
            metrics.confusion([0, 3], [0, 0])


class TestOvrMetrics:
    def test_hand_computed_binary_style_case(self):
        # Class 0 one-vs-rest has TP=8, TN=5, FP=2, FN=1.
        cm = metrics.ConfusionMatrix(np.array([[8, 1, 0], [2, 3, 0], [0, 0, 2]]))
        assert cm.ovr(0) == (8, 5, 2, 1)
        report = metrics.ovr_metrics(cm)
        c0 = report.per_class[0]
        assert c0["accuracy"] == pytest.approx(0.8125, abs=1e-4)
        assert c0["sensitivity"] == pytest.approx(0.8889, abs=1e-4)
        assert c0["precision"] == pytest.approx(0.8, abs=1e-4)
        assert c0["specificity"] == pytest.approx(0.7143, abs=1e-4)
        assert c0["f1"] == pytest.approx(0.8421, abs=1e-4)

    def test_perfect_matrix_gives_all_ones(self):
        cm = metrics.ConfusionMatrix(np.diag([10, 20, 30]))
        report = metrics.ovr_metrics(cm)
        for name in metrics.RATE_NAMES:
            assert report.macro[name] == 1.0
        assert report.micro_accuracy == 1.0

    def test_zero_denominator_is_undefined_not_zero(self):
        # No true or predicted class-2 samples: sensitivity 0/0.
        cm = metrics.ConfusionMatrix(np.array([[5, 0, 0], [0, 5, 0], [0, 0, 0]]))
        with pytest.warns(UndefinedMetricWarning):
            report = metrics.ovr_metrics(cm)
        assert np.isnan(report.per_class[2]["sensitivity"])
        assert report.per_class[2]["sensitivity"] != 0.0
        # Macro averages exclude the undefined entry.
        assert report.macro["sensitivity"] == 1.0

    def test_micro_accuracy_is_trace_over_total(self):
        cm = metrics.ConfusionMatrix(np.array([[4, 1, 0], [2, 6, 1], [0, 3, 7]]))
        report = metrics.ovr_metrics(cm)
        assert report.micro_accuracy == np.trace(cm.counts) / cm.counts.sum()


class TestFitStatistics:
    def test_prior_model_scores_zero(self):
        y = np.array([0, 0, 1, 2, 1, 0])
        priors = np.bincount(y, minlength=3) / y.size
        probs = np.tile(priors, (y.size, 1))
        fit = metrics.fit_statistics(probs, y, priors)
        assert fit.entropy_r2 == pytest.approx(0.0, abs=1e-12)
        assert fit.generalized_r2 == pytest.approx(0.0, abs=1e-12)

    def test_perfect_predictor(self):
        y = np.array([0, 1, 2, 2])
        probs = np.zeros((4, 3))
        probs[np.arange(4), y] = 1.0
        fit = metrics.fit_statistics(probs, y, np.array([0.25, 0.25, 0.5]))
        assert fit.log_likelihood == 0.0
        assert fit.entropy_r2 == 1.0
        assert fit.generalized_r2 == pytest.approx(1.0, abs=1e-12)
        assert fit.rase == 0.0
        assert fit.mad == 0.0

    def test_probability_floor_keeps_ll_finite(self):
        y = np.array([0, 1])
        probs = np.array([[0.0, 1.0, 0.0], [0.0, 1.0, 0.0]])
        fit = metrics.fit_statistics(probs, y, np.array([0.5, 0.25, 0.25]))
        assert np.isfinite(fit.log_likelihood)
        assert fit.log_likelihood == pytest.approx(np.log(1e-12), rel=1e-9)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(3)
        probs = rng.dirichlet(np.ones(3), size=40)
        y = rng.integers(0, 3, 40)
        priors = np.array([0.4, 0.3, 0.3])
        base = metrics.fit_statistics(probs, y, priors)
        perm = rng.permutation(40)
        shuffled = metrics.fit_statistics(probs[perm], y[perm], priors)
        for attr in ("generalized_r2", "entropy_r2", "rase", "mad",
                     "log_likelihood"):
            assert getattr(base, attr) == pytest.approx(
                getattr(shuffled, attr), rel=1e-12)


class TestRocAuc:
    def test_perfect_separation(self):
        scores = np.array([[0.9, 0.05, 0.05]] * 5 + [[0.1, 0.8, 0.1]] * 5
                          + [[0.1, 0.1, 0.8]] * 5)
        y = np.repeat([0, 1, 2], 5)
        report = metrics.roc_auc(scores, y)
        for c in range(3):
            assert report.per_class[c].auc == 1.0
        assert report.macro_auc == 1.0

    def test_random_scores_near_half(self):
        rng = np.random.default_rng(11)
        n = 10_000
        y = rng.integers(0, 2, n)
        s = rng.random(n)  # independent of the labels
        report = metrics.roc_auc(np.column_stack([1 - s, s]), y)
        assert report.per_class[1].auc == pytest.approx(0.5, abs=0.02)

    def test_complement_symmetry(self):
        rng = np.random.default_rng(5)
        s = rng.random(200)
        y = np.where(rng.random(200) < 0.4, 0, 1)
        a = metrics.roc_auc(np.column_stack([s, 1 - s]), y).per_class[0].auc
        b = metrics.roc_auc(np.column_stack([1 - s, s]), y).per_class[0].auc
        assert a == pytest.approx(1.0 - b, abs=1e-12)

    def test_matches_mann_whitney_on_random_instances(self):
        rng = np.random.default_rng(42)
        for trial in range(100):
            n = int(rng.integers(10, 200))
            # Mix continuous and heavily tied discrete scores.
            if trial % 2:
                scores = rng.integers(0, 5, n).astype(float)
            else:
                scores = rng.random(n)
            y = rng.integers(0, 2, n)
            if y.min() == y.max():
                y[0] = 1 - y[0]
            probs = np.column_stack([1 - scores, scores])
            curve = metrics.roc_auc(probs, y).per_class[1]
            oracle = mann_whitney_auc(scores, y == 1)
            assert curve.auc == pytest.approx(oracle, abs=1e-9)

    def test_curve_endpoints_and_ordering(self):
        rng = np.random.default_rng(2)
        scores = rng.random((50, 3))
        scores /= scores.sum(axis=1, keepdims=True)
        y = rng.integers(0, 3, 50)
        report = metrics.roc_auc(scores, y)
        for curve in report.per_class.values():
            assert curve.fpr[0] == 0.0 and curve.tpr[0] == 0.0
            assert curve.fpr[-1] == 1.0 and curve.tpr[-1] == 1.0
            assert np.all(np.diff(curve.fpr) >= 0)

    def test_single_class_fold_is_undefined_and_excluded(self):
        scores = np.column_stack([np.linspace(0, 1, 6)] * 3)
        y = np.zeros(6, dtype=int)
        with pytest.warns(UndefinedMetricWarning):
            report = metrics.roc_auc(scores, y)
        assert np.isnan(report.per_class[1].auc)
        assert 1 in report.undefined_classes


@given(st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_metric_functions_are_pure(seed):
    rng = np.random.default_rng(seed)
    y_true = rng.integers(0, 3, 30)
    y_pred = rng.integers(0, 3, 30)
    a = metrics.confusion(y_true, y_pred)
    b = metrics.confusion(y_true, y_pred)
    assert np.array_equal(a.counts, b.counts)
    ra = metrics.ovr_metrics(a)
    rb = metrics.ovr_metrics(b)
    assert ra.micro_accuracy == rb.micro_accuracy
    for name in metrics.RATE_NAMES:
        va, vb = ra.macro[name], rb.macro[name]
        assert (np.isnan(va) and np.isnan(vb)) or va == vb
