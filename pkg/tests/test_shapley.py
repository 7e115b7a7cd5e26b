from math import factorial

import numpy as np
import pytest

from osteofuse import fcn, shapley
from osteofuse.errors import DimensionMismatchError


def brute_force_shapley(predict_fn, x, background, output: int) -> np.ndarray:
    """Exact Shapley values by enumerating every coalition.

    The coalition value is the background-averaged model output with the
    coalition's features switched to the explained row.
    """
    x = np.asarray(x, dtype=np.float64)
    background = np.atleast_2d(np.asarray(background, dtype=np.float64))
    d = x.size
    n_bg = background.shape[0]

    states = np.empty((2 ** d, n_bg, d))
    for mask in range(2 ** d):
        rows = background.copy()
        for j in range(d):
            if mask >> j & 1:
                rows[:, j] = x[j]
        states[mask] = rows
    outs = predict_fn(states.reshape(-1, d))[:, output]
    values = outs.reshape(2 ** d, n_bg).mean(axis=1)

    phi = np.zeros(d)
    for j in range(d):
        for mask in range(2 ** d):
            if mask >> j & 1:
                continue
            s = bin(mask).count("1")
            weight = factorial(s) * factorial(d - s - 1) / factorial(d)
            phi[j] += weight * (values[mask | (1 << j)] - values[mask])
    return phi


def linear_fn(coeffs):
    coeffs = np.asarray(coeffs, dtype=np.float64)
    return lambda batch: (np.asarray(batch) @ coeffs)[:, None]


class TestShapleySample:
    def test_linear_model_exact_attribution(self):
        rng = np.random.default_rng(0)
        coeffs = np.array([2.0, -1.0, 0.5, 3.0])
        x = rng.normal(size=4)
        background = rng.normal(size=(10, 4))
        phi = shapley.shapley_sample(linear_fn(coeffs), x, background,
                                     n_permutations=2000, seed=1)
        expected = coeffs * (x - background.mean(axis=0))
        assert np.max(np.abs(phi[:, 0] - expected)) < 0.01

    def test_duplicated_columns_symmetric(self):
        rng = np.random.default_rng(1)
        base = rng.normal(size=(30, 3))
        background = np.column_stack([base, base[:, 0]])  # column 3 == column 0
        x = np.array([1.3, -0.2, 0.8, 1.3])

        def fn(batch):
            batch = np.asarray(batch)
            v = np.tanh(batch[:, 0] + batch[:, 3]) + 0.5 * batch[:, 1]
            return v[:, None]

        phi = shapley.shapley_sample(fn, x, background, n_permutations=16000,
                                     seed=2)
        assert abs(phi[0, 0] - phi[3, 0]) < 0.02

    def test_matches_brute_force_on_trained_fcn(self):
        rng = np.random.default_rng(3)
        d = 8
        x_train = rng.normal(size=(60, d))
        logits = x_train[:, 0] - x_train[:, 1] + 0.5 * x_train[:, 2]
        y_train = np.digitize(logits, [-0.5, 0.5])
        config = fcn.FCNConfig(
            layer1=fcn.MixedLayerSpec(4, 2, 4),
            layer2=fcn.MixedLayerSpec(2, 1, 2), epochs=150, seed=4)
        model = fcn.train(config, x_train, y_train)

        fn = shapley.model_value_fn(model)
        x = x_train[0]
        background = x_train[1:11]
        target = int(np.argmax(fn(x[None])[0]))
        exact = brute_force_shapley(fn, x, background, target)
        phi = shapley.shapley_sample(fn, x, background, n_permutations=2000,
                                     seed=5)
        mae = float(np.mean(np.abs(phi[:, target] - exact)))
        assert mae < 0.01
        # Efficiency: the estimate telescopes onto f(x) - mean f(background).
        gap = abs(phi[:, target].sum()
                  - (fn(x[None])[0, target] - fn(background)[:, target].mean()))
        assert gap < 3.0 / np.sqrt(2000)

    def test_efficiency_exact_when_permutations_cover_background(self):
        rng = np.random.default_rng(6)
        coeffs = np.array([1.0, -2.0, 0.5])
        background = rng.normal(size=(5, 3))
        x = rng.normal(size=3)
        fn = linear_fn(coeffs)
        # 100 permutations cycle the 5 background rows 20 times each.
        phi = shapley.shapley_sample(fn, x, background, n_permutations=100,
                                     seed=7)
        expected_sum = fn(x[None])[0, 0] - fn(background)[:, 0].mean()
        assert phi[:, 0].sum() == pytest.approx(expected_sum, abs=1e-12)

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(8)
        background = rng.normal(size=(6, 4))
        x = rng.normal(size=4)
        fn = linear_fn(np.ones(4))
        a = shapley.shapley_sample(fn, x, background, 50, seed=9)
        b = shapley.shapley_sample(fn, x, background, 50, seed=9)
        assert np.array_equal(a, b)

    def test_doubling_permutations_halves_variance(self):
        rng = np.random.default_rng(10)
        background = rng.normal(size=(5, 4))
        x = rng.normal(size=4) + 2.0

        def fn(batch):
            batch = np.asarray(batch)
            v = np.tanh(batch @ np.array([1.0, -1.5, 0.7, 0.3]))
            return v[:, None]

        estimates = {n_perm: [] for n_perm in (100, 200)}
        for trial in range(200):
            for n_perm in (100, 200):
                phi = shapley.shapley_sample(fn, x, background, n_perm,
                                             seed=1000 + trial)
                estimates[n_perm].append(phi[0, 0])
        var_small = np.var(estimates[100])
        var_large = np.var(estimates[200])
        ratio = var_small / var_large
        assert 1.4 <= ratio <= 2.6  # 2x within 30%

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            shapley.shapley_sample(linear_fn(np.ones(3)), np.zeros(3),
                                   np.zeros((4, 5)), 10)


class TestImportance:
    def _model(self, d=4, seed=0):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(60, d))
        y = np.digitize(x[:, 0], [-0.5, 0.5])
        config = fcn.FCNConfig(
            layer1=fcn.MixedLayerSpec(3, 2, 3),
            layer2=fcn.MixedLayerSpec(2, 1, 2), epochs=100, seed=seed)
        return fcn.train(config, x, y), x, y

    def test_ignored_feature_gets_null_importance(self):
        model, x, y = self._model()
        # Silence feature 3: zero all its outgoing first-layer weights.
        model.w1[3, :] = 0.0
        report = shapley.importance(model, x[:5], x[10:30],
                                    n_permutations=300, seed=1)
        assert report.per_feature["x3"] < 1e-6

    def test_ranking_is_permutation_of_features(self):
        model, x, y = self._model(seed=2)
        report = shapley.importance(model, x[:4], x[10:20],
                                    n_permutations=200, seed=3)
        assert sorted(report.ranking) == sorted(model.input_columns)
        assert all(v >= 0 for v in report.per_feature.values())

    def test_one_hot_group_collapses_to_single_importance(self):
        model, x, y = self._model(seed=4)
        report = shapley.importance(
            model, x[:4], x[10:20], n_permutations=200, seed=5,
            feature_names=["age", "site=A", "site=B", "site=C"],
            feature_groups=["age", "site", "site", "site"])
        assert set(report.per_feature) == {"age", "site"}
        assert sorted(report.ranking) == ["age", "site"]

    def test_additivity_gap_recorded_per_sample(self):
        model, x, y = self._model(seed=6)
        report = shapley.importance(model, x[:3], x[10:20],
                                    n_permutations=400, seed=7)
        assert len(report.additivity_gaps) == 3
        assert all(g < 3.0 / np.sqrt(400) for g in report.additivity_gaps)

    def test_explaining_background_preserves_efficiency(self):
        model, x, y = self._model(seed=8)
        background = x[:10]
        report = shapley.importance(model, background, background,
                                    n_permutations=500, seed=9)
        assert max(report.additivity_gaps) < 3.0 / np.sqrt(500)


class TestStratifiedBackground:
    def test_caps_rows_and_keeps_stratification(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(300, 3))
        y = np.repeat([0, 1, 2], 100)
        bg = shapley.stratified_background(x, y, max_rows=60, seed=1)
        assert bg.shape == (60, 3)

    def test_small_input_passes_through(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(30, 3))
        y = rng.integers(0, 3, 30)
        bg = shapley.stratified_background(x, y, max_rows=100, seed=2)
        assert np.array_equal(bg, x)

    def test_proportional_allocation(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(200, 2))
        y = np.repeat([0, 1, 2], [100, 60, 40])
        x[y == 0, 0] = 0.0
        x[y == 1, 0] = 1.0
        x[y == 2, 0] = 2.0
        bg = shapley.stratified_background(x, y, max_rows=50, seed=3)
        counts = {v: int((bg[:, 0] == v).sum()) for v in (0.0, 1.0, 2.0)}
        assert counts == {0.0: 25, 1.0: 15, 2.0: 10}
