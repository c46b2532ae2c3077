import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracle
from direct.logistic import (
    LogisticModel,
    elbo_lower_bound,
    elbo_lower_bound_grad,
    get_params,
    likelihood_bound,
    likelihood_bound_grad,
    log_products,
    minibatch,
    predict_class_prob,
    with_params,
)
from direct.variational import MeanFieldDist, SupportGrid


def random_model(rng, b=4, m=3, n=10, scale=1.0):
    grid = SupportGrid(np.sort(rng.normal(size=(b, m)), axis=1))
    return LogisticModel(grid, MeanFieldDist(rng.normal(size=(b, m))),
                         MeanFieldDist(rng.normal(size=(b, m))),
                         scale * rng.normal(size=(n, b)),
                         rng.integers(0, 2, size=n))


def point_mass(idx, m, strength=80.0):
    lg = np.full((len(idx), m), -strength)
    lg[np.arange(len(idx)), idx] = strength
    return MeanFieldDist(lg)


class TestBound:
    def test_single_point_zero_logit(self):
        # the feature is zero, so z = 0 for every hypothesis
        grid = SupportGrid([[-1.0, 1.0]])
        model = LogisticModel(grid, MeanFieldDist.uniform(1, 2),
                              MeanFieldDist.uniform(1, 2), [[0.0]], [0])
        assert likelihood_bound(model) == pytest.approx(-1.0, rel=1e-14)
        exact = oracle.logistic_expected_loglik(model.features, model.labels,
                                                grid, model.q)
        assert exact == pytest.approx(-math.log(2))
        assert likelihood_bound(model) <= exact

    def test_zero_features(self, rng):
        n = 7
        grid = SupportGrid(np.sort(rng.normal(size=(3, 3)), axis=1))
        model = LogisticModel(grid, MeanFieldDist(rng.normal(size=(3, 3))),
                              MeanFieldDist.uniform(3, 3), np.zeros((n, 3)),
                              rng.integers(0, 2, size=n))
        assert likelihood_bound(model) == pytest.approx(-n, rel=1e-14)
        assert np.abs(likelihood_bound_grad(model)).max() < 1e-14

    def test_below_exact(self, rng):
        model = random_model(rng)
        exact = oracle.logistic_expected_loglik(model.features, model.labels,
                                                model.grid, model.q)
        assert likelihood_bound(model) <= exact

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 5), st.integers(2, 3), st.integers(1, 12),
           st.integers(0, 2**31))
    def test_below_exact_property(self, b, m, n, seed):
        model = random_model(np.random.default_rng(seed), b, m, n, scale=2.0)
        exact = oracle.logistic_expected_loglik(model.features, model.labels,
                                                model.grid, model.q)
        assert likelihood_bound(model) <= exact + 1e-12

    def test_tight_for_confident_margins(self, rng):
        b, m, n = 4, 3, 10
        grid = SupportGrid.shared([-1.0, 0.0, 1.0], b)
        idx = [2, 0, 2, 1]
        # tail mass must be far below 1e-3: exp(-z) weights it heavily
        q = point_mass(idx, m, strength=10.0)
        w = grid.values[np.arange(b), idx]
        rows = []
        while len(rows) < n:
            r = rng.normal(size=b) * 3
            if abs(r @ w) >= 3:
                rows.append(r)
        phi = np.array(rows)
        z = phi @ w
        labels = np.where(z > 0, 0, 1)  # class 0 when sigmoid(z) is large
        model = LogisticModel(grid, q, q, phi, labels)
        exact = oracle.logistic_expected_loglik(phi, labels, grid, q)
        probs = oracle.joint_pmf(q, oracle.all_indices(b, m))
        zs = np.array([phi @ oracle.weights_of(grid, r)
                       for r in oracle.all_indices(b, m)])
        consistent = np.where(labels == 0, zs, -zs) >= 3
        assert np.all(consistent[probs > 1e-3])
        assert likelihood_bound(model) <= exact
        assert exact - likelihood_bound(model) <= 0.05 * n

    def test_label_check(self, rng):
        grid = SupportGrid.shared([0.0, 1.0], 2)
        with pytest.raises(ValueError):
            LogisticModel(grid, MeanFieldDist.uniform(2, 2),
                          MeanFieldDist.uniform(2, 2), np.ones((2, 2)), [0, 2])


class TestStability:
    def test_large_partial_products(self):
        # per-variable factors near e^{+-50}; naive running products overflow
        b = 2000
        grid = SupportGrid.shared([-1.0, 1.0], b)
        lg = np.zeros((b, 2))
        lg[:, 0] = 200.0
        lg[:b // 2, :] = lg[:b // 2, ::-1]
        q = MeanFieldDist(lg)
        phi = np.full((1, b), 50.0)
        model = LogisticModel(grid, q, q, phi, [0])
        naive = 1.0
        with np.errstate(over="ignore", under="ignore"):
            for f in (q.probs * np.exp(-phi[0][:, None] * grid.values)).sum(1):
                naive *= f
        assert not np.isfinite(naive) or naive == 0.0
        lp = log_products(model)
        assert np.isfinite(lp).all()
        assert abs(lp[0]) < 1e-6
        assert np.isfinite(likelihood_bound(model))
        assert np.isfinite(likelihood_bound_grad(model)).all()

    def test_finite_log_products(self, rng):
        b = 2000
        grid = SupportGrid(np.sort(rng.uniform(-1, 1, size=(b, 3)), axis=1))
        q = MeanFieldDist(rng.normal(size=(b, 3)))
        phi = rng.uniform(-50, 50, size=(3, b))
        model = LogisticModel(grid, q, q, phi, [0, 1, 0])
        assert np.isfinite(log_products(model)).all()


class TestGrad:
    def test_finite_difference(self, rng):
        model = random_model(rng)
        fd = oracle.finite_diff_grad(
            lambda v: elbo_lower_bound(with_params(model, v)), get_params(model))
        np.testing.assert_allclose(elbo_lower_bound_grad(model).ravel(), fd,
                                   rtol=1e-6, atol=1e-8)

    def test_gauge(self, rng):
        model = random_model(rng)
        np.testing.assert_allclose(elbo_lower_bound_grad(model).sum(axis=1), 0,
                                   atol=1e-10)
        shifted = with_params(model, (model.q.logits + 7.0).ravel())
        assert elbo_lower_bound(shifted) == pytest.approx(elbo_lower_bound(model),
                                                          rel=1e-12)

    def test_chunked_equals_whole(self, rng, monkeypatch):
        import direct.logistic as lg
        model = random_model(rng, n=40)
        full = likelihood_bound_grad(model)
        monkeypatch.setattr(lg, "_CHUNK_ELEMS", 30)
        np.testing.assert_allclose(likelihood_bound_grad(model), full, rtol=1e-12)


class TestMinibatch:
    def test_full_batch(self, rng):
        model = random_model(rng, n=12)
        rows = minibatch(model, rng, batch_size=100)
        assert likelihood_bound(model, rows) == pytest.approx(likelihood_bound(model))

    def test_unbiased(self, rng):
        model = random_model(rng, n=30)
        vals = [likelihood_bound(model, minibatch(model, rng, 5))
                for _ in range(4000)]
        se = np.std(vals) / math.sqrt(len(vals))
        assert abs(np.mean(vals) - likelihood_bound(model)) < 4 * se


class TestPredictClassProb:
    def test_zero_logit(self, rng):
        grid = SupportGrid.shared([-1.0, 1.0], 2)
        model = LogisticModel(grid, point_mass([1, 1], 2), MeanFieldDist.uniform(2, 2),
                              np.zeros((1, 2)), [0])
        assert predict_class_prob(model, [1.0, -1.0], 10, rng) == 0.5

    def test_saturation(self, rng):
        grid = SupportGrid.shared([-1.0, 1.0], 2)
        model = LogisticModel(grid, point_mass([1, 1], 2), MeanFieldDist.uniform(2, 2),
                              np.zeros((1, 2)), [0])
        p = predict_class_prob(model, [8.0, 8.0], 10, rng)
        assert 0.9999 < p < 1.0

    def test_enumeration(self, rng):
        model = random_model(rng, b=3, m=2)
        x = rng.normal(size=3) * 2
        idx = oracle.all_indices(3, 2)
        probs = oracle.joint_pmf(model.q, idx)
        z = np.array([x @ oracle.weights_of(model.grid, r) for r in idx])
        exact = float(probs @ (1 / (1 + np.exp(-z))))
        est, se = predict_class_prob(model, x, 10**5, rng, return_stderr=True)
        assert abs(est - exact) < 3 * se

    def test_reproducible(self, rng):
        model = random_model(rng)
        x = rng.normal(size=4)
        a = predict_class_prob(model, x, 50, np.random.default_rng(3))
        b = predict_class_prob(model, x, 50, np.random.default_rng(3))
        assert a == b
