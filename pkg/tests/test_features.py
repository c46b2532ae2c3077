import math

import numpy as np
import pytest

from direct.errors import ConfigError, DataError
from direct.features import (
    Dataset,
    RffMap,
    discretized_gaussian_prior,
    init_hyperparams,
    kfold,
    load_csv,
    make_support,
    rff_features,
    se_ard_kernel,
    standardize,
    write_csv,
)
from direct.variational import SupportGrid


class TestCsv:
    def test_plain(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("1,2,3\n4,5,6\n7,8,9\n")
        d = load_csv(p)
        assert d.n == 3
        np.testing.assert_array_equal(d.y, [3, 6, 9])
        assert d.columns is None

    def test_header_and_name(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("a,target,b\n1,2,3\n4,5,6\n")
        d = load_csv(p, "target")
        np.testing.assert_array_equal(d.y, [2, 5])
        np.testing.assert_array_equal(d.X, [[1, 3], [4, 6]])
        assert d.columns == ("a", "b")

    def test_roundtrip(self, tmp_path, rng):
        d = Dataset(rng.normal(size=(6, 3)), rng.normal(size=6))
        write_csv(tmp_path / "r.csv", d)
        back = load_csv(tmp_path / "r.csv", "y")
        np.testing.assert_allclose(back.X, d.X, rtol=1e-12)
        np.testing.assert_allclose(back.y, d.y, rtol=1e-12)

    def test_bad_rows_reported(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("x,y\n1,2\n3,oops\n5\n")
        with pytest.raises(DataError) as e:
            load_csv(p, "y")
        assert "row 3" in str(e.value) and "row 4" in str(e.value)

    def test_errors(self, tmp_path):
        with pytest.raises(DataError):
            load_csv(tmp_path / "missing.csv")
        (tmp_path / "e.csv").write_text("")
        with pytest.raises(DataError):
            load_csv(tmp_path / "e.csv")
        (tmp_path / "h.csv").write_text("a,b\n")
        with pytest.raises(DataError):
            load_csv(tmp_path / "h.csv")


class TestStandardize:
    def test_moments(self, rng):
        d = Dataset(rng.normal(3, 5, size=(40, 3)), rng.normal(size=40))
        _, s = standardize(d)
        np.testing.assert_allclose(s.X.mean(0), 0, atol=1e-12)
        np.testing.assert_allclose(s.X.std(0), 1, rtol=1e-12)

    def test_constant_column(self, rng):
        X = np.c_[np.full(10, 4.0), rng.normal(size=10)]
        tr, s = standardize(Dataset(X, np.zeros(10)))
        np.testing.assert_array_equal(s.X[:, 0], 0.0)
        assert tr.scale[0] == 1.0

    def test_reuse(self, rng):
        tr, _ = standardize(Dataset(rng.normal(size=(20, 2)), np.zeros(20)))
        Xt = rng.normal(size=(5, 2))
        np.testing.assert_allclose(tr.transform(Xt), (Xt - tr.mean) / tr.scale)


class TestRff:
    def test_origin(self):
        fm = RffMap.create(8, [1.0, 2.0], signal_sd=1.5, seed=1)
        phi = rff_features(fm, np.zeros((1, 2)))
        np.testing.assert_allclose(phi[0, 0::2], 1.5 * math.sqrt(2 / 8))
        np.testing.assert_array_equal(phi[0, 1::2], 0.0)

    def test_row_norm(self, rng):
        fm = RffMap.create(64, [0.5, 1.0, 3.0], signal_sd=2.0, seed=2)
        phi = rff_features(fm, rng.normal(size=(30, 3)) * 5)
        np.testing.assert_allclose((phi**2).sum(1), 4.0, rtol=1e-12)

    def test_kernel_approximation(self, rng):
        ls = np.array([0.7, 1.3])
        fm = RffMap.create(4096, ls, seed=3)
        # close pairs: kernel >= ~0.6, where 5% exceeds the Monte-Carlo error
        for _ in range(10):
            x1 = rng.normal(size=2)
            x2 = x1 + rng.normal(size=2) * 0.3 * ls
            approx = (rff_features(fm, x1) @ rff_features(fm, x2).T).item()
            exact = se_ard_kernel(x1, x2, ls)
            assert abs(approx - exact) <= 0.05 * exact

    def test_kernel_absolute_error(self, rng):
        ls = np.array([0.7, 1.3])
        fm = RffMap.create(4096, ls, seed=4)
        # per-entry sd is at most sqrt(1/4096) ~ 0.016
        for _ in range(20):
            x1, x2 = rng.normal(size=(2, 2))
            approx = (rff_features(fm, x1) @ rff_features(fm, x2).T).item()
            assert abs(approx - se_ard_kernel(x1, x2, ls)) < 0.05

    def test_seeded(self):
        a = RffMap.create(10, [1.0], seed=9)
        b = RffMap.create(10, [1.0], seed=9)
        np.testing.assert_array_equal(a.frequencies, b.frequencies)

    def test_validation(self):
        with pytest.raises(ConfigError):
            RffMap.create(7, [1.0])
        with pytest.raises(DataError):
            rff_features(RffMap.create(4, [1.0]), np.ones((2, 3)))


class TestHyperparams:
    def test_unit_variance(self, rng):
        y = rng.normal(size=200)
        y = (y - y.mean()) / y.std()
        h = init_hyperparams(Dataset(rng.normal(size=(200, 2)), y))
        assert h.signal_sd == pytest.approx(1.0)
        assert h.noise_var == pytest.approx(0.1)

    def test_scale_doubles(self, rng):
        X = rng.normal(size=(50, 2))
        y = rng.normal(size=50)
        a = init_hyperparams(Dataset(X, y))
        b = init_hyperparams(Dataset(X * [1.0, 2.0], y))
        assert b.lengthscales[1] == pytest.approx(2 * a.lengthscales[1])
        assert b.lengthscales[0] == pytest.approx(a.lengthscales[0])

    def test_median_oracle(self, rng):
        X = rng.normal(size=(20, 1))
        d = [abs(X[i, 0] - X[j, 0]) for i in range(20) for j in range(i + 1, 20)]
        h = init_hyperparams(Dataset(X, rng.normal(size=20)))
        assert h.lengthscales[0] == pytest.approx(np.median(d))

    def test_constant_column(self, rng):
        X = np.c_[np.ones(15), rng.normal(size=15)]
        assert init_hyperparams(Dataset(X, rng.normal(size=15))).lengthscales[0] == 1.0

    def test_degenerate_target(self, rng):
        with pytest.raises(ConfigError):
            init_hyperparams(Dataset(rng.normal(size=(12, 1)), np.ones(12)))
        with pytest.raises(ConfigError):
            init_hyperparams(Dataset(rng.normal(size=(5, 1)), rng.normal(size=5)))

    def test_subsample_reproducible(self, rng):
        d = Dataset(rng.normal(size=(1500, 2)), rng.normal(size=1500))
        a = init_hyperparams(d, seed=4)
        b = init_hyperparams(d, seed=4)
        np.testing.assert_array_equal(a.lengthscales, b.lengthscales)


class TestSupport:
    def test_fifteen(self):
        g = make_support(1.0, 15, 3)
        assert g.values[0, 0] == -3.0 and g.values[0, -1] == 3.0
        assert g.values[0, 7] == 0.0
        assert g.bit_width == 4

    def test_two(self):
        np.testing.assert_array_equal(make_support(0.5, 2, 1).values, [[-1.5, 1.5]])

    @pytest.mark.parametrize("m", [2, 3, 8, 15, 31])
    def test_uniform_spacing(self, m):
        v = make_support(1.7, m, 1).values[0]
        np.testing.assert_allclose(np.diff(v), 6 * 1.7 / (m - 1), rtol=1e-12)
        np.testing.assert_array_equal(v, -v[::-1])


class TestKfold:
    def test_partition(self):
        folds = kfold(23, 5, seed=1)
        tests = np.concatenate([t for _, t in folds])
        np.testing.assert_array_equal(np.sort(tests), np.arange(23))
        for tr, te in folds:
            assert not set(tr) & set(te)
            assert len(tr) + len(te) == 23

    def test_loo(self):
        folds = kfold(6, 6)
        assert all(len(te) == 1 and len(tr) == 5 for tr, te in folds)

    def test_seed(self):
        a = kfold(30, 3, seed=5)
        b = kfold(30, 3, seed=5)
        assert all(np.array_equal(x[1], y[1]) for x, y in zip(a, b))

    def test_invalid(self):
        with pytest.raises(ConfigError):
            kfold(3, 5)


class TestPrior:
    def test_symmetric(self):
        p = discretized_gaussian_prior(make_support(1.0, 7, 2), 1.0).probs
        np.testing.assert_allclose(p, p[:, ::-1], rtol=1e-14)

    def test_two_levels(self):
        p = discretized_gaussian_prior(SupportGrid([[-2.0, 2.0]]), 1.3).probs
        np.testing.assert_allclose(p, [[0.5, 0.5]])

    def test_normalisation(self):
        g = make_support(0.8, 15, 4)
        p = discretized_gaussian_prior(g, 0.8).probs
        dens = np.exp(-g.values[0]**2 / (2 * 0.64))
        np.testing.assert_allclose(p[0], dens / dens.sum(), rtol=1e-13)
        np.testing.assert_allclose(p.sum(1), 1, atol=1e-12)
