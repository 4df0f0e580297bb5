import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emucal import gp
from emucal.errors import ConfigurationError

LOG_2PI = np.log(2 * np.pi)


def _dense_cov(X, hp, nugget=True):
    m = X.shape[0]
    C = np.empty((m, m))
    for k in range(m):
        for l in range(m):
            q2 = np.sum((X[k] - X[l]) ** 2 / hp.lengthscales)
            C[k, l] = hp.signal_var * (np.exp(-0.5 * q2) + (hp.nugget if (nugget and k == l) else 0.0))
    return C


def _dense_cross(A, B, hp):
    out = np.empty((A.shape[0], B.shape[0]))
    for i in range(A.shape[0]):
        for j in range(B.shape[0]):
            out[i, j] = hp.signal_var * np.exp(-0.5 * np.sum((A[i] - B[j]) ** 2 / hp.lengthscales))
    return out


def _random_problem(rng, m, d):
    X = rng.random((m, d))
    hp = gp.GPHyperparams(rng.uniform(0.05, 1.0, d), rng.uniform(0.5, 2.0), rng.uniform(1e-3, 1e-1))
    y = rng.standard_normal(m)
    return X, y, hp


class TestScaledDistance:
    def test_identity(self):
        assert gp.scaled_distance([0.3, 0.1], [0.3, 0.1], [1.0, 2.0]) == 0.0

    def test_direct_formula(self):
        assert gp.scaled_distance([0.0], [2.0], [4.0]) == pytest.approx(1.0)

    def test_matches_loop(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            a, b, g = rng.normal(size=4), rng.normal(size=4), rng.uniform(0.1, 3, 4)
            acc = 0.0
            for i in range(4):
                acc += (a[i] - b[i]) ** 2 / g[i]
            assert gp.scaled_distance(a, b, g) == pytest.approx(np.sqrt(acc), rel=1e-14)

    def test_rejects_nonpositive_lengthscale(self):
        with pytest.raises(ConfigurationError):
            gp.scaled_distance([0.0], [1.0], [0.0])


class TestCovariance:
    def test_single_point(self):
        hp = gp.GPHyperparams([0.5], 2.0, 0.1)
        np.testing.assert_allclose(gp.build_covariance(np.array([[0.3]]), hp), [[2.2]])

    def test_coincident_points_rank_one(self):
        hp = gp.GPHyperparams([0.5, 1.0], 3.0, 0.0)
        C = gp.build_covariance(np.array([[0.2, 0.4], [0.2, 0.4]]), hp)
        np.testing.assert_allclose(C, 3.0 * np.ones((2, 2)))
        assert np.linalg.matrix_rank(C) == 1

    def test_matches_loop(self):
        rng = np.random.default_rng(1)
        X, _, hp = _random_problem(rng, 3, 2)
        np.testing.assert_allclose(gp.build_covariance(X, hp), _dense_cov(X, hp), rtol=1e-13)

    def test_jitter_escalation_then_failure(self):
        C = np.array([[1.0, 2.0], [2.0, 1.0]])  # indefinite
        with pytest.raises(gp.IllConditionedError):
            gp.cholesky_jitter(C, 1.0)
        L, jitter = gp.cholesky_jitter(np.ones((3, 3)), 1.0)
        assert 1e-10 <= jitter <= 1e-4
        np.testing.assert_allclose(L @ L.T, np.ones((3, 3)) + jitter * np.eye(3), atol=1e-12)


class TestLogMarginalLikelihood:
    def test_standard_normal_at_zero(self):
        hp = gp.GPHyperparams([1.0], 0.5, 1.0)  # tau2 (1 + g) = 1
        lml = gp.log_marginal_likelihood(hp, np.array([[0.0]]), [0.0])
        assert lml == pytest.approx(-0.5 * LOG_2PI, rel=1e-9)

    def test_independent_points_factorize(self):
        hp = gp.GPHyperparams([0.01], 1.5, 0.2)
        X = np.array([[0.0], [10.0]])
        y = np.array([0.7, -1.1])
        s2 = 1.5 * 1.2
        expected = sum(-0.5 * np.log(2 * np.pi * s2) - 0.5 * v * v / s2 for v in y)
        assert gp.log_marginal_likelihood(hp, X, y) == pytest.approx(expected, abs=1e-9)

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(2)
        X, y, hp = _random_problem(rng, 4, 3)
        C = _dense_cov(X, hp)
        expected = (
            -0.5 * np.log(np.linalg.det(C)) - 0.5 * y @ np.linalg.inv(C) @ y - 2 * LOG_2PI
        )
        assert gp.log_marginal_likelihood(hp, X, y) == pytest.approx(expected, rel=1e-8)


class TestPredict:
    def _model(self, X, y, hp):
        return gp.GPModel.from_data(X, y, hp, bounds=(np.zeros(X.shape[1]), np.ones(X.shape[1])))

    def test_interpolates_without_nugget(self):
        rng = np.random.default_rng(3)
        X = rng.random((6, 2))
        y = rng.standard_normal(6)
        hp = gp.GPHyperparams([0.2, 0.3], 1.0, 0.0)
        model = self._model(X, y, hp)
        mean, cov = model.predict(X[:1])
        var_std = cov[0, 0] / model.scaler.y_sd**2
        assert mean[0] == pytest.approx(y[0], abs=1e-6)
        assert var_std <= 1e-8 * hp.signal_var

    def test_reverts_to_prior_far_away(self):
        X = np.array([[0.1], [0.5]])
        y = np.array([1.0, 3.0])
        hp = gp.GPHyperparams([0.01], 1.3, 0.05)
        model = self._model(X, y, hp)
        far = np.array([[0.5 + 50 * 0.1 * 2]])  # q > 50 in scaled units
        mean, var = model.predict(far, full_cov=False)
        assert mean[0] == pytest.approx(model.scaler.y_mean)
        assert var[0] == pytest.approx(1.3 * 1.05 * model.scaler.y_sd**2)

    def test_matches_dense_conditioning(self):
        X = np.array([[0.2, 0.1], [0.7, 0.4]])
        y = np.array([0.3, -0.8])
        hp = gp.GPHyperparams([0.3, 0.5], 1.7, 0.02)
        model = self._model(X, y, hp)
        xs = np.array([[0.4, 0.3]])
        z = model.scaler.scale_y(y)
        K = _dense_cov(X, hp) + model.jitter * np.eye(2)
        k = _dense_cross(xs, X, hp)
        mean = k @ np.linalg.solve(K, z)
        var = hp.signal_var * (1 + hp.nugget) - k @ np.linalg.solve(K, k.T)
        m, c = model.predict(xs)
        assert m[0] == pytest.approx(model.scaler.unscale_y(mean)[0], abs=1e-10)
        assert c[0, 0] == pytest.approx(var[0, 0] * model.scaler.y_sd**2, rel=1e-10)

    def test_full_cov_matches_diag(self):
        rng = np.random.default_rng(4)
        X, y, hp = _random_problem(rng, 10, 3)
        model = self._model(X, y, hp)
        xs = rng.random((7, 3))
        m1, cov = model.predict(xs)
        m2, var = model.predict(xs, full_cov=False)
        np.testing.assert_allclose(m1, m2, rtol=1e-12)
        np.testing.assert_allclose(np.diag(cov), var, rtol=1e-10)
        np.testing.assert_allclose(cov, cov.T)
        assert np.linalg.eigvalsh(cov).min() > -1e-10

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_variance_never_exceeds_prior(self, seed):
        rng = np.random.default_rng(seed)
        X, y, hp = _random_problem(rng, 8, 2)
        model = self._model(X, y, hp)
        _, var = model.predict(rng.random((20, 2)) * 1.5, full_cov=False)
        assert np.all(var / model.scaler.y_sd**2 <= hp.signal_var * (1 + hp.nugget) + 1e-8)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_extra_point_never_increases_variance(self, seed):
        rng = np.random.default_rng(seed)
        X, y, hp = _random_problem(rng, 8, 2)
        model = self._model(X, y, hp)
        bigger = model.conditioned_on(np.vstack([X, rng.random((1, 2))]), np.append(y, 0.3))
        xs = rng.random((15, 2))
        _, v0 = model.predict(xs, full_cov=False)
        _, v1 = bigger.predict(xs, full_cov=False)
        assert np.all(v1 <= v0 + 1e-8)

    def test_appended_factor_matches_refactorization(self):
        rng = np.random.default_rng(8)
        X, y, hp = _random_problem(rng, 10, 2)
        model = self._model(X, y, hp)
        x_new = rng.random((1, 2))
        grown = model.extended(x_new, 0.7)
        full = model.conditioned_on(np.vstack([model.scaler.unscale_x(model.X), x_new]),
                                    np.append(model.scaler.unscale_y(model.y), 0.7))
        np.testing.assert_allclose(grown.chol, full.chol, rtol=1e-10, atol=1e-12)
        xs = rng.random((6, 2))
        for a, b in zip(grown.predict(xs), full.predict(xs)):
            np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)

    def test_appended_duplicate_falls_back(self):
        hp = gp.GPHyperparams([0.5], 1.0, 0.0)
        X = np.array([[0.2], [0.6]])
        model = self._model(X, np.array([0.1, 0.4]), hp)
        grown = model.extended(X[0], 0.1)
        assert grown.m == 3 and np.all(np.isfinite(grown.chol))

    def test_training_order_invariance(self):
        rng = np.random.default_rng(5)
        X, y, hp = _random_problem(rng, 12, 3)
        perm = rng.permutation(12)
        a = self._model(X, y, hp)
        b = self._model(X[perm], y[perm], hp)
        xs = rng.random((5, 3))
        ma, ca = a.predict(xs)
        mb, cb = b.predict(xs)
        np.testing.assert_allclose(ma, mb, rtol=1e-8, atol=1e-10)
        np.testing.assert_allclose(ca, cb, rtol=1e-8, atol=1e-10)

    def test_standardization_round_trip(self):
        rng = np.random.default_rng(6)
        y = rng.normal(5.0, 3.0, 50)
        X = rng.random((50, 2))
        s = gp.Standardizer.fit(X, y, (np.zeros(2), np.ones(2)))
        np.testing.assert_allclose(s.unscale_y(s.scale_y(y)), y, rtol=0, atol=1e-12)
        np.testing.assert_allclose(s.unscale_x(s.scale_x(X)), X, rtol=0, atol=1e-12)

    def test_dimension_mismatch(self):
        model = self._model(np.array([[0.1, 0.2], [0.5, 0.5]]), np.array([0.0, 1.0]),
                            gp.GPHyperparams([0.3, 0.3], 1.0, 0.01))
        with pytest.raises(ConfigurationError):
            model.predict(np.zeros((2, 3)))


class TestDataset:
    def test_merges_duplicates(self):
        X = np.array([[0.0, 1.0], [0.5, 0.5], [0.0, 1.0 + 1e-14]])
        Y = np.array([[1.0], [2.0], [3.0]])
        merged = gp.Dataset(X, Y).merge_duplicates()
        assert merged.m == 2
        np.testing.assert_allclose(merged.Y[:, 0], [2.0, 2.0])

    def test_rejects_nonfinite(self):
        with pytest.raises(ConfigurationError):
            gp.Dataset(np.array([[np.nan]]), np.array([[1.0]]))


DOMAIN = 30.0  # thirty lengthscales, so the signal variance is identifiable


def _draw_gp_data(seed, m=60):
    rng = np.random.default_rng(seed)
    X = np.sort(rng.uniform(0.0, DOMAIN, m))[:, None]
    hp = gp.GPHyperparams([1.0], 1.0, 0.01)
    C = gp.build_covariance(X, hp)
    y = np.linalg.cholesky(C + 1e-10 * np.eye(m)) @ rng.standard_normal(m)
    return X, y


class TestFitMap:
    weak = gp.HyperPrior(log_lengthscale_sd=10.0, log_signal_sd=10.0, log_nugget_sd=10.0)

    def test_recovers_known_hyperparameters(self):
        truth = np.log([1.0, 1.0, 0.01])
        hits = 0
        for seed in range(10):
            X, y = _draw_gp_data(seed)
            model = gp.fit_map(X, y, bounds=([0.0], [DOMAIN]), hyperprior=self.weak, seed=seed)
            hp = model.hyperparams
            raw = np.array([
                np.log(hp.lengthscales[0]) + 2 * np.log(DOMAIN),
                np.log(hp.signal_var) + 2 * np.log(model.scaler.y_sd),
                np.log(hp.nugget),
            ])
            hits += np.all(np.abs(raw - truth) <= 0.7)
        assert hits >= 8

    def test_constant_output_hits_lower_signal_bound(self):
        X = np.linspace(0, 1, 10)[:, None]
        model = gp.fit_map(X, np.full(10, 3.0), bounds=([0.0], [1.0]))
        lower = gp.HyperPrior().log_signal_bounds[0]
        assert np.log(model.hyperparams.signal_var) == pytest.approx(lower, abs=1e-3)
        np.testing.assert_allclose(model.y, 0.0)

    def test_deterministic(self):
        X, y = _draw_gp_data(0, m=25)
        a = gp.fit_map(X, y, seed=3)
        b = gp.fit_map(X, y, seed=3)
        np.testing.assert_array_equal(a.hyperparams.to_log_vector(), b.hyperparams.to_log_vector())

    def test_nelder_mead_reaches_same_optimum(self):
        X, y = _draw_gp_data(1, m=30)
        a = gp.fit_map(X, y, bounds=([0.0], [DOMAIN]), seed=0)
        b = gp.fit_map(X, y, bounds=([0.0], [DOMAIN]), seed=0, optimizer="nelder-mead")
        assert a.info["neg_log_posterior"] == pytest.approx(b.info["neg_log_posterior"], abs=1e-3)

    def test_gradient_matches_finite_differences(self):
        from scipy.optimize import approx_fprime

        rng = np.random.default_rng(7)
        U = rng.random((15, 3))
        z = np.sin(4 * U).sum(axis=1)
        z = (z - z.mean()) / z.std()
        prior = gp.HyperPrior()
        sq = (U[None] - U[:, None]).transpose(2, 0, 1) ** 2
        v = np.array([-1.0, 0.3, -0.5, 0.2, -3.0])
        f, g = gp._neg_log_posterior_and_grad(v, U, z, prior, sq)
        assert f == pytest.approx(gp._neg_log_posterior(v, U, z, prior), rel=1e-12)
        fd = approx_fprime(v, lambda w: gp._neg_log_posterior(w, U, z, prior), 1e-6)
        np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-4)

    def test_needs_two_points(self):
        with pytest.raises(ConfigurationError):
            gp.fit_map(np.zeros((1, 1)), np.zeros(1))


class TestFitMulti:
    def _data(self):
        rng = np.random.default_rng(8)
        X = rng.random((30, 2))
        Y = np.column_stack([
            np.sin(3 * X[:, 0]), X[:, 1] ** 2, X.sum(1), np.cos(X[:, 0] * X[:, 1]), X[:, 0] - X[:, 1]
        ])
        return gp.Dataset(X, Y)

    def test_single_output(self):
        data = self._data().column(0)
        multi = gp.fit_multi(data, n_restarts=2)
        single = gp.fit_map(data.X, data.Y[:, 0], n_restarts=2)
        assert multi.p == 1
        np.testing.assert_array_equal(multi.models[0].hyperparams.to_log_vector(),
                                      single.hyperparams.to_log_vector())

    def test_columns_match_standalone_and_permutation(self):
        data = self._data()
        multi = gp.fit_multi(data, n_restarts=2, seed=4)
        xs = np.random.default_rng(0).random((6, 2))
        mean, var = multi.predict(xs)
        for i in range(5):
            alone = gp.fit_map(data.X, data.Y[:, i], n_restarts=2, seed=4)
            m_i, v_i = alone.predict(xs, full_cov=False)
            np.testing.assert_array_equal(mean[:, i], m_i)
            np.testing.assert_array_equal(var[:, i], v_i)
        perm = [3, 0, 4, 2, 1]
        permuted = gp.fit_multi(gp.Dataset(data.X, data.Y[:, perm]), n_restarts=2, seed=4)
        pm, pv = permuted.predict(xs)
        np.testing.assert_array_equal(pm, mean[:, perm])
        np.testing.assert_array_equal(pv, var[:, perm])

    def test_extended_appends_every_column(self):
        clean = self._data()
        # noisy outputs keep the nugget off its floor, so rounding stays small
        noise = 0.05 * np.random.default_rng(1).standard_normal(clean.Y.shape)
        data = gp.Dataset(clean.X, clean.Y + noise)
        multi = gp.fit_multi(data, bounds=(np.zeros(2), np.ones(2)), n_restarts=1, seed=0)
        y_new = np.arange(1.0, data.p + 1)
        grown = multi.extended([0.5, 0.5], y_new)
        assert grown.m == multi.m + 1
        ref = multi.conditioned_on(data.append([0.5, 0.5], y_new))
        xs = np.random.default_rng(0).random((4, 2))
        np.testing.assert_allclose(grown.predict(xs)[0], ref.predict(xs)[0], rtol=1e-9)

    def test_json_round_trip(self, tmp_path):
        multi = gp.fit_multi(self._data(), n_restarts=1)
        path = tmp_path / "gp.json"
        multi.to_json(path)
        loaded = gp.MultiGP.from_json(str(path))
        xs = np.random.default_rng(1).random((4, 2))
        for a, b in zip(multi.predict(xs), loaded.predict(xs)):
            np.testing.assert_allclose(a, b, rtol=1e-10)

    def test_failure_names_columns(self, monkeypatch):
        data = self._data()
        real = gp.fit_map

        def flaky(X, y, *args, **kwargs):
            if np.allclose(y, data.Y[:, 2]):
                raise gp.IllConditionedError("boom")
            return real(X, y, *args, **kwargs)

        monkeypatch.setattr(gp, "fit_map", flaky)
        with pytest.raises(gp.IllConditionedError, match=r"\[2\]"):
            gp.fit_multi(data, n_restarts=1)
