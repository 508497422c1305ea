import numpy as np
import pytest
import scipy.stats

from bayesrom import regression as reg
from bayesrom.errors import DimensionError, RankDeficientError
from bayesrom.tensorops import StructureFlags, compressed_kron


def _random_problem(rng, k=50, d=7, r=3):
    D = rng.standard_normal((k, d))
    R = rng.standard_normal((r, k))
    return reg.RegressionData(D=D, R=R)


class TestBuildDataMatrix:
    def test_quadratic_only_r1(self):
        D = reg.build_data_matrix(
            np.array([[1.0, 2.0]]), flags=StructureFlags.quadratic_only()
        )
        np.testing.assert_allclose(D, [[1.0], [4.0]])

    def test_all_blocks_single_column(self):
        flags = StructureFlags.full(input_dim=1)
        Qhat = np.array([[2.0], [3.0]])
        U = np.array([[5.0]])
        D = reg.build_data_matrix(Qhat, U, flags)
        assert D.shape == (1, 7)
        np.testing.assert_allclose(
            D[0], [2.0, 3.0, 4.0, 12.0, 9.0, 5.0, 1.0]
        )

    def test_blocks_match_standalone_constructors(self):
        rng = np.random.default_rng(0)
        Qhat = rng.standard_normal((3, 10))
        U = rng.standard_normal((2, 10))
        flags = StructureFlags.full(input_dim=2)
        D = reg.build_data_matrix(Qhat, U, flags)
        slices = flags.block_slices(3)
        np.testing.assert_array_equal(D[:, slices["linear"]], Qhat.T)
        quad_oracle = np.column_stack(
            [compressed_kron(Qhat[:, j]) for j in range(10)]
        ).T
        np.testing.assert_allclose(D[:, slices["quadratic"]], quad_oracle)
        np.testing.assert_array_equal(D[:, slices["input"]], U.T)
        np.testing.assert_array_equal(D[:, slices["constant"]], np.ones((10, 1)))

    def test_missing_inputs_error(self):
        with pytest.raises(DimensionError):
            reg.build_data_matrix(
                np.ones((2, 4)), flags=StructureFlags.full(input_dim=1)
            )

    def test_structure_consistency_enforced(self):
        with pytest.raises(DimensionError):
            reg.RegressionData(
                D=np.ones((5, 4)),
                R=np.ones((2, 5)),
                flags=StructureFlags.quadratic_only(),
            )


class TestSolveOLS:
    def test_identity_data_matrix(self):
        data = reg.RegressionData(D=np.eye(4), R=np.arange(4.0)[None, :])
        np.testing.assert_allclose(reg.solve_ols(data, 0), np.arange(4.0))

    def test_exact_fit_residual_zero(self):
        rng = np.random.default_rng(1)
        D = rng.standard_normal((20, 4))
        o_true = rng.standard_normal(4)
        data = reg.RegressionData(D=D, R=(D @ o_true)[None, :])
        o = reg.solve_ols(data, 0)
        assert np.linalg.norm(data.target(0) - D @ o) < 1e-10

    def test_against_qr_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            data = _random_problem(rng, k=50, d=7)
            mine = reg.solve_ols(data, 1)
            oracle, *_ = np.linalg.lstsq(data.D, data.target(1), rcond=None)
            assert np.linalg.norm(mine - oracle) <= 1e-10 * np.linalg.norm(oracle)

    def test_rank_deficient_reports_condition(self):
        D = np.ones((10, 3))
        data = reg.RegressionData(D=D, R=np.ones((1, 10)))
        with pytest.raises(RankDeficientError, match="condition"):
            reg.solve_ols(data, 0)


class TestSolvePosterior:
    def test_uninformative_limit_matches_ols(self):
        rng = np.random.default_rng(3)
        data = _random_problem(rng, k=40, d=6)
        post = reg.solve_posterior(data, 0, 0.0)
        ols = reg.solve_ols(data, 0)
        np.testing.assert_allclose(post.mu, ols, rtol=1e-10)
        resid = data.target(0) - data.D @ ols
        assert np.isclose(post.noise_var, resid @ resid / data.k, rtol=1e-10)
        oracle_sigma = post.noise_var * np.linalg.inv(data.D.T @ data.D)
        np.testing.assert_allclose(post.sigma_mat, oracle_sigma, rtol=1e-8)

    def test_prior_mean_at_ols_gives_zero_correction(self):
        rng = np.random.default_rng(4)
        data = _random_problem(rng, k=30, d=5)
        ols = reg.solve_ols(data, 2)
        post = reg.solve_posterior(data, 2, 3.7, prior_mean=ols)
        np.testing.assert_allclose(post.delta_mu, 0.0, atol=1e-10)
        np.testing.assert_allclose(post.mu, ols, rtol=1e-12)
        resid = data.target(2) - data.D @ ols
        assert np.isclose(post.noise_var, resid @ resid / data.k, rtol=1e-10)

    def test_against_explicit_inverse_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            data = _random_problem(rng, k=5, d=2, r=1)
            lam = rng.uniform(0.1, 10.0, size=2)
            beta = rng.standard_normal(2)
            post = reg.solve_posterior(data, 0, lam, prior_mean=beta)
            A_inv = np.linalg.inv(np.diag(lam) + data.D.T @ data.D)
            mu_oracle = beta + A_inv @ data.D.T @ (data.target(0) - data.D @ beta)
            np.testing.assert_allclose(post.mu, mu_oracle, rtol=1e-9, atol=1e-12)
            delta = mu_oracle - beta
            resid = data.target(0) - data.D @ mu_oracle
            s2 = (resid @ resid + lam @ delta**2) / data.k
            np.testing.assert_allclose(post.noise_var, s2, rtol=1e-10)
            np.testing.assert_allclose(
                post.sigma_mat, s2 * A_inv, rtol=1e-8, atol=1e-14
            )

    def test_covariance_spd(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            data = _random_problem(rng, k=15, d=8)
            lam = 10.0 ** rng.uniform(-6, 4)
            post = reg.solve_posterior(data, 0, lam)
            L = post.cholesky()
            np.testing.assert_allclose(
                L @ L.T, post.sigma_mat, rtol=1e-8, atol=1e-16
            )


class TestSolveRidge:
    def test_huge_lambda_returns_prior_mean(self):
        rng = np.random.default_rng(7)
        data = _random_problem(rng, k=30, d=4)
        beta = rng.standard_normal(4)
        out = reg.solve_ridge(data, 0, 1e14, prior_mean=beta)
        np.testing.assert_allclose(out, beta, atol=1e-8)

    def test_zero_lambda_full_rank_is_ols(self):
        rng = np.random.default_rng(8)
        data = _random_problem(rng, k=30, d=4)
        np.testing.assert_allclose(
            reg.solve_ridge(data, 0, 0.0), reg.solve_ols(data, 0), rtol=1e-10
        )

    def test_matches_posterior_mean(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            data = _random_problem(rng, k=20, d=5, r=1)
            lam = 10.0 ** rng.uniform(-4, 4, size=5)
            beta = rng.standard_normal(5)
            ridge = reg.solve_ridge(data, 0, lam, prior_mean=beta)
            post = reg.solve_posterior(data, 0, lam, prior_mean=beta)
            np.testing.assert_allclose(ridge, post.mu, rtol=1e-10, atol=1e-13)

    def test_shrinkage_monotonicity(self):
        # growing a uniform penalty never grows the correction norm
        rng = np.random.default_rng(10)
        for _ in range(10):
            data = _random_problem(rng, k=25, d=6, r=1)
            lams = np.sort(10.0 ** rng.uniform(-3, 5, size=6))
            norms = [
                np.linalg.norm(reg.solve_posterior(data, 0, lam).delta_mu)
                for lam in lams
            ]
            assert all(n2 <= n1 + 1e-12 for n1, n2 in zip(norms, norms[1:]))


class TestLogMarginalLikelihood:
    def test_scalar_case_hand_expanded(self):
        # k = d = 1: evidence is the density of one Gaussian observation
        D = np.array([[2.0]])
        r0 = np.array([[3.0]])
        data = reg.RegressionData(D=D, R=r0)
        lam, beta, s2 = 0.7, np.array([0.4]), 1.3
        mine = reg.log_marginal_likelihood(data, 0, lam, beta, s2)
        var = s2 * (D[0, 0] ** 2 / lam + 1.0)
        oracle = scipy.stats.norm.logpdf(3.0, loc=2.0 * 0.4, scale=np.sqrt(var))
        assert np.isclose(mine, oracle, rtol=1e-12)

    def test_matches_dense_covariance_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            k, d = int(rng.integers(3, 20)), int(rng.integers(1, 6))
            data = reg.RegressionData(
                D=rng.standard_normal((k, d)), R=rng.standard_normal((1, k))
            )
            lam = 10.0 ** rng.uniform(-2, 2, size=d)
            beta = rng.standard_normal(d)
            s2 = 10.0 ** rng.uniform(-2, 1)
            mine = reg.log_marginal_likelihood(data, 0, lam, beta, s2)
            cov = s2 * (
                data.D @ np.diag(1.0 / lam) @ data.D.T + np.eye(k)
            )
            oracle = scipy.stats.multivariate_normal.logpdf(
                data.target(0), mean=data.D @ beta, cov=cov
            )
            assert np.isclose(mine, oracle, rtol=1e-9)

    def test_stationary_in_noise_at_optimum(self):
        rng = np.random.default_rng(12)
        data = _random_problem(rng, k=40, d=5, r=1)
        lam = 2.5
        post = reg.solve_posterior(data, 0, lam)
        s2 = post.noise_var
        h = 1e-6 * s2
        up = reg.log_marginal_likelihood(data, 0, lam, None, s2 + h)
        down = reg.log_marginal_likelihood(data, 0, lam, None, s2 - h)
        assert abs((up - down) / (2 * h)) <= 1e-6 / s2

    def test_requires_positive_hyperparameters(self):
        data = _random_problem(np.random.default_rng(13))
        with pytest.raises(ValueError):
            reg.log_marginal_likelihood(data, 0, 0.0, None, 1.0)
        with pytest.raises(ValueError):
            reg.log_marginal_likelihood(data, 0, 1.0, None, -1.0)


class TestGramIdentities:
    def test_trace_identity_uniform_lambda(self):
        rng = np.random.default_rng(14)
        for _ in range(10):
            data = _random_problem(rng, k=30, d=6, r=1)
            lam = 10.0 ** rng.uniform(-3, 3)
            post = reg.solve_posterior(data, 0, lam)
            g = data.gram_eigenvalues()
            oracle = post.noise_var * np.sum(1.0 / (lam + g))
            assert np.isclose(np.trace(post.sigma_mat), oracle, rtol=1e-8)

    def test_gram_eigenvalues_cached_and_correct(self):
        rng = np.random.default_rng(15)
        data = _random_problem(rng, k=20, d=5)
        g = data.gram_eigenvalues()
        oracle = np.linalg.eigvalsh(data.D.T @ data.D)
        np.testing.assert_allclose(g, np.maximum(oracle, 0), rtol=1e-8)
        assert data.gram_eigenvalues() is g  # cached


class TestOperatorPosteriorSerialization:
    def test_json_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(16)
        flags = StructureFlags.quadratic_only()
        Qhat = rng.standard_normal((3, 40))
        D = reg.build_data_matrix(Qhat, flags=flags)
        data = reg.RegressionData(D=D, R=rng.standard_normal((3, 40)), flags=flags)
        posterior = reg.solve_posterior_all(data, [0.5, 1.0, 2.0])
        path = tmp_path / "posterior.json"
        posterior.save_json(path)
        loaded = reg.OperatorPosterior.load_json(path)
        assert loaded.r == posterior.r and loaded.m == posterior.m
        assert loaded.flags == posterior.flags
        for a, b in zip(loaded.rows, posterior.rows):
            assert np.array_equal(a.mu, b.mu)
            assert np.array_equal(a.lambdas, b.lambdas)
            assert np.array_equal(a.prior_mean, b.prior_mean)
            assert a.noise_var == b.noise_var
            assert np.array_equal(a.cholesky(), b.cholesky())
        # saving the loaded object reproduces the file byte for byte
        path2 = tmp_path / "posterior2.json"
        loaded.save_json(path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_rejects_foreign_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"format": "something-else"}')
        with pytest.raises(Exception):
            reg.OperatorPosterior.load_json(path)
