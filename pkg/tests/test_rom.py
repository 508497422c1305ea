import numpy as np
import pytest

from bayesrom import regression as reg
from bayesrom import rom
from bayesrom.errors import DimensionError, StabilityError
from bayesrom.tensorops import StructureFlags, compressed_kron


def _linear_decay_ops(r=3):
    flags = StructureFlags(has_linear=True)
    return rom.RomOperators(flags=flags, A=-np.eye(r))


class TestRomOperators:
    def test_blocks_must_match_flags(self):
        with pytest.raises(DimensionError):
            rom.RomOperators(
                flags=StructureFlags(has_linear=True),
                A=np.eye(2),
                c=np.zeros(2),
            )

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            rom.RomOperators(
                flags=StructureFlags(has_linear=True),
                A=np.array([[np.inf, 0.0], [0.0, 1.0]]),
            )

    def test_matrix_roundtrip(self):
        rng = np.random.default_rng(0)
        flags = StructureFlags.full(input_dim=2)
        r = 3
        Ohat = rng.standard_normal((r, 3 + 6 + 2 + 1))
        ops = rom.RomOperators.from_matrix(Ohat, flags)
        np.testing.assert_array_equal(ops.as_matrix(), Ohat)

    def test_rhs_composition(self):
        rng = np.random.default_rng(1)
        flags = StructureFlags.full(input_dim=1)
        r = 2
        A = rng.standard_normal((r, r))
        H = rng.standard_normal((r, 3))
        B = rng.standard_normal((r, 1))
        c = rng.standard_normal(r)
        ops = rom.RomOperators(flags=flags, A=A, H=H, B=B, c=c)
        q, u = rng.standard_normal(r), np.array([0.7])
        expected = A @ q + H @ compressed_kron(q) + B @ u + c
        np.testing.assert_allclose(ops.rhs(q, u), expected, rtol=1e-14)


class TestIntegrate:
    def test_linear_analytic_solution(self):
        # dq/dt = -q from e1: q(t) = exp(-t) e1
        ops = _linear_decay_ops(3)
        times = np.linspace(0.0, 1.0, 101)
        result = rom.integrate(ops, np.array([1.0, 0.0, 0.0]), times)
        assert result.stable
        assert abs(result.states[0, -1] - np.exp(-1.0)) <= 1e-6
        np.testing.assert_allclose(result.states[1:, :], 0.0, atol=1e-9)

    def test_quadratic_analytic_solution(self):
        # dq/dt = -q^2 from 1: q(t) = 1/(1+t)
        flags = StructureFlags.quadratic_only()
        ops = rom.RomOperators(flags=flags, H=np.array([[-1.0]]))
        times = np.linspace(0.0, 1.0, 101)
        result = rom.integrate(ops, np.array([1.0]), times)
        assert result.stable
        assert abs(result.states[0, -1] - 0.5) <= 1e-6

    def test_rk4_matches_analytic(self):
        ops = _linear_decay_ops(1)
        times = np.linspace(0.0, 1.0, 1001)
        result = rom.integrate(ops, np.array([1.0]), times, method="rk4")
        assert result.stable
        assert abs(result.states[0, -1] - np.exp(-1.0)) <= 1e-9

    def test_blowup_yields_instability_not_crash(self):
        # dq/dt = +q^2 from 1 blows up at t = 1
        flags = StructureFlags.quadratic_only()
        ops = rom.RomOperators(flags=flags, H=np.array([[1.0]]))
        times = np.linspace(0.0, 2.0, 201)
        for method in ("rk45", "rk4"):
            result = rom.integrate(ops, np.array([1.0]), times, method=method)
            assert not result.stable
            assert result.n_completed < times.size
            assert np.isnan(result.states[0, -1])

    def test_stability_bound_flags_growth(self):
        ops = rom.RomOperators(
            flags=StructureFlags(has_linear=True), A=np.eye(1)
        )
        times = np.linspace(0.0, 5.0, 51)
        result = rom.integrate(
            ops, np.array([1.0]), times, stability_bound=10.0
        )
        assert not result.stable
        grown = result.states[0, ~np.isnan(result.states[0])]
        assert grown.max() <= 10.0 + 1e-6

    def test_integration_deterministic(self):
        rng = np.random.default_rng(2)
        flags = StructureFlags.full(input_dim=0) if False else StructureFlags(
            has_linear=True, has_quadratic=True
        )
        ops = rom.RomOperators(
            flags=flags,
            A=-np.eye(3) + 0.1 * rng.standard_normal((3, 3)),
            H=0.05 * rng.standard_normal((3, 6)),
        )
        times = np.linspace(0.0, 1.0, 64)
        a = rom.integrate(ops, np.ones(3), times)
        b = rom.integrate(ops, np.ones(3), times)
        assert np.array_equal(a.states, b.states)  # bit identical

    def test_closed_loop_reconstruction_of_quadratic_system(self):
        # OLS fit of exactly quadratic data reproduces the trajectory
        rng = np.random.default_rng(3)
        flags = StructureFlags.quadratic_only()
        r = 3
        H_true = -0.5 * rng.random((r, 6)) - 0.1 * np.eye(r, 6)
        ops_true = rom.RomOperators(flags=flags, H=H_true)
        times = np.linspace(0.0, 2.0, 2001)
        q0 = np.array([1.0, 0.8, 1.2])
        truth = rom.integrate(ops_true, q0, times)
        assert truth.stable
        Qhat = truth.states
        R = np.column_stack([ops_true.rhs(Qhat[:, j]) for j in range(times.size)])
        D = reg.build_data_matrix(Qhat, flags=flags)
        data = reg.RegressionData(D=D, R=R, flags=flags)
        H_fit = np.vstack([reg.solve_ols(data, i) for i in range(r)])
        ops_fit = rom.RomOperators(flags=flags, H=H_fit)
        replay = rom.integrate(ops_fit, q0, times)
        err = np.linalg.norm(replay.states - truth.states) / np.linalg.norm(
            truth.states
        )
        assert err <= 1e-4


def _toy_posterior(rng, r=2, d=4, k=30, lam=0.3):
    data = reg.RegressionData(
        D=rng.standard_normal((k, d)), R=rng.standard_normal((r, k))
    )
    rows = [reg.solve_posterior(data, i, lam) for i in range(r)]
    flags = StructureFlags(has_linear=True, has_quadratic=False)
    # free-form: d = 4 != d_dim; use flags=None posterior for sampling-only tests
    return reg.OperatorPosterior(rows=rows, flags=None, r=r, m=0), data


class TestSampleOperators:
    def test_zero_covariance_returns_mean(self):
        rng = np.random.default_rng(4)
        flags = StructureFlags(has_linear=True)
        r = 2
        data = reg.RegressionData(
            D=rng.standard_normal((30, r)), R=rng.standard_normal((r, 30)),
            flags=flags,
        )
        rows = [reg.solve_posterior(data, i, 1.0) for i in range(r)]
        for row in rows:
            row.sigma_mat = np.zeros((r, r))
            row._chol = None
        posterior = reg.OperatorPosterior(rows=rows, flags=flags, r=r, m=0)
        samples = rom.sample_operators(posterior, 5, seed=1)
        for ops in samples:
            np.testing.assert_array_equal(ops.as_matrix(), posterior.mean_matrix())

    def test_seeded_draws_bit_identical(self):
        rng = np.random.default_rng(5)
        flags = StructureFlags(has_linear=True)
        data = reg.RegressionData(
            D=rng.standard_normal((40, 3)), R=rng.standard_normal((3, 40)),
            flags=flags,
        )
        posterior = reg.solve_posterior_all(data, 0.7)
        a = rom.sample_operators(posterior, 4, seed=99)
        b = rom.sample_operators(posterior, 4, seed=99)
        for ops_a, ops_b in zip(a, b):
            assert np.array_equal(ops_a.as_matrix(), ops_b.as_matrix())

    def test_sample_moments_converge(self):
        # law of large numbers: mean within 4 standard errors componentwise
        rng = np.random.default_rng(6)
        d = 3
        data = reg.RegressionData(
            D=rng.standard_normal((50, d)), R=rng.standard_normal((1, 50))
        )
        posterior = reg.OperatorPosterior(
            rows=[reg.solve_posterior(data, 0, 0.5)], flags=None, r=1, m=0
        )
        row = posterior.rows[0]
        N = 100_000
        draws = np.empty((N, d))
        chol = row.cholesky()
        for ell in range(N):
            z = np.random.default_rng([42, ell]).standard_normal(d)
            draws[ell] = row.mu + chol @ z
        se = np.sqrt(np.diag(row.sigma_mat) / N)
        assert np.all(np.abs(draws.mean(axis=0) - row.mu) <= 4 * se)
        emp_cov = np.cov(draws.T)
        frob = np.linalg.norm(emp_cov - row.sigma_mat) / np.linalg.norm(
            row.sigma_mat
        )
        assert frob <= 0.05


class TestEnsembleRun:
    def _stable_posterior(self, rng, r=2, lam=1.0):
        flags = StructureFlags(has_linear=True)
        A_true = -np.eye(r)
        times = np.linspace(0.0, 1.0, 200)
        ops = rom.RomOperators(flags=flags, A=A_true)
        Q = rom.integrate(ops, np.ones(r), times).states
        R = A_true @ Q
        D = reg.build_data_matrix(Q, flags=flags)
        data = reg.RegressionData(D=D, R=R, flags=flags)
        return reg.solve_posterior_all(data, lam), times

    def test_identical_samples_zero_std(self):
        rng = np.random.default_rng(7)
        posterior, times = self._stable_posterior(rng)
        mean_ops = rom.RomOperators.from_matrix(
            posterior.mean_matrix(), posterior.flags
        )
        ensemble = rom.ensemble_run(
            posterior,
            4,
            np.ones(2),
            times,
            stability_bound=100.0,
            samples=[mean_ops] * 4,
        )
        np.testing.assert_allclose(ensemble.pointwise_std, 0.0, atol=1e-14)
        assert ensemble.n_stable == 4

    def test_diverging_member_filtered_and_stats_unchanged(self):
        rng = np.random.default_rng(8)
        posterior, times = self._stable_posterior(rng)
        flags = posterior.flags
        good = [
            rom.RomOperators(flags=flags, A=-np.eye(2) * s)
            for s in (0.9, 1.0, 1.1)
        ]
        bad = rom.RomOperators(flags=flags, A=+5.0 * np.eye(2))
        ensemble = rom.ensemble_run(
            posterior,
            4,
            np.ones(2),
            times,
            stability_bound=10.0,
            samples=good + [bad],
        )
        assert ensemble.n_stable == 3
        only_good = rom.ensemble_run(
            posterior,
            3,
            np.ones(2),
            times,
            stability_bound=10.0,
            samples=good,
        )
        np.testing.assert_array_equal(
            ensemble.pointwise_mean, only_good.pointwise_mean
        )
        np.testing.assert_array_equal(
            ensemble.pointwise_std, only_good.pointwise_std
        )

    def test_all_unstable_raises(self):
        rng = np.random.default_rng(9)
        posterior, times = self._stable_posterior(rng)
        bad = rom.RomOperators(flags=posterior.flags, A=5.0 * np.eye(2))
        with pytest.raises(StabilityError):
            rom.ensemble_run(
                posterior,
                2,
                np.ones(2),
                times,
                stability_bound=10.0,
                samples=[bad, bad],
            )

    def test_rk4_and_rk45_agree(self):
        rng = np.random.default_rng(10)
        posterior, times = self._stable_posterior(rng, lam=5.0)
        kwargs = dict(stability_bound=50.0, seed=3)
        a = rom.ensemble_run(posterior, 6, np.ones(2), times, method="rk45", **kwargs)
        b = rom.ensemble_run(posterior, 6, np.ones(2), times, method="rk4", **kwargs)
        assert a.n_stable == b.n_stable == 6
        np.testing.assert_allclose(
            a.pointwise_mean, b.pointwise_mean, rtol=1e-5, atol=1e-8
        )

    def test_csv_export(self, tmp_path):
        rng = np.random.default_rng(11)
        posterior, times = self._stable_posterior(rng)
        ensemble = rom.ensemble_run(
            posterior, 3, np.ones(2), times, stability_bound=100.0, seed=0
        )
        path = tmp_path / "ensemble.csv"
        rom.write_ensemble_csv(ensemble, path)
        header = path.read_text().splitlines()[0].split(",")
        assert header[0] == "time"
        assert "mean_q1" in header and "std_q2" in header and "meanop_q1" in header
        body = np.loadtxt(path, delimiter=",", skiprows=1)
        assert body.shape == (times.size, 1 + 3 * 2)
