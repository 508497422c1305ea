"""Operator regression: data matrix assembly and closed-form posteriors.

Each reduced mode i is fit independently. With data matrix ``D`` (k x d),
targets ``r_i`` (k,), positive penalties ``lam`` (d,), and prior mean
``beta`` (d,), the posterior over the operator row is Gaussian with

    Sigma_i = noise_var * inv(diag(lam) + D.T D)
    mu_i    = beta + inv(diag(lam) + D.T D) D.T (r_i - D beta)

and the noise variance is set to its closed-form optimum

    noise_var = (||r_i - D mu_i||^2 + ||diag(lam)^(1/2) (mu_i - beta)||^2) / k.
"""

__all__ = [
    "RegressionData",
    "RowPosterior",
    "OperatorPosterior",
    "build_data_matrix",
    "solve_ols",
    "solve_posterior",
    "solve_posterior_all",
    "solve_ridge",
    "log_marginal_likelihood",
]

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DimensionError, NotSPDError, RankDeficientError
from .tensorops import StructureFlags, d_dim, khatri_rao_compressed

#: Condition number of D^T D beyond which the OLS path refuses to solve.
_COND_LIMIT = 1.0 / np.finfo(float).eps


def build_data_matrix(Qhat: np.ndarray, U=None, flags: StructureFlags = None) -> np.ndarray:
    """Assemble the regression data matrix from reduced states and inputs.

    Column blocks appear in the fixed order [linear, quadratic, input,
    constant], each present iff enabled in ``flags``. The quadratic block is
    the compressed Khatri-Rao square of the states; the constant block is a
    column of ones.

    Parameters
    ----------
    Qhat : (r, k) ndarray
        Reduced state snapshots (columns).
    U : (m, k) ndarray or None
        Inputs at the same time instants; required iff ``flags.has_input``.
    flags : StructureFlags

    Returns
    -------
    (k, d) ndarray
    """
    Qhat = np.atleast_2d(np.asarray(Qhat, dtype=float))
    r, k = Qhat.shape
    if flags is None:
        raise ValueError("flags are required")
    blocks = []
    if flags.has_linear:
        blocks.append(Qhat.T)
    if flags.has_quadratic:
        blocks.append(khatri_rao_compressed(Qhat).T)
    if flags.has_input:
        if U is None:
            raise DimensionError("flags demand inputs but U was not given")
        U = np.atleast_2d(np.asarray(U, dtype=float))
        if U.shape != (flags.input_dim, k):
            raise DimensionError(
                f"expected inputs of shape {(flags.input_dim, k)}, got {U.shape}"
            )
        blocks.append(U.T)
    if flags.has_constant:
        blocks.append(np.ones((k, 1)))
    return np.hstack(blocks)


@dataclass
class RegressionData:
    """Immutable bundle of the regression inputs with cached Gram spectrum.

    Parameters
    ----------
    D : (k, d) ndarray
        Data matrix.
    R : (r, k) ndarray
        Derivative targets; row i is the regression target of mode i.
    flags : StructureFlags or None
        Model structure. When given, the column count of ``D`` must equal
        ``d_dim(r, flags)``; None admits free-form regression problems.
    """

    D: np.ndarray
    R: np.ndarray
    flags: StructureFlags = None
    _gram: np.ndarray = field(default=None, repr=False, compare=False)
    _gram_eigvals: np.ndarray = field(default=None, repr=False, compare=False)
    _gram_eigvecs: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.D = np.atleast_2d(np.asarray(self.D, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if self.D.shape[0] != self.R.shape[1]:
            raise DimensionError(
                f"D has {self.D.shape[0]} rows but R has {self.R.shape[1]} columns"
            )
        if self.flags is not None:
            expected = d_dim(self.r, self.flags)
            if self.d != expected:
                raise DimensionError(
                    f"D has {self.d} columns, structure implies {expected}"
                )

    @property
    def k(self) -> int:
        return self.D.shape[0]

    @property
    def d(self) -> int:
        return self.D.shape[1]

    @property
    def r(self) -> int:
        return self.R.shape[0]

    def target(self, i: int) -> np.ndarray:
        return self.R[i]

    def gram(self) -> np.ndarray:
        """Cached Gram matrix ``D.T @ D``."""
        if self._gram is None:
            self._gram = self.D.T @ self.D
        return self._gram

    def gram_eigenvalues(self) -> np.ndarray:
        """Cached non-negative eigenvalues of the Gram matrix (ascending)."""
        if self._gram_eigvals is None:
            vals, vecs = np.linalg.eigh(self.gram())
            self._gram_eigvals = np.maximum(vals, 0.0)
            self._gram_eigvecs = vecs
        return self._gram_eigvals

    def gram_eigenvectors(self) -> np.ndarray:
        self.gram_eigenvalues()
        return self._gram_eigvecs

    def condition_estimate(self) -> float:
        """Condition number estimate of the Gram matrix."""
        g = self.gram_eigenvalues()
        if g[-1] == 0:
            return np.inf
        return float(g[-1] / g[0]) if g[0] > 0 else np.inf


def _as_lambda_vector(lam, d):
    lam = np.asarray(lam, dtype=float)
    if lam.ndim == 0:
        lam = np.full(d, float(lam))
    if lam.shape != (d,):
        raise DimensionError(f"lambda must be scalar or length {d}")
    if np.any(lam < 0):
        raise ValueError("lambda entries must be nonnegative")
    return lam


def _as_prior_mean(beta, d):
    if beta is None:
        return np.zeros(d)
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (d,):
        raise DimensionError(f"prior mean must have length {d}")
    return beta


@dataclass
class RowPosterior:
    """Gaussian posterior of one operator row.

    Attributes
    ----------
    mu : (d,) ndarray
        Posterior mean.
    sigma_mat : (d, d) ndarray
        Posterior covariance (symmetric positive definite).
    noise_var : float
        Optimal residual noise variance.
    lambdas : (d,) ndarray
        Penalty (prior precision) vector used in the fit.
    prior_mean : (d,) ndarray
    """

    mu: np.ndarray
    sigma_mat: np.ndarray
    noise_var: float
    lambdas: np.ndarray
    prior_mean: np.ndarray
    _chol: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.sigma_mat = np.asarray(self.sigma_mat, dtype=float)
        if np.abs(self.sigma_mat - self.sigma_mat.T).max() > 1e-12 * max(
            1.0, np.abs(self.sigma_mat).max()
        ):
            raise NotSPDError("posterior covariance is not symmetric")
        if self.noise_var <= 0:
            raise ValueError("noise variance must be positive")

    @property
    def d(self) -> int:
        return self.mu.size

    @property
    def delta_mu(self) -> np.ndarray:
        return self.mu - self.prior_mean

    def cholesky(self, jitter_tries: int = 3) -> np.ndarray:
        """Lower Cholesky factor of the covariance.

        Exact arithmetic guarantees positive definiteness; roundoff may not,
        so the diagonal is jittered by ``1e-12 * tr(Sigma)/d`` with up to
        ``jitter_tries`` tenfold escalations before giving up.
        """
        if self._chol is not None:
            return self._chol
        if not self.sigma_mat.any():  # exact zero-covariance limit
            self._chol = np.zeros_like(self.sigma_mat)
            return self._chol
        base = 1e-12 * np.trace(self.sigma_mat) / self.d
        jitter = 0.0
        for attempt in range(jitter_tries + 1):
            try:
                self._chol = np.linalg.cholesky(
                    self.sigma_mat + jitter * np.eye(self.d)
                )
                return self._chol
            except np.linalg.LinAlgError:
                jitter = base * 10.0**attempt
        raise NotSPDError(
            "posterior covariance failed Cholesky after jitter escalation"
        )


def solve_ols(data: RegressionData, i: int) -> np.ndarray:
    """Unregularized least-squares estimate of operator row ``i`` via QR.

    Raises
    ------
    RankDeficientError
        If ``D`` is (numerically) rank deficient; the message carries a
        condition estimate of the Gram matrix.
    """
    Q, Rfac = np.linalg.qr(data.D)
    diag = np.abs(np.diag(Rfac))
    if diag.min() <= diag.max() * data.d * np.finfo(float).eps:
        raise RankDeficientError(
            "data matrix is rank deficient "
            f"(Gram condition estimate {data.condition_estimate():.3e}); "
            "regularize or reduce the model"
        )
    return scipy.linalg.solve_triangular(Rfac, Q.T @ data.target(i))


def _posterior_core(D, gram, r_i, lam, beta):
    """Shared posterior algebra; returns (mu, delta_mu, precision_chol)."""
    A = gram + np.diag(lam)
    try:
        chol = scipy.linalg.cholesky(A, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise NotSPDError(
            "diag(lambda) + D.T D is singular; increase lambda"
        ) from exc
    rhs = D.T @ (r_i - D @ beta)
    delta_mu = scipy.linalg.cho_solve((chol, True), rhs)
    return beta + delta_mu, delta_mu, chol


def solve_posterior(data: RegressionData, i: int, lam, prior_mean=None) -> RowPosterior:
    """Closed-form Gaussian posterior of operator row ``i``.

    ``lam`` may be a positive scalar or a length-d vector. All-zero ``lam``
    is admitted only when ``D`` has full column rank (the OLS limit); any
    rank deficiency then surfaces as an error rather than a silent
    minimum-norm fallback.
    """
    lam = _as_lambda_vector(lam, data.d)
    beta = _as_prior_mean(prior_mean, data.d)
    r_i = data.target(i)
    if np.all(lam == 0):
        mu = solve_ols(data, i)  # QR path; raises if rank deficient
        delta_mu = mu - beta
        try:
            chol = scipy.linalg.cholesky(data.gram(), lower=True)
        except scipy.linalg.LinAlgError as exc:
            raise NotSPDError("D.T D is singular; increase lambda") from exc
    else:
        mu, delta_mu, chol = _posterior_core(data.D, data.gram(), r_i, lam, beta)
    residual = r_i - data.D @ mu
    noise_var = (residual @ residual + lam @ (delta_mu * delta_mu)) / data.k
    inv = scipy.linalg.cho_solve((chol, True), np.eye(data.d))
    sigma = noise_var * 0.5 * (inv + inv.T)
    return RowPosterior(
        mu=mu,
        sigma_mat=sigma,
        noise_var=float(noise_var),
        lambdas=lam,
        prior_mean=beta,
    )


def solve_ridge(data: RegressionData, i: int, lam, prior_mean=None) -> np.ndarray:
    """Tikhonov-regularized estimate via an augmented least-squares solve.

    Solves ``min || r_i - D (beta + eta) ||^2 + || diag(lam)^(1/2) eta ||^2``
    by stacking the penalty rows under ``D`` and calling a dense LAPACK
    least-squares routine, so it is an independent path from
    :func:`solve_posterior` (which uses normal equations).
    """
    lam = _as_lambda_vector(lam, data.d)
    beta = _as_prior_mean(prior_mean, data.d)
    augmented = np.vstack([data.D, np.diag(np.sqrt(lam))])
    rhs = np.concatenate([data.target(i) - data.D @ beta, np.zeros(data.d)])
    eta, *_ = np.linalg.lstsq(augmented, rhs, rcond=None)
    return beta + eta


def log_marginal_likelihood(
    data: RegressionData, i: int, lam, prior_mean=None, noise_var=None
) -> float:
    """Log evidence of the row-i data under the Gaussian prior/likelihood.

    Evaluates the expanded form (residual + penalty terms at the posterior
    mean, log-determinant, penalty log sum, and noise normalization), which
    equals the log density of ``r_i`` under the marginal Gaussian with dense
    covariance ``noise_var * (D diag(lam)^-1 D.T + I)``.
    """
    lam = _as_lambda_vector(lam, data.d)
    if np.any(lam <= 0):
        raise ValueError("marginal likelihood requires strictly positive lambda")
    if noise_var is None or noise_var <= 0:
        raise ValueError("noise_var must be a positive scalar")
    beta = _as_prior_mean(prior_mean, data.d)
    r_i = data.target(i)
    mu, delta_mu, chol = _posterior_core(data.D, data.gram(), r_i, lam, beta)
    residual = r_i - data.D @ mu
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return float(
        -0.5 / noise_var * (residual @ residual)
        - 0.5 / noise_var * (lam @ (delta_mu * delta_mu))
        - 0.5 * logdet
        + 0.5 * np.sum(np.log(lam))
        - 0.5 * data.k * np.log(noise_var)
        - 0.5 * data.k * np.log(2.0 * np.pi)
    )


@dataclass
class OperatorPosterior:
    """Independent Gaussian posteriors for all operator rows.

    ``flags`` may be None for free-form regression problems that do not
    correspond to a structured dynamical model.
    """

    rows: list
    flags: StructureFlags
    r: int
    m: int = 0

    def __post_init__(self):
        if len(self.rows) != self.r:
            raise DimensionError(
                f"expected {self.r} row posteriors, got {len(self.rows)}"
            )

    @property
    def d(self) -> int:
        return self.rows[0].d

    def mean_matrix(self) -> np.ndarray:
        """Posterior mean operator matrix (r, d)."""
        return np.vstack([row.mu for row in self.rows])

    def noise_variances(self) -> np.ndarray:
        return np.array([row.noise_var for row in self.rows])

    def save_json(self, path):
        """Serialize to JSON. Floats are written with ``repr`` precision
        (17 significant digits), so stored values round-trip bit-exactly."""
        payload = {
            "format": "bayesrom-operator-posterior",
            "version": 1,
            "r": self.r,
            "m": self.m,
            "flags": None
            if self.flags is None
            else {
                "has_linear": self.flags.has_linear,
                "has_quadratic": self.flags.has_quadratic,
                "input_dim": self.flags.input_dim,
                "has_constant": self.flags.has_constant,
            },
            "rows": [
                {
                    "mu": row.mu.tolist(),
                    "sigma_cholesky": row.cholesky().tolist(),
                    "noise_var": row.noise_var,
                    "lambda": row.lambdas.tolist(),
                    "prior_mean": row.prior_mean.tolist(),
                }
                for row in self.rows
            ],
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=1)
            f.write("\n")

    @classmethod
    def load_json(cls, path):
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
        if payload.get("format") != "bayesrom-operator-posterior":
            raise DimensionError(f"{path}: not an operator posterior file")
        flags = None
        if payload["flags"] is not None:
            flags = StructureFlags(
                has_linear=payload["flags"]["has_linear"],
                has_quadratic=payload["flags"]["has_quadratic"],
                input_dim=payload["flags"]["input_dim"],
                has_constant=payload["flags"]["has_constant"],
            )
        rows = []
        for entry in payload["rows"]:
            chol = np.array(entry["sigma_cholesky"])
            row = RowPosterior(
                mu=np.array(entry["mu"]),
                sigma_mat=chol @ chol.T,
                noise_var=entry["noise_var"],
                lambdas=np.array(entry["lambda"]),
                prior_mean=np.array(entry["prior_mean"]),
            )
            row._chol = chol
            rows.append(row)
        return cls(rows=rows, flags=flags, r=payload["r"], m=payload["m"])


def solve_posterior_all(
    data: RegressionData, lambdas, prior_means=None
) -> OperatorPosterior:
    """Posteriors for every operator row.

    ``lambdas`` may be a scalar (shared), a length-r sequence of scalars
    (one per row), or a length-r sequence of length-d vectors.
    """
    lam_rows = []
    if np.ndim(lambdas) == 0:
        lam_rows = [lambdas] * data.r
    else:
        lam_rows = list(lambdas)
        if len(lam_rows) != data.r:
            raise DimensionError(f"expected {data.r} lambda entries")
    rows = []
    for i in range(data.r):
        beta = None if prior_means is None else prior_means[i]
        rows.append(solve_posterior(data, i, lam_rows[i], beta))
    m = data.flags.input_dim if data.flags is not None else 0
    return OperatorPosterior(rows=rows, flags=data.flags, r=data.r, m=m)
