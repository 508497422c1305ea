"""Kernel-correlated residual model: GLS posteriors and a GP closure surrogate.

Replacing the white-noise residual of :mod:`bayesrom.regression` with a
Gaussian process over time yields generalized-least-squares posteriors

    Sigma_i = noise_var * inv(diag(lam) + D.T K^-1 D)
    mu_i    = beta + inv(diag(lam) + D.T K^-1 D) D.T K^-1 (r_i - D beta)

where ``K`` is the kernel matrix on the training time grid. The posterior
predictive of the reduced derivative is then a Gaussian process whose mean
carries a data-driven closure term ``kappa(t, T) K^-1 (r_i - D mu_i)`` on
top of the finite-rank feature model. With the identity kernel everything
reduces exactly to the white-noise module.

The closure surrogate is exposed for diagnostics only; it is not fed back
into the reduced model's time integration.
"""

__all__ = [
    "KernelSpec",
    "GpRowPosterior",
    "gp_posterior",
    "gp_marginal_likelihood",
    "gp_predict_derivative",
    "select_length_scale",
]

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DimensionError, NotSPDError
from .regression import RegressionData, _as_lambda_vector, _as_prior_mean


@dataclass(frozen=True)
class KernelSpec:
    """Residual kernel on a fixed evaluation grid.

    Families: ``"squared-exponential"`` (default) with one length-scale, and
    ``"white"`` (identity on the grid, zero off-grid), which makes the GLS
    machinery coincide with the white-noise regression module. ``scale``
    multiplies the kernel.
    """

    times: np.ndarray
    length_scale: float = 1.0
    family: str = "squared-exponential"
    scale: float = 1.0

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        object.__setattr__(self, "times", times)
        if times.ndim != 1:
            raise DimensionError("kernel times must be a 1D grid")
        if self.family not in ("squared-exponential", "white"):
            raise ValueError(f"unknown kernel family {self.family!r}")
        if self.length_scale <= 0 or self.scale <= 0:
            raise ValueError("length_scale and scale must be positive")

    @property
    def k(self) -> int:
        return self.times.size

    def cross(self, s, t) -> np.ndarray:
        """Kernel matrix kappa(s, t) between two time grids."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if self.family == "white":
            return self.scale * (s[:, None] == t[None, :]).astype(float)
        diff = s[:, None] - t[None, :]
        return self.scale * np.exp(-0.5 * (diff / self.length_scale) ** 2)

    def matrix(self) -> np.ndarray:
        return self.cross(self.times, self.times)


def _kernel_cholesky(K, jitter_tries=8):
    """Lower Cholesky of K with escalating relative diagonal jitter."""
    k = K.shape[0]
    base = 1e-12 * np.trace(K) / k
    jitter = 0.0
    for attempt in range(jitter_tries + 1):
        try:
            return scipy.linalg.cholesky(K + jitter * np.eye(k), lower=True)
        except scipy.linalg.LinAlgError:
            jitter = base * 10.0**attempt
    raise NotSPDError("kernel matrix is not SPD after jitter escalation")


@dataclass
class GpRowPosterior:
    """GLS posterior of one operator row under a correlated residual.

    Carries everything the predictive equations need: the training features,
    targets, kernel, and the whitening factor of the kernel matrix.
    """

    mu: np.ndarray
    sigma_mat: np.ndarray
    noise_var: float
    lambdas: np.ndarray
    prior_mean: np.ndarray
    kernel: KernelSpec
    k_cholesky: np.ndarray = field(repr=False, default=None)
    features: np.ndarray = field(repr=False, default=None)
    residual_dual: np.ndarray = field(repr=False, default=None)

    @property
    def d(self) -> int:
        return self.mu.size

    @property
    def delta_mu(self) -> np.ndarray:
        return self.mu - self.prior_mean


def gp_posterior(
    data: RegressionData, i: int, lam, prior_mean=None, kernel: KernelSpec = None
) -> GpRowPosterior:
    """GLS posterior of operator row ``i`` with kernel-correlated residuals.

    Implemented by whitening the features/targets with the kernel Cholesky
    factor and reusing the white-noise algebra; the identity kernel
    reproduces :func:`bayesrom.regression.solve_posterior` exactly.
    """
    if kernel is None:
        raise ValueError("a KernelSpec is required")
    if kernel.k != data.k:
        raise DimensionError(
            f"kernel grid has {kernel.k} points but data has {data.k} rows"
        )
    lam = _as_lambda_vector(lam, data.d)
    beta = _as_prior_mean(prior_mean, data.d)
    r_i = data.target(i)

    L = _kernel_cholesky(kernel.matrix())
    Dw = scipy.linalg.solve_triangular(L, data.D, lower=True)
    rw = scipy.linalg.solve_triangular(L, r_i, lower=True)

    A = Dw.T @ Dw + np.diag(lam)
    try:
        chol = scipy.linalg.cholesky(A, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise NotSPDError(
            "diag(lambda) + D.T K^-1 D is singular; increase lambda"
        ) from exc
    delta_mu = scipy.linalg.cho_solve((chol, True), Dw.T @ (rw - Dw @ beta))
    mu = beta + delta_mu
    res_w = rw - Dw @ mu
    noise_var = float((res_w @ res_w + lam @ (delta_mu * delta_mu)) / data.k)
    inv = scipy.linalg.cho_solve((chol, True), np.eye(data.d))
    sigma = noise_var * 0.5 * (inv + inv.T)

    residual = r_i - data.D @ mu
    dual = scipy.linalg.cho_solve((L, True), residual)  # K^-1 (r - D mu)
    return GpRowPosterior(
        mu=mu,
        sigma_mat=sigma,
        noise_var=noise_var,
        lambdas=lam,
        prior_mean=beta,
        kernel=kernel,
        k_cholesky=L,
        features=data.D,
        residual_dual=dual,
    )


def gp_marginal_likelihood(
    data: RegressionData,
    i: int,
    lam,
    prior_mean=None,
    noise_var=None,
    kernel: KernelSpec = None,
) -> float:
    """Log evidence under the kernel-correlated residual model.

    Equals the log density of the targets under the dense Gaussian with
    covariance ``noise_var * (D diag(lam)^-1 D.T + K)``; reduces to the
    white-noise evidence when the kernel is the identity.
    """
    if kernel is None:
        raise ValueError("a KernelSpec is required")
    lam = _as_lambda_vector(lam, data.d)
    if np.any(lam <= 0):
        raise ValueError("marginal likelihood requires strictly positive lambda")
    if noise_var is None or noise_var <= 0:
        raise ValueError("noise_var must be a positive scalar")
    beta = _as_prior_mean(prior_mean, data.d)
    r_i = data.target(i)

    L = _kernel_cholesky(kernel.matrix())
    Dw = scipy.linalg.solve_triangular(L, data.D, lower=True)
    rw = scipy.linalg.solve_triangular(L, r_i, lower=True)
    A = Dw.T @ Dw + np.diag(lam)
    try:
        chol = scipy.linalg.cholesky(A, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise NotSPDError("model covariance is singular") from exc
    delta_mu = scipy.linalg.cho_solve((chol, True), Dw.T @ (rw - Dw @ beta))
    res_w = rw - Dw @ (beta + delta_mu)
    logdet_A = 2.0 * np.sum(np.log(np.diag(chol)))
    logdet_K = 2.0 * np.sum(np.log(np.diag(L)))
    return float(
        -0.5 / noise_var * (res_w @ res_w)
        - 0.5 / noise_var * (lam @ (delta_mu * delta_mu))
        - 0.5 * logdet_A
        + 0.5 * np.sum(np.log(lam))
        - 0.5 * logdet_K
        - 0.5 * data.k * np.log(noise_var)
        - 0.5 * data.k * np.log(2.0 * np.pi)
    )


def gp_predict_derivative(
    gp_post: GpRowPosterior, features: np.ndarray, query_times
) -> tuple:
    """Posterior mean and covariance of one reduced derivative component.

    Parameters
    ----------
    gp_post : GpRowPosterior
    features : (nq, d) ndarray
        Feature vectors (rows) of the query states/inputs, in the same
        layout as the data matrix columns.
    query_times : (nq,) array-like

    Returns
    -------
    mean : (nq,) ndarray
    cov : (nq, nq) ndarray
        The mean adds the kernel closure term to the feature model; the
        covariance combines the kernel conditional with the operator
        posterior propagated through the (closure-corrected) features.
    """
    features = np.atleast_2d(np.asarray(features, dtype=float))
    query_times = np.atleast_1d(np.asarray(query_times, dtype=float))
    if features.shape != (query_times.size, gp_post.d):
        raise DimensionError(
            f"features must have shape {(query_times.size, gp_post.d)}, "
            f"got {features.shape}"
        )
    kernel = gp_post.kernel
    Kq = kernel.cross(query_times, kernel.times)  # (nq, k)
    Kqq = kernel.cross(query_times, query_times)

    mean = features @ gp_post.mu + Kq @ gp_post.residual_dual

    L = gp_post.k_cholesky
    W = scipy.linalg.solve_triangular(L, Kq.T, lower=True)  # L^-1 K(T, tq)
    KinvKqT = scipy.linalg.solve_triangular(L.T, W, lower=False)
    F_eff = features - KinvKqT.T @ gp_post.features
    cov = (
        gp_post.noise_var * (Kqq - W.T @ W)
        + F_eff @ gp_post.sigma_mat @ F_eff.T
    )
    return mean, 0.5 * (cov + cov.T)


def select_length_scale(
    data: RegressionData, i: int, lam, times, candidates, prior_mean=None
) -> KernelSpec:
    """Pick a squared-exponential length-scale from a coarse grid by
    maximizing the evidence, with the noise variance profiled out at its
    closed-form optimum for each candidate."""
    best = None
    for ell in np.atleast_1d(candidates):
        kernel = KernelSpec(times=times, length_scale=float(ell))
        post = gp_posterior(data, i, lam, prior_mean, kernel)
        value = gp_marginal_likelihood(
            data, i, lam, prior_mean, post.noise_var, kernel
        )
        if best is None or value > best[0]:
            best = (value, kernel)
    return best[1]
