"""Regularization selection: evidence fixed point and error-based search.

Two strategies are provided. The fixed-point iteration updates one penalty
scalar per reduced mode from the stationarity conditions of the log evidence
(zero prior mean), using the eigenvalues of the data Gram matrix so that each
sweep costs one ridge solve per mode and scalar work. The error-based search
picks the penalty (one scalar, or one for the quadratic block and one for the
rest) that minimizes the training-trajectory reconstruction error subject to
an amplitude stability bound, by a log-spaced grid search refined with
Brent's method (one scalar) or Nelder-Mead (two scalars).
"""

__all__ = [
    "FixedPointConfig",
    "FixedPointResult",
    "fixed_point_select",
    "write_fixed_point_trace_csv",
    "ErrorSearchConfig",
    "ErrorSearchResult",
    "error_based_select",
]

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize

from .errors import ConvergenceError, DimensionError, StabilityError
from .regression import (
    OperatorPosterior,
    RegressionData,
    solve_posterior,
)
from .rom import RomOperators, _integrate_rk4_batch, integrate

_INF_SCORE = 1e300  # finite stand-in for "unstable" so optimizers stay sane


# Evidence fixed point ========================================================
@dataclass(frozen=True)
class FixedPointConfig:
    """Settings for the evidence fixed-point iteration.

    ``initial_lambdas`` is a positive scalar (shared) or one positive scalar
    per reduced mode.
    """

    initial_lambdas: object = 50.0
    tolerance: float = 1e-3
    max_iterations: int = 100

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        lams = np.atleast_1d(np.asarray(self.initial_lambdas, dtype=float))
        if np.any(lams <= 0):
            raise ValueError("initial lambdas must be positive")


@dataclass
class FixedPointResult:
    """Outcome of the fixed-point iteration with its full trace.

    Trace arrays have one row per iteration sweep; ``lambdas_in`` are the
    values used by the sweep's ridge solves and ``lambdas_out`` the updated
    values (the last row of ``lambdas_out`` is the returned ``lambdas``).
    ``boundary_modes`` lists modes whose evidence has no interior maximum:
    their penalty diverges (the deterministic zero-operator limit) and is
    pinned at a large cap instead of iterating forever.
    """

    lambdas: np.ndarray
    posterior: OperatorPosterior
    converged: bool
    n_iterations: int
    lambdas_in: np.ndarray
    lambdas_out: np.ndarray
    noise_vars: np.ndarray
    gammas: np.ndarray
    mu_norms_sq: np.ndarray
    residuals_sq: np.ndarray
    evidences: np.ndarray
    boundary_modes: tuple = ()


#: A mode is pinned as a boundary (deterministic-limit) mode once its penalty
#: exceeds this multiple of the largest Gram eigenvalue: the prior then
#: dominates every data direction and further growth changes nothing.
BOUNDARY_CAP_FACTOR = 10.0
#: ... or once it has grown monotonically for this many sweeps at a rate
#: bounded away from 1 (healthy interior convergence settles within a few
#: sweeps at growth factors near 1).
BOUNDARY_STREAK = 10
BOUNDARY_GROWTH = 1.3


def fixed_point_select(data: RegressionData, config: FixedPointConfig) -> FixedPointResult:
    """Select one penalty scalar per mode by iterating the evidence
    stationarity conditions (zero prior mean).

    Each sweep solves the ridge problem per mode at the current penalty,
    sets the noise variance to its closed-form optimum, and maps the penalty
    through ``lambda <- gamma * noise_var / ||mu||^2`` with
    ``gamma = sum_l g_l / (lambda + g_l)`` over the Gram eigenvalues ``g_l``.
    Iteration stops when the relative 2-norm change of the penalty vector
    falls below the tolerance. Non-convergence within the iteration budget
    is reported on the result (with a warning), not raised.

    For a mode whose targets the features cannot explain, the evidence has
    no interior maximum and the update rule sends the penalty to infinity
    (the limit in which the prior pins the operator row to zero and the
    model reduces to its deterministic form). Such runaway modes are
    detected (penalty past ``BOUNDARY_CAP_FACTOR`` times the largest Gram
    eigenvalue, or sustained geometric growth), pinned at the cap, reported
    in ``boundary_modes`` with a warning, and excluded from further updates
    so the remaining modes can converge.
    """
    r, d, k = data.r, data.d, data.k
    lam = np.atleast_1d(np.asarray(config.initial_lambdas, dtype=float))
    if lam.size == 1:
        lam = np.full(r, float(lam[0]))
    if lam.shape != (r,):
        raise DimensionError(f"initial_lambdas must be scalar or length {r}")

    g = data.gram_eigenvalues()
    W = data.gram_eigenvectors()
    DtR = data.D.T @ data.R.T  # (d, r)
    WtDtR = W.T @ DtR
    lam_cap = BOUNDARY_CAP_FACTOR * g[-1]
    boundary = np.zeros(r, dtype=bool)
    up_streak = np.zeros(r, dtype=int)

    trace = {name: [] for name in (
        "lambdas_in", "lambdas_out", "noise_vars", "gammas",
        "mu_norms_sq", "residuals_sq", "evidences",
    )}
    converged = False
    n_iter = 0
    for _ in range(config.max_iterations):
        n_iter += 1
        lam_new = np.empty(r)
        sweep = {name: np.empty(r) for name in (
            "noise_vars", "gammas", "mu_norms_sq", "residuals_sq", "evidences",
        )}
        for i in range(r):
            mu = W @ (WtDtR[:, i] / (lam[i] + g))
            mu_sq = float(mu @ mu)
            if mu_sq == 0.0:
                raise ConvergenceError(
                    f"fixed-point update undefined: ||mu|| = 0 for mode {i}"
                )
            res = data.target(i) - data.D @ mu
            res_sq = float(res @ res)
            noise_var = (res_sq + lam[i] * mu_sq) / k
            gamma = float(np.sum(g / (lam[i] + g)))
            lam_new[i] = lam[i] if boundary[i] else gamma * noise_var / mu_sq
            sweep["noise_vars"][i] = noise_var
            sweep["gammas"][i] = gamma
            sweep["mu_norms_sq"][i] = mu_sq
            sweep["residuals_sq"][i] = res_sq
            sweep["evidences"][i] = (
                -0.5 * k
                - 0.5 * np.sum(np.log(lam[i] + g))
                + 0.5 * d * np.log(lam[i])
                - 0.5 * k * np.log(noise_var)
                - 0.5 * k * np.log(2.0 * np.pi)
            )
        growing = ~boundary & (lam_new >= BOUNDARY_GROWTH * lam)
        up_streak = np.where(growing, up_streak + 1, 0)
        runaway = ~boundary & (
            (lam_new > lam_cap) | (up_streak >= BOUNDARY_STREAK)
        )
        if runaway.any():
            boundary |= runaway
            lam_new[runaway] = lam_cap
            warnings.warn(
                "evidence has no interior maximum for mode(s) "
                f"{[int(i) + 1 for i in np.flatnonzero(runaway)]}; penalty "
                "pinned at the deterministic-limit cap",
                RuntimeWarning,
            )
        trace["lambdas_in"].append(lam.copy())
        trace["lambdas_out"].append(lam_new.copy())
        for name, values in sweep.items():
            trace[name].append(values)
        # pinned modes would dwarf the norm; test the live components only
        live = ~boundary
        if live.any():
            change = np.linalg.norm(lam_new[live] - lam[live]) / np.linalg.norm(
                lam[live]
            )
        else:
            change = 0.0
        lam = lam_new
        if change < config.tolerance:
            converged = True
            break
    if not converged:
        warnings.warn(
            f"fixed point did not converge in {config.max_iterations} "
            f"iterations (last relative change {change:.3e})",
            RuntimeWarning,
        )

    posterior = OperatorPosterior(
        rows=[solve_posterior(data, i, lam[i]) for i in range(r)],
        flags=data.flags,
        r=r,
        m=data.flags.input_dim if data.flags is not None else 0,
    )
    return FixedPointResult(
        lambdas=lam,
        posterior=posterior,
        converged=converged,
        n_iterations=n_iter,
        boundary_modes=tuple(int(i) for i in np.flatnonzero(boundary)),
        **{name: np.array(rows) for name, rows in trace.items()},
    )


def write_fixed_point_trace_csv(result: FixedPointResult, path):
    """Iteration trace as CSV: penalties, noise variances, and evidence per
    mode at every sweep (for convergence plots)."""
    r = result.lambdas.size
    header = (
        ["iteration"]
        + [f"lambda_{i + 1}" for i in range(r)]
        + [f"sigma2_{i + 1}" for i in range(r)]
        + [f"evidence_{i + 1}" for i in range(r)]
    )
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for it in range(result.n_iterations):
            row = [it]
            row += [repr(float(x)) for x in result.lambdas_in[it]]
            row += [repr(float(x)) for x in result.noise_vars[it]]
            row += [repr(float(x)) for x in result.evidences[it]]
            writer.writerow(row)


# Error-based search ==========================================================
@dataclass(frozen=True)
class ErrorSearchConfig:
    """Settings for the error/stability-based penalty search.

    Parameters
    ----------
    grid : array-like
        Positive penalty candidates (log-spaced recommended); first search
        axis.
    trial_horizon : float
        Final time of the stability trial integration; trajectories are
        extended past their training window to this time at the training
        spacing.
    parameterization : "one" or "two"
        One shared scalar, or (non-quadratic, quadratic) block scalars.
    grid2 : array-like or None
        Candidates for the quadratic-block scalar; defaults to ``grid``.
    bound_margin : float
        Stability bound factor tau >= 1; the trial bound is
        ``tau * max |training reduced state|``.
    integrator : "rk4" or "rk45"
        Trial integrator; the fixed-step scheme steps on the trajectory grid.
    refine : bool
        Follow the grid search with Brent / Nelder-Mead refinement in
        log10 space.
    """

    grid: object = None
    trial_horizon: float = None
    parameterization: str = "one"
    grid2: object = None
    bound_margin: float = 1.25
    integrator: str = "rk4"
    refine: bool = True
    max_refine_iter: int = 60

    def __post_init__(self):
        if self.grid is None or len(np.atleast_1d(self.grid)) == 0:
            raise ValueError("candidate grid must be non-empty")
        if np.any(np.atleast_1d(np.asarray(self.grid, dtype=float)) <= 0):
            raise ValueError("candidate penalties must be positive")
        if self.trial_horizon is None:
            raise ValueError("trial_horizon is required")
        if self.bound_margin < 1.0:
            raise ValueError("bound_margin must be >= 1")
        if self.parameterization not in ("one", "two"):
            raise ValueError("parameterization must be 'one' or 'two'")


@dataclass
class ErrorSearchResult:
    """Selected penalty with the operators it produces and the search trace."""

    lambda_params: tuple
    lambda_vector: np.ndarray
    operators: RomOperators
    training_error: float
    bound: float
    evaluations: list = field(repr=False, default_factory=list)


def make_lambda_vector(params, r: int, flags, d: int) -> np.ndarray:
    """Expand search parameters to a per-column penalty vector.

    One-scalar: uniform. Two-scalar ``(a, b)``: the quadratic block gets
    ``b``, every other block (linear, input, constant) gets ``a``.
    """
    params = np.atleast_1d(np.asarray(params, dtype=float))
    if params.size == 1:
        return np.full(d, params[0])
    if flags is None or not flags.has_quadratic:
        raise DimensionError(
            "two-scalar parameterization requires a structured quadratic model"
        )
    lam = np.full(d, params[0])
    slices = flags.block_slices(r)
    lam[slices["quadratic"]] = params[1]
    return lam


def _extended_grid(times, horizon):
    times = np.asarray(times, dtype=float)
    if horizon <= times[-1]:
        return times
    dt = float(np.mean(np.diff(times)))
    n_extra = int(np.round((horizon - times[-1]) / dt))
    return np.concatenate([times, times[-1] + dt * np.arange(1, n_extra + 1)])


def error_based_select(
    Qhats: list,
    times: list,
    data: RegressionData,
    config: ErrorSearchConfig,
    input_functions=None,
) -> ErrorSearchResult:
    """Choose the penalty minimizing training reconstruction error subject
    to a trial-integration stability bound.

    Parameters
    ----------
    Qhats : list of (r, k_l) ndarrays
        Projected training trajectories, one per initial condition; each
        trial integration starts from the first column.
    times : list of (k_l,) ndarrays
        Time grids of the trajectories.
    data : RegressionData
        The assembled regression problem (shared across candidates).
    config : ErrorSearchConfig
    input_functions : callable or list of callables or None
        Input signal per trajectory, required when the model takes inputs.

    Raises
    ------
    StabilityError
        If every candidate is unstable; the message lists the tried values.
    """
    if len(Qhats) == 0:
        raise DimensionError("at least one trajectory is required")
    if len(Qhats) != len(times):
        raise DimensionError("Qhats and times lengths differ")
    r = data.r
    if callable(input_functions):
        input_functions = [input_functions] * len(Qhats)
    if input_functions is None:
        input_functions = [None] * len(Qhats)

    bound = config.bound_margin * max(np.abs(Q).max() for Q in Qhats)
    grids = [_extended_grid(np.asarray(t, dtype=float), config.trial_horizon) for t in times]
    q0s = [np.asarray(Q, dtype=float)[:, 0] for Q in Qhats]
    gram = data.gram()
    DtRt = data.D.T @ data.R.T  # (d, r)

    def fit_operators(params):
        lam = make_lambda_vector(params, r, data.flags, data.d)
        A = gram + np.diag(lam)
        try:
            chol = scipy.linalg.cholesky(A, lower=True)
        except scipy.linalg.LinAlgError:
            return None, lam
        mu = scipy.linalg.cho_solve((chol, True), DtRt)  # (d, r)
        return RomOperators.from_matrix(mu.T, data.flags), lam

    evaluations = []
    cache = {}

    def score(params):
        key = tuple(np.atleast_1d(np.asarray(params, dtype=float)).tolist())
        if key in cache:
            return cache[key]
        ops, _ = fit_operators(params)
        if ops is None:
            error = _INF_SCORE
        else:
            error = 0.0
            for Q, grid, q0, u_f in zip(Qhats, grids, q0s, input_functions):
                if config.integrator == "rk4":
                    states, stable, _ = _integrate_rk4_batch(
                        [ops], [q0], grid, u_f, bound
                    )
                    trajectory, ok = states[0], bool(stable[0])
                else:
                    result = integrate(
                        ops, q0, grid, input_function=u_f,
                        method=config.integrator, stability_bound=bound,
                    )
                    trajectory, ok = result.states, result.stable
                if not ok:
                    error = _INF_SCORE
                    break
                k_l = Q.shape[1]
                error += np.linalg.norm(Q - trajectory[:, :k_l])
            else:
                error /= len(Qhats)
        cache[key] = error
        evaluations.append((key, error))
        return error

    if config.parameterization == "one":
        candidates = [(float(x),) for x in np.atleast_1d(config.grid)]
    else:
        axis2 = config.grid if config.grid2 is None else config.grid2
        candidates = [
            (float(a), float(b))
            for a in np.atleast_1d(config.grid)
            for b in np.atleast_1d(axis2)
        ]
    for params in candidates:
        score(params)

    finite = [(p, e) for p, e in evaluations if e < _INF_SCORE]
    if not finite:
        tried = ", ".join(str(p) for p in candidates)
        raise StabilityError(
            f"every penalty candidate produced an unstable trial model; tried: {tried}"
        )

    def best_of(pairs):
        # smallest error; ties broken by the smaller penalty (less shrinkage)
        return min(pairs, key=lambda pe: (pe[1], np.linalg.norm(pe[0])))

    best_params, best_error = best_of(finite)

    if config.refine and config.parameterization == "one":
        grid_sorted = np.sort(np.atleast_1d(np.asarray(config.grid, dtype=float)))
        j = int(np.argmin(np.abs(grid_sorted - best_params[0])))
        if 0 < j < grid_sorted.size - 1:
            xs = np.log10(grid_sorted[j - 1 : j + 2])
            fs = [cache[(float(x),)] for x in grid_sorted[j - 1 : j + 2]]
            if fs[1] < fs[0] and fs[1] < fs[2]:
                try:
                    scipy.optimize.minimize_scalar(
                        lambda x: score((10.0**x,)),
                        bracket=(xs[0], xs[1], xs[2]),
                        method="brent",
                        options={"maxiter": config.max_refine_iter},
                    )
                except (ValueError, RuntimeError):
                    pass
    elif config.refine and config.parameterization == "two":
        x0 = np.log10(np.asarray(best_params, dtype=float))
        scipy.optimize.minimize(
            lambda x: score(tuple(10.0**x)),
            x0,
            method="Nelder-Mead",
            options={
                "maxiter": config.max_refine_iter,
                "xatol": 1e-3,
                "fatol": 1e-12,
            },
        )

    finite = [(p, e) for p, e in evaluations if e < _INF_SCORE]
    best_params, best_error = best_of(finite)

    operators, lam_vec = fit_operators(best_params)
    # Re-verify the stability bound at the selected penalty.
    for grid, q0, u_f in zip(grids, q0s, input_functions):
        states, stable, _ = _integrate_rk4_batch([operators], [q0], grid, u_f, bound)
        if not stable[0]:
            raise StabilityError(
                "selected penalty failed the post hoc stability check"
            )
    return ErrorSearchResult(
        lambda_params=tuple(best_params),
        lambda_vector=lam_vec,
        operators=operators,
        training_error=float(best_error),
        bound=float(bound),
        evaluations=evaluations,
    )
