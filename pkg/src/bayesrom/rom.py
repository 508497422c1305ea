"""Quadratic reduced models: time integration, posterior sampling, ensembles."""

__all__ = [
    "RomOperators",
    "IntegrationResult",
    "RomEnsemble",
    "integrate",
    "sample_operators",
    "ensemble_run",
    "write_ensemble_csv",
]

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.integrate

from .errors import DimensionError, StabilityError
from .regression import OperatorPosterior
from .tensorops import StructureFlags, compressed_kron, d_dim, khatri_rao_compressed


@dataclass(frozen=True)
class RomOperators:
    """Operator blocks of one quadratic reduced model.

    The quadratic block ``H`` acts on the compressed Kronecker square (see
    :mod:`bayesrom.tensorops`), so its width is r(r+1)/2.
    """

    flags: StructureFlags
    A: np.ndarray = None
    H: np.ndarray = None
    B: np.ndarray = None
    c: np.ndarray = None

    def __post_init__(self):
        present = {
            "A": self.A is not None,
            "H": self.H is not None,
            "B": self.B is not None,
            "c": self.c is not None,
        }
        expected = {
            "A": self.flags.has_linear,
            "H": self.flags.has_quadratic,
            "B": self.flags.has_input,
            "c": self.flags.has_constant,
        }
        if present != expected:
            raise DimensionError(
                f"operator blocks {present} do not match structure {expected}"
            )
        r = self.r
        shapes = {
            "A": (r, r),
            "H": (r, r * (r + 1) // 2),
            "B": (r, self.flags.input_dim),
            "c": (r,),
        }
        for name in ("A", "H", "B", "c"):
            block = getattr(self, name)
            if block is None:
                continue
            block = np.asarray(block, dtype=float)
            object.__setattr__(self, name, block)
            if block.shape != shapes[name]:
                raise DimensionError(
                    f"operator {name} has shape {block.shape}, expected {shapes[name]}"
                )
            if not np.isfinite(block).all():
                raise ValueError(f"operator {name} contains non-finite entries")

    @property
    def r(self) -> int:
        for block in (self.A, self.H, self.c):
            if block is not None:
                return np.asarray(block).shape[0]
        return np.asarray(self.B).shape[0]

    def rhs(self, q: np.ndarray, u=None) -> np.ndarray:
        """Time derivative of the reduced state at one state/input pair."""
        out = np.zeros_like(q, dtype=float)
        if self.A is not None:
            out += self.A @ q
        if self.H is not None:
            out += self.H @ compressed_kron(q)
        if self.B is not None:
            out += self.B @ np.atleast_1d(u)
        if self.c is not None:
            out += self.c
        return out

    def as_matrix(self) -> np.ndarray:
        """Concatenated operator matrix [A H B c] (r, d)."""
        blocks = [b for b in (self.A, self.H, self.B) if b is not None]
        if self.c is not None:
            blocks.append(self.c[:, None])
        return np.hstack(blocks)

    @classmethod
    def from_matrix(cls, Ohat: np.ndarray, flags: StructureFlags) -> "RomOperators":
        """Split a concatenated operator matrix into blocks per ``flags``."""
        Ohat = np.atleast_2d(np.asarray(Ohat, dtype=float))
        r = Ohat.shape[0]
        if Ohat.shape[1] != d_dim(r, flags):
            raise DimensionError(
                f"operator matrix has {Ohat.shape[1]} columns, "
                f"structure implies {d_dim(r, flags)}"
            )
        slices = flags.block_slices(r)
        return cls(
            flags=flags,
            A=Ohat[:, slices["linear"]] if flags.has_linear else None,
            H=Ohat[:, slices["quadratic"]] if flags.has_quadratic else None,
            B=Ohat[:, slices["input"]] if flags.has_input else None,
            c=Ohat[:, slices["constant"]][:, 0] if flags.has_constant else None,
        )


@dataclass
class IntegrationResult:
    """Reduced trajectory with a stability verdict.

    ``states`` has one column per requested time; columns after a failure
    or bound violation are NaN and ``stable`` is False.
    """

    states: np.ndarray
    times: np.ndarray
    stable: bool
    n_completed: int
    message: str = ""


def _check_grid(times):
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size < 2 or np.any(np.diff(times) <= 0):
        raise DimensionError("time grid must be 1D and strictly increasing")
    return times


def integrate(
    ops: RomOperators,
    q0: np.ndarray,
    times,
    input_function=None,
    method: str = "rk45",
    rtol: float = 1e-7,
    atol: float = 1e-9,
    stability_bound: float = None,
) -> IntegrationResult:
    """Integrate a reduced model on a time grid.

    ``method="rk45"`` uses an adaptive embedded Runge-Kutta 4(5) pair with
    dense output evaluated on the grid; ``method="rk4"`` steps the classical
    fixed-step scheme from grid point to grid point (bit-reproducible).
    Overflow, step failure, or exceeding ``stability_bound`` in max norm
    yields an unstable result with a partial trajectory, not an exception.
    """
    times = _check_grid(times)
    q0 = np.asarray(q0, dtype=float)
    if q0.shape != (ops.r,):
        raise DimensionError(f"q0 must have shape ({ops.r},), got {q0.shape}")
    if ops.flags.has_input and input_function is None:
        raise DimensionError("model takes inputs but no input function given")

    if method == "rk4":
        return _integrate_rk4(ops, q0, times, input_function, stability_bound)
    if method != "rk45":
        raise ValueError(f"unknown integrator {method!r}")

    def rhs(t, q):
        u = input_function(t) if input_function is not None else None
        with np.errstate(over="ignore", invalid="ignore"):
            return ops.rhs(q, u)

    events = None
    if stability_bound is not None:
        bound = float(stability_bound)

        def exceed(t, q):
            return bound - np.abs(q).max()

        exceed.terminal = True
        events = [exceed]

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        sol = scipy.integrate.solve_ivp(
            rhs,
            (times[0], times[-1]),
            q0,
            method="RK45",
            t_eval=times,
            rtol=rtol,
            atol=atol,
            events=events,
            dense_output=False,
        )
    states = np.full((ops.r, times.size), np.nan)
    n_done = sol.y.shape[1]
    states[:, :n_done] = sol.y
    finite = np.isfinite(sol.y).all()
    within = True
    if stability_bound is not None and n_done:
        within = np.abs(sol.y).max() <= float(stability_bound)
    stable = bool(sol.status == 0 and finite and within)
    message = "" if stable else (sol.message if sol.status != 0 else "bound exceeded")
    if not stable and not finite:
        message = "non-finite state"
    return IntegrationResult(
        states=states,
        times=times,
        stable=stable,
        n_completed=n_done,
        message=message,
    )


def _rhs_batch(ops_A, ops_H, ops_B, ops_c, Q, u):
    """Stacked RHS for a batch: Q is (N, r); operator arrays are (N, ., .)."""
    out = np.zeros_like(Q)
    if ops_A is not None:
        out += np.einsum("nij,nj->ni", ops_A, Q)
    if ops_H is not None:
        ck = khatri_rao_compressed(Q.T).T  # (N, r(r+1)/2)
        out += np.einsum("nij,nj->ni", ops_H, ck)
    if ops_B is not None:
        out += np.einsum("nij,j->ni", ops_B, np.atleast_1d(u))
    if ops_c is not None:
        out += ops_c
    return out


def _integrate_rk4_batch(ops_list, q0s, times, input_function, stability_bound):
    """Classical RK4 for N models sharing one grid; one step per interval.

    Returns (states (N, r, T), stable (N,), n_completed (N,)). Members are
    frozen (NaN onward) at the first non-finite value or bound violation.
    """
    times = _check_grid(times)
    N = len(ops_list)
    r = ops_list[0].r
    flags = ops_list[0].flags
    stack = lambda name: (
        np.stack([np.asarray(getattr(o, name)) for o in ops_list])
        if getattr(ops_list[0], name) is not None
        else None
    )
    A, H, B, c = stack("A"), stack("H"), stack("B"), stack("c")
    u_of = input_function if input_function is not None else (lambda t: None)

    states = np.full((N, r, times.size), np.nan)
    Q = np.array(q0s, dtype=float).reshape(N, r)
    alive = np.ones(N, dtype=bool)
    n_completed = np.zeros(N, dtype=int)
    bound = np.inf if stability_bound is None else float(stability_bound)

    def ok(Qs):
        with np.errstate(invalid="ignore"):
            return np.isfinite(Qs).all(axis=1) & (np.abs(Qs).max(axis=1) <= bound)

    good = ok(Q)
    states[good, :, 0] = Q[good]
    alive &= good
    n_completed[alive] = 1
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(times.size - 1):
            t, h = times[j], times[j + 1] - times[j]
            k1 = _rhs_batch(A, H, B, c, Q, u_of(t))
            k2 = _rhs_batch(A, H, B, c, Q + 0.5 * h * k1, u_of(t + 0.5 * h))
            k3 = _rhs_batch(A, H, B, c, Q + 0.5 * h * k2, u_of(t + 0.5 * h))
            k4 = _rhs_batch(A, H, B, c, Q + h * k3, u_of(t + h))
            Qn = Q + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            good = ok(Qn) & alive
            states[good, :, j + 1] = Qn[good]
            n_completed[good] = j + 2
            newly_dead = alive & ~good
            Qn[newly_dead] = 0.0  # freeze diverged members; already NaN in output
            alive &= good
            Q = Qn
            if not alive.any():
                break
    return states, n_completed == times.size, n_completed


def _integrate_rk4(ops, q0, times, input_function, stability_bound):
    states, stable, n_completed = _integrate_rk4_batch(
        [ops], [q0], times, input_function, stability_bound
    )
    message = "" if stable[0] else "non-finite state or bound exceeded"
    return IntegrationResult(
        states=states[0],
        times=np.asarray(times, dtype=float),
        stable=bool(stable[0]),
        n_completed=int(n_completed[0]),
        message=message,
    )


def sample_operators(posterior: OperatorPosterior, n_samples: int, seed: int) -> list:
    """Draw operator matrices from the posterior, row by row.

    Each draw uses its own counter-derived RNG stream ``(seed, draw_index)``,
    so results do not depend on evaluation order and are reproducible bit
    for bit under a fixed seed.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    chols = [row.cholesky() for row in posterior.rows]
    samples = []
    for ell in range(n_samples):
        rng = np.random.default_rng([int(seed), ell])
        Ohat = np.empty((posterior.r, posterior.d))
        for i, row in enumerate(posterior.rows):
            z = rng.standard_normal(row.d)
            Ohat[i] = row.mu + chols[i] @ z
        samples.append(RomOperators.from_matrix(Ohat, posterior.flags))
    return samples


@dataclass
class RomEnsemble:
    """Monte Carlo ensemble of reduced models drawn from a posterior.

    Statistics are computed over the stable members only (population
    standard deviation, so a single stable member yields zero spread).
    """

    samples: list
    trajectories: np.ndarray
    times: np.ndarray
    stability_flags: np.ndarray
    pointwise_mean: np.ndarray
    pointwise_std: np.ndarray
    mean_operator_trajectory: np.ndarray
    rng_seed: int
    stability_bound: float

    @property
    def n_samples(self) -> int:
        return len(self.samples)

    @property
    def n_stable(self) -> int:
        return int(self.stability_flags.sum())


def ensemble_run(
    posterior: OperatorPosterior,
    n_samples: int,
    q0: np.ndarray,
    times,
    input_function=None,
    stability_bound: float = None,
    seed: int = 0,
    method: str = "rk45",
    samples: list = None,
) -> RomEnsemble:
    """Sample the posterior, integrate every draw, and collect statistics.

    A draw is unstable if its trajectory leaves ``stability_bound`` in max
    norm or turns non-finite; unstable draws are excluded from the mean/std.
    The model with the posterior mean operators is integrated separately and
    reported alongside the sample statistics.

    Raises
    ------
    StabilityError
        If no draw is stable.
    """
    times = _check_grid(times)
    if samples is None:
        samples = sample_operators(posterior, n_samples, seed)
    elif len(samples) != n_samples:
        raise DimensionError("len(samples) != n_samples")

    if method == "rk4":
        trajectories, stable, _ = _integrate_rk4_batch(
            samples, [q0] * n_samples, times, input_function, stability_bound
        )
    else:
        trajectories = np.empty((n_samples, samples[0].r, times.size))
        stable = np.zeros(n_samples, dtype=bool)
        for ell, ops in enumerate(samples):
            result = integrate(
                ops,
                q0,
                times,
                input_function=input_function,
                method=method,
                stability_bound=stability_bound,
            )
            trajectories[ell] = result.states
            stable[ell] = result.stable
    if not stable.any():
        raise StabilityError(
            f"all {n_samples} posterior draws were unstable "
            f"(bound {stability_bound})"
        )

    kept = trajectories[stable]
    mean = kept.mean(axis=0)
    std = kept.std(axis=0, ddof=0)

    mean_ops = RomOperators.from_matrix(posterior.mean_matrix(), posterior.flags)
    mean_result = integrate(
        mean_ops,
        q0,
        times,
        input_function=input_function,
        method=method if method in ("rk45", "rk4") else "rk45",
        stability_bound=stability_bound,
    )
    return RomEnsemble(
        samples=samples,
        trajectories=trajectories,
        times=times,
        stability_flags=stable,
        pointwise_mean=mean,
        pointwise_std=std,
        mean_operator_trajectory=mean_result.states,
        rng_seed=int(seed),
        stability_bound=np.inf if stability_bound is None else float(stability_bound),
    )


def write_ensemble_csv(ensemble: RomEnsemble, path):
    """Reduced-space ensemble time series: mean, std, and mean-operator
    trajectory per mode (UTF-8, '.' decimal, header row)."""
    r = ensemble.pointwise_mean.shape[0]
    header = ["time"]
    for prefix in ("mean", "std", "meanop"):
        header += [f"{prefix}_q{i + 1}" for i in range(r)]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for j, t in enumerate(ensemble.times):
            row = [repr(float(t))]
            for block in (
                ensemble.pointwise_mean,
                ensemble.pointwise_std,
                ensemble.mean_operator_trajectory,
            ):
                row += [repr(float(x)) for x in block[:, j]]
            writer.writerow(row)
