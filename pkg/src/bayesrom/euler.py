"""1D compressible flow data pipeline: full-order solves, lifting, noise,
initial-condition generation, and derivative estimation.

The full-order model advances the conservative variables (density, specific
momentum, total energy) of an ideal gas on a periodic grid with first-order
upwind flux differences and forward-Euler time stepping. The flow regime of
interest is uniformly supersonic rightward (all characteristic speeds
positive), so the backward difference is the upwind choice; the stencil is
frozen for reproducibility.

The invertible variable change (density, momentum, energy) -> (velocity,
pressure, specific volume) makes the governing dynamics exactly quadratic,
which is the structure the reduced models assume.
"""

__all__ = [
    "EulerConfig",
    "NoiseSpec",
    "CONSERVATIVE_LAYOUT",
    "LIFTED_LAYOUT",
    "make_initial_conditions",
    "solve_fom",
    "run_trajectories",
    "add_noise",
    "noise_sigmas",
    "lift",
    "unlift",
    "estimate_derivatives",
    "generate_dataset",
]

import itertools
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.interpolate
import scipy.signal

from .errors import DimensionError, FomBlowupError
from .pod import SnapshotSet

#: Spline node positions and the two candidate values per variable.
NODE_POSITIONS = (0.0, 2.0 / 3.0, 4.0 / 3.0)
VELOCITY_NODE_VALUES = (95.0, 105.0)
DENSITY_NODE_VALUES = (20.0, 24.0)
INITIAL_PRESSURE = 1.0e5


def conservative_layout(n_cells):
    return (
        ("density", 0, n_cells, "kg/m^3"),
        ("momentum", n_cells, 2 * n_cells, "kg/(m^2 s)"),
        ("energy", 2 * n_cells, 3 * n_cells, "J/m^3"),
    )


def lifted_layout(n_cells):
    return (
        ("velocity", 0, n_cells, "m/s"),
        ("pressure", n_cells, 2 * n_cells, "Pa"),
        ("specific_volume", 2 * n_cells, 3 * n_cells, "m^3/kg"),
    )


CONSERVATIVE_LAYOUT = conservative_layout
LIFTED_LAYOUT = lifted_layout


@dataclass(frozen=True)
class EulerConfig:
    """Discretization of the periodic 1D flow problem."""

    n_cells: int = 200
    length: float = 2.0
    dt: float = 1.0e-5
    gamma: float = 1.4
    t0: float = 0.0
    t_final: float = 0.03
    train_cutoff: float = 0.01

    def __post_init__(self):
        if self.n_cells < 3 or self.length <= 0 or self.dt <= 0:
            raise ValueError("invalid grid parameters")
        if not self.t0 < self.train_cutoff <= self.t_final:
            raise ValueError("need t0 < train_cutoff <= t_final")

    @property
    def dx(self) -> float:
        return self.length / self.n_cells

    @property
    def x(self) -> np.ndarray:
        return self.dx * np.arange(self.n_cells)

    def steps_to(self, t: float) -> int:
        return int(round((t - self.t0) / self.dt))


@dataclass(frozen=True)
class NoiseSpec:
    """Observation noise: per-variable Gaussian with standard deviation
    ``level * (max - min)`` of the variable over the whole set."""

    level: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.level < 1.0:
            raise ValueError("noise level must be in [0, 1)")


def _periodic_spline(config, node_values):
    x_nodes = np.array(NODE_POSITIONS + (config.length,))
    y_nodes = np.array(tuple(node_values) + (node_values[0],))
    return scipy.interpolate.CubicSpline(x_nodes, y_nodes, bc_type="periodic")


def make_initial_conditions(
    config: EulerConfig = None,
    velocity_values=VELOCITY_NODE_VALUES,
    density_values=DENSITY_NODE_VALUES,
    pressure: float = INITIAL_PRESSURE,
) -> list:
    """All combinations of spline-node values as conservative states.

    Velocity and density profiles are periodic cubic splines through the
    three fixed nodes, each node taking either of two values; pressure is
    uniform. Ordering is frozen: the velocity node triple varies slowest,
    both triples in lexicographic order of ``itertools.product``.

    Returns
    -------
    list of (3, n_cells) ndarrays, length ``2**6 = 64`` by default.
    """
    config = config or EulerConfig()
    x = config.x
    states = []
    for v_nodes in itertools.product(velocity_values, repeat=3):
        u = _periodic_spline(config, v_nodes)(x)
        for d_nodes in itertools.product(density_values, repeat=3):
            rho = _periodic_spline(config, d_nodes)(x)
            momentum = rho * u
            energy = pressure / (config.gamma - 1.0) + 0.5 * rho * u * u
            states.append(np.vstack([rho, momentum, energy]))
    return states


def _flux(q, gamma):
    """Conservative fluxes; q has shape (3, n_cells, ...)."""
    rho, mom, en = q[0], q[1], q[2]
    u = mom / rho
    p = (gamma - 1.0) * (en - 0.5 * mom * u)
    return np.stack([mom, mom * u + p, (en + p) * u]), p


def _check_state(q, p, t):
    if not np.isfinite(q).all():
        raise FomBlowupError(f"non-finite state at t = {t:.6g}", blowup_time=t)
    if (q[0] <= 0).any() or (p <= 0).any():
        raise FomBlowupError(
            f"nonpositive density or pressure at t = {t:.6g}", blowup_time=t
        )


def run_trajectories(config: EulerConfig, q0s, n_steps: int, record_mask=None):
    """Advance a batch of initial conditions, recording selected steps.

    Parameters
    ----------
    q0s : list of (3, n_cells) ndarrays
    n_steps : int
        Number of forward-Euler steps.
    record_mask : (n_steps + 1,) bool ndarray or None
        Which step indices (0 = initial state) to record; None records all.

    Returns
    -------
    recorded : (L, 3 * n_cells, n_recorded) ndarray
    step_index : (n_recorded,) int ndarray
    """
    q = np.stack(q0s, axis=-1).astype(float)  # (3, n_cells, L)
    if q.shape[:2] != (3, config.n_cells):
        raise DimensionError("initial states must have shape (3, n_cells)")
    if record_mask is None:
        record_mask = np.ones(n_steps + 1, dtype=bool)
    record_mask = np.asarray(record_mask, dtype=bool)
    if record_mask.shape != (n_steps + 1,):
        raise DimensionError("record_mask must cover steps 0..n_steps")
    L = q.shape[-1]
    step_index = np.flatnonzero(record_mask)
    out = np.empty((L, 3 * config.n_cells, step_index.size))

    _, p0 = _flux(q, config.gamma)
    cfl = config.dt / config.dx * np.max(np.abs(q[1] / q[0]) + np.sqrt(config.gamma * p0 / q[0]))
    if cfl > 1.0:
        warnings.warn(
            f"CFL number {cfl:.3f} exceeds 1; the explicit scheme is unstable",
            RuntimeWarning,
        )

    factor = config.dt / config.dx
    cursor = 0
    for step in range(n_steps + 1):
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            flux, p = _flux(q, config.gamma)
        _check_state(q, p, config.t0 + step * config.dt)
        if record_mask[step]:
            out[:, :, cursor] = q.reshape(3 * config.n_cells, L).T
            cursor += 1
        if step == n_steps:
            break
        q = q - factor * (flux - np.roll(flux, 1, axis=1))
    return out, step_index


def solve_fom(config: EulerConfig, q0, n_steps: int = None, record_stride: int = 1) -> SnapshotSet:
    """Solve the full-order model for one initial condition.

    Snapshots are recorded every ``record_stride`` steps starting at the
    initial state. Raises :class:`FomBlowupError` with the failure time if
    the state turns non-finite or unphysical.
    """
    if n_steps is None:
        n_steps = config.steps_to(config.t_final)
    mask = np.zeros(n_steps + 1, dtype=bool)
    mask[::record_stride] = True
    recorded, steps = run_trajectories(config, [np.asarray(q0, dtype=float)], n_steps, mask)
    return SnapshotSet(
        states=recorded[0],
        times=config.t0 + config.dt * steps,
        variable_layout=conservative_layout(config.n_cells),
    )


def noise_sigmas(snapshots: SnapshotSet, level: float) -> dict:
    """Per-variable noise standard deviations ``level * (max - min)``."""
    sigmas = {}
    for name, a, b, _ in snapshots.variable_layout:
        block = snapshots.states[a:b]
        sigmas[name] = float(level * (block.max() - block.min()))
    return sigmas


def add_noise(snapshots: SnapshotSet, spec: NoiseSpec) -> SnapshotSet:
    """Pollute every entry with Gaussian noise scaled to its variable's
    range over the whole set. Zero level returns the input unchanged.

    Noise is drawn variable block by variable block in layout order from a
    single seeded generator, so the result is reproducible bit for bit.
    """
    if spec.level == 0.0:
        return snapshots
    sigmas = noise_sigmas(snapshots, spec.level)
    rng = np.random.default_rng(spec.seed)
    noisy = snapshots.states.copy()
    for name, a, b, _ in snapshots.variable_layout:
        noisy[a:b] += sigmas[name] * rng.standard_normal((b - a, snapshots.k))
    return SnapshotSet(
        states=noisy,
        times=snapshots.times,
        inputs=snapshots.inputs,
        variable_layout=snapshots.variable_layout,
        trajectory_boundaries=snapshots.trajectory_boundaries,
        scaling=snapshots.scaling,
    )


def lift(snapshots: SnapshotSet, gamma: float = 1.4, floors: dict = None) -> SnapshotSet:
    """Map conservative snapshots to (velocity, pressure, specific volume).

    Noise can push density or the derived pressure nonpositive, which the
    map cannot represent. When ``floors`` provides clamp values (typically
    1e-6 times the clean minima), offending entries are clamped and counted
    with a warning; otherwise they raise.
    """
    rho = snapshots.variable_block("density").copy()
    mom = snapshots.variable_block("momentum")
    en = snapshots.variable_block("energy")

    clamped = 0
    if floors is not None and "density" in floors:
        mask = rho < floors["density"]
        clamped += int(mask.sum())
        rho[mask] = floors["density"]
    elif (rho <= 0).any():
        raise FomBlowupError("nonpositive density; provide clamp floors")

    u = mom / rho
    p = (gamma - 1.0) * (en - 0.5 * mom * u)
    if floors is not None and "pressure" in floors:
        mask = p < floors["pressure"]
        clamped += int(mask.sum())
        p[mask] = floors["pressure"]
    elif (p <= 0).any():
        raise FomBlowupError("nonpositive pressure; provide clamp floors")
    if clamped:
        warnings.warn(
            f"clamped {clamped} nonpositive density/pressure entries",
            RuntimeWarning,
        )

    n_cells = rho.shape[0]
    return SnapshotSet(
        states=np.vstack([u, p, 1.0 / rho]),
        times=snapshots.times,
        inputs=snapshots.inputs,
        variable_layout=lifted_layout(n_cells),
        trajectory_boundaries=snapshots.trajectory_boundaries,
    )


def unlift(snapshots: SnapshotSet, gamma: float = 1.4) -> SnapshotSet:
    """Inverse of :func:`lift`."""
    u = snapshots.variable_block("velocity")
    p = snapshots.variable_block("pressure")
    zeta = snapshots.variable_block("specific_volume")
    rho = 1.0 / zeta
    mom = rho * u
    en = p / (gamma - 1.0) + 0.5 * rho * u * u
    return SnapshotSet(
        states=np.vstack([rho, mom, en]),
        times=snapshots.times,
        inputs=snapshots.inputs,
        variable_layout=conservative_layout(rho.shape[0]),
        trajectory_boundaries=snapshots.trajectory_boundaries,
    )


# Derivative estimation =======================================================
def _segment_spacing(times):
    dt = np.diff(times)
    if dt.size == 0:
        raise DimensionError("trajectory too short for differentiation")
    if np.abs(dt - dt[0]).max() > 1e-8 * dt[0]:
        raise DimensionError("derivative estimation requires a uniform grid")
    return float(dt[0])


def _fd4_segment(Y, h):
    k = Y.shape[1]
    if k < 5:
        raise DimensionError("fourth-order differences need at least 5 points")
    dY = np.empty_like(Y)
    dY[:, 2:-2] = (Y[:, :-4] - 8 * Y[:, 1:-3] + 8 * Y[:, 3:-1] - Y[:, 4:]) / (12 * h)
    dY[:, 0] = (-25 * Y[:, 0] + 48 * Y[:, 1] - 36 * Y[:, 2] + 16 * Y[:, 3] - 3 * Y[:, 4]) / (12 * h)
    dY[:, 1] = (-3 * Y[:, 0] - 10 * Y[:, 1] + 18 * Y[:, 2] - 6 * Y[:, 3] + Y[:, 4]) / (12 * h)
    dY[:, -2] = (3 * Y[:, -1] + 10 * Y[:, -2] - 18 * Y[:, -3] + 6 * Y[:, -4] - Y[:, -5]) / (12 * h)
    dY[:, -1] = (25 * Y[:, -1] - 48 * Y[:, -2] + 36 * Y[:, -3] - 16 * Y[:, -4] + 3 * Y[:, -5]) / (12 * h)
    return dY


def estimate_derivatives(
    Q: np.ndarray,
    times: np.ndarray,
    method: str = "localpoly",
    boundaries=None,
    window: int = 11,
    degree: int = 2,
) -> np.ndarray:
    """Estimate time derivatives of (projected) trajectories.

    ``method="fd4"`` applies fourth-order central differences (one-sided at
    segment ends); ``method="localpoly"`` fits a sliding-window local
    polynomial by least squares and reads off its derivative at the window
    center, which is far less sensitive to observation noise. Trajectories
    are differentiated independently; nothing is differenced across
    boundaries.

    Parameters
    ----------
    Q : (r, k) ndarray
    times : (k,) ndarray
    method : "localpoly" or "fd4"
    boundaries : increasing ints from 0 to k, or None for one trajectory.
    window, degree : local-polynomial settings (odd window, degree < window).
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    times = np.asarray(times, dtype=float)
    if Q.shape[1] != times.size:
        raise DimensionError("Q and times have mismatched lengths")
    if boundaries is None:
        boundaries = (0, times.size)
    R = np.empty_like(Q)
    for a, b in zip(boundaries, boundaries[1:]):
        seg = Q[:, a:b]
        h = _segment_spacing(times[a:b])
        if method == "fd4":
            R[:, a:b] = _fd4_segment(seg, h)
        elif method == "localpoly":
            if seg.shape[1] < window:
                raise DimensionError(
                    f"window {window} exceeds trajectory length {seg.shape[1]}"
                )
            R[:, a:b] = scipy.signal.savgol_filter(
                seg, window, degree, deriv=1, delta=h, axis=1, mode="interp"
            )
        else:
            raise ValueError(f"unknown derivative method {method!r}")
    return R


# Dataset assembly ============================================================
def generate_dataset(
    config: EulerConfig,
    noise: NoiseSpec,
    n_ics: int = 64,
    output_stride: int = 10,
) -> dict:
    """Run the full data pipeline for the periodic flow experiment.

    Solves the full-order model for the first ``n_ics`` of the 64 canonical
    initial conditions over the whole horizon, pollutes the training window
    with range-proportional noise, and keeps the clean solution on a strided
    output grid as ground truth.

    Returns a dict with keys ``training`` (noisy conservative snapshots on
    the training window, trajectories concatenated), ``truth`` (clean
    conservative snapshots on the strided grid over the full horizon),
    ``noise_sigmas``, ``lift_floors`` (clamp levels at 1e-6 of the clean
    training minima), ``config``, and ``noise``.
    """
    ics = make_initial_conditions(config)[:n_ics]
    if not ics:
        raise ValueError("n_ics must be at least 1")
    n_train = config.steps_to(config.train_cutoff)  # snapshots 0..n_train-1
    n_steps = config.steps_to(config.t_final)
    mask = np.zeros(n_steps + 1, dtype=bool)
    mask[:n_train] = True
    mask[::output_stride] = True
    recorded, steps = run_trajectories(config, ics, n_steps, mask)

    train_cols = steps < n_train
    truth_cols = steps % output_stride == 0
    k_train = int(train_cols.sum())
    k_truth = int(truth_cols.sum())
    L = len(ics)

    def concat(cols_mask, k_per):
        block = recorded[:, :, cols_mask]  # (L, n, k_per)
        states = np.concatenate([block[ell] for ell in range(L)], axis=1)
        times = np.tile(config.t0 + config.dt * steps[cols_mask], L)
        bounds = tuple(k_per * i for i in range(L + 1))
        return SnapshotSet(
            states=states,
            times=times,
            variable_layout=conservative_layout(config.n_cells),
            trajectory_boundaries=bounds,
        )

    clean_training = concat(train_cols, k_train)
    truth = concat(truth_cols, k_truth)

    # Clamp floors for the lifting map, from the clean training data.
    rho = clean_training.variable_block("density")
    mom = clean_training.variable_block("momentum")
    en = clean_training.variable_block("energy")
    p = (config.gamma - 1.0) * (en - 0.5 * mom * mom / rho)
    floors = {
        "density": 1e-6 * float(rho.min()),
        "pressure": 1e-6 * float(p.min()),
    }

    training = add_noise(clean_training, noise)
    return {
        "training": training,
        "truth": truth,
        "noise_sigmas": noise_sigmas(clean_training, noise.level),
        "lift_floors": floors,
        "config": config,
        "noise": noise,
    }
