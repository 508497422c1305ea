"""Snapshot handling, per-variable scaling, and POD bases via dense SVD."""

__all__ = [
    "SnapshotSet",
    "ScalingRecord",
    "ReducedBasis",
    "scale_variables",
    "apply_scaling",
    "unscale_states",
    "compute_pod",
    "project",
    "reconstruct",
    "save_snapshots_csv",
    "load_snapshots_csv",
    "save_snapshots_binary",
    "load_snapshots_binary",
    "save_basis",
    "load_basis",
]

from dataclasses import dataclass, field, replace

import numpy as np

from . import _containers
from .errors import DataFormatError, DegenerateScaleError, DimensionError, RankDeficientError

#: Orthonormality tolerance for reduced bases.
ORTHO_TOL = 1e-10


@dataclass(frozen=True)
class ScalingRecord:
    """Per-variable affine transform ``x -> (x - shift) / scale`` applied to
    snapshot rows before the SVD; kept so projections and reconstructions can
    replay / invert it."""

    names: tuple
    shifts: tuple
    scales: tuple
    scheme: str

    def as_dict(self):
        return {
            "scheme": self.scheme,
            "variables": [
                {"name": n, "shift": s, "scale": c}
                for n, s, c in zip(self.names, self.shifts, self.scales)
            ],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            names=tuple(v["name"] for v in d["variables"]),
            shifts=tuple(float(v["shift"]) for v in d["variables"]),
            scales=tuple(float(v["scale"]) for v in d["variables"]),
            scheme=d["scheme"],
        )


@dataclass(frozen=True)
class SnapshotSet:
    """State trajectories sampled on a time grid.

    Parameters
    ----------
    states : (n, k) ndarray
        Columns are snapshots.
    times : (k,) ndarray
        Sample time of each column; strictly increasing within each
        trajectory.
    inputs : (m, k) ndarray or None
        Input values at the sample times.
    variable_layout : tuple of (name, start, stop, units)
        Row blocks of the physical variables; must partition ``0..n``.
    trajectory_boundaries : tuple of int
        Start offsets of each trajectory plus the final ``k``, e.g.
        ``(0, 1000, 2000)`` for two 1000-column trajectories.
    scaling : ScalingRecord or None
        Affine transform already applied to ``states`` (None = raw).
    """

    states: np.ndarray
    times: np.ndarray
    inputs: np.ndarray = None
    variable_layout: tuple = None
    trajectory_boundaries: tuple = None
    scaling: ScalingRecord = None

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        times = np.asarray(self.times, dtype=float)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "times", times)
        if states.ndim != 2:
            raise DimensionError(f"states must be 2D, got shape {states.shape}")
        n, k = states.shape
        if times.shape != (k,):
            raise DimensionError(
                f"times must have length {k}, got shape {times.shape}"
            )
        if self.inputs is not None:
            inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
            object.__setattr__(self, "inputs", inputs)
            if inputs.shape[1] != k:
                raise DimensionError("inputs and states column counts differ")
        if self.variable_layout is None:
            object.__setattr__(
                self, "variable_layout", (("state", 0, n, ""),)
            )
        else:
            layout = tuple(
                (str(nm), int(a), int(b), str(u))
                for nm, a, b, u in self.variable_layout
            )
            object.__setattr__(self, "variable_layout", layout)
            edges = [0]
            for _, a, b, _ in layout:
                if a != edges[-1] or b <= a:
                    raise DimensionError(
                        f"variable_layout does not partition rows 0..{n}"
                    )
                edges.append(b)
            if edges[-1] != n:
                raise DimensionError(
                    f"variable_layout does not partition rows 0..{n}"
                )
        if self.trajectory_boundaries is None:
            object.__setattr__(self, "trajectory_boundaries", (0, k))
        else:
            bounds = tuple(int(b) for b in self.trajectory_boundaries)
            object.__setattr__(self, "trajectory_boundaries", bounds)
            if bounds[0] != 0 or bounds[-1] != k or any(
                b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])
            ):
                raise DimensionError(
                    "trajectory_boundaries must increase from 0 to k"
                )
        for start, stop in self.trajectory_slices():
            dt = np.diff(times[start:stop])
            if dt.size and not np.all(dt > 0):
                raise DimensionError(
                    "times must be strictly increasing within each trajectory"
                )

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def k(self) -> int:
        return self.states.shape[1]

    @property
    def n_trajectories(self) -> int:
        return len(self.trajectory_boundaries) - 1

    def trajectory_slices(self):
        return [
            (a, b)
            for a, b in zip(
                self.trajectory_boundaries, self.trajectory_boundaries[1:]
            )
        ]

    def variable_block(self, name: str) -> np.ndarray:
        """Rows of ``states`` belonging to the named variable."""
        for nm, a, b, _ in self.variable_layout:
            if nm == name:
                return self.states[a:b]
        raise KeyError(f"no variable named {name!r}")

    @property
    def variable_names(self) -> tuple:
        return tuple(nm for nm, _, _, _ in self.variable_layout)


def _affine_for(block: np.ndarray, method: str):
    lo, hi = block.min(), block.max()
    if hi == lo:
        raise DegenerateScaleError(
            f"variable range is degenerate (max = min = {hi}); cannot scale"
        )
    if method == "maxabs":
        return 0.0, float(np.abs(block).max())
    if method == "center-maxabs":
        shift = float(block.mean())
        return shift, float(np.abs(block - shift).max())
    raise ValueError(f"unknown scaling method {method!r}")


def scale_variables(snapshots: SnapshotSet, scheme) -> SnapshotSet:
    """Apply a per-variable affine scaling and record its inverse.

    Parameters
    ----------
    snapshots : SnapshotSet
        Raw (unscaled) snapshots.
    scheme : str or dict
        Scaling method for every variable (``"maxabs"`` or
        ``"center-maxabs"``), or a mapping from variable name to method
        covering every variable block.

    Returns
    -------
    SnapshotSet
        New set with transformed states and a populated scaling record.
    """
    if snapshots.scaling is not None:
        raise ValueError("snapshots are already scaled")
    if isinstance(scheme, str):
        methods = {nm: scheme for nm in snapshots.variable_names}
    else:
        methods = dict(scheme)
        missing = set(snapshots.variable_names) - set(methods)
        if missing:
            raise ValueError(f"scheme does not cover variables {sorted(missing)}")
    scaled = snapshots.states.copy()
    names, shifts, scales = [], [], []
    for nm, a, b, _ in snapshots.variable_layout:
        shift, scale = _affine_for(snapshots.states[a:b], methods[nm])
        scaled[a:b] = (scaled[a:b] - shift) / scale
        names.append(nm)
        shifts.append(shift)
        scales.append(scale)
    record = ScalingRecord(
        names=tuple(names),
        shifts=tuple(shifts),
        scales=tuple(scales),
        scheme=methods[names[0]] if isinstance(scheme, str) else "per-variable",
    )
    return replace(snapshots, states=scaled, scaling=record)


def apply_scaling(states, layout, record: ScalingRecord):
    """Replay a recorded scaling on a raw state array."""
    out = np.array(states, dtype=float, copy=True)
    for (nm, a, b, _), shift, scale in zip(layout, record.shifts, record.scales):
        out[a:b] = (out[a:b] - shift) / scale
    return out


_apply_scaling = apply_scaling


def unscale_states(states, layout, record: ScalingRecord):
    """Invert :func:`scale_variables` on a raw state array."""
    out = np.array(states, dtype=float, copy=True)
    for (nm, a, b, _), shift, scale in zip(layout, record.shifts, record.scales):
        out[a:b] = out[a:b] * scale + shift
    return out


@dataclass(frozen=True)
class ReducedBasis:
    """Orthonormal POD basis with the full singular value list.

    ``V`` holds the leading left singular vectors of the (scaled) snapshot
    matrix; ``singular_values`` keeps the entire non-increasing spectrum for
    decay diagnostics.
    """

    V: np.ndarray
    singular_values: np.ndarray
    scaling: ScalingRecord = None
    variable_layout: tuple = None

    def __post_init__(self):
        V = np.asarray(self.V, dtype=float)
        object.__setattr__(self, "V", V)
        sv = np.asarray(self.singular_values, dtype=float)
        object.__setattr__(self, "singular_values", sv)
        if np.any(sv < 0) or np.any(np.diff(sv) > 0):
            raise ValueError("singular values must be non-increasing and >= 0")
        gram = V.T @ V
        if np.abs(gram - np.eye(V.shape[1])).max() > ORTHO_TOL:
            raise ValueError("basis columns are not orthonormal to tolerance")

    @property
    def n(self) -> int:
        return self.V.shape[0]

    @property
    def r(self) -> int:
        return self.V.shape[1]

    def truncate(self, r: int) -> "ReducedBasis":
        """Basis of the leading ``r <= self.r`` modes (same SVD)."""
        if not 1 <= r <= self.r:
            raise ValueError(f"cannot truncate rank-{self.r} basis to r={r}")
        return ReducedBasis(
            V=self.V[:, :r],
            singular_values=self.singular_values,
            scaling=self.scaling,
            variable_layout=self.variable_layout,
        )

    def rank_for_energy(self, threshold: float) -> int:
        """Smallest r capturing at least ``threshold`` of the squared
        singular value mass (helper; rank choice stays with the caller)."""
        energy = np.cumsum(self.singular_values**2)
        energy /= energy[-1]
        return int(np.searchsorted(energy, threshold) + 1)


def compute_pod(snapshots: SnapshotSet, r: int) -> ReducedBasis:
    """Leading-``r`` POD basis of a snapshot set via exact dense SVD.

    Raises
    ------
    RankDeficientError
        If ``r`` exceeds the numerical rank of the snapshot matrix.
    """
    Q = snapshots.states
    if not 1 <= r <= min(Q.shape):
        raise DimensionError(
            f"need 1 <= r <= min(n, k) = {min(Q.shape)}, got r={r}"
        )
    U, s, _ = np.linalg.svd(Q, full_matrices=False)
    rank = int(np.sum(s > s[0] * max(Q.shape) * np.finfo(float).eps))
    if r > rank:
        raise RankDeficientError(
            f"snapshot matrix has numerical rank {rank} < requested r={r}"
        )
    return ReducedBasis(
        V=U[:, :r],
        singular_values=s,
        scaling=snapshots.scaling,
        variable_layout=snapshots.variable_layout,
    )


def project(basis: ReducedBasis, snapshots) -> np.ndarray:
    """Reduced coordinates ``V.T @ Q`` of snapshots (scaling replayed first).

    ``snapshots`` may be a :class:`SnapshotSet` (raw or scaled with the same
    record as the basis) or a raw (n, k) / (n,) array.
    """
    if isinstance(snapshots, SnapshotSet):
        states = snapshots.states
        if snapshots.scaling is None and basis.scaling is not None:
            states = _apply_scaling(
                states, snapshots.variable_layout, basis.scaling
            )
        elif snapshots.scaling != basis.scaling:
            raise ValueError("snapshot scaling does not match basis scaling")
    else:
        states = np.asarray(snapshots, dtype=float)
        if basis.scaling is not None:
            layout = basis.variable_layout or ((None, 0, basis.n, None),)
            states = _apply_scaling(
                states.reshape(basis.n, -1), layout, basis.scaling
            ).reshape(states.shape)
    if states.shape[0] != basis.n:
        raise DimensionError(
            f"state dimension {states.shape[0]} != basis dimension {basis.n}"
        )
    return basis.V.T @ states


def reconstruct(basis: ReducedBasis, Qhat: np.ndarray) -> np.ndarray:
    """Map reduced coordinates back to the raw state space (unscale last)."""
    Qhat = np.asarray(Qhat, dtype=float)
    if Qhat.shape[0] != basis.r:
        raise DimensionError(
            f"reduced dimension {Qhat.shape[0]} != basis rank {basis.r}"
        )
    states = basis.V @ Qhat
    if basis.scaling is not None:
        layout = basis.variable_layout or ((None, 0, basis.n, None),)
        states = unscale_states(
            states.reshape(basis.n, -1), layout, basis.scaling
        ).reshape(states.shape)
    return states


# Snapshot persistence ========================================================
def save_snapshots_csv(snapshots: SnapshotSet, path):
    """CSV export: header row of times, then one row per degree of freedom.

    Layout/boundary metadata is not representable in CSV; use the binary
    container for lossless persistence. Values are printed with 17
    significant digits so float64 entries round-trip exactly.
    """
    table = np.vstack([snapshots.times[None, :], snapshots.states])
    np.savetxt(path, table, delimiter=",", fmt="%.17g")


def load_snapshots_csv(path) -> SnapshotSet:
    table = np.loadtxt(path, delimiter=",", ndmin=2)
    return SnapshotSet(states=table[1:], times=table[0])


def save_snapshots_binary(snapshots: SnapshotSet, path):
    """Lossless binary export (documented container; bit-exact round trip)."""
    meta = {
        "kind": "snapshots",
        "n": snapshots.n,
        "k": snapshots.k,
        "n_trajectories": snapshots.n_trajectories,
        "variable_layout": [list(v) for v in snapshots.variable_layout],
        "trajectory_boundaries": list(snapshots.trajectory_boundaries),
        "scaling": None
        if snapshots.scaling is None
        else snapshots.scaling.as_dict(),
    }
    arrays = {"states": snapshots.states, "times": snapshots.times}
    if snapshots.inputs is not None:
        arrays["inputs"] = snapshots.inputs
    _containers.write_container(path, meta, arrays)


def load_snapshots_binary(path) -> SnapshotSet:
    meta, arrays = _containers.read_container(path)
    if meta.get("kind") != "snapshots":
        raise DataFormatError(f"{path}: not a snapshot container")
    return SnapshotSet(
        states=arrays["states"],
        times=arrays["times"],
        inputs=arrays.get("inputs"),
        variable_layout=tuple(tuple(v) for v in meta["variable_layout"]),
        trajectory_boundaries=tuple(meta["trajectory_boundaries"]),
        scaling=None
        if meta["scaling"] is None
        else ScalingRecord.from_dict(meta["scaling"]),
    )


def save_basis(basis: ReducedBasis, path):
    """Persist a reduced basis (V, spectrum, scaling, layout)."""
    meta = {
        "kind": "basis",
        "n": basis.n,
        "r": basis.r,
        "variable_layout": None
        if basis.variable_layout is None
        else [list(v) for v in basis.variable_layout],
        "scaling": None if basis.scaling is None else basis.scaling.as_dict(),
    }
    _containers.write_container(
        path, meta, {"V": basis.V, "singular_values": basis.singular_values}
    )


def load_basis(path) -> ReducedBasis:
    meta, arrays = _containers.read_container(path)
    if meta.get("kind") != "basis":
        raise DataFormatError(f"{path}: not a basis container")
    return ReducedBasis(
        V=arrays["V"],
        singular_values=arrays["singular_values"],
        scaling=None
        if meta["scaling"] is None
        else ScalingRecord.from_dict(meta["scaling"]),
        variable_layout=None
        if meta["variable_layout"] is None
        else tuple(tuple(v) for v in meta["variable_layout"]),
    )
