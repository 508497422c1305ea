"""Command-line pipeline: generate | train | select-reg | predict | stats.

Each command reads a JSON config file (``--print-schema`` documents it),
writes CSV/JSON outputs plus rendered figures into its output directory, and
is deterministic given the same config and seed (manifests carry a timestamp;
everything else is byte-identical across reruns).

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

__all__ = ["main", "PipelineConfig", "CONFIG_SCHEMA"]

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import _containers, euler, figures, pod, regselect, rom
from . import regression as reg
from .errors import (
    BayesromError,
    ConvergenceError,
    DataFormatError,
    DegenerateScaleError,
    DimensionError,
    FomBlowupError,
    NotSPDError,
    RankDeficientError,
    StabilityError,
)
from .tensorops import StructureFlags

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

_DATA_ERRORS = (
    DataFormatError,
    DimensionError,
    DegenerateScaleError,
    OSError,
    KeyError,
    json.JSONDecodeError,
)
_NUMERICAL_ERRORS = (
    NotSPDError,
    RankDeficientError,
    ConvergenceError,
    StabilityError,
    FomBlowupError,
    np.linalg.LinAlgError,
)

CONFIG_SCHEMA = """\
bayesrom pipeline config (JSON). All keys optional unless marked required;
defaults shown. CLI flags override file values.

{
  "seed": 0,                     // root seed for all randomness
  "dataset": {                   // data generator settings
    "n_cells": 200,              // grid cells per variable
    "length": 2.0,               // periodic domain length [m]
    "dt": 1e-05,                 // full-order time step [s]
    "gamma": 1.4,                // heat capacity ratio
    "t0": 0.0, "t_final": 0.03,  // full time horizon [s]
    "train_cutoff": 0.01,        // training snapshots cover [t0, cutoff)
    "n_ics": 64,                 // how many of the 64 initial conditions
    "noise_level": 0.05,         // range-proportional noise level in [0, 1)
    "output_stride": 10          // truth grid keeps every n-th step
  },
  "rank": 9,                     // POD basis size r (required for train)
  "scaling": "maxabs",           // per-variable scaling: maxabs | center-maxabs
  "structure": {                 // reduced-model blocks
    "linear": false, "quadratic": true, "constant": false, "input_dim": 0
  },
  "derivative": {
    "method": "localpoly",       // localpoly (noise-robust) | fd4
    "window": 13, "degree": 2    // localpoly settings
  },
  "regularization": {
    "method": "fixed-point",     // fixed-point | error-based
    "initial_lambda": 50.0,      // fixed-point start value
    "tolerance": 0.001,          // fixed-point relative-change tolerance
    "max_iterations": 100,
    "grid_min": 0.01,            // error-based: log grid bounds and size
    "grid_max": 1e6,
    "grid_size": 9,
    "parameterization": "one",   // error-based: one | two
    "bound_margin": 1.25         // stability bound factor tau
  },
  "ensemble": {
    "n_draws": 100,              // posterior samples
    "integrator": "rk4",         // rk4 (batched, on the output grid) | rk45
    "bound_margin": 1.25         // tau for the prediction stability bound
  },
  "probes": {                    // where band time series are reported
    "x": [0.0, 0.6666666666666666, 1.3333333333333333],
    "variables": ["velocity", "pressure", "specific_volume"]
  },
  "pointwise_ics": [0]           // stats: trajectories with pointwise traces
}
"""

_DEFAULTS = {
    "seed": 0,
    "dataset": {
        "n_cells": 200,
        "length": 2.0,
        "dt": 1e-5,
        "gamma": 1.4,
        "t0": 0.0,
        "t_final": 0.03,
        "train_cutoff": 0.01,
        "n_ics": 64,
        "noise_level": 0.05,
        "output_stride": 10,
    },
    "rank": 9,
    "scaling": "maxabs",
    "structure": {
        "linear": False,
        "quadratic": True,
        "constant": False,
        "input_dim": 0,
    },
    "derivative": {"method": "localpoly", "window": 13, "degree": 2},
    "regularization": {
        "method": "fixed-point",
        "initial_lambda": 50.0,
        "tolerance": 1e-3,
        "max_iterations": 100,
        "grid_min": 1e-2,
        "grid_max": 1e6,
        "grid_size": 9,
        "parameterization": "one",
        "bound_margin": 1.25,
    },
    "ensemble": {"n_draws": 100, "integrator": "rk4", "bound_margin": 1.25},
    "probes": {
        "x": [0.0, 2.0 / 3.0, 4.0 / 3.0],
        "variables": ["velocity", "pressure", "specific_volume"],
    },
    "pointwise_ics": [0],
}


def _merge(defaults, overrides):
    out = dict(defaults)
    for key, value in (overrides or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


class PipelineConfig:
    """Validated pipeline settings (defaults merged under the config file)."""

    def __init__(self, raw: dict = None):
        self.raw = _merge(_DEFAULTS, raw or {})
        structure = self.raw["structure"]
        self.flags = StructureFlags(
            has_linear=bool(structure["linear"]),
            has_quadratic=bool(structure["quadratic"]),
            input_dim=int(structure["input_dim"]),
            has_constant=bool(structure["constant"]),
        )
        ds = self.raw["dataset"]
        self.euler_config = euler.EulerConfig(
            n_cells=int(ds["n_cells"]),
            length=float(ds["length"]),
            dt=float(ds["dt"]),
            gamma=float(ds["gamma"]),
            t0=float(ds["t0"]),
            t_final=float(ds["t_final"]),
            train_cutoff=float(ds["train_cutoff"]),
        )
        self.noise = euler.NoiseSpec(
            level=float(ds["noise_level"]), seed=int(self.raw["seed"])
        )
        if int(self.raw["rank"]) < 1:
            raise ValueError("rank must be >= 1")

    @classmethod
    def from_file(cls, path):
        with open(path, "r", encoding="utf-8") as f:
            return cls(json.load(f))

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def rank(self) -> int:
        return int(self.raw["rank"])


def _utc_now():
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=1, sort_keys=False)
        f.write("\n")


def _read_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _ensure_dir(path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    probe = path / ".write-test"
    probe.write_bytes(b"")  # raises PermissionError on read-only targets
    probe.unlink()
    return path


def _probe_rows(config: PipelineConfig, layout):
    """Row indices and labels of the configured probe locations."""
    dx = config.euler_config.dx
    starts = {name: a for name, a, b, _ in layout}
    rows, labels = [], []
    for var in config["probes"]["variables"]:
        if var not in starts:
            raise DataFormatError(f"no variable {var!r} in dataset layout")
        for x in config["probes"]["x"]:
            cell = int(round(float(x) / dx)) % config.euler_config.n_cells
            rows.append(starts[var] + cell)
            labels.append(f"{var}_x{float(x):.3f}")
    return np.array(rows), labels


# generate ====================================================================
def cmd_generate(config: PipelineConfig, output_dir, render_figures=True) -> int:
    out = _ensure_dir(output_dir)
    ds = config["dataset"]
    dataset = euler.generate_dataset(
        config.euler_config,
        config.noise,
        n_ics=int(ds["n_ics"]),
        output_stride=int(ds["output_stride"]),
    )
    pod.save_snapshots_binary(dataset["training"], out / "training.bin")
    pod.save_snapshots_binary(dataset["truth"], out / "truth.bin")
    manifest = {
        "format": "bayesrom-dataset",
        "created": _utc_now(),
        "seed": config.seed,
        "noise_level": config.noise.level,
        "noise_free": config.noise.level == 0.0,
        "n_ics": int(ds["n_ics"]),
        "output_stride": int(ds["output_stride"]),
        "dataset_config": ds,
        "noise_sigmas": dataset["noise_sigmas"],
        "lift_floors": dataset["lift_floors"],
        "files": {"training": "training.bin", "truth": "truth.bin"},
    }
    _write_json(out / "manifest.json", manifest)

    if render_figures:
        training = dataset["training"]
        truth = dataset["truth"]
        lifted_noisy = euler.lift(
            training, gamma=config.euler_config.gamma,
            floors=dataset["lift_floors"],
        )
        lifted_truth = euler.lift(truth, gamma=config.euler_config.gamma)
        rows, labels = _probe_rows(config, lifted_noisy.variable_layout)
        a, b = training.trajectory_slices()[0]
        ta, tb = truth.trajectory_slices()[0]
        figures.plot_training_trajectory(
            training.times[a:b],
            [
                np.interp(
                    training.times[a:b],
                    truth.times[ta:tb],
                    lifted_truth.states[row, ta:tb],
                )
                for row in rows
            ],
            [lifted_noisy.states[row, a:b] for row in rows],
            labels,
            config.euler_config.train_cutoff,
            out / "training_trajectory.png",
        )
    print(
        f"generate: {dataset['training'].n_trajectories} trajectories, "
        f"k = {dataset['training'].k} training snapshots, "
        f"n = {dataset['training'].n} -> {out}"
    )
    return EXIT_OK


# shared loading ==============================================================
def _load_dataset(dataset_dir):
    dataset_dir = Path(dataset_dir)
    manifest = _read_json(dataset_dir / "manifest.json")
    if manifest.get("format") != "bayesrom-dataset":
        raise DataFormatError(f"{dataset_dir}: not a dataset directory")
    training = pod.load_snapshots_binary(
        dataset_dir / manifest["files"]["training"]
    )
    truth = pod.load_snapshots_binary(dataset_dir / manifest["files"]["truth"])
    return manifest, training, truth


def _prepare_regression(config: PipelineConfig, manifest, training):
    """Lift, scale, reduce, and differentiate the training data."""
    gamma = config.euler_config.gamma
    floors = manifest["lift_floors"]
    lifted = euler.lift(training, gamma=gamma, floors=floors)
    scaled = pod.scale_variables(lifted, config["scaling"])
    basis = pod.compute_pod(scaled, config.rank)
    Qhat = pod.project(basis, scaled)
    deriv = config["derivative"]
    R = euler.estimate_derivatives(
        Qhat,
        scaled.times,
        method=deriv["method"],
        boundaries=scaled.trajectory_boundaries,
        window=int(deriv["window"]),
        degree=int(deriv["degree"]),
    )
    D = reg.build_data_matrix(Qhat, flags=config.flags)
    data = reg.RegressionData(D=D, R=R, flags=config.flags)
    return basis, scaled, Qhat, data


def _select_regularization(config: PipelineConfig, Qhat, scaled, data):
    """Run the configured selection strategy; returns (info, lambdas_per_row)."""
    regcfg = config["regularization"]
    if regcfg["method"] == "fixed-point":
        fp_config = regselect.FixedPointConfig(
            initial_lambdas=float(regcfg["initial_lambda"]),
            tolerance=float(regcfg["tolerance"]),
            max_iterations=int(regcfg["max_iterations"]),
        )
        result = regselect.fixed_point_select(data, fp_config)
        info = {
            "method": "fixed-point",
            "converged": bool(result.converged),
            "n_iterations": int(result.n_iterations),
            "lambdas": result.lambdas.tolist(),
        }
        return info, result, list(result.lambdas)
    if regcfg["method"] == "error-based":
        bounds = scaled.trajectory_boundaries
        Qhats = [Qhat[:, a:b] for a, b in zip(bounds, bounds[1:])]
        times = [scaled.times[a:b] for a, b in zip(bounds, bounds[1:])]
        es_config = regselect.ErrorSearchConfig(
            grid=np.logspace(
                np.log10(float(regcfg["grid_min"])),
                np.log10(float(regcfg["grid_max"])),
                int(regcfg["grid_size"]),
            ),
            trial_horizon=config.euler_config.t_final,
            parameterization=regcfg["parameterization"],
            bound_margin=float(regcfg["bound_margin"]),
        )
        result = regselect.error_based_select(Qhats, times, data, es_config)
        info = {
            "method": "error-based",
            "lambda_params": list(result.lambda_params),
            "training_error": result.training_error,
            "stability_bound": result.bound,
        }
        return info, result, [result.lambda_vector] * data.r
    raise DataFormatError(f"unknown regularization method {regcfg['method']!r}")


# train =======================================================================
def cmd_train(config: PipelineConfig, dataset_dir, output_dir, render_figures=True) -> int:
    manifest, training, _ = _load_dataset(dataset_dir)
    basis, scaled, Qhat, data = _prepare_regression(config, manifest, training)
    selection_info, selection, lambdas = _select_regularization(
        config, Qhat, scaled, data
    )
    posterior = reg.solve_posterior_all(data, lambdas)

    out = _ensure_dir(output_dir)
    posterior.save_json(out / "posterior.json")
    pod.save_basis(basis, out / "basis.bin")
    if selection_info["method"] == "fixed-point":
        regselect.write_fixed_point_trace_csv(
            selection, out / "fixed_point_trace.csv"
        )
    report = {
        "format": "bayesrom-train-report",
        "created": _utc_now(),
        "dataset": str(Path(dataset_dir).resolve()),
        "seed": config.seed,
        "r": config.rank,
        "d": data.d,
        "k": data.k,
        "structure": config["structure"],
        "scaling": config["scaling"],
        "derivative": config["derivative"],
        "gram_condition_estimate": data.condition_estimate(),
        "selection": selection_info,
        "lambda_per_row": [
            np.atleast_1d(lam).tolist() if np.ndim(lam) else float(lam)
            for lam in lambdas
        ],
        "noise_var_per_row": posterior.noise_variances().tolist(),
        "max_abs_reduced_state": float(np.abs(Qhat).max()),
        "stability_bound": float(
            config["ensemble"]["bound_margin"] * np.abs(Qhat).max()
        ),
        "files": {"posterior": "posterior.json", "basis": "basis.bin"},
    }
    _write_json(out / "train_report.json", report)

    if render_figures:
        figures.plot_singular_values(
            basis.singular_values, config.rank, out / "singular_values.png"
        )
        if selection_info["method"] == "fixed-point":
            figures.plot_fixed_point_trace(
                selection.lambdas_in, out / "fixed_point_trace.png"
            )
    summary = (
        f"train: r = {config.rank}, d = {data.d}, k = {data.k}, "
        f"method = {selection_info['method']}"
    )
    if "n_iterations" in selection_info:
        summary += (
            f", converged = {selection_info['converged']} "
            f"in {selection_info['n_iterations']} iterations"
        )
    print(summary + f" -> {out}")
    return EXIT_OK


# select-reg ==================================================================
def cmd_select_reg(config: PipelineConfig, dataset_dir, output_dir, render_figures=True) -> int:
    manifest, training, _ = _load_dataset(dataset_dir)
    basis, scaled, Qhat, data = _prepare_regression(config, manifest, training)
    selection_info, selection, _ = _select_regularization(
        config, Qhat, scaled, data
    )
    out = _ensure_dir(output_dir)
    if selection_info["method"] == "fixed-point":
        regselect.write_fixed_point_trace_csv(
            selection, out / "fixed_point_trace.csv"
        )
        if render_figures:
            figures.plot_fixed_point_trace(
                selection.lambdas_in, out / "fixed_point_trace.png"
            )
    else:
        with open(out / "search_evaluations.csv", "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["lambda_1", "lambda_2", "training_error"])
            for params, error in selection.evaluations:
                row = [repr(p) for p in params]
                if len(row) == 1:
                    row.append("")
                writer.writerow(row + [repr(error)])
    payload = {
        "format": "bayesrom-selection",
        "created": _utc_now(),
        "seed": config.seed,
        "r": config.rank,
        "selection": selection_info,
    }
    _write_json(out / "selection.json", payload)
    print(f"select-reg: {selection_info} -> {out}")
    return EXIT_OK


# predict =====================================================================
def cmd_predict(config: PipelineConfig, dataset_dir, train_dir, output_dir, render_figures=True) -> int:
    manifest, training, truth = _load_dataset(dataset_dir)
    train_dir = Path(train_dir)
    report = _read_json(train_dir / "train_report.json")
    posterior = reg.OperatorPosterior.load_json(
        train_dir / report["files"]["posterior"]
    )
    basis = pod.load_basis(train_dir / report["files"]["basis"])
    gamma = config.euler_config.gamma

    # reduced initial conditions from the (noisy) first training snapshots
    starts = training.trajectory_boundaries[:-1]
    init = pod.SnapshotSet(
        states=training.states[:, list(starts)],
        times=np.zeros(len(starts)),
        variable_layout=training.variable_layout,
        trajectory_boundaries=tuple(range(len(starts) + 1)),
    )
    lifted_init = euler.lift(
        init, gamma=gamma, floors=manifest["lift_floors"]
    )
    Q0 = pod.project(basis, lifted_init)  # (r, L)

    ens_cfg = config["ensemble"]
    n_draws = int(ens_cfg["n_draws"])
    bound = float(report["stability_bound"])
    samples = rom.sample_operators(posterior, n_draws, seed=config.seed)
    rows, labels = _probe_rows(config, basis.variable_layout)
    W = basis.V[rows, :]  # (n_probes, r)
    shifts = np.zeros(len(rows))
    scales = np.ones(len(rows))
    if basis.scaling is not None:
        for p, row in enumerate(rows):
            for (nm, a, b, _), shift, scale in zip(
                basis.variable_layout,
                basis.scaling.shifts,
                basis.scaling.scales,
            ):
                if a <= row < b:
                    shifts[p], scales[p] = shift, scale

    truth_slices = truth.trajectory_slices()
    out = _ensure_dir(output_dir)
    per_ic = []
    joint_stable = np.ones(n_draws, dtype=bool)
    L = len(starts)
    for ell in range(L):
        ta, tb = truth_slices[ell]
        grid = truth.times[ta:tb]
        ensemble = rom.ensemble_run(
            posterior,
            n_draws,
            Q0[:, ell],
            grid,
            stability_bound=bound,
            seed=config.seed,
            method=ens_cfg["integrator"],
            samples=samples,
        )
        joint_stable &= ensemble.stability_flags
        per_ic.append(int(ensemble.n_stable))

        kept = ensemble.trajectories[ensemble.stability_flags]
        probe_vals = np.einsum("pr,nrt->pnt", W, kept)  # (probe, draw, time)
        probe_mean = probe_vals.mean(axis=1) * scales[:, None] + shifts[:, None]
        probe_std = probe_vals.std(axis=1, ddof=0) * scales[:, None]
        probe_meanop = (
            W @ ensemble.mean_operator_trajectory
        ) * scales[:, None] + shifts[:, None]

        regime = np.where(
            grid < config.euler_config.train_cutoff, "train", "predict"
        )
        band_path = out / f"bands_ic{ell:03d}.csv"
        with open(band_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            header = ["time", "regime"]
            for label in labels:
                header += [f"{label}_mean", f"{label}_std", f"{label}_meanop"]
            writer.writerow(header)
            for j, t in enumerate(grid):
                row = [repr(float(t)), regime[j]]
                for p in range(len(labels)):
                    row += [
                        repr(float(probe_mean[p, j])),
                        repr(float(probe_std[p, j])),
                        repr(float(probe_meanop[p, j])),
                    ]
                writer.writerow(row)

        _containers.write_container(
            out / f"reduced_ic{ell:03d}.bin",
            {"kind": "reduced-prediction", "ic": ell, "n_stable": int(ensemble.n_stable)},
            {
                "times": grid,
                "mean": ensemble.pointwise_mean,
                "std": ensemble.pointwise_std,
                "meanop": ensemble.mean_operator_trajectory,
            },
        )
        if render_figures and ell == 0:
            series = {
                label: (probe_mean[p], probe_std[p], probe_meanop[p])
                for p, label in enumerate(labels)
            }
            figures.plot_probe_bands(
                grid,
                series,
                config.euler_config.train_cutoff,
                out / f"bands_ic{ell:03d}.png",
            )

    manifest_out = {
        "format": "bayesrom-prediction",
        "created": _utc_now(),
        "seed": config.seed,
        "n_draws": n_draws,
        "integrator": ens_cfg["integrator"],
        "stability_bound": bound,
        "train_cutoff": config.euler_config.train_cutoff,
        "lambda_per_row": report["lambda_per_row"],
        "stable_per_ic": per_ic,
        "n_stable_all_ics": int(joint_stable.sum()),
        "train_dir": str(train_dir.resolve()),
        "dataset_dir": str(Path(dataset_dir).resolve()),
        "probes": {"labels": labels, "rows": rows.tolist()},
        "pointwise_ics": list(config["pointwise_ics"]),
        "n_trajectories": L,
    }
    _write_json(out / "predict_manifest.json", manifest_out)
    print(
        f"predict: {n_draws} draws, stable on all trajectories: "
        f"{int(joint_stable.sum())}/{n_draws} -> {out}"
    )
    return EXIT_OK


# stats =======================================================================
def _read_bands_csv(path):
    with open(path, "r", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = list(reader)
    times = np.array([float(r[0]) for r in rows])
    regime = np.array([r[1] for r in rows])
    values = {
        name: np.array([float(r[j]) for r in rows])
        for j, name in enumerate(header)
        if j >= 2
    }
    return times, regime, values


def cmd_stats(prediction_dir, dataset_dir, output_dir, render_figures=True) -> int:
    prediction_dir = Path(prediction_dir)
    pred_manifest = _read_json(prediction_dir / "predict_manifest.json")
    if pred_manifest.get("format") != "bayesrom-prediction":
        raise DataFormatError(f"{prediction_dir}: not a prediction directory")
    manifest, training, truth = _load_dataset(dataset_dir)
    train_dir = Path(pred_manifest["train_dir"])
    report = _read_json(train_dir / "train_report.json")
    basis = pod.load_basis(train_dir / report["files"]["basis"])
    gamma = float(manifest["dataset_config"]["gamma"])
    cutoff = float(pred_manifest["train_cutoff"])

    lifted_truth = euler.lift(truth, gamma=gamma)
    if basis.scaling is not None:
        scaled_truth = pod.apply_scaling(
            lifted_truth.states, lifted_truth.variable_layout, basis.scaling
        )
    else:
        scaled_truth = lifted_truth.states
    labels = pred_manifest["probes"]["labels"]
    probe_rows = np.array(pred_manifest["probes"]["rows"])

    out = _ensure_dir(output_dir)
    L = pred_manifest["n_trajectories"]
    error_rows = []
    coverage_rows = []
    pooled = {"train": [0, 0], "predict": [0, 0]}
    pointwise_requested = set(pred_manifest.get("pointwise_ics", [0]))

    for ell in range(L):
        ta, tb = truth.trajectory_slices()[ell]
        grid = truth.times[ta:tb]
        meta, arrays = _containers.read_container(
            prediction_dir / f"reduced_ic{ell:03d}.bin"
        )
        if arrays["times"].shape != grid.shape or not np.allclose(
            arrays["times"], grid
        ):
            raise DataFormatError(
                f"prediction grid of trajectory {ell} does not match truth grid"
            )
        reconstructed = basis.V @ arrays["meanop"]  # scaled lifted space
        truth_block = scaled_truth[:, ta:tb]
        regime_mask = grid < cutoff
        row = {"trajectory": ell}
        for name, mask in (("train", regime_mask), ("predict", ~regime_mask)):
            diff = reconstructed[:, mask] - truth_block[:, mask]
            row[f"{name}_rel_error"] = float(
                np.linalg.norm(diff) / np.linalg.norm(truth_block[:, mask])
            )
        error_rows.append(row)

        times_b, regime_b, values = _read_bands_csv(
            prediction_dir / f"bands_ic{ell:03d}.csv"
        )
        if times_b.shape != grid.shape or not np.allclose(times_b, grid):
            raise DataFormatError(
                f"band grid of trajectory {ell} does not match truth grid"
            )
        truth_probes = lifted_truth.states[probe_rows][:, ta:tb]
        abs_errors, bands = [], []
        for p, label in enumerate(labels):
            mean = values[f"{label}_mean"]
            std = values[f"{label}_std"]
            abs_err = np.abs(truth_probes[p] - mean)
            abs_errors.append(abs_err)
            bands.append(3.0 * std)
            for name, mask in (
                ("train", regime_b == "train"),
                ("predict", regime_b == "predict"),
            ):
                inside = int((abs_err[mask] <= 3.0 * std[mask]).sum())
                total = int(mask.sum())
                pooled[name][0] += inside
                pooled[name][1] += total
        for name, mask in (
            ("train", regime_b == "train"),
            ("predict", regime_b == "predict"),
        ):
            err_stack = np.array(abs_errors)[:, mask]
            band_stack = np.array(bands)[:, mask]
            inside = int((err_stack <= band_stack).sum())
            total = err_stack.size
            coverage_rows.append(
                {
                    "trajectory": ell,
                    "regime": name,
                    "n_points": total,
                    "n_within": inside,
                    "coverage": inside / total if total else float("nan"),
                }
            )
        if ell in pointwise_requested:
            path = out / f"pointwise_ic{ell:03d}.csv"
            with open(path, "w", newline="", encoding="utf-8") as f:
                writer = csv.writer(f)
                header = ["time", "regime"]
                for label in labels:
                    header += [f"{label}_abs_error", f"{label}_band3std"]
                writer.writerow(header)
                for j, t in enumerate(grid):
                    line = [repr(float(t)), regime_b[j]]
                    for p in range(len(labels)):
                        line += [
                            repr(float(abs_errors[p][j])),
                            repr(float(bands[p][j])),
                        ]
                    writer.writerow(line)
            if render_figures:
                figures.plot_error_vs_band(
                    grid,
                    abs_errors,
                    bands,
                    cutoff,
                    labels,
                    out / f"pointwise_ic{ell:03d}.png",
                )

    with open(out / "errors.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["trajectory", "r", "method", "train_rel_error", "predict_rel_error"]
        )
        method = report["selection"]["method"]
        for row in error_rows:
            writer.writerow(
                [
                    row["trajectory"],
                    report["r"],
                    method,
                    repr(row["train_rel_error"]),
                    repr(row["predict_rel_error"]),
                ]
            )
        writer.writerow(
            [
                "mean",
                report["r"],
                method,
                repr(float(np.mean([r["train_rel_error"] for r in error_rows]))),
                repr(float(np.mean([r["predict_rel_error"] for r in error_rows]))),
            ]
        )
    with open(out / "coverage.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["trajectory", "regime", "n_points", "n_within", "coverage"])
        for row in coverage_rows:
            writer.writerow(
                [
                    row["trajectory"],
                    row["regime"],
                    row["n_points"],
                    row["n_within"],
                    repr(row["coverage"]),
                ]
            )
        for name in ("train", "predict"):
            inside, total = pooled[name]
            writer.writerow(
                ["all", name, total, inside, repr(inside / total if total else float("nan"))]
            )

    summary = {
        "format": "bayesrom-stats",
        "created": _utc_now(),
        "mean_train_rel_error": float(
            np.mean([r["train_rel_error"] for r in error_rows])
        ),
        "mean_predict_rel_error": float(
            np.mean([r["predict_rel_error"] for r in error_rows])
        ),
        "coverage_train": pooled["train"][0] / pooled["train"][1],
        "coverage_predict": pooled["predict"][0] / pooled["predict"][1],
        "stable_per_ic": pred_manifest["stable_per_ic"],
        "n_stable_all_ics": pred_manifest["n_stable_all_ics"],
        "n_draws": pred_manifest["n_draws"],
    }
    _write_json(out / "stats_summary.json", summary)
    print(
        "stats: mean rel error train = {:.4f}, predict = {:.4f}; "
        "coverage predict = {:.3f} -> {}".format(
            summary["mean_train_rel_error"],
            summary["mean_predict_rel_error"],
            summary["coverage_predict"],
            out,
        )
    )
    return EXIT_OK


# entry point =================================================================
class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(EXIT_USAGE)


def _build_parser():
    parser = _Parser(
        prog="bayesrom",
        description=(
            "Probabilistic reduced-order modeling pipeline: generate data, "
            "train operator posteriors, and propagate uncertainty."
        ),
    )
    parser.add_argument(
        "--print-schema",
        action="store_true",
        help="print the JSON config schema and exit",
    )
    sub = parser.add_subparsers(dest="command")

    def add_common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", help="JSON config file")
            p.add_argument("--seed", type=int, help="override the root seed")
            p.add_argument("--rank", type=int, help="override the POD rank")
        p.add_argument("--output", required=True, help="output directory")
        p.add_argument(
            "--no-figures", action="store_true", help="skip figure rendering"
        )

    p = sub.add_parser("generate", help="run the data generator")
    add_common(p)

    p = sub.add_parser("train", help="fit the operator posterior")
    add_common(p)
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument(
        "--method",
        choices=["fixed-point", "error-based"],
        help="override the regularization selection method",
    )

    p = sub.add_parser("select-reg", help="run regularization selection only")
    add_common(p)
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument(
        "--method",
        choices=["fixed-point", "error-based"],
        help="override the regularization selection method",
    )

    p = sub.add_parser("predict", help="sample the posterior and build bands")
    add_common(p)
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--train", required=True, help="training output directory")
    p.add_argument("--n-draws", type=int, help="override the ensemble size")

    p = sub.add_parser("stats", help="compare predictions against the truth")
    add_common(p, needs_config=False)
    p.add_argument("--prediction", required=True, help="prediction directory")
    p.add_argument("--dataset", required=True, help="dataset directory")
    return parser


def _config_from_args(args) -> PipelineConfig:
    if getattr(args, "config", None):
        config = PipelineConfig.from_file(args.config)
    else:
        config = PipelineConfig()
    if getattr(args, "seed", None) is not None:
        config.raw["seed"] = args.seed
        config = PipelineConfig(config.raw)
    if getattr(args, "rank", None) is not None:
        config.raw["rank"] = args.rank
        config = PipelineConfig(config.raw)
    if getattr(args, "method", None):
        config.raw["regularization"]["method"] = args.method
    if getattr(args, "n_draws", None) is not None:
        config.raw["ensemble"]["n_draws"] = args.n_draws
    return config


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.print_schema:
        print(CONFIG_SCHEMA)
        return EXIT_OK
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        render = not args.no_figures
        if args.command == "generate":
            config = _config_from_args(args)
            return cmd_generate(config, args.output, render)
        if args.command == "train":
            config = _config_from_args(args)
            return cmd_train(config, args.dataset, args.output, render)
        if args.command == "select-reg":
            config = _config_from_args(args)
            return cmd_select_reg(config, args.dataset, args.output, render)
        if args.command == "predict":
            config = _config_from_args(args)
            return cmd_predict(
                config, args.dataset, args.train, args.output, render
            )
        if args.command == "stats":
            return cmd_stats(args.prediction, args.dataset, args.output, render)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except _NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, BayesromError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
