import time

import numpy as np
import pytest

from bayesrom import euler, pod, regselect
from bayesrom import regression as reg
from bayesrom.tensorops import StructureFlags

#: Pipeline settings shared by the acceptance runs (matching the CLI
#: defaults for the full-scale experiment).
FULL_SETTINGS = {
    "noise_level": 0.05,
    "seed": 0,
    "rank": 9,
    "window": 13,
    "initial_lambda": 50.0,
    "tolerance": 1e-3,
    "bound_margin": 1.25,
    "n_draws": 100,
    "output_stride": 10,
}


def build_pipeline(n_ics=64, ic_stride=1, rank=9, settings=FULL_SETTINGS):
    """Generate a dataset and assemble everything up to the regression."""
    timings = {}
    config = euler.EulerConfig()
    t0 = time.perf_counter()
    dataset = euler.generate_dataset(
        config,
        euler.NoiseSpec(level=settings["noise_level"], seed=settings["seed"]),
        n_ics=64 if ic_stride > 1 else n_ics,
        output_stride=settings["output_stride"],
    )
    training, truth = dataset["training"], dataset["truth"]
    if ic_stride > 1:
        keep = list(range(0, 64, ic_stride))[:n_ics]
        k_per = training.k // 64
        cols = np.concatenate(
            [np.arange(i * k_per, (i + 1) * k_per) for i in keep]
        )
        training = pod.SnapshotSet(
            states=training.states[:, cols],
            times=training.times[cols],
            variable_layout=training.variable_layout,
            trajectory_boundaries=tuple(k_per * i for i in range(len(keep) + 1)),
        )
        t_per = truth.k // 64
        tcols = np.concatenate(
            [np.arange(i * t_per, (i + 1) * t_per) for i in keep]
        )
        truth = pod.SnapshotSet(
            states=truth.states[:, tcols],
            times=truth.times[tcols],
            variable_layout=truth.variable_layout,
            trajectory_boundaries=tuple(t_per * i for i in range(len(keep) + 1)),
        )
    timings["generate"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    lifted = euler.lift(training, floors=dataset["lift_floors"])
    scaled = pod.scale_variables(lifted, "maxabs")
    basis = pod.compute_pod(scaled, rank)
    Qhat = pod.project(basis, scaled)
    R = euler.estimate_derivatives(
        Qhat,
        scaled.times,
        method="localpoly",
        boundaries=scaled.trajectory_boundaries,
        window=settings["window"],
    )
    flags = StructureFlags.quadratic_only()
    data = reg.RegressionData(
        D=reg.build_data_matrix(Qhat, flags=flags), R=R, flags=flags
    )
    timings["prepare"] = time.perf_counter() - t0

    # reduced initial conditions from the noisy first training snapshots
    starts = training.trajectory_boundaries[:-1]
    init = pod.SnapshotSet(
        states=training.states[:, list(starts)],
        times=np.zeros(len(starts)),
        variable_layout=training.variable_layout,
        trajectory_boundaries=tuple(range(len(starts) + 1)),
    )
    Q0 = pod.project(basis, euler.lift(init, floors=dataset["lift_floors"]))

    return {
        "config": config,
        "dataset": dataset,
        "training": training,
        "truth": truth,
        "scaled": scaled,
        "basis": basis,
        "Qhat": Qhat,
        "R": R,
        "data": data,
        "Q0": Q0,
        "flags": flags,
        "timings": timings,
        "settings": dict(settings),
    }


@pytest.fixture(scope="session")
def euler_full():
    """Paper-scale pipeline: 64 initial conditions, k = 64,000."""
    state = build_pipeline(n_ics=64)
    t0 = time.perf_counter()
    result = regselect.fixed_point_select(
        state["data"],
        regselect.FixedPointConfig(
            initial_lambdas=FULL_SETTINGS["initial_lambda"],
            tolerance=FULL_SETTINGS["tolerance"],
            max_iterations=100,
        ),
    )
    state["timings"]["fixed_point"] = time.perf_counter() - t0
    state["selection"] = result
    state["posterior"] = result.posterior
    return state


@pytest.fixture(scope="session")
def euler_smoke():
    """Reduced smoke variant: 8 initial conditions spanning the design."""
    state = build_pipeline(n_ics=8, ic_stride=9)
    t0 = time.perf_counter()
    result = regselect.fixed_point_select(
        state["data"],
        regselect.FixedPointConfig(
            initial_lambdas=FULL_SETTINGS["initial_lambda"],
            tolerance=FULL_SETTINGS["tolerance"],
            max_iterations=100,
        ),
    )
    state["timings"]["fixed_point"] = time.perf_counter() - t0
    state["selection"] = result
    state["posterior"] = result.posterior
    return state
