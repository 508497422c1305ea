"""Matplotlib rendering of the pipeline's standard diagnostic figures.

Every CLI report path saves these next to its CSV output (PNG, Agg backend,
no display required). Styling is centralized here so the figures stay
uniform across commands.
"""

__all__ = [
    "plot_training_trajectory",
    "plot_singular_values",
    "plot_fixed_point_trace",
    "plot_probe_bands",
    "plot_error_vs_band",
    "plot_error_vs_rank",
]

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

matplotlib.rcParams.update(
    {
        "figure.figsize": (9.0, 4.5),
        "figure.dpi": 110,
        "font.size": 9,
        "axes.grid": True,
        "grid.alpha": 0.3,
        "lines.linewidth": 1.2,
        "savefig.bbox": "tight",
    }
)

_META = {"Software": "bayesrom"}  # fixed so PNG bytes are reproducible


def _save(fig, path):
    fig.savefig(path, metadata=_META)
    plt.close(fig)


def plot_training_trajectory(times, clean_rows, noisy_rows, labels, cutoff, path):
    """Clean signals with noisy observations overlaid at probe locations."""
    fig, axes = plt.subplots(1, len(labels), sharex=True)
    axes = np.atleast_1d(axes)
    for ax, clean, noisy, label in zip(axes, clean_rows, noisy_rows, labels):
        ax.plot(times, noisy, ".", ms=1.5, alpha=0.4, label="observed")
        ax.plot(times, clean, "k", label="clean")
        ax.axvline(cutoff, color="gray", ls=":", lw=1)
        ax.set_title(label)
        ax.set_xlabel("time [s]")
    axes[0].legend(loc="best", fontsize=7)
    _save(fig, path)


def plot_singular_values(singular_values, rank, path):
    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    sv = np.asarray(singular_values)
    ax.semilogy(np.arange(1, sv.size + 1), sv / sv[0], ".-")
    ax.axvline(rank, color="crimson", ls="--", lw=1, label=f"r = {rank}")
    ax.set_xlabel("mode")
    ax.set_ylabel("normalized singular value")
    ax.legend()
    _save(fig, path)


def plot_fixed_point_trace(lambdas_in, path):
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    lam = np.asarray(lambdas_in)
    for i in range(lam.shape[1]):
        ax.semilogy(lam[:, i], ".-", label=f"mode {i + 1}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("penalty")
    if lam.shape[1] <= 10:
        ax.legend(fontsize=6, ncol=2)
    _save(fig, path)


def plot_probe_bands(times, series, cutoff, path, truth=None):
    """Mean with a +/- 3 std band and the mean-operator trajectory per probe.

    ``series`` maps probe label -> (mean, std, meanop) arrays on ``times``;
    ``truth`` (optional) maps probe label -> reference values.
    """
    n = len(series)
    ncols = min(n, 3)
    nrows = (n + ncols - 1) // ncols
    fig, axes = plt.subplots(
        nrows, ncols, figsize=(4.0 * ncols, 2.8 * nrows), sharex=True
    )
    axes = np.atleast_1d(axes).ravel()
    for ax, (label, (mean, std, meanop)) in zip(axes, series.items()):
        ax.fill_between(
            times,
            mean - 3 * std,
            mean + 3 * std,
            alpha=0.3,
            color="tab:blue",
            label="mean ± 3 std",
        )
        ax.plot(times, mean, color="tab:blue", lw=1.0, label="sample mean")
        ax.plot(times, meanop, "--", color="tab:orange", lw=1.0, label="mean operators")
        if truth is not None and label in truth:
            ax.plot(times, truth[label], "k", lw=0.8, label="truth")
        ax.axvline(cutoff, color="gray", ls=":", lw=1)
        ax.set_title(label, fontsize=8)
        ax.set_xlabel("time [s]")
    axes[0].legend(fontsize=6)
    for ax in axes[len(series):]:
        ax.set_visible(False)
    _save(fig, path)


def plot_error_vs_band(times, abs_error, band, cutoff, labels, path):
    """Pointwise absolute error against the 3-std half width (log scale)."""
    n = len(labels)
    ncols = min(n, 3)
    nrows = (n + ncols - 1) // ncols
    fig, axes = plt.subplots(
        nrows, ncols, figsize=(4.0 * ncols, 2.8 * nrows), sharex=True
    )
    axes = np.atleast_1d(axes).ravel()
    for ax, err, width, label in zip(axes, abs_error, band, labels):
        ax.semilogy(times, np.maximum(err, 1e-300), label="|error|")
        ax.semilogy(times, np.maximum(width, 1e-300), label="3 std")
        ax.axvline(cutoff, color="gray", ls=":", lw=1)
        ax.set_title(label, fontsize=8)
        ax.set_xlabel("time [s]")
    axes[0].legend(fontsize=6)
    for ax in axes[n:]:
        ax.set_visible(False)
    _save(fig, path)


def plot_error_vs_rank(rows, path):
    """Average relative error against basis size, per selection method and
    regime. ``rows`` is a sequence of (method, r, train_error, pred_error)."""
    fig, axes = plt.subplots(1, 2, figsize=(9.0, 3.6), sharey=True)
    methods = sorted({row[0] for row in rows})
    for method in methods:
        rs = [row[1] for row in rows if row[0] == method]
        tr = [row[2] for row in rows if row[0] == method]
        pr = [row[3] for row in rows if row[0] == method]
        axes[0].semilogy(rs, tr, ".-", label=method)
        axes[1].semilogy(rs, pr, ".-", label=method)
    axes[0].set_title("training regime")
    axes[1].set_title("prediction regime")
    for ax in axes:
        ax.set_xlabel("basis size r")
    axes[0].set_ylabel("average relative error")
    axes[0].legend()
    _save(fig, path)
