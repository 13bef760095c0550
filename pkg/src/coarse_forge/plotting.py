"""PNG figures from the CSV files an experiment writes.

Kept separate from the runner: it only reads CSVs, so it can be pointed at
any output directory after the fact.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _read(path):
    return np.genfromtxt(path, delimiter=",", names=True, dtype=float, missing_values="NA", filling_values=np.nan)


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def plot_per_path(path, out):
    d = _read(path)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    e = np.atleast_1d(d["sup_error2"])
    ax.hist(e, bins=min(60, max(5, e.size // 20)), color="0.4")
    ax.axvline(e.mean(), color="C3", label=f"mean {e.mean():.3g}")
    ax.set_xlabel(r"$\sup_t |\xi(X_t) - Z_t|^2$")
    ax.set_ylabel("paths")
    ax.legend()
    return _save(fig, out)


def plot_scaling(path, out):
    d = _read(path)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.errorbar(d["eps"], d["mean_sup_error2"], yerr=3 * d["se"], fmt="o-", capsize=3)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel(r"$\varepsilon$")
    ax.set_ylabel("mean sup error$^2$ (3 SE bars)")
    return _save(fig, out)


def plot_growth(path, out):
    d = _read(path)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.errorbar(d["T"], d["mean_sup_error2"], yerr=3 * d["se"], fmt="o-", capsize=3)
    ax.set_xlabel("T")
    ax.set_ylabel("mean sup error$^2$")
    return _save(fig, out)


def plot_profile(path, out):
    d = _read(path)
    fig, ax = plt.subplots(1, 2, figsize=(8, 3.5))
    ax[0].plot(d["z"], d["b_hat"], ".")
    ax[0].set_xlabel("z")
    ax[0].set_ylabel(r"$\hat b(z)$")
    ax[1].plot(d["z"], d["sigma2_hat"], ".")
    ax[1].set_xlabel("z")
    ax[1].set_ylabel(r"$\hat\sigma^2(z)$")
    return _save(fig, out)


def plot_poisson(path, out):
    d = _read(path)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(d["y"], d["u"], label="u")
    if np.any(np.isfinite(d["u_ref"])):
        ax.plot(d["y"], d["u_ref"], "--", label="reference")
    ax.set_xlabel("y")
    ax.legend()
    return _save(fig, out)


def plot_poincare(path, out):
    d = _read(path)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(d["z"], d["alpha"], "o-", label="R")
    if np.any(np.isfinite(d["alpha_wide_R"])):
        ax.plot(d["z"], d["alpha_wide_R"], "x--", label="1.2 R")
    ax.set_xlabel("z")
    ax.set_ylabel(r"level-set $\alpha$")
    ax.legend()
    return _save(fig, out)


def plot_z_final(path, out):
    d = _read(path)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(d["z_T"], bins=60, density=True, color="0.5")
    ax.set_xlabel(r"$Z_T$")
    return _save(fig, out)


def plot_random_clock(path, out):
    d = _read(path)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.scatter(d["sup_error2_standard"], d["sup_error2_random_clock"], s=6)
    ax.set_xlabel("standard coupling")
    ax.set_ylabel("random-clock coupling")
    return _save(fig, out)


PLOTTERS = {
    "per_path.csv": plot_per_path,
    "scaling.csv": plot_scaling,
    "growth.csv": plot_growth,
    "profile.csv": plot_profile,
    "poisson.csv": plot_poisson,
    "poincare.csv": plot_poincare,
    "z_final.csv": plot_z_final,
    "random_clock.csv": plot_random_clock,
}


def plot_directory(directory) -> list:
    """Render a PNG next to every recognized CSV in ``directory``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"no such directory: {directory}")
    written = []
    for name, fn in PLOTTERS.items():
        src = directory / name
        if src.exists():
            written.append(fn(src, src.with_suffix(".png")))
    return written
