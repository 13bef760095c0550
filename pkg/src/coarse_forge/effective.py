"""Effective coefficients by conditional expectation under the invariant measure.

For a coarse map ``xi`` the effective drift and diffusion are

    b(z)       = E_mu[ (T F)(X)            | xi(X) = z ]
    sigma^2(z) = E_mu[ (T A T^T)(X)        | xi(X) = z ]

They are either supplied in closed form by the model or estimated from
equilibrium samples with a binned conditional mean.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .models import CoarseMap, SdeModel
from .sampling import EquilibriumSample

MIN_COUNT = 50


class EstimationError(ValueError):
    pass


@dataclass(frozen=True)
class ConditionalProfile:
    z: np.ndarray
    edges: np.ndarray
    b_hat: np.ndarray
    sigma2_hat: np.ndarray
    counts: np.ndarray
    b_std: np.ndarray
    valid: np.ndarray
    period: Optional[float] = None

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["z", "b_hat", "sigma2_hat", "count"])
            for z, b, s, c in zip(self.z, self.b_hat, self.sigma2_hat, self.counts):
                w.writerow([_fmt(z), _fmt(b), _fmt(s), int(c)])


def _fmt(x):
    return format(float(x), ".17g")


@dataclass(frozen=True)
class EffectiveModel:
    """Effective coefficients on R^k.

    ``b`` maps ``(n, k) -> (n, k)`` and ``sigma`` maps ``(n, k) -> (n, k, k)``.
    ``z_range`` (k = 1 only) is the interval outside which estimated
    coefficients are held constant; ``period`` wraps queries on a torus.
    """

    b: Callable[[np.ndarray], np.ndarray]
    sigma: Callable[[np.ndarray], np.ndarray]
    L_b: float
    L_sigma: float
    k: int = 1
    provenance: str = "analytic"
    profile: Optional[ConditionalProfile] = None
    z_range: Optional[tuple] = None
    period: Optional[float] = None

    def drift(self, z):
        z = np.asarray(z, dtype=float)
        if self.period is not None:
            z = np.mod(z, self.period)
        return self.b(z)

    def diffusion(self, z):
        z = np.asarray(z, dtype=float)
        if self.period is not None:
            z = np.mod(z, self.period)
        return self.sigma(z)

    def clamped_count(self, z) -> int:
        """Number of queries that fall outside the estimated range."""
        if self.z_range is None or self.period is not None:
            return 0
        z = np.asarray(z, dtype=float)
        lo, hi = self.z_range
        return int(np.count_nonzero((z < lo) | (z > hi)))


def projected_coefficients(model: SdeModel, cmap: CoarseMap, x):
    """Projected drift ``T F(x)`` and diffusion ``T A(x) T^T`` at points x."""
    F = model.drift(x)
    A = model.diffusion_matrix(x)
    T = cmap.T
    return F @ T.T, np.einsum("ki,nij,lj->nkl", T, A, T)


def estimate_conditional(
    sample: EquilibriumSample,
    model: SdeModel,
    cmap: CoarseMap,
    edges,
    min_count: int = MIN_COUNT,
) -> ConditionalProfile:
    """Binned conditional means of ``T F`` and ``|T Sigma|^2`` given ``xi``."""
    if cmap.k != 1:
        raise EstimationError("binned conditional estimation needs a scalar coarse map")
    edges = np.asarray(edges, dtype=float)
    if edges.ndim != 1 or edges.size < 2:
        raise EstimationError("z_grid must contain at least two bin edges")
    if np.any(np.diff(edges) <= 0):
        raise EstimationError("bin edges must be strictly increasing")
    n_bins = edges.size - 1
    pts = sample.points
    if pts.shape[0] < 10 * n_bins:
        raise EstimationError(
            f"need at least {10 * n_bins} samples for {n_bins} bins, got {pts.shape[0]}"
        )
    period = model.domain.period if model.domain.is_torus else None
    # per-bin partial sums, accumulated chunk by chunk
    cnt = np.zeros(n_bins)
    sb = np.zeros(n_bins)
    sbb = np.zeros(n_bins)
    ss = np.zeros(n_bins)
    for lo in range(0, pts.shape[0], 262144):
        x = pts[lo : lo + 262144]
        z = cmap(x)[:, 0]
        if period is not None:
            z = np.mod(z, period)
        f1, g = projected_coefficients(model, cmap, x)
        idx = np.searchsorted(edges, z, side="right") - 1
        ok = (idx >= 0) & (idx < n_bins)
        idx = idx[ok]
        f1 = f1[ok, 0]
        cnt += np.bincount(idx, minlength=n_bins)
        sb += np.bincount(idx, weights=f1, minlength=n_bins)
        sbb += np.bincount(idx, weights=f1 * f1, minlength=n_bins)
        ss += np.bincount(idx, weights=g[ok, 0, 0], minlength=n_bins)
    valid = cnt >= min_count
    if not np.any(valid):
        raise EstimationError("every bin has fewer than min_count samples")
    with np.errstate(invalid="ignore", divide="ignore"):
        b_hat = np.where(cnt > 0, sb / cnt, np.nan)
        s2 = np.where(cnt > 0, ss / cnt, np.nan)
        var = np.where(cnt > 1, (sbb - cnt * b_hat**2) / (cnt - 1), np.nan)
    return ConditionalProfile(
        z=0.5 * (edges[:-1] + edges[1:]),
        edges=edges,
        b_hat=b_hat,
        sigma2_hat=s2,
        counts=cnt.astype(int),
        b_std=np.sqrt(np.maximum(var, 0.0)),
        valid=valid,
        period=period,
    )


def effective_from_profile(profile: ConditionalProfile) -> EffectiveModel:
    """Piecewise-linear effective coefficients through the valid bin centers."""
    zc = profile.z[profile.valid]
    if zc.size < 2:
        raise EstimationError("need at least two valid bins")
    bv = profile.b_hat[profile.valid]
    sv = np.sqrt(np.maximum(profile.sigma2_hat[profile.valid], 0.0))
    L_b = float(np.max(np.abs(np.diff(bv) / np.diff(zc))))
    L_s = float(np.max(np.abs(np.diff(sv) / np.diff(zc))))

    def b(z):
        z = np.asarray(z, dtype=float)
        return np.interp(z[..., 0], zc, bv)[..., None]

    def sigma(z):
        z = np.asarray(z, dtype=float)
        return np.interp(z[..., 0], zc, sv)[..., None, None]

    return EffectiveModel(
        b=b,
        sigma=sigma,
        L_b=L_b,
        L_sigma=L_s,
        k=1,
        provenance="estimated",
        profile=profile,
        z_range=(float(zc[0]), float(zc[-1])),
        period=profile.period,
    )


def analytic_effective(model: SdeModel) -> EffectiveModel:
    """Wrap the model's closed-form effective coefficients."""
    ae = model.analytic_effective
    if ae is None:
        raise EstimationError(f"model {model.name!r} has no closed-form effective coefficients")
    return EffectiveModel(
        b=ae.b,
        sigma=ae.sigma,
        L_b=ae.L_b,
        L_sigma=ae.L_sigma,
        k=1,
        provenance="analytic",
        period=model.domain.period if model.domain.is_torus else None,
    )
