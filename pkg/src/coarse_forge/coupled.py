"""Projected and effective dynamics driven by one shared Brownian motion.

Two couplings are provided:

* :func:`simulate_coupled` feeds the effective SDE with the normalized
  projection ``dB = (T A T^T)^{-1/2} T Sigma dW`` of the full noise, evaluated
  at the pre-step state.
* :func:`simulate_coupled_random_clock` writes both processes as time-changed
  Brownian motions on a single intrinsic-time path, with clocks
  ``psi = int |T Sigma|^2(X) ds`` and ``phi = int sigma^2(Z) ds``.
"""

from __future__ import annotations

import csv
import logging
import math
from bisect import bisect_left, bisect_right
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .effective import EffectiveModel
from .models import CoarseMap, ModelError, SdeModel
from .sampling import (
    AUX_STREAM,
    DivergenceError,
    EnsembleNoise,
    chunk_size,
    sample_equilibrium,
    stream_rng,
)

log = logging.getLogger(__name__)

KNOT_CAP = 10_000
RECORD_BUDGET = 20_000_000


@dataclass(frozen=True)
class CoupledRun:
    dt: float
    T: float
    n_paths: int
    seed: int
    times: np.ndarray
    xi: Optional[np.ndarray]
    z: Optional[np.ndarray]
    sup_err2: np.ndarray
    clamped: int = 0
    clock_gap: Optional[np.ndarray] = None
    clock_gap_l1: Optional[np.ndarray] = None


@dataclass(frozen=True)
class PathErrorStats:
    sup_err2: np.ndarray
    mean: float
    se: Optional[float]
    max: float

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path_index", "sup_error2"])
            for i, v in enumerate(self.sup_err2):
                w.writerow([i, format(float(v), ".17g")])


def _n_steps(dt, T):
    if not dt > 0 or T < 0:
        raise ValueError("dt must be positive and T non-negative")
    n = int(round(T / dt))
    if abs(n * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"T={T} is not a multiple of dt={dt}")
    return n


def project_noise(model: SdeModel, x, dW, cmap: Optional[CoarseMap] = None):
    """Coarse Brownian increment driven by the full increment ``dW``.

    For ``xi = x^1`` this is ``sum_j Sigma^{1j} dW^j / |Sigma^1|``.  Accepts a
    single point or a batch ``(n, d)``; returns shape ``(k,)`` or ``(n, k)``.
    """
    x = np.asarray(x, dtype=float)
    dW = np.asarray(dW, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
        dW = dW[None, :]
    if cmap is None:
        cmap = CoarseMap.coordinate(model.d)
    out = _project(model.diffusion(x), cmap, dW)
    return out[0] if single else out


def _project(S, cmap, dW):
    R = np.einsum("ki,nij->nkj", cmap.T, S)
    if cmap.k == 1:
        nrm = np.sqrt(np.einsum("nj,nj->n", R[:, 0], R[:, 0]))
        if np.any(nrm <= 0):
            raise ModelError("degenerate projected diffusion |T Sigma| = 0")
        return (np.einsum("nj,nj->n", R[:, 0], dW) / nrm)[:, None]
    G = R @ np.swapaxes(R, -1, -2)
    w, Q = np.linalg.eigh(G)
    if np.any(w <= 0):
        raise ModelError("degenerate projected diffusion matrix")
    Ginv_half = (Q * (1.0 / np.sqrt(w))[:, None, :]) @ np.swapaxes(Q, -1, -2)
    return np.einsum("nkl,nlj,nj->nk", Ginv_half, R, dW)


def _projection_matrix(S, cmap):
    """Matrix ``P`` with ``dB = P dW`` for a constant diffusion ``S``."""
    R = cmap.T @ S
    if cmap.k == 1:
        nrm = np.sqrt(R[0] @ R[0])
        if nrm <= 0:
            raise ModelError("degenerate projected diffusion |T Sigma| = 0")
        return R / nrm
    w, Q = np.linalg.eigh(R @ R.T)
    if np.any(w <= 0):
        raise ModelError("degenerate projected diffusion matrix")
    return (Q / np.sqrt(w)) @ Q.T @ R


def _initial_state(model, n_paths, seed, x0):
    if x0 is not None:
        X = np.array(np.broadcast_to(np.asarray(x0, dtype=float), (n_paths, model.d)))
    else:
        X = np.array(sample_equilibrium(model, n_paths, seed).points)
    return X


def _xi(cmap, X):
    i = cmap.coordinate_index
    if i is not None:
        return X[:, i : i + 1].copy()
    return cmap(X)


def _record_stride(n_paths, n_steps, k, stride):
    if stride is not None:
        return max(1, int(stride))
    size = n_paths * (n_steps + 1) * k
    return max(1, math.ceil(size / RECORD_BUDGET))


def _check_finite(X, Z, step):
    bad = ~(np.all(np.isfinite(X), axis=1) & np.all(np.isfinite(Z), axis=1))
    if np.any(bad):
        p = int(np.flatnonzero(bad)[0])
        raise DivergenceError(f"non-finite state on path {p} at step {step}", step=step, path=p)


# overflow surfaces as a DivergenceError from the finiteness check
@np.errstate(over="ignore", invalid="ignore")
def simulate_coupled(
    model: SdeModel,
    effective: EffectiveModel,
    cmap: Optional[CoarseMap] = None,
    dt: float = 1e-3,
    T: float = 1.0,
    n_paths: int = 1000,
    seed: int = 0,
    x0=None,
    substeps: int = 1,
    record_stride: Optional[int] = None,
) -> CoupledRun:
    """Simulate ``xi(X_t)`` and ``Z_t`` with a shared Brownian path.

    ``X_0`` is drawn from the invariant measure unless ``x0`` is given, and
    ``Z_0 = xi(X_0)``.  With ``substeps > 1`` each increment is the sum of
    ``substeps`` finer increments (same Brownian path as a run at
    ``dt / substeps``).  The sup error is tracked on every grid point;
    trajectories are stored every ``record_stride`` steps.
    """
    if cmap is None:
        cmap = CoarseMap.coordinate(model.d)
    if cmap.k != effective.k:
        raise ValueError("effective model dimension does not match coarse map")
    n_steps = _n_steps(dt, T)
    X = _initial_state(model, n_paths, seed, x0)
    Z = _xi(cmap, X)
    k = cmap.k
    stride = _record_stride(n_paths, n_steps, k, record_stride)
    n_rec = n_steps // stride + 1
    xi_rec = np.empty((n_rec, n_paths, k))
    z_rec = np.empty((n_rec, n_paths, k))
    xi_rec[0] = Z
    z_rec[0] = Z
    sup2 = np.zeros(n_paths)
    clamped = effective.clamped_count(Z)
    noise = EnsembleNoise(seed, n_paths, model.noise_dim, dt, substeps)
    sq2 = np.sqrt(2.0)
    S_const = P_const = None
    if model.Sigma.constant:
        # constant diffusion: the projection is a fixed linear map of dW
        S_const = model.diffusion(X[:1])[0]
        P_const = _projection_matrix(S_const, cmap)
    step = 0
    m_chunk = chunk_size(n_paths, model.noise_dim, substeps)
    while step < n_steps:
        m = min(m_chunk, n_steps - step)
        dWs = noise.next(m)
        for j in range(m):
            dW = dWs[j]
            if S_const is None:
                S = model.diffusion(X)
                dB = _project(S, cmap, dW)
                kick = np.einsum("nij,nj->ni", S, dW)
            else:
                dB = dW @ P_const.T
                kick = dW @ S_const.T
            X = X + model.drift(X) * dt + sq2 * kick
            sig = effective.diffusion(Z)
            Z = Z + effective.drift(Z) * dt + sq2 * np.einsum("nkl,nl->nk", sig, dB)
            step += 1
            xi = _xi(cmap, X)
            err = xi - Z
            np.maximum(sup2, np.einsum("nk,nk->n", err, err), out=sup2)
            if step % stride == 0:
                xi_rec[step // stride] = xi
                z_rec[step // stride] = Z
            if effective.z_range is not None:
                clamped += effective.clamped_count(Z)
        _check_finite(X, Z, step)
    if clamped:
        log.warning("effective coefficients clamped on %d queries", clamped)
    times = dt * stride * np.arange(n_rec)
    return CoupledRun(
        dt=dt,
        T=T,
        n_paths=n_paths,
        seed=seed,
        times=times,
        xi=np.moveaxis(xi_rec, 0, 1),
        z=np.moveaxis(z_rec, 0, 1),
        sup_err2=sup2,
        clamped=clamped,
    )


class IntrinsicBrownian:
    """Brownian motion in intrinsic time, realized lazily on a knot list.

    The path is stored as sorted knot times and the increments between
    consecutive knots.  Queries beyond the last knot draw fresh Gaussian
    increments; queries between knots are filled in by Brownian-bridge
    conditioning.  Knots behind both clocks are pruned.
    """

    def __init__(self, rng: np.random.Generator, cap: int = KNOT_CAP):
        self.t = [0.0]
        self.inc: list[float] = []
        self.rng = rng
        self.cap = cap

    def _knot(self, u: float) -> int:
        t = self.t
        if u > t[-1]:
            self.inc.append(math.sqrt(u - t[-1]) * self.rng.standard_normal())
            t.append(u)
            return len(t) - 1
        i = bisect_left(t, u)
        if t[i] == u:
            return i
        if i == 0:
            raise ValueError(f"query time {u} precedes the pruned history")
        t0, t1 = t[i - 1], t[i]
        whole = self.inc[i - 1]
        span = t1 - t0
        left = (u - t0) / span * whole + math.sqrt((u - t0) * (t1 - u) / span) * self.rng.standard_normal()
        self.inc[i - 1 : i] = [left, whole - left]
        t.insert(i, u)
        return i

    def increment(self, start: float, length: float, fresh: Optional[float] = None):
        """Increment over ``[start, start + length]``.

        ``fresh`` (variance ``length``) is used verbatim when the interval
        starts at the last knot.  Returns ``(value, used_fresh)``.
        """
        if not length > 0:
            raise ValueError("intrinsic clock must be strictly increasing")
        end = start + length
        if fresh is not None and start == self.t[-1]:
            self.t.append(end)
            self.inc.append(float(fresh))
            return float(fresh), True
        i0 = self._knot(start)
        i1 = self._knot(end)
        return sum(self.inc[i0:i1]), False

    def value(self, u: float) -> float:
        """``B(u)``, materializing a knot at ``u`` if needed."""
        i = self._knot(u)
        return float(sum(self.inc[:i]))

    def prune(self, before: float, keep=()):
        i = bisect_right(self.t, before) - 1
        if i > 0:
            del self.t[:i]
            del self.inc[:i]
        protected = set(keep)
        j = 1
        while len(self.t) > self.cap and j < len(self.t) - 1:
            if self.t[j] in protected:
                j += 1
                continue
            self.inc[j - 1 : j + 1] = [self.inc[j - 1] + self.inc[j]]
            del self.t[j]

    def __len__(self):
        return len(self.t)


@np.errstate(over="ignore", invalid="ignore")
def simulate_coupled_random_clock(
    model: SdeModel,
    effective: EffectiveModel,
    dt: float = 1e-3,
    T: float = 1.0,
    n_paths: int = 100,
    seed: int = 0,
    cmap: Optional[CoarseMap] = None,
    x0=None,
    substeps: int = 1,
    record_stride: Optional[int] = None,
) -> CoupledRun:
    """Coupling through a common intrinsic-time Brownian motion.

    ``X`` advances by Euler-Maruyama whose noise component along the
    projected direction is replaced by the increment of the intrinsic path
    over ``[psi, psi + |T Sigma|^2 dt]``; ``Z`` advances by
    ``b(Z) dt + sqrt(2) (Bbar(phi + sigma^2 dt) - Bbar(phi))``.  When the
    ``X`` interval starts at the newest knot its increment is taken from the
    same per-step noise the standard coupling uses, so with trivial clocks the
    two couplings coincide bit for bit.
    """
    if cmap is None:
        cmap = CoarseMap.coordinate(model.d)
    if cmap.k != 1 or effective.k != 1:
        raise ValueError("the random-clock coupling needs a scalar coarse map")
    n_steps = _n_steps(dt, T)
    X = _initial_state(model, n_paths, seed, x0)
    Z = _xi(cmap, X)
    stride = _record_stride(n_paths, n_steps, 1, record_stride)
    n_rec = n_steps // stride + 1
    xi_rec = np.empty((n_rec, n_paths, 1))
    z_rec = np.empty((n_rec, n_paths, 1))
    xi_rec[0] = Z
    z_rec[0] = Z
    sup2 = np.zeros(n_paths)
    psi = np.zeros(n_paths)
    phi = np.zeros(n_paths)
    gap = np.zeros(n_paths)
    gap_l1 = np.zeros(n_paths)
    paths = [IntrinsicBrownian(stream_rng(seed, i, AUX_STREAM)) for i in range(n_paths)]
    noise = EnsembleNoise(seed, n_paths, model.noise_dim, dt, substeps)
    sq2 = np.sqrt(2.0)
    Trow = cmap.T[0]
    clamped = effective.clamped_count(Z)
    step = 0
    m_chunk = chunk_size(n_paths, model.noise_dim, substeps)
    while step < n_steps:
        m = min(m_chunk, n_steps - step)
        dWs = noise.next(m)
        for j in range(m):
            dW = dWs[j]
            S = model.diffusion(X)
            R = np.einsum("i,nij->nj", Trow, S)
            nrm = np.sqrt(np.einsum("nj,nj->n", R, R))
            if np.any(nrm <= 0):
                raise ModelError("degenerate projected diffusion |T Sigma| = 0")
            dB = np.einsum("nj,nj->n", R, dW) / nrm
            dpsi = nrm * nrm * dt
            sig = effective.diffusion(Z)[:, 0, 0]
            dphi = sig * sig * dt
            fresh = nrm * dB
            bx = np.empty(n_paths)
            bz = np.empty(n_paths)
            used = np.empty(n_paths, dtype=bool)
            for i in range(n_paths):
                p = paths[i]
                bx[i], used[i] = p.increment(float(psi[i]), float(dpsi[i]), float(fresh[i]))
                bz[i], _ = p.increment(float(phi[i]), float(dphi[i]))
            if not np.all(used):
                # replace the noise component along the projected direction
                e = R / nrm[:, None]
                corr = np.where(used, 0.0, bx / nrm - dB)
                dW = dW + e * corr[:, None]
            X = X + model.drift(X) * dt + sq2 * np.einsum("nij,nj->ni", S, dW)
            Z = Z + effective.drift(Z) * dt + sq2 * bz[:, None]
            psi = psi + dpsi
            phi = phi + dphi
            gap_l1 += np.abs(dpsi - dphi)
            np.maximum(gap, np.abs(psi - phi), out=gap)
            lo = np.minimum(psi, phi)
            for i in range(n_paths):
                paths[i].prune(float(lo[i]), keep=(float(psi[i]), float(phi[i])))
            step += 1
            xi = _xi(cmap, X)
            err = xi - Z
            np.maximum(sup2, err[:, 0] * err[:, 0], out=sup2)
            if step % stride == 0:
                xi_rec[step // stride] = xi
                z_rec[step // stride] = Z
            if effective.z_range is not None:
                clamped += effective.clamped_count(Z)
        _check_finite(X, Z, step)
    times = dt * stride * np.arange(n_rec)
    return CoupledRun(
        dt=dt,
        T=T,
        n_paths=n_paths,
        seed=seed,
        times=times,
        xi=np.moveaxis(xi_rec, 0, 1),
        z=np.moveaxis(z_rec, 0, 1),
        sup_err2=sup2,
        clamped=clamped,
        clock_gap=gap,
        clock_gap_l1=gap_l1,
    )


def error_stats(run: CoupledRun) -> PathErrorStats:
    """Per-path discrete sup of ``|xi(X) - Z|^2`` with ensemble mean and SE."""
    e = np.asarray(run.sup_err2, dtype=float)
    if e.size == 0:
        raise ValueError("empty run")
    se = float(e.std(ddof=1) / np.sqrt(e.size)) if e.size > 1 else None
    return PathErrorStats(sup_err2=e, mean=float(e.mean()), se=se, max=float(e.max()))


@np.errstate(over="ignore", invalid="ignore")
def simulate_effective(
    effective: EffectiveModel, z0, dt: float, T: float, seed: int = 0, substeps: int = 1
) -> np.ndarray:
    """Effective dynamics alone from initial points ``z0`` (shape (n, k)); returns Z_T."""
    Z = np.array(np.atleast_2d(np.asarray(z0, dtype=float)).reshape(-1, effective.k))
    n = Z.shape[0]
    n_steps = _n_steps(dt, T)
    noise = EnsembleNoise(seed, n, effective.k, dt, substeps)
    sq2 = np.sqrt(2.0)
    step = 0
    m_chunk = chunk_size(n, effective.k, substeps)
    while step < n_steps:
        m = min(m_chunk, n_steps - step)
        dWs = noise.next(m)
        for j in range(m):
            sig = effective.diffusion(Z)
            Z = Z + effective.drift(Z) * dt + sq2 * np.einsum("nkl,nl->nk", sig, dWs[j])
        step += m
        if not np.all(np.isfinite(Z)):
            raise DivergenceError(f"effective dynamics diverged before step {step}", step=step)
    return Z
