"""Brownian noise streams, Euler-Maruyama integration and equilibrium sampling.

Every random stream is derived from ``(seed, stream, path_index)`` through a
``SeedSequence`` feeding a counter-based Philox generator, so an ensemble can
be produced in any order (or in parallel) and still be bitwise reproducible.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .models import SdeModel

log = logging.getLogger(__name__)

# stream identifiers for SeedSequence spawn keys
NOISE_STREAM = 0
INITIAL_STREAM = 1
AUX_STREAM = 2
MCMC_STREAM = 3

MCMC_BURN_IN = 1_000_000
MCMC_THINNING = 100


class DivergenceError(RuntimeError):
    """A simulated state became non-finite."""

    def __init__(self, message, step=None, path=None):
        super().__init__(message)
        self.step = step
        self.path = path


def worker_count() -> int:
    """Thread cap from ``COARSE_FORGE_THREADS`` (0 or unset means automatic)."""
    raw = os.environ.get("COARSE_FORGE_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n <= 0:
        n = min(8, os.cpu_count() or 1)
    return max(1, n)


def stream_rng(seed: int, path_index: int = 0, stream: int = NOISE_STREAM) -> np.random.Generator:
    """Independent generator for one ``(seed, stream, path_index)`` triple."""
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=(int(stream), int(path_index)))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class NoisePath:
    dt: float
    increments: np.ndarray
    seed: int
    path_index: int = 0


def brownian(seed: int, path_index: int, n_steps: int, noise_dim: int, dt: float) -> NoisePath:
    """Brownian increments of variance ``dt`` for one path."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if not dt > 0:
        raise ValueError("dt must be positive")
    rng = stream_rng(seed, path_index)
    inc = np.sqrt(dt) * rng.standard_normal((n_steps, noise_dim))
    return NoisePath(dt=dt, increments=inc, seed=seed, path_index=path_index)


class EnsembleNoise:
    """Chunked Brownian increments for ``n_paths`` independent paths.

    Each path owns its generator; ``next(m)`` returns an array of shape
    ``(m, n_paths, noise_dim)``.  With ``substeps > 1`` the increments are
    sums of ``substeps`` finer increments of variance ``dt / substeps``, so a
    run at ``dt`` and one at ``dt / substeps`` see the same Brownian path.
    """

    def __init__(self, seed, n_paths, noise_dim, dt, substeps=1, stream=NOISE_STREAM):
        self.n_paths = n_paths
        self.noise_dim = noise_dim
        self.substeps = int(substeps)
        self.fine_scale = np.sqrt(dt / self.substeps)
        self._rngs = [stream_rng(seed, i, stream) for i in range(n_paths)]
        self._workers = worker_count()

    def _draw(self, lo, hi, m, out):
        for i in range(lo, hi):
            out[:, i, :] = self._rngs[i].standard_normal((m, self.noise_dim))

    def next(self, m: int) -> np.ndarray:
        fine = m * self.substeps
        out = np.empty((fine, self.n_paths, self.noise_dim))
        n = self.n_paths
        if self._workers > 1 and n >= 256:
            bounds = np.linspace(0, n, self._workers + 1).astype(int)
            with ThreadPoolExecutor(self._workers) as ex:
                list(ex.map(lambda lh: self._draw(lh[0], lh[1], fine, out), zip(bounds[:-1], bounds[1:])))
        else:
            self._draw(0, n, fine, out)
        if self.substeps > 1:
            out = out.reshape(m, self.substeps, n, self.noise_dim).sum(axis=1)
        return self.fine_scale * out


def chunk_size(n_paths: int, noise_dim: int, substeps: int = 1, budget: int = 2_000_000) -> int:
    return max(1, min(4096, budget // max(1, n_paths * noise_dim * substeps)))


@dataclass(frozen=True)
class Trajectory:
    dt: float
    states: np.ndarray
    model: SdeModel

    @property
    def n_steps(self) -> int:
        return self.states.shape[0] - 1


def euler_maruyama(model: SdeModel, x0, noise: NoisePath) -> Trajectory:
    """``X_{n+1} = X_n + F(X_n) dt + sqrt(2) Sigma(X_n) dW_n``.

    Torus states are kept unwrapped; fields are evaluated at wrapped points.
    """
    x = np.array(x0, dtype=float).reshape(1, model.d)
    inc = noise.increments
    states = np.empty((inc.shape[0] + 1, model.d))
    states[0] = x[0]
    dt = noise.dt
    sq2 = np.sqrt(2.0)
    for n in range(inc.shape[0]):
        S = model.diffusion(x)
        with np.errstate(over="ignore", invalid="ignore"):
            x = x + model.drift(x) * dt + sq2 * np.einsum("nij,nj->ni", S, inc[n][None, :])
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite state at step {n + 1}", step=n + 1)
        states[n + 1] = x[0]
    return Trajectory(dt=dt, states=states, model=model)


def em_step(model: SdeModel, x, dW, dt):
    """One vectorized Euler-Maruyama step for an ensemble ``x`` of shape (n, d)."""
    S = model.diffusion(x)
    return x + model.drift(x) * dt + np.sqrt(2.0) * np.einsum("nij,nj->ni", S, dW)


@dataclass(frozen=True)
class EquilibriumSample:
    points: np.ndarray
    method: str
    burn_in: Optional[int] = None
    thinning: Optional[int] = None

    @property
    def n(self) -> int:
        return self.points.shape[0]


def sample_equilibrium(
    model: SdeModel,
    n: int,
    seed: int,
    burn_in: int = MCMC_BURN_IN,
    thinning: int = MCMC_THINNING,
    dt: float = 1e-3,
    x0=None,
) -> EquilibriumSample:
    """Draw ``n`` points from the invariant measure of ``model``.

    Exact for Gaussian measures and for the flat torus with ``V = 0``;
    otherwise a single Euler-Maruyama chain of length
    ``burn_in + n * thinning`` keeping every ``thinning``-th state.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = stream_rng(seed, 0, INITIAL_STREAM)
    d = model.d
    if model.gaussian_mu is not None:
        L = np.linalg.cholesky(np.asarray(model.gaussian_mu.cov, dtype=float))
        pts = model.gaussian_mu.mean + rng.standard_normal((n, d)) @ L.T
        return EquilibriumSample(pts, "exact-gaussian")
    if model.domain.is_torus:
        probe = rng.uniform(0.0, model.domain.period, size=(64, d))
        if np.allclose(model.potential(probe), model.potential(probe[:1])):
            pts = model.domain.period * rng.random((n, d))
            return EquilibriumSample(pts, "uniform-torus")
    return _mcmc(model, n, seed, burn_in, thinning, dt, x0)


def _mcmc(model, n, seed, burn_in, thinning, dt, x0):
    rng = stream_rng(seed, 0, MCMC_STREAM)
    x = np.zeros((1, model.d)) if x0 is None else np.array(x0, dtype=float).reshape(1, model.d)
    total = burn_in + n * thinning
    out = np.empty((n, model.d))
    k = 0
    block = 65536
    step = 0
    sdt = np.sqrt(dt)
    while step < total:
        m = min(block, total - step)
        dW = sdt * rng.standard_normal((m, model.noise_dim))
        for j in range(m):
            x = em_step(model, x, dW[j : j + 1], dt)
            step += 1
            if step > burn_in and (step - burn_in) % thinning == 0:
                out[k] = x[0]
                k += 1
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"MCMC chain diverged before step {step}", step=step)
    log.debug("mcmc: %d steps, kept %d", total, k)
    return EquilibriumSample(model.domain.wrap(out), "mcmc", burn_in, thinning)
