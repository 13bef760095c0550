import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal
from scipy import stats

from coarse_forge.models import DomainSpec, MatrixField, ScalarField, VectorField, build_model, nr_gauss, torus_symplectic
from coarse_forge.sampling import (
    DivergenceError,
    EnsembleNoise,
    NoisePath,
    brownian,
    em_step,
    euler_maruyama,
    sample_equilibrium,
)


def test_brownian_deterministic():
    a = brownian(7, 3, 100, 2, 1e-3)
    b = brownian(7, 3, 100, 2, 1e-3)
    assert_array_equal(a.increments, b.increments)


def test_brownian_variance_and_independence():
    a = brownian(11, 0, 10**6, 1, 1e-3).increments[:, 0]
    b = brownian(11, 1, 10**6, 1, 1e-3).increments[:, 0]
    assert a.var() == pytest.approx(1e-3, rel=0.01)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.01


@pytest.mark.parametrize("n_steps, dt", [(0, 1e-3), (10, 0.0), (10, -1.0)])
def test_brownian_preconditions(n_steps, dt):
    with pytest.raises(ValueError):
        brownian(0, 0, n_steps, 1, dt)


@given(st.lists(st.integers(1, 7), min_size=1, max_size=5))
def test_ensemble_noise_chunking_invariant(chunks):
    total = sum(chunks)
    whole = EnsembleNoise(5, 3, 2, 1e-2).next(total)
    noise = EnsembleNoise(5, 3, 2, 1e-2)
    pieces = np.concatenate([noise.next(m) for m in chunks])
    assert_array_equal(whole, pieces)


def test_ensemble_noise_matches_single_path_stream():
    ens = EnsembleNoise(9, 4, 2, 1e-3).next(50)
    for i in range(4):
        assert_allclose(ens[:, i, :], brownian(9, i, 50, 2, 1e-3).increments, rtol=0, atol=0)


def test_substeps_share_brownian_path():
    fine = EnsembleNoise(3, 2, 1, 5e-4).next(20)
    coarse = EnsembleNoise(3, 2, 1, 1e-3, substeps=2).next(10)
    assert_allclose(coarse, fine.reshape(10, 2, 2, 1).sum(axis=1), rtol=1e-14, atol=1e-17)


def test_ensemble_threaded_equals_serial(monkeypatch):
    monkeypatch.setenv("COARSE_FORGE_THREADS", "4")
    threaded = EnsembleNoise(1, 600, 2, 1e-3).next(8)
    monkeypatch.setenv("COARSE_FORGE_THREADS", "1")
    serial = EnsembleNoise(1, 600, 2, 1e-3).next(8)
    assert_array_equal(threaded, serial)


def _pure_diffusion():
    V = ScalarField(lambda x: np.zeros(x.shape[:-1]), lambda x: np.zeros(x.shape))
    S = MatrixField(lambda x: np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2)).copy(), constant=True)
    c = VectorField(lambda x: np.zeros(x.shape))
    return build_model(V, S, c, DomainSpec("euclidean", 2))


def test_em_pure_diffusion():
    noise = brownian(2, 0, 200, 2, 1e-2)
    x0 = np.array([0.5, -1.0])
    tr = euler_maruyama(_pure_diffusion(), x0, noise)
    expected = x0 + np.sqrt(2.0) * np.vstack([np.zeros(2), np.cumsum(noise.increments, axis=0)])
    assert_allclose(tr.states, expected, atol=1e-13)
    assert_array_equal(tr.states[0], x0)
    assert tr.n_steps == 200


def test_em_torus_first_coordinate_exact_increments():
    m = torus_symplectic(1.0, 0.7)
    noise = brownian(4, 0, 100, 2, 1e-3)
    tr = euler_maruyama(m, np.array([0.2, 0.9]), noise)
    inc = np.diff(tr.states[:, 0])
    assert_allclose(inc, 0.7 * 1e-3 + np.sqrt(2.0) * noise.increments[:, 0], atol=1e-15)


def test_em_strong_self_convergence():
    m = nr_gauss(4.0, 0.5)
    n_paths, dt = 2000, 1.0 / 32
    ref_steps = 32 * 64
    fine = EnsembleNoise(13, n_paths, 2, dt / 64).next(ref_steps)
    x0 = sample_equilibrium(m, n_paths, 13).points

    def run(k):
        # k fine increments per step: the same Brownian path at step k * dt / 64
        inc = fine.reshape(ref_steps // k, k, n_paths, 2).sum(axis=1)
        x = x0
        for dW in inc:
            x = em_step(m, x, dW, k * dt / 64)
        return x

    ref = run(1)
    err = [np.sqrt(np.mean(np.sum((run(k) - ref) ** 2, axis=1))) for k in (64, 32)]
    assert np.log2(err[0] / err[1]) >= 0.5


def test_em_divergence_reports_step():
    V = ScalarField(lambda x: -0.5 * np.sum(x**2, -1), lambda x: -x)
    S = MatrixField(lambda x: np.broadcast_to(np.eye(1), x.shape[:-1] + (1, 1)).copy(), constant=True)
    m = build_model(V, S, VectorField(lambda x: np.zeros(x.shape)), DomainSpec("euclidean", 1))
    noise = NoisePath(1.0, np.zeros((5000, 1)), 0)
    with pytest.raises(DivergenceError) as info:
        euler_maruyama(m, np.array([1e300]), noise)
    assert info.value.step is not None


def test_equilibrium_gaussian_variance():
    n = 200_000
    s = sample_equilibrium(nr_gauss(4.0, 0.5), n, 1)
    assert s.method == "exact-gaussian"
    assert abs(s.points[:, 1].var() - 0.25) < 3 * 0.25 * np.sqrt(2.0 / n) * 1.5


def test_equilibrium_torus_uniform():
    n = 20_000
    s = sample_equilibrium(torus_symplectic(), n, 2)
    assert s.method == "uniform-torus"
    assert stats.kstest(s.points[:, 0], "uniform").statistic < 1.36 / np.sqrt(n)


def test_equilibrium_single_point():
    assert sample_equilibrium(nr_gauss(), 1, 0).points.shape == (1, 2)
    with pytest.raises(ValueError):
        sample_equilibrium(nr_gauss(), 0, 0)


def test_mcmc_quartic_marginal():
    V = ScalarField(lambda x: 0.5 * np.sum(x**2, -1), lambda x: x)
    S = MatrixField(lambda x: np.broadcast_to(np.eye(1), x.shape[:-1] + (1, 1)).copy(), constant=True)
    m = build_model(V, S, VectorField(lambda x: np.zeros(x.shape)), DomainSpec("euclidean", 1))
    s = sample_equilibrium(m, 1000, 5, burn_in=2000, thinning=100, dt=1e-2)
    assert s.method == "mcmc"
    assert stats.kstest(s.points[:, 0], "norm").pvalue > 1e-3


def test_em_stationary_variance_nr_gauss():
    m = nr_gauss(4.0, 0.5)
    n = 4000
    x = sample_equilibrium(m, n, 8).points
    noise = EnsembleNoise(8, n, 2, 1e-3)
    for block in range(2):
        dW = noise.next(500)
        for j in range(500):
            x = em_step(m, x, dW[j], 1e-3)
    # O(dt) bias plus Monte Carlo error of a unit variance
    assert abs(x[:, 0].var() - 1.0) < 3 * np.sqrt(2.0 / n) + 5e-3


def test_pushforward_matches_marginal():
    s = sample_equilibrium(nr_gauss(4.0, 0.5), 20_000, 3)
    assert stats.kstest(s.points[:, 0], "norm").statistic < 1.36 / np.sqrt(20_000)
