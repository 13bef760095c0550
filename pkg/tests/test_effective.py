import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from coarse_forge.effective import (
    ConditionalProfile,
    EstimationError,
    analytic_effective,
    effective_from_profile,
    estimate_conditional,
)
from coarse_forge.models import CoarseMap, mean_sin2_gaussian, nr_gauss, torus_symplectic, var_diff
from coarse_forge.sampling import EquilibriumSample, sample_equilibrium

E1 = CoarseMap.coordinate(2)


def _profile(z, b, s2=None):
    z = np.asarray(z, dtype=float)
    b = np.asarray(b, dtype=float)
    s2 = np.ones_like(z) if s2 is None else np.asarray(s2, dtype=float)
    edges = np.concatenate([[z[0] - 0.5], 0.5 * (z[1:] + z[:-1]), [z[-1] + 0.5]])
    n = np.full(z.size, 100)
    return ConditionalProfile(z, edges, b, s2, n, np.zeros_like(z), n >= 50)


def test_torus_profile_constant_drift():
    s = sample_equilibrium(torus_symplectic(1.0, 0.7), 20_000, 1)
    p = estimate_conditional(s, torus_symplectic(1.0, 0.7), E1, np.linspace(0, 1, 11))
    assert np.all(p.valid)
    # F^1 is constant, so the bin std is zero and the mean is exact
    assert_allclose(p.b_hat, 0.7, rtol=0, atol=1e-12)
    assert_allclose(p.sigma2_hat, 1.0, atol=0)


def test_nr_gauss_profile_tracks_minus_z():
    m = nr_gauss(4.0, 0.5)
    s = sample_equilibrium(m, 10**6, 2)
    p = estimate_conditional(s, m, E1, np.linspace(-3, 3, 51))
    central = np.abs(p.z) <= 2.0
    assert np.max(np.abs(p.b_hat + p.z)[central]) < 0.05
    assert_allclose(p.sigma2_hat[p.valid], 1.0, atol=0)
    assert np.all(p.counts[~p.valid] < 50)


def test_estimated_lipschitz_constant():
    m = nr_gauss(4.0, 0.5)
    s = sample_equilibrium(m, 10**6, 3)
    eff = effective_from_profile(estimate_conditional(s, m, E1, np.linspace(-3, 3, 13)))
    assert 0.8 <= eff.L_b <= 1.3
    assert eff.L_sigma == 0.0


def test_estimator_consistency_rate():
    m = nr_gauss(4.0, 0.5)
    edges = np.linspace(-1, 1, 11)

    def max_dev(n):
        devs = []
        for seed in range(4):
            p = estimate_conditional(sample_equilibrium(m, n, 100 + seed), m, E1, edges)
            # compare with the exact bin-conditional mean of -x1 to remove binning bias
            devs.append(np.max(np.abs(p.b_hat - _bin_mean_of_minus_x(edges))))
        return np.mean(devs)

    assert max_dev(4 * 40_000) / max_dev(40_000) <= 0.6


def _bin_mean_of_minus_x(edges):
    from scipy import stats

    lo, hi = edges[:-1], edges[1:]
    mass = stats.norm.cdf(hi) - stats.norm.cdf(lo)
    return -(stats.norm.pdf(lo) - stats.norm.pdf(hi)) / mass


def test_estimated_drift_gap_close_to_analytic_gap():
    m = nr_gauss(4.0, 0.5)
    s = sample_equilibrium(m, 400_000, 4)
    eff_hat = effective_from_profile(estimate_conditional(s, m, E1, np.linspace(-4, 4, 41)))
    eff = analytic_effective(m)
    test = sample_equilibrium(m, 400_000, 5).points
    f1 = m.drift(test)[:, 0]
    z = test[:, :1]
    gap_hat = np.mean((f1 - eff_hat.drift(z)[:, 0]) ** 2)
    gap = np.mean((f1 - eff.drift(z)[:, 0]) ** 2)
    # L2 projection is optimal; the estimator adds at most its variance budget
    assert gap_hat >= gap - 3 * np.std((f1 - eff.drift(z)[:, 0]) ** 2) / np.sqrt(z.size)
    assert gap_hat - gap < 0.01


def test_interpolation_arithmetic():
    eff = effective_from_profile(_profile([-1, 0, 1], [-1, 0, 1]))
    assert eff.drift(np.array([[0.5]]))[0, 0] == pytest.approx(0.5)
    assert eff.drift(np.array([[2.0]]))[0, 0] == pytest.approx(1.0)
    assert eff.L_b == pytest.approx(1.0)
    assert eff.L_sigma == 0.0
    assert eff.clamped_count(np.array([[2.0], [0.0], [-3.0]])) == 2


@given(
    st.lists(st.floats(-5, 5), min_size=3, max_size=12),
    st.lists(st.floats(0, 4), min_size=3, max_size=12),
)
def test_profile_sigma_nonnegative_and_bounded(bs, s2):
    n = min(len(bs), len(s2))
    z = np.arange(n, dtype=float)
    eff = effective_from_profile(_profile(z, bs[:n], s2[:n]))
    q = np.linspace(-1, n, 37)[:, None]
    sig = eff.diffusion(q)[:, 0, 0]
    assert np.all(sig >= 0)
    assert np.all(sig <= np.sqrt(max(s2[:n])) + 1e-12)


def test_var_diff_analytic_sigma():
    m = var_diff(4.0, 0.5, 0.5)
    eff = analytic_effective(m)
    mean = mean_sin2_gaussian(4.0)
    # E sin^2 Y for Y ~ N(0, 1/4) by Gauss-Hermite quadrature
    y, w = np.polynomial.hermite_e.hermegauss(80)
    quad = np.sum(w * np.sin(y / 2.0) ** 2) / np.sqrt(2 * np.pi)
    assert mean == pytest.approx(quad, rel=1e-12)
    assert eff.diffusion(np.array([[0.0], [3.0]]))[:, 0, 0] ** 2 == pytest.approx(1 + 0.5 * quad)
    assert eff.L_sigma == 0.0


def test_analytic_effective_examples():
    t = analytic_effective(torus_symplectic(1.0, 0.7))
    assert t.L_b == 0.0
    assert_allclose(t.drift(np.array([[0.3], [5.2]])), 0.7)
    g = analytic_effective(nr_gauss())
    assert g.L_b == 1.0
    assert_allclose(g.diffusion(np.array([[1.0]])), [[[1.0]]])


def test_errors():
    m = nr_gauss()
    s = sample_equilibrium(m, 1000, 0)
    with pytest.raises(EstimationError):
        estimate_conditional(s, m, E1, [])
    with pytest.raises(EstimationError):
        estimate_conditional(s, m, E1, np.linspace(-3, 3, 1001))
    with pytest.raises(EstimationError):
        estimate_conditional(s, m, E1, np.linspace(50, 60, 5))
    with pytest.raises(EstimationError):
        effective_from_profile(_profile([0.0], [1.0]))
    with pytest.raises(EstimationError):
        analytic_effective(m.__class__(**{**m.__dict__, "analytic_effective": None}))


def test_profile_csv(tmp_path):
    p = _profile([0.0, 1.0], [0.1, 1.0 / 3.0])
    p.to_csv(tmp_path / "p.csv")
    raw = (tmp_path / "p.csv").read_bytes()
    assert raw.startswith(b"z,b_hat,sigma2_hat,count\n")
    assert b"\r" not in raw
    assert b"0.33333333333333331" in raw


def test_sample_points_only_used_through_map():
    m = nr_gauss()
    pts = np.array([[0.1, 0.2]] * 600)
    p = estimate_conditional(EquilibriumSample(pts, "fixed"), m, E1, np.linspace(0, 1, 3))
    assert p.counts.tolist() == [600, 0]
    assert p.b_hat[0] == pytest.approx(m.drift(pts[:1])[0, 0])
