import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from coarse_forge.coupled import (
    CoupledRun,
    IntrinsicBrownian,
    error_stats,
    project_noise,
    simulate_coupled,
    simulate_coupled_random_clock,
    simulate_effective,
)
from coarse_forge.effective import analytic_effective
from coarse_forge.models import (
    CoarseMap,
    DomainSpec,
    MatrixField,
    ModelError,
    ScalarField,
    VectorField,
    build_model,
    mean_sin2_gaussian,
    nr_gauss,
    torus_symplectic,
    var_diff,
)
from coarse_forge.sampling import DivergenceError, stream_rng


def test_project_noise_identity():
    dW = np.array([0.3, -0.7])
    assert project_noise(nr_gauss(), np.zeros(2), dW) == pytest.approx([0.3])


def test_project_noise_diagonal_row():
    m = var_diff(delta=0.5)
    x = np.array([[0.1, 1.2], [0.0, -0.4]])
    dW = np.array([[0.25, 3.0], [-1.0, 2.0]])
    assert_allclose(project_noise(m, x, dW)[:, 0], dW[:, 0], rtol=1e-15)


def test_project_noise_unit_variance():
    m = var_diff(delta=0.5)
    rng = np.random.default_rng(5)
    dt = 1e-3
    x = rng.normal(size=(100_000, 2))
    dW = np.sqrt(dt) * rng.normal(size=(100_000, 2))
    assert project_noise(m, x, dW).var() == pytest.approx(dt, rel=0.03)


def test_project_noise_affine_map_is_whitened():
    m = var_diff(delta=0.5)
    cm = CoarseMap([[1.0, 2.0]], [0.5])
    rng = np.random.default_rng(6)
    x = rng.normal(size=(50_000, 2))
    dW = rng.normal(size=(50_000, 2))
    assert project_noise(m, x, dW, cm).var() == pytest.approx(1.0, rel=0.03)


def test_project_noise_degenerate():
    V = ScalarField(lambda x: 0.5 * np.sum(x**2, -1), lambda x: x)

    def S(x):
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 0] = x[..., 0]
        out[..., 1, 1] = 1.0
        return out

    m = build_model(V, MatrixField(S), VectorField(lambda x: np.zeros(x.shape)), DomainSpec("euclidean", 2), probe_points=[[1.0, 1.0]])
    with pytest.raises(ModelError):
        project_noise(m, np.zeros(2), np.ones(2))


def test_torus_exact_to_roundoff():
    m = torus_symplectic(1.0, 0.7)
    run = simulate_coupled(m, analytic_effective(m), dt=1e-3, T=1.0, n_paths=100, seed=3)
    assert np.sqrt(run.sup_err2.max()) <= 1e-12
    assert_array_equal(run.xi[:, 0], run.z[:, 0])


def test_uncoupled_gaussian_exact():
    m = nr_gauss(4.0, 0.0)
    run = simulate_coupled(m, analytic_effective(m), dt=1e-3, T=1.0, n_paths=100, seed=3)
    assert np.sqrt(run.sup_err2.max()) <= 1e-12


def test_mean_error_matches_fine_step_oracle():
    m = nr_gauss(4.0, 0.5)
    eff = analytic_effective(m)
    coarse = error_stats(simulate_coupled(m, eff, dt=1e-3, T=1.0, n_paths=4000, seed=21, substeps=1))
    # fine-step brute force on the same coupled linear system, independent paths
    fine = error_stats(simulate_coupled(m, eff, dt=1e-4, T=1.0, n_paths=1000, seed=22))
    combined = np.hypot(coarse.se, fine.se)
    assert abs(coarse.mean - fine.mean) <= 2.5 * combined


def test_error_monotone_in_coupling_strength():
    means = []
    for g in (0.5, 0.25, 0.125):
        m = nr_gauss(4.0, g)
        means.append(error_stats(simulate_coupled(m, analytic_effective(m), None, 1e-3, 1.0, 500, 9)).mean)
    assert means[0] >= means[1] >= means[2]


def test_doubling_horizon_never_decreases_error():
    m = nr_gauss(4.0, 0.5)
    eff = analytic_effective(m)
    a = simulate_coupled(m, eff, None, 1e-3, 0.5, 200, 12)
    b = simulate_coupled(m, eff, None, 1e-3, 1.0, 200, 12)
    assert np.all(b.sup_err2 >= a.sup_err2)


def test_bitwise_reproducible():
    m = var_diff()
    eff = analytic_effective(m)
    a = simulate_coupled(m, eff, None, 1e-3, 0.2, 50, 4)
    b = simulate_coupled(m, eff, None, 1e-3, 0.2, 50, 4)
    assert_array_equal(a.xi, b.xi)
    assert_array_equal(a.z, b.z)
    assert_array_equal(a.sup_err2, b.sup_err2)


def test_initial_condition_shared():
    m = nr_gauss()
    run = simulate_coupled(m, analytic_effective(m), None, 1e-2, 0.1, 20, 1)
    assert_array_equal(run.xi[:, 0], run.z[:, 0])
    assert isinstance(run, CoupledRun)
    assert run.times[-1] == pytest.approx(0.1)


def test_random_clock_trivial_clocks_bit_identical():
    m = nr_gauss(4.0, 0.5)
    eff = analytic_effective(m)
    std = simulate_coupled(m, eff, None, 1e-3, 0.5, 40, 17)
    rc = simulate_coupled_random_clock(m, eff, 1e-3, 0.5, 40, 17)
    assert_array_equal(std.xi, rc.xi)
    assert_array_equal(std.z, rc.z)
    assert np.all(rc.clock_gap == 0)


def test_random_clock_gap_bounded_by_quadrature():
    a, delta, T = 4.0, 0.5, 1.0
    m = var_diff(a, 0.5, delta)
    rc = simulate_coupled_random_clock(m, analytic_effective(m), 1e-3, T, 150, 2)
    mbar = mean_sin2_gaussian(a)
    y, w = np.polynomial.hermite_e.hermegauss(200)
    oracle = T * delta * np.sum(w * np.abs(np.sin(y / np.sqrt(a)) ** 2 - mbar)) / np.sqrt(2 * np.pi)
    se = rc.clock_gap.std(ddof=1) / np.sqrt(rc.clock_gap.size)
    assert rc.clock_gap.mean() <= oracle + 2 * se
    # the integrated rate gap is an unbiased estimate of the oracle itself
    l1se = rc.clock_gap_l1.std(ddof=1) / np.sqrt(rc.clock_gap_l1.size)
    assert abs(rc.clock_gap_l1.mean() - oracle) <= 3 * l1se + 0.01 * oracle


def test_intrinsic_brownian_marginal_variance():
    u = 0.37
    vals = []
    for i in range(4000):
        p = IntrinsicBrownian(stream_rng(1, i, 2))
        # realize beyond u first so the value at u comes from bridge conditioning
        p.increment(0.0, 0.5)
        p.increment(0.5, 0.3)
        vals.append(p.value(u))
    assert np.var(vals) == pytest.approx(u, rel=0.03 * 2)


def test_intrinsic_brownian_consistency_and_pruning():
    p = IntrinsicBrownian(np.random.default_rng(0), cap=50)
    total, _ = p.increment(0.0, 1.0)
    a, _ = p.increment(0.0, 0.4)
    b, _ = p.increment(0.4, 0.6)
    assert a + b == pytest.approx(total, abs=1e-14)
    p.prune(0.4, keep=(0.4, 1.0))
    assert p.t[0] == 0.4
    with pytest.raises(ValueError):
        p.increment(0.1, 0.1)
    with pytest.raises(ValueError):
        p.increment(0.5, 0.0)
    for k in range(200):
        p.increment(1.0 + k, 1.0, fresh=0.0)
    p.prune(0.4, keep=(0.4, 201.0))
    assert len(p) <= 50


def test_error_stats_degenerate_cases(tmp_path):
    run = CoupledRun(1e-3, 1.0, 1, 0, np.zeros(2), None, None, np.array([0.0]))
    st = error_stats(run)
    assert st.se is None and st.mean == 0.0 and st.max == 0.0
    st.to_csv(tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text() == "path_index,sup_error2\n0,0\n"
    with pytest.raises(ValueError):
        error_stats(CoupledRun(1e-3, 1.0, 0, 0, np.zeros(1), None, None, np.array([])))


def test_divergence_reported():
    m = nr_gauss()
    eff = analytic_effective(m)
    with pytest.raises(DivergenceError):
        with np.errstate(over="ignore", invalid="ignore"):
            simulate_coupled(m, eff, dt=10.0, T=2000.0, n_paths=4, seed=0)


def test_horizon_must_be_grid_multiple():
    m = nr_gauss()
    with pytest.raises(ValueError):
        simulate_coupled(m, analytic_effective(m), dt=0.3, T=1.0, n_paths=2, seed=0)


def test_effective_alone_preserves_gaussian():
    m = nr_gauss()
    eff = analytic_effective(m)
    z = simulate_effective(eff, np.zeros((3000, 1)), 1e-2, 3.0, seed=1)
    assert z.var() == pytest.approx(1 - np.exp(-6.0), rel=0.1)
