"""Constants entering the pathwise error bounds.

Level-set quantities (Poincare constant, Poisson solves) are computed on a
one-dimensional grid across the level set ``{x^1 = z}`` of a two-dimensional
model.  Monte Carlo quantities (coupling constants, coefficient gaps) work in
any dimension.

The level-set Dirichlet form ``int B h' g' dmu_z`` is discretized by finite
volumes: the flux weight ``B rho`` is sampled at cell midpoints and the mass
matrix is the trapezoid rule, which keeps the discrete operator symmetric and
annihilating constants.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import eigh, eigh_tridiagonal, solve_banded

from .effective import EffectiveModel
from .models import CoarseMap, SdeModel, fd_jacobian, schur_B
from .sampling import EquilibriumSample, worker_count

log = logging.getLogger(__name__)

R_SENSITIVITY = 0.01
# edge-to-peak density ratio above which the truncation is reported
EDGE_DENSITY = 1e-5
MC_CHUNK = 262144


class DiagnosticsError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# level-set grids


@dataclass(frozen=True)
class LevelSetGrid:
    """Discretized conditional measure on one level set.

    ``weights`` and ``B_vals`` live on the nodes ``y``; ``mid_weights`` and
    ``mid_B`` on the cell midpoints (for a periodic grid the last cell wraps
    around).  Weights are normalized so that the trapezoid (or periodic) sum
    times ``dy`` equals one, and midpoint weights share the same constant.
    """

    z: float
    y: np.ndarray
    weights: np.ndarray
    B_vals: np.ndarray
    mid_weights: np.ndarray
    mid_B: np.ndarray
    dy: float
    periodic: bool = False

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def mass(self) -> np.ndarray:
        """Diagonal mass matrix (quadrature weights times density)."""
        m = self.weights * self.dy
        if not self.periodic:
            m = m.copy()
            m[0] *= 0.5
            m[-1] *= 0.5
        return m

    @property
    def flux(self) -> np.ndarray:
        """Edge conductances ``B rho / dy``."""
        return self.mid_B * self.mid_weights / self.dy

    @classmethod
    def from_density(cls, y, density, B=1.0, mid_density=None, mid_B=None, z=0.0, periodic=False, period=None):
        """Grid from nodal values of an unnormalized density and of ``B``.

        Midpoint values default to the averages of neighbouring nodes.  For a
        periodic grid ``y`` holds ``n`` nodes of ``[0, period)``.
        """
        y = np.asarray(y, dtype=float)
        n = y.size
        if n < 3:
            raise DiagnosticsError("level-set grid needs at least 3 nodes")
        rho = np.broadcast_to(np.asarray(density, dtype=float), (n,)).copy()
        Bn = np.broadcast_to(np.asarray(B, dtype=float), (n,)).copy()
        if periodic:
            dy = (period if period is not None else n * (y[1] - y[0])) / n
            nxt = np.roll(np.arange(n), -1)
        else:
            dy = float(y[1] - y[0])
            nxt = np.arange(1, n)
        cur = np.arange(nxt.size)
        if mid_density is None:
            mid_density = 0.5 * (rho[cur] + rho[nxt])
        if mid_B is None:
            mid_B = 0.5 * (Bn[cur] + Bn[nxt])
        mid_density = np.asarray(mid_density, dtype=float)
        mid_B = np.broadcast_to(np.asarray(mid_B, dtype=float), mid_density.shape).copy()
        if np.any(rho < 0) or not np.all(np.isfinite(rho)):
            raise DiagnosticsError("density must be finite and non-negative")
        if np.any(Bn <= 0) or np.any(mid_B <= 0):
            raise DiagnosticsError("B must be positive on the level set")
        total = rho.sum() if periodic else rho.sum() - 0.5 * (rho[0] + rho[-1])
        total *= dy
        if not (total > 0 and np.isfinite(total)):
            raise DiagnosticsError("level-set weights are not normalizable")
        return cls(
            z=float(z),
            y=y,
            weights=rho / total,
            B_vals=Bn,
            mid_weights=mid_density / total,
            mid_B=mid_B,
            dy=float(dy),
            periodic=periodic,
        )


def _level_coordinate(model: SdeModel, cmap: CoarseMap):
    if model.d != 2 or cmap.k != 1 or cmap.coordinate_index != 0:
        raise DiagnosticsError("level-set grids need d = 2 and the map x -> x^1")


def default_radius(model: SdeModel) -> float:
    """Five conditional standard deviations of ``x^2`` for Gaussian models."""
    g = model.gaussian_mu
    if g is None:
        raise DiagnosticsError("R must be given for non-Gaussian models")
    cov = np.asarray(g.cov, dtype=float)
    cond_var = cov[1, 1] - cov[0, 1] ** 2 / cov[0, 0]
    return 5.0 * math.sqrt(cond_var) + abs(float(g.mean[1]))


def level_set_grid(
    model: SdeModel,
    cmap: Optional[CoarseMap] = None,
    z: float = 0.0,
    R: Optional[float] = None,
    n_nodes: int = 2001,
) -> LevelSetGrid:
    """Conditional measure ``mu_z`` and metric ``B`` on the level set ``x^1 = z``.

    Euclidean models use the uniform grid on ``[-R, R]``; torus models use
    ``n_nodes`` periodic nodes on ``[0, period)`` and ignore ``R``.
    """
    if cmap is None:
        cmap = CoarseMap.coordinate(model.d)
    _level_coordinate(model, cmap)
    if model.domain.is_torus:
        L = model.domain.period
        y = L * np.arange(n_nodes) / n_nodes
        mids = y + 0.5 * L / n_nodes
        periodic = True
    else:
        if R is None:
            R = default_radius(model)
        if not R > 0:
            raise DiagnosticsError("R must be positive")
        y = np.linspace(-R, R, n_nodes)
        mids = 0.5 * (y[:-1] + y[1:])
        periodic = False
    nodes = np.column_stack([np.full(y.size, z), y])
    mpts = np.column_stack([np.full(mids.size, z), mids])
    Vn = model.potential(nodes)
    Vm = model.potential(mpts)
    shift = min(Vn.min(), Vm.min())
    rho = np.exp(-(Vn - shift))
    rho_m = np.exp(-(Vm - shift))
    if not periodic and max(rho[0], rho[-1]) > EDGE_DENSITY * rho.max():
        log.warning("level set z=%g: density at +-R is %.2e of its peak; increase R", z, max(rho[0], rho[-1]) / rho.max())
    Bn = schur_B(model.diffusion_matrix(nodes))[:, 0, 0]
    Bm = schur_B(model.diffusion_matrix(mpts))[:, 0, 0]
    return LevelSetGrid.from_density(
        y,
        rho,
        Bn,
        mid_density=rho_m,
        mid_B=Bm,
        z=z,
        periodic=periodic,
        period=model.domain.period if periodic else None,
    )


def _scaled_operator(grid: LevelSetGrid):
    """Diagonal and off-diagonal of ``M^{-1/2} K M^{-1/2}``."""
    m = grid.mass
    w = grid.flux
    s = 1.0 / np.sqrt(m)
    if grid.periodic:
        deg = w + np.roll(w, 1)
        off = -w * s * np.roll(s, -1)
        return deg * s * s, off
    deg = np.zeros(grid.n)
    deg[:-1] += w
    deg[1:] += w
    return deg * s * s, -w * s[:-1] * s[1:]


def level_set_gap(grid: LevelSetGrid) -> float:
    """Smallest nonzero eigenvalue of the weighted Neumann problem on ``grid``."""
    diag, off = _scaled_operator(grid)
    try:
        if grid.periodic:
            n = grid.n
            H = np.diag(diag)
            idx = np.arange(n)
            H[idx, (idx + 1) % n] += off
            H[(idx + 1) % n, idx] += off
            vals = eigh(H, eigvals_only=True, subset_by_index=[0, 1])
        else:
            vals = eigh_tridiagonal(diag, off, eigvals_only=True, select="i", select_range=(0, 1))
    except np.linalg.LinAlgError as exc:
        raise DiagnosticsError(f"eigen-solve failed at z={grid.z}: {exc}") from exc
    return float(vals[1])


@dataclass(frozen=True)
class PoincareScan:
    alpha: float
    z: np.ndarray
    alphas: np.ndarray
    alphas_wide: Optional[np.ndarray]
    r_sensitive: bool


def default_z_list(model: SdeModel, cmap: CoarseMap, n: int = 9) -> np.ndarray:
    """``n`` points spanning three marginal standard deviations of ``xi``."""
    if model.domain.is_torus:
        return model.domain.period * np.arange(n) / n
    g = model.gaussian_mu
    if g is None:
        raise DiagnosticsError("z_list must be given for non-Gaussian models")
    m = float(cmap(np.asarray(g.mean, dtype=float)[None, :])[0, 0])
    sd = math.sqrt(float(cmap.T[0] @ np.asarray(g.cov) @ cmap.T[0]))
    return m + np.linspace(-3.0 * sd, 3.0 * sd, n)


def _map(fn, items):
    items = list(items)
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(workers) as ex:
        return list(ex.map(fn, items))


def poincare_scan(
    model: SdeModel,
    cmap: Optional[CoarseMap] = None,
    z_list: Optional[Sequence[float]] = None,
    R: Optional[float] = None,
    n_nodes: int = 2001,
    check_R: bool = True,
) -> PoincareScan:
    """Level-set spectral gaps over ``z_list`` with a truncation check.

    The check repeats each solve on ``[-1.2 R, 1.2 R]`` at the same spacing
    and flags the scan when any gap moves by more than 1%.
    """
    if cmap is None:
        cmap = CoarseMap.coordinate(model.d)
    _level_coordinate(model, cmap)
    zs = np.asarray(default_z_list(model, cmap) if z_list is None else z_list, dtype=float)
    if zs.size == 0:
        raise DiagnosticsError("z_list is empty")
    torus = model.domain.is_torus
    if R is None and not torus:
        R = default_radius(model)
    alphas = np.array(_map(lambda z: level_set_gap(level_set_grid(model, cmap, z, R, n_nodes)), zs))
    wide = None
    sensitive = False
    if check_R and not torus:
        n_wide = 2 * int(round(1.2 * (n_nodes - 1) / 2)) + 1
        wide = np.array(
            _map(lambda z: level_set_gap(level_set_grid(model, cmap, z, 1.2 * R, n_wide)), zs)
        )
        rel = np.abs(wide - alphas) / np.abs(alphas)
        sensitive = bool(np.any(rel > R_SENSITIVITY))
        if sensitive:
            log.warning("Poincare constant changes by %.2f%% when R grows by 20%%", 100 * rel.max())
    return PoincareScan(
        alpha=float(alphas.min()), z=zs, alphas=alphas, alphas_wide=wide, r_sensitive=sensitive
    )


def poincare_constant(model, cmap=None, z_list=None, R=None, n_nodes=2001) -> float:
    """Minimum over ``z_list`` of the level-set Poincare constant."""
    return poincare_scan(model, cmap, z_list, R, n_nodes).alpha


# ---------------------------------------------------------------------------
# level-set Poisson problem


@dataclass(frozen=True)
class PoissonSolution:
    u: np.ndarray
    grad_energy: float
    f_norm2: float
    alpha: float
    bound: float

    @property
    def bound_holds(self) -> bool:
        return self.grad_energy <= self.bound * (1.0 + 1e-10)


def solve_level_set_poisson(grid: LevelSetGrid, f_vals, alpha: Optional[float] = None) -> PoissonSolution:
    """Solve ``int B u' v' dmu_z = int f v dmu_z`` with ``int u dmu_z = 0``.

    ``f`` must be mean-zero under the grid weights; a residual mean below
    ``1e-8 * max(1, rms f)`` is projected out.  Reports both sides of
    ``||u'||_B^2 <= ||f||^2 / alpha``.
    """
    if grid.periodic:
        raise DiagnosticsError("the level-set Poisson solver handles interval grids only")
    f = np.asarray(f_vals, dtype=float)
    if f.shape != (grid.n,):
        raise DiagnosticsError(f"f must have {grid.n} nodal values")
    m = grid.mass
    mean = float(m @ f / m.sum())
    rms = math.sqrt(float(m @ f**2 / m.sum()))
    if abs(mean) > 1e-8 * max(1.0, rms):
        raise DiagnosticsError(f"f is not mean-zero under the level-set measure (mean {mean:.3e})")
    f = f - mean
    if alpha is None:
        alpha = level_set_gap(grid)
    w = grid.flux
    n = grid.n
    # pin u[0] = 0 and solve the remaining SPD tridiagonal system
    diag = np.zeros(n)
    diag[:-1] += w
    diag[1:] += w
    ab = np.zeros((3, n - 1))
    ab[1] = diag[1:]
    ab[0, 1:] = -w[1:]
    ab[2, :-1] = -w[1:]
    rhs = (m * f)[1:]
    try:
        tail = solve_banded((1, 1), ab, rhs)
    except np.linalg.LinAlgError as exc:
        raise DiagnosticsError(f"singular level-set system: {exc}") from exc
    u = np.concatenate([[0.0], tail])
    u -= m @ u / m.sum()
    du = np.diff(u)
    energy = float(np.sum(w * du * du))
    fn2 = float(m @ f**2)
    return PoissonSolution(u=u, grad_energy=energy, f_norm2=fn2, alpha=float(alpha), bound=fn2 / alpha)


# ---------------------------------------------------------------------------
# Monte Carlo constants


@dataclass(frozen=True)
class Estimate:
    value: float
    se: float


def _mean_se(total, total_sq, n):
    mean = total / n
    var = max(total_sq / n - mean * mean, 0.0) * n / max(n - 1, 1)
    return Estimate(mean, math.sqrt(var / n))


def level_set_norm2(A, T, grad):
    """``|grad|_B^2 = grad^T (A - A T^T (T A T^T)^{-1} T A) grad`` per point."""
    Ag = np.einsum("nij,nj->ni", A, grad)
    TAg = Ag @ T.T
    G = np.einsum("ki,nij,lj->nkl", T, A, T)
    if T.shape[0] == 1:
        corr = TAg[:, 0] ** 2 / G[:, 0, 0]
    else:
        corr = np.einsum("nk,nk->n", TAg, np.linalg.solve(G, TAg[..., None])[..., 0])
    return np.einsum("ni,ni->n", Ag, grad) - corr


def _row_norm_gradient(model: SdeModel, cmap: CoarseMap, x):
    """Gradient of ``|T Sigma|`` (k = 1)."""
    t = cmap.T[0]
    wx = model.domain.wrap(x)
    S = model.Sigma(wx)
    R = np.einsum("i,nij->nj", t, S)
    nrm = np.sqrt(np.einsum("nj,nj->n", R, R))
    if model.Sigma.constant:
        return np.zeros_like(x), nrm
    if model.Sigma.jacobian is not None:
        dS = model.Sigma.jacobian(wx)
        dR = np.einsum("i,nijl->njl", t, dS)
        return np.einsum("nj,njl->nl", R, dR) / nrm[:, None], nrm

    def row_norm(y):
        Ry = np.einsum("i,...ij->...j", t, model.Sigma(y))
        return np.sqrt(np.einsum("...j,...j->...", Ry, Ry))[..., None]

    return fd_jacobian(row_norm, wx)[:, 0, :], nrm


@dataclass(frozen=True)
class CouplingConstants:
    kappa2: float
    kappa2_se: float
    lambda2: float
    lambda2_se: float


def estimate_kappa_lambda(model: SdeModel, cmap: Optional[CoarseMap], sample: EquilibriumSample) -> CouplingConstants:
    """Monte Carlo ``E|grad^ (T F)|_B^2`` and ``E|grad^ |T Sigma||_B^2``."""
    if cmap is None:
        cmap = CoarseMap.coordinate(model.d)
    T = cmap.T
    pts = sample.points
    n = pts.shape[0]
    sums = np.zeros(4)
    for lo in range(0, n, MC_CHUNK):
        x = pts[lo : lo + MC_CHUNK]
        A = model.diffusion_matrix(x)
        J = model.drift_jacobian(x)
        gF = np.einsum("ki,nij->nkj", T, J)
        q = sum(level_set_norm2(A, T, gF[:, r]) for r in range(cmap.k))
        if cmap.k == 1:
            gS, _ = _row_norm_gradient(model, cmap, x)
            l = level_set_norm2(A, T, gS)
        else:
            l = np.zeros(x.shape[0])
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(l))):
            bad = lo + int(np.flatnonzero(~(np.isfinite(q) & np.isfinite(l)))[0])
            raise DiagnosticsError(f"non-finite level-set gradient at sample {bad}")
        sums += [q.sum(), (q * q).sum(), l.sum(), (l * l).sum()]
    k2 = _mean_se(sums[0], sums[1], n)
    l2 = _mean_se(sums[2], sums[3], n)
    return CouplingConstants(k2.value, k2.se, l2.value, l2.se)


@dataclass(frozen=True)
class CoefficientGap:
    gap_drift: float
    gap_drift_se: float
    gap_diff: float
    gap_diff_se: float
    clamped: int = 0


def coefficient_gap(
    model: SdeModel, effective: EffectiveModel, sample: EquilibriumSample, cmap: Optional[CoarseMap] = None
) -> CoefficientGap:
    """Monte Carlo ``E|T F - b(xi)|^2`` and ``E(|T Sigma| - sigma(xi))^2``."""
    if cmap is None:
        cmap = CoarseMap.coordinate(model.d)
    pts = sample.points
    n = pts.shape[0]
    sums = np.zeros(4)
    clamped = 0
    for lo in range(0, n, MC_CHUNK):
        x = pts[lo : lo + MC_CHUNK]
        z = cmap(x)
        clamped += effective.clamped_count(z)
        dF = model.drift(x) @ cmap.T.T - effective.drift(z)
        g = np.einsum("nk,nk->n", dF, dF)
        if cmap.k == 1:
            R = np.einsum("i,nij->nj", cmap.T[0], model.diffusion(x))
            ds = np.sqrt(np.einsum("nj,nj->n", R, R)) - effective.diffusion(z)[:, 0, 0]
            h = ds * ds
        else:
            h = np.zeros(x.shape[0])
        sums += [g.sum(), (g * g).sum(), h.sum(), (h * h).sum()]
    if clamped:
        log.warning("coefficient gap: %d samples outside the effective range were clamped", clamped)
    gd = _mean_se(sums[0], sums[1], n)
    gs = _mean_se(sums[2], sums[3], n)
    return CoefficientGap(gd.value, gd.se, gs.value, gs.se, clamped)


# ---------------------------------------------------------------------------
# bound formulas

TABLE_ROWS = {
    "reversible-identity": "F = -grad V, Sigma = Id",
    "general-F-identity": "general F, Sigma = Id",
    "sigma1-slow-only": "general F, |Sigma^1| = |Sigma^1|(x^1)",
    "general": "general F and Sigma",
}

FORMULAS = {
    "weak-A": "(exp((2 L_b + 1) T) - 1) / (2 L_b + 1) * kappa2 / alpha",
    "strong-A": "27 * kappa2 / alpha^2 * T * exp(L_b^2 T^2)",
    "weak-C": "exp(C T) * (4 T^2 kappa2 / alpha + 64 T lambda2 / alpha), C = max(4 L_b, 32 L_sigma^2)",
    "strong-C": "exp(C T) * (54 T kappa2 / alpha^2 + 64 T lambda2 / alpha), C = max(4 L_b, 32 L_sigma^2)",
}


@dataclass(frozen=True)
class BoundTable:
    weak_A: float
    strong_A: float
    weak_C: float
    strong_C: float
    row: str
    formulas: dict = field(default_factory=lambda: dict(FORMULAS))

    def as_dict(self):
        return {
            "weak-A": self.weak_A,
            "strong-A": self.strong_A,
            "weak-C": self.weak_C,
            "strong-C": self.strong_C,
        }

    def applicable_weak(self) -> str:
        return "weak-A" if self.row in ("reversible-identity", "general-F-identity") else "weak-C"


def table_row(identity_diffusion: bool, reversible: bool, lambda2: float) -> str:
    if identity_diffusion:
        return "reversible-identity" if reversible else "general-F-identity"
    return "sigma1-slow-only" if lambda2 == 0 else "general"


def evaluate_bounds(
    kappa2: float,
    lambda2: float,
    alpha_pi: float,
    L_b: float,
    L_sigma: float,
    T: float,
    identity_diffusion: bool = False,
    reversible: bool = False,
) -> BoundTable:
    """All four explicit bounds on ``E sup |xi(X) - Z|^2`` plus the table row."""
    vals = np.array([kappa2, lambda2, alpha_pi, L_b, L_sigma, T], dtype=float)
    if not np.all(np.isfinite(vals)):
        raise ValueError("bound inputs must be finite")
    if not alpha_pi > 0:
        raise ValueError("alpha_pi must be positive")
    r = 2.0 * L_b + 1.0
    growth = T if r == 0 else math.expm1(r * T) / r
    weak_A = growth * kappa2 / alpha_pi
    strong_A = 27.0 * kappa2 / alpha_pi**2 * T * math.exp(L_b**2 * T**2)
    C = max(4.0 * L_b, 32.0 * L_sigma**2)
    eCT = math.exp(C * T)
    weak_C = eCT * (4.0 * T**2 * kappa2 / alpha_pi + 64.0 * T * lambda2 / alpha_pi)
    strong_C = eCT * (54.0 * T * kappa2 / alpha_pi**2 + 64.0 * T * lambda2 / alpha_pi)
    return BoundTable(weak_A, strong_A, weak_C, strong_C, table_row(identity_diffusion, reversible, lambda2))


# ---------------------------------------------------------------------------
# report


@dataclass(frozen=True)
class DiagnosticsReport:
    kappa2: float
    kappa2_se: float
    lambda2: float
    lambda2_se: float
    alpha_pi: float
    gap_drift: float
    gap_drift_se: float
    gap_diff: float
    gap_diff_se: float
    bounds: BoundTable

    def rows(self):
        out = [
            ("kappa2", self.kappa2, self.kappa2_se),
            ("lambda2", self.lambda2, self.lambda2_se),
            ("alpha_pi", self.alpha_pi, None),
            ("gap_drift", self.gap_drift, self.gap_drift_se),
            ("gap_diff", self.gap_diff, self.gap_diff_se),
        ]
        out += [(k, v, None) for k, v in self.bounds.as_dict().items()]
        return out

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["quantity", "value", "se"])
            for name, v, se in self.rows():
                w.writerow([name, format(v, ".17g"), "NA" if se is None else format(se, ".17g")])
            w.writerow(["table_row", self.bounds.row, "NA"])

    def to_text(self) -> str:
        lines = [f"{'quantity':<12} {'value':>14} {'se':>12}"]
        for name, v, se in self.rows():
            lines.append(f"{name:<12} {v:>14.6g} {'-' if se is None else format(se, '.3g'):>12}")
        lines.append(f"table row: {TABLE_ROWS[self.bounds.row]}")
        return "\n".join(lines)


def diagnose(
    model: SdeModel,
    effective: EffectiveModel,
    sample: EquilibriumSample,
    T: float,
    cmap: Optional[CoarseMap] = None,
    alpha_pi: Optional[float] = None,
    **grid_kw,
) -> DiagnosticsReport:
    """Every bound constant for one model and effective pair."""
    if cmap is None:
        cmap = CoarseMap.coordinate(model.d)
    kl = estimate_kappa_lambda(model, cmap, sample)
    gap = coefficient_gap(model, effective, sample, cmap)
    if alpha_pi is None:
        alpha_pi = poincare_constant(model, cmap, **grid_kw)
    bounds = evaluate_bounds(
        kl.kappa2,
        kl.lambda2,
        alpha_pi,
        effective.L_b,
        effective.L_sigma,
        T,
        model.identity_diffusion,
        model.reversible,
    )
    return DiagnosticsReport(
        kl.kappa2,
        kl.kappa2_se,
        kl.lambda2,
        kl.lambda2_se,
        alpha_pi,
        gap.gap_drift,
        gap.gap_drift_se,
        gap.gap_diff,
        gap.gap_diff_se,
        bounds,
    )
