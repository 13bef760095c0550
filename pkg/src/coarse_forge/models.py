"""SDE models with an invariant measure known by construction.

A model is specified by a potential ``V``, a diffusion matrix ``Sigma`` and a
divergence-free (with respect to ``mu = exp(-V)/Z``) field ``c``.  The drift is
derived as::

    F = -A grad V + div A + c,    A = Sigma Sigma^T

so that ``mu`` is stationary for ``dX = F dt + sqrt(2) Sigma dW``.

All fields are vectorized: they take points of shape ``(..., d)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Mapping, Optional

import numpy as np
from scipy import integrate

Array = np.ndarray

FD_REL_STEP = 1e-5


class ModelError(ValueError):
    """Raised for inconsistent model definitions."""


# ---------------------------------------------------------------------------
# field containers


@dataclass(frozen=True)
class ScalarField:
    """Real-valued field with optional analytic gradient and Hessian."""

    eval: Callable[[Array], Array]
    gradient: Optional[Callable[[Array], Array]] = None
    hessian: Optional[Callable[[Array], Array]] = None

    def __call__(self, x):
        return self.eval(np.asarray(x, dtype=float))

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        if self.gradient is not None:
            return self.gradient(x)
        return fd_jacobian(self.eval, x)


@dataclass(frozen=True)
class VectorField:
    """R^d-valued field; ``jacobian(x)[..., i, j] = d_j F^i``."""

    eval: Callable[[Array], Array]
    jacobian: Optional[Callable[[Array], Array]] = None

    def __call__(self, x):
        return self.eval(np.asarray(x, dtype=float))

    def jac(self, x):
        x = np.asarray(x, dtype=float)
        if self.jacobian is not None:
            return self.jacobian(x)
        return fd_jacobian(self.eval, x)


@dataclass(frozen=True)
class MatrixField:
    """d x d' matrix-valued field.

    ``jacobian(x)[..., i, j, k] = d_k Sigma^{ij}``.  ``constant`` marks fields
    independent of ``x`` (their derivatives are exactly zero).
    """

    eval: Callable[[Array], Array]
    jacobian: Optional[Callable[[Array], Array]] = None
    constant: bool = False

    def __call__(self, x):
        return self.eval(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class DomainSpec:
    kind: str
    dimension: int
    period: float = 1.0

    def __post_init__(self):
        if self.kind not in ("euclidean", "torus"):
            raise ModelError(f"unknown domain kind {self.kind!r}")
        if self.dimension < 1:
            raise ModelError("dimension must be positive")
        if self.kind == "torus" and not self.period > 0:
            raise ModelError("torus period must be positive")

    @property
    def is_torus(self) -> bool:
        return self.kind == "torus"

    def wrap(self, x):
        if self.is_torus:
            return np.mod(x, self.period)
        return x


@dataclass(frozen=True)
class CoarseMap:
    """Affine coarse-graining map ``xi(x) = T x + tau``."""

    T: Array
    tau: Array

    def __post_init__(self):
        T = np.atleast_2d(np.asarray(self.T, dtype=float))
        tau = np.atleast_1d(np.asarray(self.tau, dtype=float))
        k, d = T.shape
        if tau.shape != (k,):
            raise ModelError(f"tau must have shape ({k},), got {tau.shape}")
        if k >= d:
            raise ModelError("coarse map must reduce dimension (k < d)")
        if np.linalg.matrix_rank(T) != k:
            raise ModelError("coarse map matrix must have full rank")
        T.setflags(write=False)
        tau.setflags(write=False)
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "tau", tau)

    @classmethod
    def coordinate(cls, d: int, index: int = 0) -> "CoarseMap":
        T = np.zeros((1, d))
        T[0, index] = 1.0
        return cls(T, np.zeros(1))

    @property
    def k(self) -> int:
        return self.T.shape[0]

    @property
    def d(self) -> int:
        return self.T.shape[1]

    @cached_property
    def coordinate_index(self) -> Optional[int]:
        """Index ``i`` if the map is ``x -> x^i``, else None."""
        if self.k != 1 or np.any(self.tau != 0):
            return None
        row = self.T[0]
        nz = np.flatnonzero(row)
        if len(nz) == 1 and row[nz[0]] == 1.0:
            return int(nz[0])
        return None

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return x @ self.T.T + self.tau


@dataclass(frozen=True)
class GaussianMeasure:
    mean: Array
    cov: Array


@dataclass(frozen=True)
class AnalyticEffective:
    """Closed-form effective coefficients on R^k (k = 1 here).

    ``b`` and ``sigma`` take arrays of shape ``(n, k)``; ``b`` returns
    ``(n, k)`` and ``sigma`` returns ``(n, k, k)``.
    """

    b: Callable[[Array], Array]
    sigma: Callable[[Array], Array]
    L_b: float
    L_sigma: float


@dataclass(frozen=True)
class GeometryAt:
    A: Array
    B: Array
    Pi: Array


@dataclass(frozen=True)
class SdeModel:
    """Full-dimensional SDE ``dX = F dt + sqrt(2) Sigma dW``."""

    domain: DomainSpec
    noise_dim: int
    V: ScalarField
    Sigma: MatrixField
    c: VectorField
    F: VectorField
    gaussian_mu: Optional[GaussianMeasure] = None
    analytic_effective: Optional[AnalyticEffective] = None
    name: str = "custom"
    params: Mapping[str, float] = field(default_factory=dict)
    reference: Mapping[str, float] = field(default_factory=dict)
    identity_diffusion: bool = False
    reversible: bool = False

    @property
    def d(self) -> int:
        return self.domain.dimension

    def drift(self, x):
        return self.F(self.domain.wrap(np.asarray(x, dtype=float)))

    def diffusion(self, x):
        return self.Sigma(self.domain.wrap(np.asarray(x, dtype=float)))

    def diffusion_matrix(self, x):
        S = self.diffusion(x)
        return S @ np.swapaxes(S, -1, -2)

    def potential(self, x):
        return self.V(self.domain.wrap(np.asarray(x, dtype=float)))

    def drift_jacobian(self, x):
        return self.F.jac(self.domain.wrap(np.asarray(x, dtype=float)))


# ---------------------------------------------------------------------------
# finite differences


def fd_step(x):
    """Per-point central-difference step ``1e-5 * (1 + |x|)``."""
    return FD_REL_STEP * (1.0 + np.linalg.norm(x, axis=-1))


def fd_jacobian(fun, x):
    """Central-difference derivative of ``fun`` along the last axis of x.

    Returns an array of shape ``fun(x).shape + (d,)``.
    """
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    h = fd_step(x)
    cols = []
    for j in range(d):
        e = np.zeros(d)
        e[j] = 1.0
        step = h[..., None] * e
        fp = np.asarray(fun(x + step))
        fm = np.asarray(fun(x - step))
        hb = h.reshape(h.shape + (1,) * (fp.ndim - h.ndim))
        cols.append((fp - fm) / (2.0 * hb))
    return np.stack(cols, axis=-1)


def divergence_of_A(Sigma: MatrixField, x):
    """Row divergence ``(div A)_i = sum_j d_j A^{ij}`` with ``A = Sigma Sigma^T``."""
    x = np.asarray(x, dtype=float)
    if Sigma.constant:
        return np.zeros(x.shape)
    if Sigma.jacobian is not None:
        S = Sigma(x)
        dS = Sigma.jacobian(x)  # [..., i, k, m] = d_m S^{ik}
        # d_j (S^{ik} S^{jk}) summed over j, k
        t1 = np.einsum("...ikj,...jk->...i", dS, S)
        t2 = np.einsum("...ik,...jkj->...i", S, dS)
        return t1 + t2

    def A_of(y):
        S = Sigma(y)
        return S @ np.swapaxes(S, -1, -2)

    dA = fd_jacobian(A_of, x)  # [..., i, j, m]
    return np.einsum("...ijj->...i", dA)


# ---------------------------------------------------------------------------
# construction


def build_model(
    V: ScalarField,
    Sigma: MatrixField,
    c: VectorField,
    domain: DomainSpec,
    noise_dim: Optional[int] = None,
    probe_points=None,
    **meta,
) -> SdeModel:
    """Assemble an :class:`SdeModel` and derive its drift.

    The drift Jacobian is analytic when ``V.hessian`` and ``c.jacobian`` are
    given and ``Sigma`` is constant; otherwise it falls back to central
    differences.
    """
    d = domain.dimension
    if probe_points is None:
        probe_points = np.vstack([np.zeros(d), 0.5 * np.ones(d)])
    probe = np.atleast_2d(np.asarray(probe_points, dtype=float))
    S = np.asarray(Sigma(probe))
    if S.ndim != 3 or S.shape[1] != d:
        raise ModelError(f"Sigma must map (n, {d}) to (n, {d}, d'), got {S.shape}")
    dprime = S.shape[2]
    if noise_dim is not None and noise_dim != dprime:
        raise ModelError(f"noise_dim {noise_dim} does not match Sigma columns {dprime}")
    cv = np.asarray(c(probe))
    if cv.shape != probe.shape:
        raise ModelError(f"c must map (n, {d}) to (n, {d}), got {cv.shape}")
    gv = np.asarray(V.grad(probe))
    if gv.shape != probe.shape:
        raise ModelError(f"grad V must have shape (n, {d}), got {gv.shape}")
    A = S @ np.swapaxes(S, -1, -2)
    for Ai in A:
        if not np.allclose(Ai, Ai.T) or np.linalg.eigvalsh(Ai).min() <= 0:
            raise ModelError("A = Sigma Sigma^T is not positive definite at a probe point")

    if Sigma.constant:
        A_const = A[0].copy()

        def drift(x):
            return -(V.grad(x) @ A_const.T) + c(x)

    else:

        def drift(x):
            S = Sigma(x)
            A = S @ np.swapaxes(S, -1, -2)
            gV = V.grad(x)
            return -np.einsum("...ij,...j->...i", A, gV) + divergence_of_A(Sigma, x) + c(x)

    jac = None
    if Sigma.constant and V.hessian is not None and c.jacobian is not None:
        A0 = A[0]

        def jac(x):
            return -np.einsum("ij,...jk->...ik", A0, V.hessian(x)) + c.jacobian(x)

    return SdeModel(
        domain=domain,
        noise_dim=dprime,
        V=V,
        Sigma=Sigma,
        c=c,
        F=VectorField(drift, jac),
        **meta,
    )


# ---------------------------------------------------------------------------
# geometry


def schur_B(A):
    """Level-set metric ``B = A[1:,1:] - A[1:,0] A[0,1:] / A[0,0]``."""
    A = np.asarray(A, dtype=float)
    a11 = A[..., 0, 0]
    if np.any(a11 <= 0):
        raise ModelError("A^{11} must be positive")
    col = A[..., 1:, 0]
    return A[..., 1:, 1:] - col[..., :, None] * col[..., None, :] / a11[..., None, None]


def projector(A, T):
    """A-orthogonal projector off the coarse directions.

    ``Pi = I - T^T (T A T^T)^{-1} T A``; for ``T = e1`` this is
    ``I - e1 (A e1)^T / A^{11}``.
    """
    A = np.asarray(A, dtype=float)
    T = np.atleast_2d(np.asarray(T, dtype=float))
    d = A.shape[-1]
    G = T @ A @ T.T
    Ginv = np.linalg.inv(G)
    return np.eye(d) - T.T @ Ginv @ T @ A


def geometry_at(model: SdeModel, x) -> GeometryAt:
    """A, B and Pi at a single point for the map ``xi(x) = x^1``."""
    x = np.asarray(x, dtype=float)
    A = model.diffusion_matrix(x[None, :])[0]
    if A[0, 0] <= 0:
        raise ModelError("A^{11}(x) must be positive")
    e1 = np.zeros((1, model.d))
    e1[0, 0] = 1.0
    return GeometryAt(A=A, B=schur_B(A), Pi=projector(A, e1))


# ---------------------------------------------------------------------------
# stationarity check


def verify_stationarity(model: SdeModel, lows, highs, nodes) -> float:
    """Max normalized Fokker-Planck residual of ``mu`` on a rectangular grid.

    The stationary flux ``-mu F^i + d_j(A^{ij} mu)`` is evaluated in the
    equivalent pointwise form ``mu (-F + div A - A grad V)`` and its divergence
    is taken with second-order central differences.  The result is the maximum
    over interior nodes, divided by the maximum of ``mu`` on the grid.
    """
    d = model.d
    lows = np.broadcast_to(np.asarray(lows, dtype=float), (d,))
    highs = np.broadcast_to(np.asarray(highs, dtype=float), (d,))
    nodes = np.broadcast_to(np.asarray(nodes, dtype=int), (d,))
    if np.any(nodes < 8):
        raise ModelError("stationarity grid needs at least 8 nodes per axis")
    axes = [np.linspace(lo, hi, n) for lo, hi, n in zip(lows, highs, nodes)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    pts = mesh.reshape(-1, d)
    Vv = model.potential(pts)
    mu = np.exp(-(Vv - Vv.min()))
    wp = model.domain.wrap(pts)
    S = model.Sigma(wp)
    A = S @ np.swapaxes(S, -1, -2)
    flux_dir = (
        -model.F(wp)
        + divergence_of_A(model.Sigma, wp)
        - np.einsum("nij,nj->ni", A, model.V.grad(wp))
    )
    flux = (mu[:, None] * flux_dir).reshape(mesh.shape)
    res = np.zeros(mesh.shape[:-1])
    for i, ax in enumerate(axes):
        res += np.gradient(flux[..., i], ax, axis=i)
    interior = tuple(slice(1, -1) for _ in range(d))
    return float(np.abs(res[interior]).max() / mu.max())


# ---------------------------------------------------------------------------
# registry

_J = np.array([[0.0, 1.0], [-1.0, 0.0]])


def _quadratic_potential(a):
    def V(x):
        return 0.5 * (x[..., 0] ** 2 + a * x[..., 1] ** 2)

    def grad(x):
        return np.stack([x[..., 0], a * x[..., 1]], axis=-1)

    def hess(x):
        return np.broadcast_to(np.diag([1.0, a]), x.shape[:-1] + (2, 2))

    return ScalarField(V, grad, hess)


def _rotation_field(a, gamma):
    # c = gamma * J grad V; J grad V . grad V = 0 and div(J grad V) = 0
    def c(x):
        return gamma * np.stack([a * x[..., 1], -x[..., 0]], axis=-1)

    M = gamma * np.array([[0.0, a], [-1.0, 0.0]])

    def jac(x):
        return np.broadcast_to(M, x.shape[:-1] + (2, 2))

    return VectorField(c, jac)


def _constant_matrix(M):
    M = np.asarray(M, dtype=float)

    def S(x):
        return np.broadcast_to(M, x.shape[:-1] + M.shape)

    return MatrixField(S, constant=True)


def _gaussian_mu(a):
    return GaussianMeasure(mean=np.zeros(2), cov=np.diag([1.0, 1.0 / a]))


def _linear_effective(slope, sigma_value):
    def b(z):
        return -slope * z

    def sigma(z):
        return np.full(z.shape[:-1] + (1, 1), sigma_value)

    return AnalyticEffective(b=b, sigma=sigma, L_b=abs(slope), L_sigma=0.0)


def mean_sin2_gaussian(a: float) -> float:
    """``E[sin^2(Y)]`` for ``Y ~ N(0, 1/a)``."""
    return 0.5 * (1.0 - np.exp(-2.0 / a))


def gaussian_expectation(fun, a: float) -> float:
    """``E[fun(Y)]`` for ``Y ~ N(0, 1/a)`` by adaptive quadrature."""
    sd = 1.0 / np.sqrt(a)
    val, _ = integrate.quad(
        lambda y: fun(y) * np.exp(-0.5 * a * y * y), -12.0 * sd, 12.0 * sd, limit=200
    )
    return float(val * np.sqrt(a / (2.0 * np.pi)))


def var_diff_lambda2(a: float, delta: float) -> float:
    """``E|d_2 s(Y)|^2`` for the var-diff row ``s(y)^2 = 1 + delta sin^2 y``."""
    return gaussian_expectation(
        lambda y: delta**2 * np.sin(2.0 * y) ** 2 / (4.0 * (1.0 + delta * np.sin(y) ** 2)), a
    )


def _positive(name, value):
    if not value > 0:
        raise ModelError(f"parameter {name} must be positive, got {value}")


def torus_symplectic(u1: float = 1.0, u2: float = 0.7, period: float = 1.0) -> SdeModel:
    """``dX = J grad(u.x) dt + sqrt(2) dW`` on the flat 2-torus."""
    _positive("period", period)
    u = np.array([u2, -u1])

    def V(x):
        return np.zeros(x.shape[:-1])

    def zero_grad(x):
        return np.zeros(x.shape)

    def zero_hess(x):
        return np.zeros(x.shape + (x.shape[-1],))

    def c(x):
        return np.broadcast_to(u, x.shape).copy()

    def c_jac(x):
        return np.zeros(x.shape + (2,))

    def b(z):
        return np.full(z.shape, float(u2))

    def sigma(z):
        return np.ones(z.shape[:-1] + (1, 1))

    return build_model(
        ScalarField(V, zero_grad, zero_hess),
        _constant_matrix(np.eye(2)),
        VectorField(c, c_jac),
        DomainSpec("torus", 2, period),
        analytic_effective=AnalyticEffective(b, sigma, 0.0, 0.0),
        name="torus-symplectic",
        params={"u1": u1, "u2": u2, "period": period},
        reference={"alpha_pi": (2.0 * np.pi / period) ** 2, "kappa2": 0.0, "lambda2": 0.0},
        identity_diffusion=True,
    )


def nr_gauss(a: float = 4.0, gamma: float = 0.5) -> SdeModel:
    """Gaussian ``V = (x1^2 + a x2^2)/2`` with rotational perturbation ``gamma``."""
    _positive("a", a)
    return build_model(
        _quadratic_potential(a),
        _constant_matrix(np.eye(2)),
        _rotation_field(a, gamma),
        DomainSpec("euclidean", 2),
        gaussian_mu=_gaussian_mu(a),
        analytic_effective=_linear_effective(1.0, 1.0),
        name="nr-gauss",
        params={"a": a, "gamma": gamma},
        reference={
            "alpha_pi": a,
            "kappa2": gamma**2 * a**2,
            "lambda2": 0.0,
            "gap_drift": gamma**2 * a,
        },
        identity_diffusion=True,
        reversible=(gamma == 0),
    )


def two_scale(a: float = 4.0, gamma: float = 0.5, eps: float = 0.1) -> SdeModel:
    """nr-gauss with the second coordinate accelerated by ``1/eps``."""
    _positive("a", a)
    _positive("eps", eps)
    return build_model(
        _quadratic_potential(a),
        _constant_matrix(np.diag([1.0, eps**-0.5])),
        _rotation_field(a, gamma),
        DomainSpec("euclidean", 2),
        gaussian_mu=_gaussian_mu(a),
        analytic_effective=_linear_effective(1.0, 1.0),
        name="two-scale",
        params={"a": a, "gamma": gamma, "eps": eps},
        reference={
            "alpha_pi": a / eps,
            "kappa2": gamma**2 * a**2 / eps,
            "lambda2": 0.0,
            "gap_drift": gamma**2 * a,
        },
        identity_diffusion=(eps == 1.0),
        reversible=(gamma == 0),
    )


def var_diff(
    a: float = 4.0, gamma: float = 0.5, delta: float = 0.5, analytic_jacobian: bool = True
) -> SdeModel:
    """Diffusion ``diag(s(x2), 1)`` with ``s^2 = 1 + delta sin^2(x2)``."""
    _positive("a", a)
    if not delta > -1:
        raise ModelError(f"parameter delta must exceed -1, got {delta}")

    def S(x):
        s = np.sqrt(1.0 + delta * np.sin(x[..., 1]) ** 2)
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 0] = s
        out[..., 1, 1] = 1.0
        return out

    def S_jac(x):
        s = np.sqrt(1.0 + delta * np.sin(x[..., 1]) ** 2)
        out = np.zeros(x.shape[:-1] + (2, 2, 2))
        out[..., 0, 0, 1] = delta * np.sin(2.0 * x[..., 1]) / (2.0 * s)
        return out

    m = mean_sin2_gaussian(a)
    slope = 1.0 + delta * m
    return build_model(
        _quadratic_potential(a),
        MatrixField(S, S_jac if analytic_jacobian else None),
        _rotation_field(a, gamma),
        DomainSpec("euclidean", 2),
        gaussian_mu=_gaussian_mu(a),
        analytic_effective=_linear_effective(slope, np.sqrt(slope)),
        name="var-diff",
        params={"a": a, "gamma": gamma, "delta": delta},
        reference={
            "alpha_pi": a,
            "kappa2": gamma**2 * a**2 + 0.5 * delta**2 * (1.0 - np.exp(-8.0 / a)),
            "lambda2": var_diff_lambda2(a, delta),
        },
        reversible=(gamma == 0),
    )


REGISTRY: dict[str, Callable[..., SdeModel]] = {
    "torus-symplectic": torus_symplectic,
    "nr-gauss": nr_gauss,
    "two-scale": two_scale,
    "var-diff": var_diff,
}


def registry(name: str, **params) -> SdeModel:
    """Build one of the benchmark models by name."""
    try:
        factory = REGISTRY[name]
    except KeyError:
        raise ModelError(
            f"unknown model {name!r}; expected one of {sorted(REGISTRY)}"
        ) from None
    try:
        return factory(**params)
    except TypeError as exc:
        raise ModelError(f"bad parameters for {name}: {exc}") from None
