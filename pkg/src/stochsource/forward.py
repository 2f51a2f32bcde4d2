"""Elliptic operator, theta-scheme parabolic solves and SPDE path simulation.

The state equation is ``du = A u dt + R(t) f dt + g dw`` with homogeneous
Dirichlet conditions and a single scalar Brownian motion ``w``.  Space is
discretised by centred second-order differences on the interior nodes;
time by the theta scheme

    (I - theta dt A) u^{k+1} = (I + (1 - theta) dt A) u^k + s_k f + g sqrt(dt) xi_k,
    s_k = dt (theta R(t_{k+1}) + (1 - theta) R(t_k)).

``theta = 1`` is implicit Euler (the default, and the scheme used for
stochastic paths); ``theta = 1/2`` is Crank-Nicolson.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np
from scipy import integrate
from scipy.linalg import cho_solve_banded, cholesky_banded

from .errors import (
    InvalidConfigurationError,
    InvalidModelError,
    NumericalFailureError,
    ShapeError,
    UnsupportedOracleError,
)
from .grid import EigenSystem, Grid, TimeMesh, l2_norm, project


@dataclass(frozen=True, eq=False)
class EllipticOperator:
    """``A u = (a u')' - c u`` restricted to interior nodes.

    ``diag`` and ``off`` are the main and off diagonals of the symmetric
    tridiagonal interior matrix; boundary values are eliminated (fixed at 0).
    """

    grid: Grid
    a: np.ndarray
    c: np.ndarray
    diag: np.ndarray
    off: np.ndarray

    @property
    def size(self) -> int:
        return self.grid.M - 1

    @property
    def is_laplacian(self) -> bool:
        return bool(np.all(self.a == 1.0) and np.all(self.c == 0.0))

    def apply_interior(self, u):
        """Matrix-vector product on interior values; ``u`` may carry a trailing batch axis."""
        u = np.asarray(u, dtype=float)
        d = self.diag if u.ndim == 1 else self.diag[:, None]
        o = self.off if u.ndim == 1 else self.off[:, None]
        out = d * u
        out[:-1] += o * u[1:]
        out[1:] += o * u[:-1]
        return out

    def apply(self, u) -> np.ndarray:
        u = self.grid.check(u)
        out = np.zeros_like(u)
        out[1:-1] = self.apply_interior(u[1:-1])
        return out

    def matrix(self) -> np.ndarray:
        return np.diag(self.diag) + np.diag(self.off, 1) + np.diag(self.off, -1)


def assemble_operator(grid: Grid, a=1.0, c=0.0) -> EllipticOperator:
    a = np.broadcast_to(np.asarray(a, dtype=float), grid.x.shape).copy()
    c = np.broadcast_to(np.asarray(c, dtype=float), grid.x.shape).copy()
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(c))):
        raise InvalidModelError("operator coefficients must be finite")
    if np.min(a) <= 0:
        raise InvalidModelError(f"diffusion must be bounded below by a positive constant, min a = {np.min(a)}")
    if np.min(c) < 0:
        raise InvalidModelError(f"reaction coefficient must be nonnegative, min c = {np.min(c)}")
    h2 = grid.spacing**2
    a_half = 0.5 * (a[:-1] + a[1:])
    diag = -(a_half[:-1] + a_half[1:]) / h2 - c[1:-1]
    off = a_half[1:-1] / h2
    for arr in (a, c, diag, off):
        arr.setflags(write=False)
    return EllipticOperator(grid, a, c, diag, off)


@dataclass(frozen=True)
class ExponentialFactor:
    """Time factor ``R(t) = scale * exp(rate * t)``; admits closed-form time integrals."""

    scale: float = 1.0
    rate: float = 0.0

    def __call__(self, t):
        return self.scale * np.exp(self.rate * np.asarray(t, dtype=float))


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Everything needed to simulate ``du = A u dt + R f dt + g dw``."""

    operator: EllipticOperator
    f: np.ndarray
    R: Callable
    g: np.ndarray
    u0: np.ndarray
    tmesh: TimeMesh
    theta: float = 1.0

    def __post_init__(self):
        grid = self.operator.grid
        for name in ("f", "g", "u0"):
            object.__setattr__(self, name, grid.check(getattr(self, name), name).copy())
        if not 0.5 <= self.theta <= 1.0:
            raise InvalidConfigurationError(f"theta must lie in [1/2, 1], got {self.theta}")
        r = self.R_values
        if not np.all(np.isfinite(r)) or np.min(r) <= 0:
            raise InvalidModelError("time factor R must be strictly positive on the mesh")

    @property
    def grid(self) -> Grid:
        return self.operator.grid

    @cached_property
    def R_values(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.R(self.tmesh.times), dtype=float), (self.tmesh.K + 1,)).copy()

    @cached_property
    def source_weights(self) -> np.ndarray:
        """Per-step source coefficients ``s_k``."""
        r = self.R_values
        return self.tmesh.dt * (self.theta * r[1:] + (1.0 - self.theta) * r[:-1])

    @cached_property
    def stepper(self) -> "_Stepper":
        return _Stepper(self.operator, self.tmesh.dt, self.theta)

    def replace(self, **changes) -> "ModelSpec":
        kw = dict(operator=self.operator, f=self.f, R=self.R, g=self.g, u0=self.u0,
                  tmesh=self.tmesh, theta=self.theta)
        kw.update(changes)
        return ModelSpec(**kw)


class _Stepper:
    """Cholesky-factored ``I - theta dt A`` plus products with ``I + (1 - theta) dt A``."""

    def __init__(self, op: EllipticOperator, dt: float, theta: float):
        self.op = op
        self.theta = theta
        self.dt = dt
        n = op.size
        ab = np.zeros((2, n))
        ab[1] = 1.0 - theta * dt * op.diag
        ab[0, 1:] = -theta * dt * op.off
        try:
            self._chol = cholesky_banded(ab)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - SPD for valid operators
            raise NumericalFailureError("implicit step matrix is not positive definite") from exc

    def solve(self, rhs):
        return cho_solve_banded((self._chol, False), rhs, check_finite=False)

    def explicit(self, u):
        if self.theta == 1.0:
            return u
        return u + (1.0 - self.theta) * self.dt * self.op.apply_interior(u)


@dataclass(frozen=True, eq=False)
class SpaceTimeField:
    """Values indexed ``[time step, node]`` (an optional trailing batch axis is allowed)."""

    values: np.ndarray
    grid: Grid
    tmesh: TimeMesh

    @property
    def terminal(self) -> np.ndarray:
        return self.values[-1]

    def at(self, k: int) -> np.ndarray:
        return self.values[k]


def _march(model: ModelSpec, u0, f, xi=None, keep=False):
    """Run the theta scheme on a batch.

    ``u0`` and ``f`` are interior arrays of shape ``(n,)`` or ``(n, P)``;
    ``xi`` has shape ``(K, P)``.  Returns interior terminal values of shape
    ``(n, P)`` and, when ``keep``, the full history ``(K + 1, n, P)``.
    """
    st = model.stepper
    n = model.operator.size
    u0 = np.asarray(u0, dtype=float).reshape(n, -1)
    f = np.asarray(f, dtype=float).reshape(n, -1)
    P = max(u0.shape[1], f.shape[1], 1 if xi is None else xi.shape[1])
    u = np.broadcast_to(u0, (n, P)).copy()
    s = model.source_weights
    if xi is not None:
        gq = model.g[1:-1, None] * np.sqrt(model.tmesh.dt)
    hist = None
    if keep:
        hist = np.empty((model.tmesh.K + 1, n, P))
        hist[0] = u
    for k in range(model.tmesh.K):
        rhs = st.explicit(u) + s[k] * f
        if xi is not None:
            rhs = rhs + gq * xi[k][None, :]
        u = st.solve(rhs)
        if keep:
            hist[k + 1] = u
    if not np.all(np.isfinite(u)):
        raise NumericalFailureError("non-finite state in parabolic solve")
    return u, hist


def as_field(value, grid: Grid) -> np.ndarray:
    """Scalars broadcast to constant fields; arrays are length-checked."""
    if np.isscalar(value):
        return np.full(grid.node_count, float(value))
    return grid.check(value)


def _embed(interior, grid: Grid, axis_last=True):
    """Pad interior values with Dirichlet zeros along the node axis."""
    interior = np.asarray(interior)
    if axis_last:
        pad = [(0, 0)] * (interior.ndim - 1) + [(1, 1)]
    else:
        pad = [(1, 1)] + [(0, 0)] * (interior.ndim - 1)
    return np.pad(interior, pad)


def solve_deterministic(model: ModelSpec, *, f=None, u0=None, theta=None, full=True):
    """Noise-free solve of ``du = A u dt + R f dt``.

    ``f``/``u0`` override the model's fields (e.g. ``f=0`` gives the
    homogeneous flow of ``u0``).  Returns a :class:`SpaceTimeField` or, with
    ``full=False``, just the terminal field.
    """
    if theta is not None and theta != model.theta:
        model = model.replace(theta=theta)
    grid = model.grid
    f = model.f if f is None else as_field(f, grid)
    u0 = model.u0 if u0 is None else as_field(u0, grid)
    term, hist = _march(model, u0[1:-1], f[1:-1], keep=full)
    if not full:
        return _embed(term[:, 0], grid)
    return SpaceTimeField(_embed(hist[:, :, 0], grid), grid, model.tmesh)


def forward_terminal(model: ModelSpec, f) -> np.ndarray:
    """Terminal slice of the zero-initial-state solve driven by ``R(t) f``.

    ``f`` may be a stack of fields with shape ``(P, nodes)``.
    """
    f = model.grid.check(f)
    stacked = f.ndim == 2
    fi = f[..., 1:-1].T if stacked else f[1:-1]
    term, _ = _march(model, np.zeros(model.operator.size), fi)
    out = _embed(term.T, model.grid)
    return out if stacked else out[0]


def path_noise(seed: int, K: int) -> np.ndarray:
    """Standard normal increments for one path, a pure function of ``seed``."""
    return np.random.default_rng(seed).standard_normal(K)


def simulate_paths(model: ModelSpec, seeds, *, full=False, chunk=2048):
    """Terminal fields (shape ``(P, nodes)``) for one path per seed.

    Each path draws one normal per time step from its own generator, so a
    path's value does not depend on which batch it was computed in.
    """
    seeds = list(seeds)
    K = model.tmesh.K
    grid = model.grid
    n = model.operator.size
    outs, hists = [], []
    for start in range(0, len(seeds), chunk):
        block = seeds[start:start + chunk]
        xi = np.stack([path_noise(s, K) for s in block], axis=1)
        term, hist = _march(model, model.u0[1:-1], model.f[1:-1], xi=xi, keep=full)
        outs.append(term.T)
        if full:
            hists.append(np.moveaxis(hist, 2, 0))
    terminal = _embed(np.concatenate(outs, axis=0) if outs else np.zeros((0, n)), grid)
    if full:
        return terminal, _embed(np.concatenate(hists, axis=0), grid)
    return terminal


def simulate_path(model: ModelSpec, seed: int, *, full=False):
    """One semi-implicit Euler-Maruyama path; terminal field, or a SpaceTimeField when ``full``."""
    if full:
        _, hist = simulate_paths(model, [seed], full=True)
        return SpaceTimeField(hist[0], model.grid, model.tmesh)
    return simulate_paths(model, [seed])[0]


def discrete_variance(model: ModelSpec) -> np.ndarray:
    """Exact nodewise variance of the discrete scheme's terminal state."""
    st = model.stepper
    y = st.solve(model.g[1:-1] * np.sqrt(model.tmesh.dt))
    acc = np.zeros_like(y)
    for _ in range(model.tmesh.K):
        acc += y * y
        y = st.solve(st.explicit(y))
    return _embed(acc, model.grid)


# ---------------------------------------------------------------------------
# spectral closed forms (pure Laplacian on [0, pi])


def source_time_integrals(R, lam, T, K=2000) -> np.ndarray:
    """``q_n = int_0^T exp(-lam_n (T - s)) R(s) ds``.

    Closed form for :class:`ExponentialFactor`, trapezoid on ``K`` intervals otherwise.
    """
    lam = np.asarray(lam, dtype=float)
    if isinstance(R, ExponentialFactor):
        a = R.rate
        denom = lam + a
        with np.errstate(invalid="ignore", divide="ignore"):
            q = (np.exp(a * T) - np.exp(-lam * T)) / denom
        # lam + a == 0 only for growing R matched to a mode; integrand is then constant
        q = np.where(np.abs(denom) < 1e-14, T * np.exp(a * T), q)
        return R.scale * q
    s = np.linspace(0.0, T, K + 1)
    vals = np.exp(-np.outer(lam, T - s)) * np.asarray(R(s), dtype=float)[None, :]
    return integrate.trapezoid(vals, s, axis=1)


def _require_laplacian(model: ModelSpec):
    if not model.operator.is_laplacian:
        raise UnsupportedOracleError("spectral oracle requires A = d^2/dx^2 (a = 1, c = 0)")


def expectation_variance_spectral(eig: EigenSystem, model: ModelSpec):
    """Mean and variance of ``u(., T)`` from the eigenfunction expansion.

    The variance is the time integral of the squared modal series, evaluated
    by adaptive vector quadrature (independent of :func:`covariance_spectral`).
    """
    _require_laplacian(model)
    T = model.tmesh.T
    lam = eig.values
    q = source_time_integrals(model.R, lam, T)
    fn = project(model.f, eig)
    u0n = project(model.u0, eig)
    gn = project(model.g, eig)
    mean = eig.synthesize(np.exp(-lam * T) * u0n + q * fn)
    basis = gn[:, None] * eig.vectors

    def integrand(tau):
        return np.exp(-lam * tau) @ basis

    # the integrand of high modes is concentrated near tau = 0
    pts = [p for p in (1e-3, 1e-2, 1e-1) if p < T]
    var, _ = integrate.quad_vec(lambda tau: integrand(tau) ** 2, 0.0, T, epsabs=1e-13, epsrel=1e-10, points=pts)
    var[0] = var[-1] = 0.0
    return mean, np.maximum(var, 0.0)


def covariance_spectral(eig: EigenSystem, g, T: float, i1: int, i2: int) -> float:
    """Closed-form covariance of ``u(x_i1, T)`` and ``u(x_i2, T)``."""
    gn = project(g, eig)
    lam = eig.values
    s = lam[:, None] + lam[None, :]
    kern = -np.expm1(-s * T) / s
    a = gn * eig.vectors[:, i1]
    b = gn * eig.vectors[:, i2]
    return float(a @ kern @ b)


def covariance_matrix_spectral(eig: EigenSystem, g, T: float) -> np.ndarray:
    """Modal covariance ``Cov(z_n, z_m)`` of the stochastic convolution at ``T``."""
    gn = project(g, eig)
    lam = eig.values
    s = lam[:, None] + lam[None, :]
    return np.outer(gn, gn) * (-np.expm1(-s * T) / s)


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegularityReport:
    lhs_estimate: float
    lhs_stderr: float
    rhs_bound: float
    passed: bool

    def to_dict(self):
        return {"lhs_estimate": self.lhs_estimate, "lhs_stderr": self.lhs_stderr,
                "rhs_bound": self.rhs_bound, "pass": self.passed}


def regularity_bound_check(model: ModelSpec, n_paths: int, seed: int, *, n_sigma=3.0) -> RegularityReport:
    """Monte-Carlo estimate of ``E int_0^T ||u||^2 dt`` against the a-priori energy bound.

    Passes when the estimate is at most the bound plus ``n_sigma`` standard errors.
    """
    if n_paths < 1:
        raise InvalidConfigurationError("need at least one path")
    grid, tm = model.grid, model.tmesh
    w = grid.weights
    totals = []
    for start in range(0, n_paths, 512):
        seeds = range(seed + 1 + start, seed + 1 + min(n_paths, start + 512))
        _, hist = simulate_paths(model, seeds, full=True)
        sq = np.einsum("pkj,j->pk", hist**2, w)
        totals.append(integrate.trapezoid(sq, dx=tm.dt, axis=1))
    totals = np.concatenate(totals)
    lhs = float(np.mean(totals))
    se = float(np.std(totals, ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else 0.0
    C = float(np.max(np.abs(model.R_values)))
    T = tm.T
    rhs = (3 * T * l2_norm(model.u0, grid) ** 2 + C * T**3 * l2_norm(model.f, grid) ** 2
           + 1.5 * T**2 * l2_norm(model.g, grid) ** 2)
    return RegularityReport(lhs, se, rhs, lhs <= rhs + n_sigma * se)
