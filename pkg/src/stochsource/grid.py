"""Uniform 1D grids, time meshes, trapezoid quadrature and the Dirichlet sine basis.

Spatial fields are plain ``numpy`` arrays sampled at the grid nodes; the
helpers here only check that their length matches the grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AliasingError, InvalidConfigurationError, ShapeError, UnsupportedOracleError


@dataclass(frozen=True)
class Grid:
    """Uniform mesh of ``M + 1`` nodes on ``[0, length]``."""

    length: float
    M: int
    x: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not np.isfinite(self.length) or self.length <= 0:
            raise InvalidConfigurationError(f"grid length must be positive, got {self.length}")
        if int(self.M) != self.M or self.M < 2:
            raise InvalidConfigurationError(f"grid needs M >= 2 cells, got {self.M}")
        object.__setattr__(self, "M", int(self.M))
        x = np.linspace(0.0, float(self.length), self.M + 1)
        x.setflags(write=False)
        object.__setattr__(self, "x", x)

    @property
    def node_count(self) -> int:
        return self.M + 1

    @property
    def spacing(self) -> float:
        return self.length / self.M

    @property
    def interior(self) -> slice:
        return slice(1, self.M)

    @property
    def weights(self) -> np.ndarray:
        """Composite trapezoid weights."""
        w = np.full(self.node_count, self.spacing)
        w[0] = w[-1] = 0.5 * self.spacing
        return w

    def check(self, a, name="field") -> np.ndarray:
        a = np.asarray(a, dtype=float)
        if a.shape[-1:] != (self.node_count,):
            raise ShapeError(f"{name} has shape {a.shape}, grid has {self.node_count} nodes")
        return a

    def sample(self, func) -> np.ndarray:
        """Evaluate ``func`` at the nodes; scalars broadcast to a constant field."""
        return np.broadcast_to(np.asarray(func(self.x), dtype=float), self.x.shape).copy()

    def to_dict(self):
        return {"length": float(self.length), "M": self.M}


def make_grid(length: float, M: int) -> Grid:
    return Grid(length, M)


@dataclass(frozen=True)
class TimeMesh:
    T: float
    K: int

    def __post_init__(self):
        if not np.isfinite(self.T) or self.T <= 0:
            raise InvalidConfigurationError(f"time horizon must be positive, got {self.T}")
        if int(self.K) != self.K or self.K < 1:
            raise InvalidConfigurationError(f"need at least one time step, got {self.K}")
        object.__setattr__(self, "K", int(self.K))

    @property
    def dt(self) -> float:
        return self.T / self.K

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, float(self.T), self.K + 1)

    def to_dict(self):
        return {"T": float(self.T), "K": self.K}


def l2_inner(a, b, grid: Grid) -> float:
    """Trapezoid approximation of the L2(0, length) inner product."""
    a = grid.check(a, "a")
    b = grid.check(b, "b")
    return float(np.sum(grid.weights * a * b))


def l2_norm(a, grid: Grid) -> float:
    return float(np.sqrt(max(l2_inner(a, a, grid), 0.0)))


def linf_norm(a) -> float:
    a = np.asarray(a, dtype=float)
    return float(np.max(np.abs(a))) if a.size else 0.0


@dataclass(frozen=True)
class EigenSystem:
    """Dirichlet eigenpairs of ``-d^2/dx^2`` on ``[0, pi]`` sampled on a grid.

    ``vectors[n - 1]`` holds ``phi_n = sqrt(2/pi) sin(n x)``.
    """

    grid: Grid
    values: np.ndarray
    vectors: np.ndarray

    @property
    def n_max(self) -> int:
        return len(self.values)

    def synthesize(self, coeffs) -> np.ndarray:
        coeffs = np.asarray(coeffs, dtype=float)
        return coeffs @ self.vectors


def eigen_pairs(grid: Grid, n_max: int = 30) -> EigenSystem:
    if not np.isclose(grid.length, np.pi, rtol=0, atol=1e-12):
        raise UnsupportedOracleError("analytic eigensystem is only available on [0, pi]")
    if n_max < 1:
        raise InvalidConfigurationError(f"n_max must be >= 1, got {n_max}")
    if n_max > grid.M - 1:
        raise AliasingError(f"n_max={n_max} exceeds the {grid.M - 1} modes resolvable with M={grid.M}")
    n = np.arange(1, n_max + 1, dtype=float)
    vectors = np.sqrt(2.0 / np.pi) * np.sin(np.outer(n, grid.x))
    # sin(n*pi) is ~1e-16 in floating point; the basis is Dirichlet by construction
    vectors[:, 0] = 0.0
    vectors[:, -1] = 0.0
    values = n**2
    vectors.setflags(write=False)
    values.setflags(write=False)
    return EigenSystem(grid, values, vectors)


def project(a, eig: EigenSystem) -> np.ndarray:
    """Coefficients ``<a, phi_n>`` for ``n = 1..n_max`` (works on stacked fields too)."""
    a = eig.grid.check(a)
    return (a * eig.grid.weights) @ eig.vectors.T
