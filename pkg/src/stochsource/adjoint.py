"""Discrete adjoint of the terminal forward map and the Tikhonov gradient.

The forward map ``F`` sends a source profile to the terminal state of the
zero-initial-state theta scheme.  Its exact transpose is computed by the
reversed-time recursion

    P_K = y,   z_k = B^{-1} P_{k+1},   P_k = C z_k,   F^T y = sum_k s_k z_k,

with ``B = I - theta dt A`` and ``C = I + (1 - theta) dt A``, so gradients
agree with finite differences of the discrete functional to roundoff.  The
functional uses trapezoid L2 products and the gradient is the L2 Riesz
representative:

    J(f) = 1/2 ||beta (F f - h)||^2 + gamma/2 ||f - f0||^2,
    grad J = F^T (beta^2 r) + gamma (f - f0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfigurationError, NumericalFailureError
from .forward import (
    EllipticOperator,
    ModelSpec,
    SpaceTimeField,
    _embed,
    _Stepper,
    forward_terminal,
)
from .grid import TimeMesh, l2_inner
from .observations import PreparedData


def solve_adjoint(op: EllipticOperator, terminal, tmesh: TimeMesh, theta: float = 1.0) -> SpaceTimeField:
    """Backward solve of ``-dP = A P dt`` from ``P(T) = terminal``; values indexed by forward time step."""
    grid = op.grid
    terminal = grid.check(terminal, "terminal")
    st = _Stepper(op, tmesh.dt, theta)
    K = tmesh.K
    P = np.empty((K + 1, op.size))
    P[K] = terminal[1:-1]
    for k in range(K - 1, -1, -1):
        P[k] = st.explicit(st.solve(P[k + 1]))
    if not np.all(np.isfinite(P)):
        raise NumericalFailureError("non-finite adjoint state")
    return SpaceTimeField(_embed(P, grid), grid, tmesh)


def adjoint_source(model: ModelSpec, y) -> np.ndarray:
    """``F^T y`` on the grid (boundary entries 0); ``y`` may be stacked ``(P, nodes)``."""
    grid = model.grid
    y = grid.check(y)
    st = model.stepper
    s = model.source_weights
    p = y[..., 1:-1].T
    acc = np.zeros_like(p, dtype=float)
    for k in range(model.tmesh.K - 1, -1, -1):
        z = st.solve(p)
        acc += s[k] * z
        p = st.explicit(z)
    if not np.all(np.isfinite(acc)):
        raise NumericalFailureError("non-finite adjoint state")
    return _embed(acc.T, grid)


def forward_matrix(model: ModelSpec) -> np.ndarray:
    """Dense interior matrix of ``F`` (column ``j`` = response to a unit source at interior node ``j``)."""
    n = model.operator.size
    eye = np.zeros((n, model.grid.node_count))
    eye[:, 1:-1] = np.eye(n)
    return forward_terminal(model, eye)[:, 1:-1].T


@dataclass(frozen=True, eq=False)
class GradientReport:
    gradient: np.ndarray
    misfit: float
    regularizer: float
    residual: np.ndarray

    @property
    def value(self) -> float:
        return self.misfit + self.regularizer


def functional(model: ModelSpec, f, data: PreparedData, beta, gamma: float, f0) -> float:
    grid = model.grid
    r = forward_terminal(model, f) - data.h_delta
    br = beta * r
    d = f - f0
    return 0.5 * l2_inner(br, br, grid) + 0.5 * gamma * l2_inner(d, d, grid)


def gradient(model: ModelSpec, f, data: PreparedData, beta, gamma: float, f0) -> GradientReport:
    grid = model.grid
    f = grid.check(f, "f")
    beta = grid.check(beta, "beta")
    f0 = grid.check(f0, "f0")
    grid.check(data.h_delta, "h_delta")
    r = forward_terminal(model, f) - data.h_delta
    br = beta * r
    d = f - f0
    g = adjoint_source(model, beta * br) + gamma * d
    g[0] = g[-1] = 0.0
    return GradientReport(g, 0.5 * l2_inner(br, br, grid), 0.5 * gamma * l2_inner(d, d, grid), r)


def random_directions(grid, n_dirs: int, seed: int) -> np.ndarray:
    d = np.random.default_rng(seed).standard_normal((n_dirs, grid.node_count))
    d[:, 0] = d[:, -1] = 0.0
    return d


def fd_gradient_check(model: ModelSpec, f, data: PreparedData, beta, gamma: float, f0,
                      n_dirs: int = 10, h_fd: float = 1e-3, *, seed: int = 0, floor: float = 1e-14) -> float:
    """Max relative gap between ``<grad J, d>`` and central differences over random directions."""
    if not h_fd > 0:
        raise InvalidConfigurationError(f"h_fd must be positive, got {h_fd}")
    grid = model.grid
    g = gradient(model, f, data, beta, gamma, f0).gradient
    worst = 0.0
    for d in random_directions(grid, n_dirs, seed):
        analytic = l2_inner(g, d, grid)
        jp = functional(model, f + h_fd * d, data, beta, gamma, f0)
        jm = functional(model, f - h_fd * d, data, beta, gamma, f0)
        fd = (jp - jm) / (2 * h_fd)
        worst = max(worst, abs(analytic - fd) / (abs(analytic) + floor))
    return worst
