"""Stage 1: conjugate-gradient minimisation of the weighted Tikhonov functional.

Weights are refreshed every iteration from the exponent schedule; the
conjugate direction is restarted whenever the exponent changes because the
quadratic being minimised changes with it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .adjoint import gradient
from .errors import DegenerateDirectionError, DivergenceError, InvalidConfigurationError, NumericalFailureError
from .forward import ModelSpec, forward_terminal
from .grid import l2_inner, l2_norm
from .observations import PreparedData
from .weighting import WeightSchedule, exponent, weights

DIRECTION_RULES = ("fletcher_reeves", "literal")


def default_gamma(data: PreparedData, C1: float = 0.05, floor: float = 1e-8) -> float:
    """``C1 * delta_hat^(2/3)``, floored so exact-data runs stay well posed."""
    return max(C1 * data.delta_hat() ** (2.0 / 3.0), floor)


@dataclass(frozen=True, eq=False)
class CgmConfig:
    gamma: float | None = None  # None -> default_gamma(data, gamma_C1)
    k_max: int = 200
    grad_tol: float = 1e-8  # relative to the gradient norm when the current exponent took effect
    rel_decrease_tol: float = 1e-10
    schedule: WeightSchedule = field(default_factory=WeightSchedule)
    direction_rule: str = "fletcher_reeves"
    f0: np.ndarray | None = None  # None -> zero prior mean
    weighted: bool = True  # False -> e_k = 0 throughout (i.i.d. weights)
    gamma_C1: float = 0.05

    def __post_init__(self):
        if self.gamma is not None and not self.gamma > 0:
            raise InvalidConfigurationError(f"gamma must be positive, got {self.gamma}")
        if int(self.k_max) != self.k_max or self.k_max < 1:
            raise InvalidConfigurationError(f"k_max must be an integer >= 1, got {self.k_max}")
        if not (self.grad_tol > 0 and self.rel_decrease_tol > 0):
            raise InvalidConfigurationError("tolerances must be positive")
        if self.direction_rule not in DIRECTION_RULES:
            raise InvalidConfigurationError(f"direction rule must be one of {DIRECTION_RULES}")
        if not self.gamma_C1 > 0:
            raise InvalidConfigurationError("gamma_C1 must be positive")

    def resolve(self, data: PreparedData) -> "CgmConfig":
        changes = {}
        if self.gamma is None:
            changes["gamma"] = default_gamma(data, self.gamma_C1)
        if self.f0 is None:
            changes["f0"] = np.zeros(data.grid.node_count)
        else:
            changes["f0"] = data.grid.check(self.f0, "f0")
        changes["schedule"] = self.schedule.resolve(data)
        return replace(self, **changes)

    def to_dict(self):
        return {
            "gamma": self.gamma, "k_max": self.k_max, "grad_tol": self.grad_tol,
            "rel_decrease_tol": self.rel_decrease_tol, "schedule": self.schedule.to_dict(),
            "direction_rule": self.direction_rule, "weighted": self.weighted, "gamma_C1": self.gamma_C1,
        }


@dataclass
class CgmTrace:
    k: list = field(default_factory=list)
    J: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    alpha: list = field(default_factory=list)
    e: list = field(default_factory=list)
    f_star: np.ndarray | None = None
    reason: str = ""
    gamma: float = math.nan

    def record(self, k, J, gnorm, alpha, e):
        self.k.append(k)
        self.J.append(J)
        self.grad_norm.append(gnorm)
        self.alpha.append(alpha)
        self.e.append(e)

    @property
    def iterations(self) -> int:
        return len(self.k)

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "J", "grad_norm", "alpha", "e"])
            for row in zip(self.k, self.J, self.grad_norm, self.alpha, self.e):
                w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3]), row[4]])


def linearized_forward(model: ModelSpec, d) -> np.ndarray:
    """Terminal state of ``dv = A v dt + R(t) d dt`` with ``v(0) = 0``."""
    return forward_terminal(model, d)


def step_length(beta, residual, v_d, gamma: float, f_k, f0, d_k, grid) -> float:
    """Exact minimiser along ``d_k`` of ``1/2 ||beta (r + a v_d)||^2 + gamma/2 ||f_k + a d_k - f0||^2``."""
    bv = beta * v_d
    den = l2_inner(bv, bv, grid) + gamma * l2_inner(d_k, d_k, grid)
    if not np.any(d_k) or not den > 0:
        raise DegenerateDirectionError("search direction is zero or has zero curvature")
    num = l2_inner(beta * residual, bv, grid) + gamma * l2_inner(f_k - f0, d_k, grid)
    return -num / den


def run_cgm(model: ModelSpec, data: PreparedData, config: CgmConfig | None = None, f_init=None):
    """Minimise the weighted functional; returns ``(f_star, trace)``."""
    config = (config or CgmConfig()).resolve(data)
    grid = model.grid
    gamma, f0 = config.gamma, config.f0
    f = f0.copy() if f_init is None else grid.check(f_init, "f_init").copy()
    trace = CgmTrace(gamma=gamma)

    def weights_at(k):
        e = exponent(data.cond, config.schedule, k) if config.weighted else 0
        return e, weights(data, e)[1]

    e_prev = None
    d_prev = s_prev = None
    g0 = None
    J_prev = None
    for k in range(config.k_max):
        e, beta = weights_at(k)
        try:
            rep = gradient(model, f, data, beta, gamma, f0)
        except NumericalFailureError as exc:
            trace.reason = "diverged"
            trace.f_star = f
            raise DivergenceError(f"non-finite state at iteration {k}: {exc}", trace=trace) from exc
        J = rep.value
        if not np.isfinite(J):
            trace.reason = "diverged"
            trace.f_star = f
            raise DivergenceError(f"non-finite functional at iteration {k}", trace=trace)
        s = -rep.gradient
        gnorm = l2_norm(s, grid)
        if g0 is None or e != e_prev:
            # the tolerance is relative to the start of each constant-exponent
            # segment; heavy early weights would otherwise inflate the reference
            g0 = gnorm
        if gnorm <= config.grad_tol * max(g0, np.finfo(float).tiny) or gnorm == 0.0:
            trace.record(k, J, gnorm, 0.0, e)
            trace.reason = "gradient_tolerance"
            break
        if (e_prev is not None and e == e_prev and J_prev is not None
                and abs(J_prev - J) <= config.rel_decrease_tol * max(abs(J_prev), np.finfo(float).tiny)):
            trace.record(k, J, gnorm, 0.0, e)
            trace.reason = "relative_decrease"
            break
        if d_prev is None or e != e_prev:
            d = s
        else:
            if config.direction_rule == "fletcher_reeves":
                zeta = l2_inner(s, s, grid) / l2_inner(s_prev, s_prev, grid)
            else:
                zeta = gnorm / l2_norm(s_prev, grid)
            d = s + zeta * d_prev
            if l2_inner(d, s, grid) <= 0:  # not a descent direction, restart
                d = s
        v = linearized_forward(model, d)
        alpha = step_length(beta, rep.residual, v, gamma, f, f0, d, grid)
        f = f + alpha * d
        trace.record(k, J, gnorm, alpha, e)
        d_prev, s_prev, e_prev, J_prev = d, s, e, J
    else:
        trace.reason = "max_iterations"
    trace.f_star = f
    return f, trace
