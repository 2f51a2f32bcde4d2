"""Iteration-dependent covariance weighting of the data misfit.

At CG iteration ``k`` the exponent is

    e_k = min(e_max, floor((cond - 1) alpha^k / C1)),

and interior node ``j`` gets weight ``w_j = ((|h_j| + s_j) / max(s_j^2, eps))^e_k``
with ``s_j`` the sample standard deviation.  As ``k`` grows the exponent
reaches 0 and the weights become the unweighted (i.i.d.) ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfigurationError
from .observations import VAR_FLOOR, PreparedData


@dataclass(frozen=True)
class WeightSchedule:
    alpha: float = 0.5
    C1: float | None = None  # None -> 10 * median interior |h_delta|
    e_max: int = 4

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise InvalidConfigurationError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.C1 is not None and not self.C1 > 0:
            raise InvalidConfigurationError(f"C1 must be positive, got {self.C1}")
        if int(self.e_max) != self.e_max or self.e_max < 1:
            raise InvalidConfigurationError(f"e_max must be an integer >= 1, got {self.e_max}")

    def resolve(self, data: PreparedData) -> "WeightSchedule":
        """Fill in the data-scaled default for ``C1``."""
        if self.C1 is not None:
            return self
        c1 = 10.0 * float(np.median(np.abs(data.h_delta[data.interior])))
        if not c1 > 0:
            c1 = 1.0
        return WeightSchedule(self.alpha, c1, self.e_max)

    def to_dict(self):
        return {"alpha": self.alpha, "C1": self.C1, "e_max": self.e_max}


@dataclass(frozen=True, eq=False)
class WeightState:
    k: int
    e: int
    w: np.ndarray
    beta: np.ndarray


def exponent(cond: float, schedule: WeightSchedule, k: int) -> int:
    if not cond >= 1.0:
        raise InvalidConfigurationError(f"condition number must be >= 1, got {cond}")
    if k < 0:
        raise InvalidConfigurationError(f"iteration index must be >= 0, got {k}")
    if schedule.C1 is None:
        raise InvalidConfigurationError("schedule C1 unresolved; call schedule.resolve(data)")
    v = (cond - 1.0) * schedule.alpha**k / schedule.C1
    # tolerate roundoff just below an integer (e.g. 9.999999999999998)
    return int(min(schedule.e_max, math.floor(v + 1e-9)))


def weights(data: PreparedData, e: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-node ``(w, beta)``; boundary nodes get weight 0 (no misfit there)."""
    if e < 0:
        raise InvalidConfigurationError(f"exponent must be >= 0, got {e}")
    n = data.grid.node_count
    w = np.zeros(n)
    inner = data.interior
    if e == 0:
        w[inner] = 1.0
    else:
        s2 = data.sigma2[inner]
        base = (np.abs(data.h_delta[inner]) + np.sqrt(s2)) / np.maximum(s2, VAR_FLOOR)
        w[inner] = base**e
    return w, np.sqrt(w)


def weight_state(data: PreparedData, schedule: WeightSchedule, k: int) -> WeightState:
    schedule = schedule.resolve(data)
    e = exponent(data.cond, schedule, k)
    w, beta = weights(data, e)
    return WeightState(k, e, w, beta)


def iid_limit_check(data: PreparedData, schedule: WeightSchedule) -> int:
    """Smallest ``k0`` with ``e_k0 = 0``; exponents are non-increasing so ``e_k = 0`` for all ``k >= k0``."""
    schedule = schedule.resolve(data)
    ratio = (data.cond - 1.0) / schedule.C1
    if ratio < 1.0:
        guess = 0
    else:
        guess = max(0, math.ceil(math.log(ratio) / math.log(1.0 / schedule.alpha)))
    # the log formula is off by one when ratio is an exact power of 1/alpha
    k0 = guess
    while k0 > 0 and exponent(data.cond, schedule, k0 - 1) == 0:
        k0 -= 1
    while exponent(data.cond, schedule, k0) != 0:
        k0 += 1
    w, _ = weights(data, exponent(data.cond, schedule, k0))
    assert np.all(w[data.interior] == 1.0)
    return k0
