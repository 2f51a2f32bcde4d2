"""Stage 2: random-sampling refinement and a diagonal Gaussian posterior width.

The variational family is ``f = mu + H * eps`` with ``eps`` standard normal
per interior node.  ``mu`` starts at the Stage-1 estimate and is replaced
whenever a sample lowers the data loss.  ``H`` follows single-sample
stochastic gradient steps on

    L(f, H) = - sum_j 2 s_j^2 log H_j + 1/2 sum_j (h_j - F(f)_j)^2,

where ``s_j^2`` is the variance of the averaged datum at node ``j`` and the
sums run over interior nodes.

A sample replaces ``mu`` only if it lowers the data loss without raising the
Stage-1 penalised objective ``data_loss + gamma sum_j (f_j - f0_j)^2``.  The
data loss alone is an unregularised criterion, and accepting on it would let
``mu`` random-walk into fitting the sampling noise.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .adjoint import adjoint_source, forward_matrix
from .errors import DivergenceError, InvalidConfigurationError
from .forward import ModelSpec, forward_terminal
from .observations import PreparedData


@dataclass(frozen=True)
class UqConfig:
    H0: float | None = None  # None -> estimate_h0
    n_samples: int = 50
    n_iters: int = 200
    step: float | None = None  # None -> 1e-3 * H0
    sigma_min: float = 1e-6
    sigma_cap: float | None = None  # None -> 10 * H0
    seed: int = 0
    h0_z: float = 2.0

    def __post_init__(self):
        if self.n_samples < 0 or self.n_iters < 0:
            raise InvalidConfigurationError("sample and iteration counts must be >= 0")
        if not self.sigma_min > 0:
            raise InvalidConfigurationError(f"sigma_min must be positive, got {self.sigma_min}")
        if self.step is not None and not self.step > 0:
            raise InvalidConfigurationError(f"step must be positive, got {self.step}")
        if not self.h0_z > 0:
            raise InvalidConfigurationError("h0_z must be positive")
        if self.H0 is not None:
            cap = 10 * self.H0 if self.sigma_cap is None else self.sigma_cap
            if not (0 < self.sigma_min < self.H0 <= cap):
                raise InvalidConfigurationError("need 0 < sigma_min < H0 <= sigma_cap")

    def resolve(self, model: ModelSpec, data: PreparedData, gamma: float) -> "UqConfig":
        H0 = self.H0
        if H0 is None:
            H0 = estimate_h0(model, data, gamma, z=self.h0_z, floor=10 * self.sigma_min)
        return replace(
            self, H0=H0,
            step=1e-3 * H0 if self.step is None else self.step,
            sigma_cap=10 * H0 if self.sigma_cap is None else self.sigma_cap,
        )

    def to_dict(self):
        return {k: getattr(self, k) for k in
                ("H0", "n_samples", "n_iters", "step", "sigma_min", "sigma_cap", "seed", "h0_z")}


def estimate_h0(model: ModelSpec, data: PreparedData, gamma: float, *, z: float = 2.0,
                floor: float = 1e-5) -> float:
    """``z`` times the RMS pointwise std of the Tikhonov estimate under the data's sampling noise.

    The centred snapshots are pushed through the linear map
    ``h -> (F^T F + gamma)^{-1} F^T h``, so the spatial correlation of the
    noise is kept.  Exact data give the floor.
    """
    if not gamma > 0:
        raise InvalidConfigurationError(f"gamma must be positive, got {gamma}")
    if data.deviations is None or not np.isfinite(data.n_obs) or data.n_obs < 2:
        return floor
    Fm = forward_matrix(model)
    S = np.linalg.solve(Fm.T @ Fm + gamma * np.eye(Fm.shape[1]), Fm.T)
    prop = data.deviations[:, 1:-1] @ S.T
    std = prop.std(axis=0, ddof=1) / np.sqrt(data.n_obs)
    return max(z * float(np.sqrt(np.mean(std**2))), floor)


def noise_variance(data: PreparedData) -> np.ndarray:
    """Per-node variance of the averaged datum (0 for exact data)."""
    if not np.isfinite(data.n_obs):
        return np.zeros_like(data.sigma2)
    return data.sigma2 / data.n_obs


def data_loss(data: PreparedData, model: ModelSpec, f) -> float | np.ndarray:
    """``sum_j (h_j - F(f)_j)^2`` over interior nodes; ``f`` may be stacked."""
    r = data.h_delta - forward_terminal(model, f)
    return np.sum(r[..., 1:-1] ** 2, axis=-1)


def loss_L(data: PreparedData, model: ModelSpec, f, sigma_post) -> float:
    sp = np.asarray(sigma_post, dtype=float)[1:-1]
    if np.any(sp <= 0):
        raise InvalidConfigurationError("posterior std must be positive at interior nodes")
    s2 = noise_variance(data)[1:-1]
    return float(-np.sum(2 * s2 * np.log(sp)) + 0.5 * data_loss(data, model, f))


def grad_H(data: PreparedData, model: ModelSpec, f_sample, eps, sigma_post) -> np.ndarray:
    """Single-sample gradient of ``L`` in ``H`` at ``f_sample = mu + H * eps`` (boundary entries 0)."""
    grid = model.grid
    f_sample = grid.check(f_sample, "f_sample")
    eps = grid.check(eps, "eps")
    sp = grid.check(sigma_post, "sigma_post")
    r = forward_terminal(model, f_sample) - data.h_delta
    r[0] = r[-1] = 0.0
    G = adjoint_source(model, r)
    out = np.zeros(grid.node_count)
    inner = grid.interior
    out[inner] = -2 * noise_variance(data)[inner] / sp[inner] + G[inner] * eps[inner]
    return out


@dataclass
class PosteriorResult:
    x: np.ndarray
    f_best: np.ndarray
    sigma_post: np.ndarray
    L_trace: list = field(default_factory=list)
    loss_trace: list = field(default_factory=list)
    config: UqConfig | None = None
    initial_loss: float = np.nan

    @property
    def band_lo(self) -> np.ndarray:
        return self.f_best - self.sigma_post

    @property
    def band_hi(self) -> np.ndarray:
        return self.f_best + self.sigma_post

    @property
    def UQ_min(self) -> float:
        return float(np.min(self.sigma_post[1:-1]))

    @property
    def UQ_max(self) -> float:
        return float(np.max(self.sigma_post[1:-1]))

    @property
    def iterations(self) -> int:
        return len(self.L_trace)

    def coverage(self, f_true) -> float:
        """Fraction of interior nodes where ``f_true`` lies inside the band."""
        inner = slice(1, len(self.x) - 1)
        f_true = np.asarray(f_true)[inner]
        return float(np.mean((f_true >= self.band_lo[inner]) & (f_true <= self.band_hi[inner])))

    def summary(self) -> dict:
        return {
            "UQ_min": self.UQ_min, "UQ_max": self.UQ_max,
            "L_final": self.L_trace[-1] if self.L_trace else None,
            "data_loss_initial": self.initial_loss,
            "data_loss_final": self.loss_trace[-1] if self.loss_trace else self.initial_loss,
            "iterations": self.iterations,
            "config": self.config.to_dict() if self.config else None,
        }

    def save(self, csv_path, json_path=None):
        csv_path = Path(csv_path)
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "f_best", "sigma_post", "band_lo", "band_hi"])
            for row in zip(self.x, self.f_best, self.sigma_post, self.band_lo, self.band_hi):
                w.writerow([repr(float(v)) for v in row])
        if json_path is not None:
            Path(json_path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _draw(seed: int, stream: int, i: int, n: int) -> np.ndarray:
    # one generator per (stream, index): draws do not depend on evaluation order
    return np.random.default_rng([seed, stream, i]).standard_normal(n)


def penalised_loss(data: PreparedData, model: ModelSpec, f, gamma: float, prior) -> float | np.ndarray:
    """``data_loss + gamma sum_j (f_j - prior_j)^2`` (interior nodes, grid-sum convention)."""
    d = np.asarray(f) - prior
    return data_loss(data, model, f) + gamma * np.sum(d[..., 1:-1] ** 2, axis=-1)


def run_stage2(model: ModelSpec, data: PreparedData, f0_star, config: UqConfig | None = None,
               gamma: float = 0.0, prior=None) -> PosteriorResult:
    """Refine the Stage-1 estimate by sampling, then adapt the per-node posterior std.

    ``gamma`` and ``prior`` are the Stage-1 regularisation weight and prior
    mean (default 0).  They enter the acceptance guard and, when
    ``config.H0`` is unset, the estimate of ``H0``.
    """
    grid = model.grid
    f0_star = grid.check(f0_star, "f0_star").copy()
    prior = np.zeros(grid.node_count) if prior is None else grid.check(prior, "prior")
    config = config or UqConfig()
    if gamma < 0 or (config.H0 is None and not gamma > 0):
        raise InvalidConfigurationError("a positive gamma is required to estimate H0")
    config = config.resolve(model, data, gamma if gamma > 0 else 1.0)
    inner = grid.interior
    n_int = grid.M - 1
    H = np.zeros(grid.node_count)
    H[inner] = config.H0

    def embed(v):
        out = np.zeros(grid.node_count)
        out[inner] = v
        return out

    f_best = f0_star
    best = float(data_loss(data, model, f_best))
    best_pen = best + gamma * float(np.sum((f_best - prior)[inner] ** 2))
    res = PosteriorResult(grid.x.copy(), f_best, H.copy(), config=config, initial_loss=best)
    if config.n_samples:
        eps = np.stack([embed(_draw(config.seed, 0, i, n_int)) for i in range(config.n_samples)])
        cands = f0_star + H * eps
        losses = data_loss(data, model, cands)
        if not np.all(np.isfinite(losses)):
            raise DivergenceError("non-finite data loss in refinement sampling", trace=res)
        pens = losses + gamma * np.sum((cands - prior)[:, inner] ** 2, axis=1)
        ok = (losses < best) & (pens <= best_pen)
        if np.any(ok):
            i = int(np.argmin(np.where(ok, losses, np.inf)))
            f_best, best, best_pen = cands[i], float(losses[i]), float(pens[i])
    s2 = noise_variance(data)
    for k in range(1, config.n_iters + 1):
        eps = embed(_draw(config.seed, 1, k, n_int))
        f_s = f_best + H * eps
        r = forward_terminal(model, f_s) - data.h_delta
        r[0] = r[-1] = 0.0
        loss_s = float(np.sum(r**2))
        if not np.isfinite(loss_s):
            res.f_best, res.sigma_post = f_best, H
            raise DivergenceError(f"non-finite data loss at iteration {k}", trace=res)
        G = adjoint_source(model, r)
        g = np.zeros_like(H)
        g[inner] = -2 * s2[inner] / H[inner] + G[inner] * eps[inner]
        H = H.copy()
        H[inner] = np.clip(H[inner] - config.step * g[inner], config.sigma_min, config.sigma_cap)
        pen_s = loss_s + gamma * float(np.sum((f_s - prior)[inner] ** 2))
        if loss_s < best and pen_s <= best_pen:
            f_best, best, best_pen = f_s, loss_s, pen_s
        res.loss_trace.append(best)
        res.L_trace.append(float(-np.sum(2 * s2[inner] * np.log(H[inner])) + 0.5 * best))
    res.f_best, res.sigma_post = f_best, H
    return res
