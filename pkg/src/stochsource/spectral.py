"""Closed-form spectral solutions for the pure Laplacian on ``[0, pi]``.

Everything is expressed through the modal source weights

    q_n = int_0^T exp(-lambda_n (T - s)) R(s) ds,

so the forward map is diagonal: ``F(f)_n = q_n f_n``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfigurationError
from .forward import ModelSpec, _require_laplacian, covariance_matrix_spectral, source_time_integrals
from .grid import EigenSystem, eigen_pairs, l2_inner, l2_norm, project


@dataclass(frozen=True, eq=False)
class SpectralForward:
    eig: EigenSystem
    q: np.ndarray
    T: float

    @property
    def grid(self):
        return self.eig.grid


def spectral_forward(model: ModelSpec, n_max: int = 30, eig: EigenSystem | None = None) -> SpectralForward:
    _require_laplacian(model)
    eig = eig or eigen_pairs(model.grid, n_max)
    q = source_time_integrals(model.R, eig.values, model.tmesh.T, K=max(model.tmesh.K, 2000))
    return SpectralForward(eig, q, model.tmesh.T)


def forward_map(sf: SpectralForward, f) -> np.ndarray:
    return sf.eig.synthesize(sf.q * project(f, sf.eig))


def homogeneous_flow(sf: SpectralForward, u0) -> np.ndarray:
    return sf.eig.synthesize(np.exp(-sf.eig.values * sf.T) * project(u0, sf.eig))


def reconstruct_exact(sf: SpectralForward, Eu_T, u0) -> np.ndarray:
    """Unregularised inversion of the terminal mean (unstable for noisy data)."""
    lam = sf.eig.values
    coeff = (project(Eu_T, sf.eig) - np.exp(-lam * sf.T) * project(u0, sf.eig)) / sf.q
    return sf.eig.synthesize(coeff)


def regularized_coefficients(q, h_n, f0_n, gamma):
    return (q * h_n + gamma * f0_n) / (q**2 + gamma)


def regularized_solution(sf: SpectralForward, h_delta, f0, gamma: float) -> np.ndarray:
    """Tikhonov minimiser of ``1/2 ||F f - h||^2 + gamma/2 ||f - f0||^2`` in the first ``n_max`` modes."""
    if gamma <= 0:
        raise InvalidConfigurationError(f"gamma must be positive, got {gamma}")
    c = regularized_coefficients(sf.q, project(h_delta, sf.eig), project(f0, sf.eig), gamma)
    return sf.eig.synthesize(c)


def normal_equation_residual(sf: SpectralForward, f, h_delta, f0, gamma) -> np.ndarray:
    """Coefficientwise ``F*F f + gamma f - F* h - gamma f0``."""
    fn, hn, f0n = (project(v, sf.eig) for v in (f, h_delta, f0))
    return sf.q**2 * fn + gamma * fn - sf.q * hn - gamma * f0n


@dataclass
class RateStudy:
    n_obs: list
    delta: list
    mse: list
    gamma: list
    slope: float | None
    intercept: float | None = None
    reps: int = 0
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def rows(self):
        return [{"n_obs": n, "delta": d, "mse": e, "gamma": g}
                for n, d, e, g in zip(self.n_obs, self.delta, self.mse, self.gamma)]


def noise_level(model: ModelSpec, n_obs, eig: EigenSystem | None = None) -> float:
    """``delta = sqrt(C_lambda) ||g|| / sqrt(n_obs)`` with ``C_lambda = 1 / (2 lambda_1)``."""
    lam1 = 1.0 if eig is None else float(eig.values[0])
    return float(np.sqrt(1.0 / (2.0 * lam1)) * l2_norm(model.g, model.grid) / np.sqrt(n_obs))


def rate_study(model: ModelSpec, n_obs_list, reps: int, C1: float, seed: int, *,
               f0=None, n_max: int = 30) -> RateStudy:
    """Mean squared L2 error of the spectral Tikhonov solution with ``gamma = C1 delta^(2/3)``.

    Data are generated in modal coordinates: the exact terminal mean plus a
    Gaussian sampling error with the stochastic-convolution covariance divided
    by ``n_obs``.  ``model.f`` is the exact source.
    """
    n_obs_list = [int(n) for n in n_obs_list]
    if len(set(n_obs_list)) < 3:
        raise InvalidConfigurationError("rate study needs at least three distinct ensemble sizes")
    if reps < 1 or C1 <= 0:
        raise InvalidConfigurationError("reps must be >= 1 and C1 > 0")
    sf = spectral_forward(model, n_max)
    eig, grid = sf.eig, sf.grid
    f0 = np.zeros(grid.node_count) if f0 is None else grid.check(f0)
    f_exact = model.f
    fn, f0n = project(f_exact, eig), project(f0, eig)
    h_n = sf.q * fn
    cov = covariance_matrix_spectral(eig, model.g, sf.T)
    # symmetric square root; cov may be rank deficient (e.g. constant g has no even modes)
    evals, evecs = np.linalg.eigh(cov)
    root = evecs * np.sqrt(np.clip(evals, 0.0, None))
    # common random numbers: every ensemble size reuses the same base draws,
    # so the fitted slope is not polluted by independent per-size sampling noise
    base = np.random.default_rng(seed).standard_normal((reps, eig.n_max)) @ root.T
    deltas, mses, gammas = [], [], []
    for n in n_obs_list:
        delta = noise_level(model, n, eig)
        gamma = C1 * delta ** (2.0 / 3.0)
        errs = np.empty(reps)
        z = base / np.sqrt(n)
        for r in range(reps):
            est = eig.synthesize(regularized_coefficients(sf.q, h_n + z[r], f0n, gamma))
            d = f_exact - est
            errs[r] = l2_inner(d, d, grid)
        deltas.append(delta)
        mses.append(float(np.mean(errs)))
        gammas.append(gamma)
    slope = intercept = None
    if all(d > 0 for d in deltas) and all(m > 0 for m in mses):
        slope, intercept = (float(v) for v in np.polyfit(np.log(deltas), np.log(mses), 1))
    return RateStudy(n_obs_list, deltas, mses, gammas, slope, intercept, reps, seed)
