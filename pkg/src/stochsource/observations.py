"""Terminal-time observation ensembles and the derived inversion data.

An ensemble holds one terminal snapshot per simulated path.  ``prepare_data``
reduces it to the centred sample mean ``h_delta`` (the homogeneous flow of the
initial condition removed), the nodewise sample variance and the condition
number of the diagonal covariance.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DependencyError, InvalidConfigurationError
from .forward import ModelSpec, discrete_variance, simulate_paths, solve_deterministic
from .grid import Grid, TimeMesh, eigen_pairs, l2_inner, l2_norm

VAR_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class ObservationEnsemble:
    snapshots: np.ndarray  # (n_obs, nodes)
    grid: Grid
    tmesh: TimeMesh
    seed: int
    unknown_noise_level: float = 0.0
    noise_seed: int | None = None

    def __post_init__(self):
        snaps = np.atleast_2d(np.asarray(self.snapshots, dtype=float))
        self.grid.check(snaps, "snapshots")
        if snaps.shape[0] < 1:
            raise InvalidConfigurationError("an ensemble needs at least one snapshot")
        object.__setattr__(self, "snapshots", snaps)

    @property
    def n_obs(self) -> int:
        return self.snapshots.shape[0]

    def sidecar(self) -> dict:
        return {
            "n_obs": self.n_obs,
            "seed": self.seed,
            "level": self.unknown_noise_level,
            "noise_seed": self.noise_seed,
            "grid": self.grid.to_dict(),
            "time_mesh": self.tmesh.to_dict(),
        }


@dataclass(frozen=True, eq=False)
class PreparedData:
    h_mean: np.ndarray
    h_delta: np.ndarray
    sigma2: np.ndarray
    cond: float
    n_obs: float  # math.inf for exact-expectation data
    grid: Grid
    degenerate: bool = False
    deviations: np.ndarray | None = None  # centred snapshots (n_obs, nodes); None for exact data

    @property
    def interior(self) -> slice:
        return self.grid.interior

    def delta_hat(self) -> float:
        """Data noise level ``sqrt(mean sigma2 / n_obs) * sqrt(length)`` (0 for exact data)."""
        if math.isinf(self.n_obs):
            return 0.0
        s2 = float(np.mean(self.sigma2[self.interior]))
        return math.sqrt(s2 / self.n_obs) * math.sqrt(self.grid.length)


def generate_ensemble(model: ModelSpec, n_obs: int, seed: int) -> ObservationEnsemble:
    """``n_obs`` independent terminal snapshots using path seeds ``seed+1 .. seed+n_obs``."""
    if int(n_obs) != n_obs or n_obs < 1:
        raise InvalidConfigurationError(f"n_obs must be a positive integer, got {n_obs}")
    snaps = simulate_paths(model, range(seed + 1, seed + 1 + int(n_obs)))
    return ObservationEnsemble(snaps, model.grid, model.tmesh, int(seed))


def inject_unknown_noise(ens: ObservationEnsemble, level: float, seed: int) -> ObservationEnsemble:
    """Multiply each snapshot value by ``1 + level * zeta`` with ``zeta`` standard normal per (snapshot, node)."""
    if not np.isfinite(level) or level < 0:
        raise InvalidConfigurationError(f"unknown-noise level must be >= 0, got {level}")
    if level == 0:
        return ens
    zeta = np.random.default_rng(seed).standard_normal(ens.snapshots.shape)
    snaps = ens.snapshots * (1.0 + level * zeta)
    return ObservationEnsemble(snaps, ens.grid, ens.tmesh, ens.seed, ens.unknown_noise_level + level, seed)


def condition_number(sigma2, grid: Grid, floor: float = VAR_FLOOR) -> float:
    s = np.asarray(sigma2)[grid.interior]
    return float(max(np.max(s), floor) / max(np.min(s), floor))


def prepare_data(ens: ObservationEnsemble, model: ModelSpec) -> PreparedData:
    if ens.n_obs < 1:
        raise InvalidConfigurationError("empty ensemble")
    grid = model.grid
    # a fixed memory layout fixes the summation order, so data loaded from
    # disk reduce bit-identically to freshly simulated paths
    snaps = np.ascontiguousarray(grid.check(ens.snapshots))
    h_mean = np.mean(snaps, axis=0)
    flow = solve_deterministic(model, f=0.0, full=False)
    h_delta = h_mean - flow
    if ens.n_obs > 1:
        sigma2 = np.var(snaps, axis=0, ddof=1)
    else:
        sigma2 = np.zeros(grid.node_count)
    return PreparedData(h_mean, h_delta, sigma2, condition_number(sigma2, grid), float(ens.n_obs), grid,
                        degenerate=ens.n_obs < 2, deviations=snaps - h_mean)


def expectation_data(model: ModelSpec) -> PreparedData:
    """Noise-free data: the exact mean of the discrete scheme and its exact per-path variance."""
    grid = model.grid
    h_mean = solve_deterministic(model, full=False)
    h_delta = h_mean - solve_deterministic(model, f=0.0, full=False)
    sigma2 = discrete_variance(model)
    return PreparedData(h_mean, h_delta, sigma2, condition_number(sigma2, grid), math.inf, grid)


def mean_error_check(model: ModelSpec, n_obs_list, reps: int, seed: int):
    """Empirical ``E ||h^N - E u(., T)||^2`` per ensemble size, next to ``||g||^2 / (2 lambda_1 n_obs)``.

    The reference mean is the noise-free discrete solution, so the check
    isolates sampling error from discretisation error.
    """
    eig = eigen_pairs(model.grid, 1)
    lam1 = float(eig.values[0])
    mean = solve_deterministic(model, full=False)
    gnorm2 = l2_norm(model.g, model.grid) ** 2
    rows = []
    for i, n in enumerate(n_obs_list):
        errs = []
        for r in range(reps):
            s = seed + 1_000_003 * (i + 1) + 10_007 * r
            ens = generate_ensemble(model, n, s)
            d = ens.snapshots.mean(axis=0) - mean
            errs.append(l2_inner(d, d, model.grid))
        errs = np.asarray(errs)
        rows.append({
            "n_obs": int(n),
            "mse": float(errs.mean()),
            "stderr": float(errs.std(ddof=1) / np.sqrt(reps)) if reps > 1 else 0.0,
            "bound": gnorm2 / (2 * lam1 * n),
        })
    return rows


# ---------------------------------------------------------------------------
# CSV + JSON sidecar


def save_ensemble(ens: ObservationEnsemble, path) -> tuple[Path, Path]:
    """Write ``<path>.csv`` (one row per node, one column per snapshot) and ``<path>.json``."""
    path = Path(path)
    csv_path = path.with_suffix(".csv")
    json_path = path.with_suffix(".json")
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    header = ["x"] + [f"obs_{i}" for i in range(ens.n_obs)]
    with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for j, xj in enumerate(ens.grid.x):
            # repr of a Python float round-trips exactly
            fh.write(",".join([repr(float(xj))] + [repr(float(v)) for v in ens.snapshots[:, j]]) + "\n")
    json_path.write_text(json.dumps(ens.sidecar(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return csv_path, json_path


def load_ensemble(path) -> ObservationEnsemble:
    path = Path(path)
    csv_path, json_path = path.with_suffix(".csv"), path.with_suffix(".json")
    if not csv_path.exists() or not json_path.exists():
        raise DependencyError(f"ensemble files {csv_path} / {json_path} not found")
    meta = json.loads(json_path.read_text(encoding="utf-8"))
    grid = Grid(**meta["grid"])
    tmesh = TimeMesh(**meta["time_mesh"])
    rows = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    snaps = rows[:, 1:].T
    return ObservationEnsemble(snaps, grid, tmesh, meta["seed"], meta["level"], meta.get("noise_seed"))
