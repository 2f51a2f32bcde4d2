"""Run configurations, the two benchmark problems and the end-to-end commands.

Physical fields are chosen by registered name plus a parameter block, so a
configuration is a plain JSON document.  Every command is a pure function of
its configuration and seed; CSVs are written with ``repr`` floats so reruns
are byte identical.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .cgm import CgmConfig, run_cgm
from .errors import DependencyError, InvalidConfigurationError, NumericalFailureError
from .forward import ExponentialFactor, ModelSpec, assemble_operator, solve_deterministic
from .grid import Grid, TimeMesh, l2_norm, linf_norm
from .observations import (
    expectation_data,
    generate_ensemble,
    inject_unknown_noise,
    load_ensemble,
    prepare_data,
    save_ensemble,
)
from .spectral import rate_study
from .uq import UqConfig, run_stage2
from .weighting import WeightSchedule

WORKERS_ENV = "STOCHSOURCE_MAX_WORKERS"


# ---------------------------------------------------------------------------
# registered fields


def _piecewise_ramp(x):
    return np.where(x <= np.pi / 3, x / 2, np.where(x <= 2 * np.pi / 3, np.pi / 6, -x / 2 + np.pi / 2))


FIELDS = {
    "zero": lambda x: np.zeros_like(x),
    "constant": lambda x, value=1.0: np.full_like(x, value),
    "linear": lambda x, slope=1.0, intercept=0.0: slope * x + intercept,
    "sine": lambda x, amplitude=1.0, mode=1: amplitude * np.sin(mode * x),
    "shifted_sine": lambda x, shift=2.0: (shift + x) * np.sin(x),
    "piecewise_ramp": _piecewise_ramp,
}

TIME_FACTORS = {
    "exp": lambda scale=1.0, rate=1.0: ExponentialFactor(scale, rate),
}


def sample_field(block: dict, grid: Grid) -> np.ndarray:
    block = dict(block)
    name = block.pop("name", None)
    if name not in FIELDS:
        raise InvalidConfigurationError(f"unknown field {name!r}; registered: {sorted(FIELDS)}")
    try:
        return grid.sample(lambda x: FIELDS[name](x, **block))
    except TypeError as exc:
        raise InvalidConfigurationError(f"bad parameters for field {name!r}: {exc}") from exc


def make_time_factor(block: dict):
    block = dict(block)
    name = block.pop("name", None)
    if name not in TIME_FACTORS:
        raise InvalidConfigurationError(f"unknown time factor {name!r}; registered: {sorted(TIME_FACTORS)}")
    try:
        return TIME_FACTORS[name](**block)
    except TypeError as exc:
        raise InvalidConfigurationError(f"bad parameters for time factor {name!r}: {exc}") from exc


EXAMPLES = {
    # A = d2/dx2 - x, f = (2 + x) sin x, R = e^t, g = x, u0 = sin x
    "example1": {
        "a": {"name": "constant", "value": 1.0},
        "c": {"name": "linear", "slope": 1.0, "intercept": 0.0},
        "f": {"name": "shifted_sine", "shift": 2.0},
        "R": {"name": "exp", "scale": 1.0, "rate": 1.0},
        "g": {"name": "linear", "slope": 1.0, "intercept": 0.0},
        "u0": {"name": "sine", "amplitude": 1.0, "mode": 1},
    },
    # A = d2/dx2, piecewise-linear f, R = e^t, g = 0.5, u0 = 0
    "example2": {
        "a": {"name": "constant", "value": 1.0},
        "c": {"name": "zero"},
        "f": {"name": "piecewise_ramp"},
        "R": {"name": "exp", "scale": 1.0, "rate": 1.0},
        "g": {"name": "constant", "value": 0.5},
        "u0": {"name": "zero"},
    },
}


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    example: str = "example2"
    M: int = 100
    length: float = math.pi
    T: float = 1.0
    K: int = 20
    theta: float = 1.0
    n_obs: int | str = 100  # "expectation" feeds the exact discrete mean
    noise_level: float = 0.0
    seed: int = 0
    weighting: str = "new"
    out: str = "out"
    model: dict | None = None  # field blocks, required for example == "custom"
    cgm: dict = field(default_factory=dict)
    uq: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.example not in (*EXAMPLES, "custom"):
            raise InvalidConfigurationError(f"unknown example {self.example!r}")
        if self.example == "custom" and not self.model:
            raise InvalidConfigurationError("custom example needs a model block")
        if self.weighting not in ("new", "iid"):
            raise InvalidConfigurationError(f"weighting must be 'new' or 'iid', got {self.weighting!r}")
        if isinstance(self.n_obs, str):
            if self.n_obs != "expectation":
                raise InvalidConfigurationError(f"n_obs must be a positive integer or 'expectation', got {self.n_obs!r}")
        elif isinstance(self.n_obs, bool) or int(self.n_obs) != self.n_obs or self.n_obs < 1:
            raise InvalidConfigurationError(f"n_obs must be a positive integer, got {self.n_obs}")
        if not (np.isfinite(self.noise_level) and self.noise_level >= 0):
            raise InvalidConfigurationError(f"noise level must be >= 0, got {self.noise_level}")
        if self.n_obs == "expectation" and self.noise_level > 0:
            raise InvalidConfigurationError("unknown noise cannot be applied to exact expectation data")
        Grid(self.length, self.M)
        TimeMesh(self.T, self.K)
        self.cgm_config()
        UqConfig(**self.uq)

    @property
    def model_blocks(self) -> dict:
        return self.model if self.example == "custom" else EXAMPLES[self.example]

    def cgm_config(self) -> CgmConfig:
        kw = dict(self.cgm)
        sched = kw.pop("schedule", {}) or {}
        try:
            return CgmConfig(schedule=WeightSchedule(**sched), weighted=self.weighting == "new", **kw)
        except TypeError as exc:
            raise InvalidConfigurationError(f"bad cgm block: {exc}") from exc

    def uq_config(self, seed_offset: int = 0) -> UqConfig:
        kw = dict(self.uq)
        kw.setdefault("seed", self.seed + seed_offset)
        return UqConfig(**kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidConfigurationError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise InvalidConfigurationError("config must be a JSON object")
        return cls.from_dict(d)

    def with_(self, **changes) -> "RunConfig":
        d = self.to_dict()
        d.update({k: v for k, v in changes.items() if v is not None})
        return RunConfig.from_dict(d)


def build_model(cfg: RunConfig) -> tuple[ModelSpec, np.ndarray]:
    """Model with its exact source ``f``; the model carries ``f`` as the true source."""
    grid = Grid(cfg.length, cfg.M)
    blocks = cfg.model_blocks
    for key in ("a", "c", "f", "R", "g", "u0"):
        if key not in blocks:
            raise InvalidConfigurationError(f"model block is missing {key!r}")
    op = assemble_operator(grid, sample_field(blocks["a"], grid), sample_field(blocks["c"], grid))
    f = sample_field(blocks["f"], grid)
    model = ModelSpec(op, f, make_time_factor(blocks["R"]), sample_field(blocks["g"], grid),
                      sample_field(blocks["u0"], grid), TimeMesh(cfg.T, cfg.K), cfg.theta)
    return model, f


def manufactured_error(model: ModelSpec) -> float:
    """Max nodal gap between the noise-free terminal state and ``e^T sin x`` (exact for example 1)."""
    u = solve_deterministic(model, full=False)
    return linf_norm(u - np.exp(model.tmesh.T) * np.sin(model.grid.x))


# ---------------------------------------------------------------------------
# file helpers


def _outdir(cfg: RunConfig) -> Path:
    p = Path(cfg.out)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {p}: {exc}") from exc
    return p


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(path: Path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _read_column_csv(path: Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    return {h: np.array([float(r[i]) for r in body]) for i, h in enumerate(header)}


def max_workers() -> int:
    env = os.environ.get(WORKERS_ENV)
    cap = os.cpu_count() or 1
    if env:
        try:
            cap = max(1, int(env))
        except ValueError as exc:
            raise InvalidConfigurationError(f"{WORKERS_ENV} must be an integer, got {env!r}") from exc
    return cap


# ---------------------------------------------------------------------------
# pipeline pieces


def observe(cfg: RunConfig, model: ModelSpec, *, ensemble_seed=None, noise_seed=None):
    """Prepared inversion data for the configured ensemble size and noise level."""
    if cfg.n_obs == "expectation":
        return expectation_data(model)
    ens = generate_ensemble(model, int(cfg.n_obs), cfg.seed if ensemble_seed is None else ensemble_seed)
    ens = inject_unknown_noise(ens, cfg.noise_level, cfg.seed + 1 if noise_seed is None else noise_seed)
    return prepare_data(ens, model)


def invert(cfg: RunConfig, model: ModelSpec, data, weighted: bool | None = None):
    config = cfg.cgm_config()
    if weighted is not None:
        config = CgmConfig(**{**config.__dict__, "weighted": weighted})
    return run_cgm(model, data, config)


def error_summary(f_star, f_exact, grid) -> dict:
    return {"linf_error": linf_norm(f_star - f_exact), "l2_error": l2_norm(f_star - f_exact, grid)}


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: RunConfig) -> dict:
    if cfg.n_obs == "expectation":
        raise InvalidConfigurationError("simulate needs an integer n_obs")
    model, _ = build_model(cfg)
    out = _outdir(cfg)
    ens = generate_ensemble(model, int(cfg.n_obs), cfg.seed)
    ens = inject_unknown_noise(ens, cfg.noise_level, cfg.seed + 1)
    save_ensemble(ens, out / "ensemble")
    data = prepare_data(ens, model)
    inner = data.interior
    summary = {
        "n_obs": ens.n_obs, "cond": data.cond,
        "sigma2_mean": float(np.mean(data.sigma2[inner])), "sigma2_max": float(np.max(data.sigma2[inner])),
        "degenerate": data.degenerate,
    }
    _write_json(out / "simulate_summary.json", summary)
    return summary


def _load_or_observe(cfg: RunConfig, model: ModelSpec):
    if cfg.n_obs == "expectation":
        return expectation_data(model)
    path = Path(cfg.out) / "ensemble"
    if path.with_suffix(".csv").exists():
        ens = load_ensemble(path)
        if ens.grid != model.grid or ens.tmesh != model.tmesh or ens.n_obs != cfg.n_obs:
            raise InvalidConfigurationError("stored ensemble does not match the configuration")
        return prepare_data(ens, model)
    return observe(cfg, model)


def cmd_invert(cfg: RunConfig) -> dict:
    model, f_exact = build_model(cfg)
    out = _outdir(cfg)
    data = _load_or_observe(cfg, model)
    weighted = cfg.weighting == "new"
    try:
        f_star, trace = invert(cfg, model, data)
    except NumericalFailureError as exc:
        tr = getattr(exc, "trace", None)
        if tr is not None:
            tr.to_csv(out / "trace.csv")
        raise
    # paired run with the other weighting on identical data
    f_other, _ = invert(cfg, model, data, weighted=not weighted)
    grid = model.grid
    _write_csv(out / "f_star.csv", ["x", "f_star", "f_exact"], zip(grid.x, f_star, f_exact))
    trace.to_csv(out / "trace.csv")
    summary = {
        **error_summary(f_star, f_exact, grid),
        "iterations": trace.iterations, "final_J": trace.J[-1], "termination": trace.reason,
        "gamma": trace.gamma, "weighting": cfg.weighting, "cond": data.cond,
        "paired_linf_error": {("iid" if weighted else "new"): linf_norm(f_other - f_exact),
                              cfg.weighting: linf_norm(f_star - f_exact)},
    }
    if cfg.example == "example1":
        summary["manufactured_solution_error"] = manufactured_error(model)
    _write_json(out / "invert_summary.json", summary)
    return summary


def cmd_uq(cfg: RunConfig) -> dict:
    model, f_exact = build_model(cfg)
    out = Path(cfg.out)
    f_path, s_path = out / "f_star.csv", out / "invert_summary.json"
    if not (f_path.exists() and s_path.exists()):
        raise DependencyError(f"stage-1 output missing in {out}; run 'invert' first")
    f_star = _read_column_csv(f_path)["f_star"]
    gamma = json.loads(s_path.read_text(encoding="utf-8"))["gamma"]
    data = _load_or_observe(cfg, model)
    prior = cfg.cgm_config().f0
    res = run_stage2(model, data, model.grid.check(f_star), cfg.uq_config(), gamma=gamma, prior=prior)
    res.save(out / "band.csv")
    summary = {**res.summary(), "coverage": res.coverage(f_exact),
               **{f"best_{k}": v for k, v in error_summary(res.f_best, f_exact, model.grid).items()}}
    _write_json(out / "uq_summary.json", summary)
    return summary


def cmd_rate_study(cfg: RunConfig, n_obs_list=(10, 40, 160, 640), reps: int = 50, C1: float = 0.5,
                   slope_floor: float = 1.1) -> dict:
    model, _ = build_model(cfg)
    out = _outdir(cfg)
    study = rate_study(model, n_obs_list, reps, C1, cfg.seed)
    _write_csv(out / "rate.csv", ["n_obs", "delta", "mse", "gamma"],
               ([r["n_obs"], r["delta"], r["mse"], r["gamma"]] for r in study.rows()))
    summary = {"slope": study.slope, "intercept": study.intercept, "reps": reps, "C1": C1,
               "slope_floor": slope_floor,
               "passed": study.slope is not None and study.slope >= slope_floor}
    _write_json(out / "rate_summary.json", summary)
    return summary


# ---------------------------------------------------------------------------
# reproduction matrix

DEFAULT_N_OBS = (10, 20, 40, 100, 300)
DEFAULT_NOISE = (0.0, 0.01, 0.05, 0.10)


def replicate_seeds(master: int, rep: int) -> tuple[int, int, int]:
    """(ensemble, unknown-noise, stage-2) seeds for replicate ``rep``.

    The same replicate uses the same seeds in every cell, so ensembles are
    nested across ``n_obs`` and the unknown noise is paired across levels.
    """
    s = np.random.SeedSequence([master, rep]).generate_state(3, dtype=np.uint32)
    return int(s[0]) % 2**30, int(s[1]) % 2**30, int(s[2]) % 2**30


def _run_cell(args):
    cfg_dict, n_obs, level, reps, uq_reps, master, unreliable_rel = args
    cfg = RunConfig.from_dict({**cfg_dict, "n_obs": n_obs, "noise_level": level})
    model, f_exact = build_model(cfg)
    fmax = linf_norm(f_exact)
    errs, lo, hi, seeds, failures = [], [], [], [], 0
    n_reps = 1 if n_obs == "expectation" else reps
    for r in range(n_reps):
        es, ns, us = replicate_seeds(master, r)
        seeds.append(es)
        try:
            data = observe(cfg, model, ensemble_seed=es, noise_seed=ns)
            f_star, trace = invert(cfg, model, data)
            errs.append(linf_norm(f_star - f_exact))
            if r < uq_reps:
                res = run_stage2(model, data, f_star, UqConfig(**{**cfg.uq, "seed": us}),
                                 gamma=trace.gamma, prior=cfg.cgm_config().f0)
                lo.append(res.UQ_min)
                hi.append(res.UQ_max)
        except NumericalFailureError:
            failures += 1
    err = float(np.mean(errs)) if errs else math.nan
    uq_lo = float(np.mean(lo)) if lo else math.nan
    uq_hi = float(np.mean(hi)) if hi else math.nan
    if failures:
        status = "failed"
    elif not err <= unreliable_rel * fmax:
        status = "unreliable"
    else:
        status = "ok"
    return {"noise_level": level, "n_obs": n_obs, "linf_error": err, "uq_min": uq_lo, "uq_max": uq_hi,
            "status": status, "reps": n_reps, "failures": failures, "seeds": ";".join(map(str, seeds))}


def cmd_reproduce(cfg: RunConfig, *, n_obs_list=DEFAULT_N_OBS, noise_levels=DEFAULT_NOISE, reps: int = 64,
                  uq_reps: int = 8, expectation: bool = True, unreliable_rel: float = 0.25,
                  workers: int | None = None) -> list:
    """Error / UQ table over (noise level x n_obs).

    Each cell averages the sup error over ``reps`` replicates and the UQ
    extrema over the first ``uq_reps`` of them.  A cell is ``failed`` if any
    replicate diverged and ``unreliable`` when its mean sup error exceeds
    ``unreliable_rel * ||f||_inf``.
    """
    if reps < 1 or uq_reps < 0:
        raise InvalidConfigurationError("reps must be >= 1 and uq_reps >= 0")
    out = _outdir(cfg)
    base = cfg.to_dict()
    jobs = [(base, int(n), float(lv), reps, uq_reps, cfg.seed, unreliable_rel)
            for lv in noise_levels for n in n_obs_list]
    if expectation:
        jobs.append((base, "expectation", 0.0, reps, uq_reps, cfg.seed, unreliable_rel))
    workers = min(max_workers() if workers is None else workers, len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_run_cell, jobs))
    else:
        cells = [_run_cell(j) for j in jobs]
    header = ["noise_level", "n_obs", "linf_error", "uq_min", "uq_max", "status", "reps", "failures", "seeds"]
    _write_csv(out / f"reproduce_{cfg.example}.csv", header, ([c[h] for h in header] for c in cells))
    _write_json(out / f"reproduce_{cfg.example}.json", {
        "config": base, "master_seed": cfg.seed, "reps": reps, "uq_reps": uq_reps,
        "unreliable_rel": unreliable_rel, "n_obs": [str(n) for n in n_obs_list], "noise_levels": list(noise_levels)})
    return cells


def format_table(cells) -> str:
    """Plain-text layout with one row per noise level and one column per ``n_obs``."""
    levels = sorted({c["noise_level"] for c in cells})
    cols = []
    for c in cells:
        if c["n_obs"] not in cols:
            cols.append(c["n_obs"])
    by = {(c["noise_level"], c["n_obs"]): c for c in cells}
    lines = ["noise  " + "".join(f"{str(n):>22}" for n in cols)]
    for lv in levels:
        row = []
        for n in cols:
            c = by.get((lv, n))
            if c is None:
                row.append(f"{'':>22}")
            elif c["status"] != "ok":
                row.append(f"{'--':>22}")
            else:
                row.append(f"{c['linf_error']:9.4f} ({c['uq_min']:.4f},{c['uq_max']:.4f})".rjust(22))
        lines.append(f"{lv:5.0%}  " + "".join(row))
    return "\n".join(lines)
