"""Command-line front end.

Exit codes: 0 success, 1 a reported check failed (rate-study slope below
the floor), 2 invalid configuration, 3 numerical failure, 4 missing
prerequisite artifact, 5 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import (
    DependencyError,
    InvalidConfigurationError,
    InvalidModelError,
    NumericalFailureError,
    ShapeError,
    UnsupportedOracleError,
)
from .experiments import (
    DEFAULT_N_OBS,
    DEFAULT_NOISE,
    EXAMPLES,
    RunConfig,
    cmd_invert,
    cmd_rate_study,
    cmd_reproduce,
    cmd_simulate,
    cmd_uq,
    format_table,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INVALID_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_DEPENDENCY = 4
EXIT_IO = 5

log = logging.getLogger("stochsource")


def _n_obs(text: str):
    if text in ("expectation", "inf"):
        return "expectation"
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer or 'expectation', got {text!r}") from None


def _int_list(text: str):
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str):
    try:
        return [float(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--example", choices=[*EXAMPLES, "custom"])
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=str, help="output directory")
    common.add_argument("--weighting", choices=["new", "iid"])
    common.add_argument("--noise-level", type=float, help="unknown-noise level as a fraction (0.05 = 5%%)")
    common.add_argument("--n-obs", type=_n_obs, help="ensemble size, or 'expectation' for exact data")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="stochsource", description="Source inversion for a stochastic parabolic equation.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="generate an observation ensemble")
    sub.add_parser("invert", parents=[common], help="stage 1: weighted CG inversion")
    sub.add_parser("uq", parents=[common], help="stage 2: sampling refinement and uncertainty band")
    rs = sub.add_parser("rate-study", parents=[common], help="spectral convergence-rate study")
    rs.add_argument("--reps", type=int, default=50)
    rs.add_argument("--C1", type=float, default=0.5)
    rs.add_argument("--n-obs-list", type=_int_list, default=[10, 40, 160, 640])
    rs.add_argument("--slope-floor", type=float, default=1.1)
    rp = sub.add_parser("reproduce", parents=[common], help="error / UQ table over noise levels and ensemble sizes")
    rp.add_argument("--reps", type=int, default=64)
    rp.add_argument("--uq-reps", type=int, default=8)
    rp.add_argument("--n-obs-list", type=_int_list, default=list(DEFAULT_N_OBS))
    rp.add_argument("--noise-levels", type=_float_list, default=list(DEFAULT_NOISE))
    rp.add_argument("--no-expectation", action="store_true", help="skip the exact-mean column")
    rp.add_argument("--workers", type=int, help="worker processes (also capped by STOCHSOURCE_MAX_WORKERS)")
    return p


def load_config(args) -> RunConfig:
    if args.config is not None:
        try:
            text = args.config.read_text(encoding="utf-8")
        except OSError as exc:
            raise InvalidConfigurationError(f"cannot read config {args.config}: {exc}") from exc
        cfg = RunConfig.from_json(text)
    else:
        cfg = RunConfig()
    return cfg.with_(example=args.example, seed=args.seed, out=args.out, weighting=args.weighting,
                     noise_level=args.noise_level, n_obs=args.n_obs)


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        (Path(cfg.out) / "config.json").write_text(cfg.to_json() + "\n", encoding="utf-8")
        code = EXIT_OK
        if args.command == "simulate":
            result = cmd_simulate(cfg)
        elif args.command == "invert":
            result = cmd_invert(cfg)
        elif args.command == "uq":
            result = cmd_uq(cfg)
        elif args.command == "rate-study":
            result = cmd_rate_study(cfg, args.n_obs_list, args.reps, args.C1, args.slope_floor)
            if not result["passed"]:
                code = EXIT_CHECK_FAILED
        else:
            cells = cmd_reproduce(cfg, n_obs_list=args.n_obs_list, noise_levels=args.noise_levels, reps=args.reps,
                                  uq_reps=args.uq_reps, expectation=not args.no_expectation, workers=args.workers)
            print(format_table(cells))
            return EXIT_OK
        print(json.dumps(result, indent=2, sort_keys=True, default=str))
        return code
    except (InvalidConfigurationError, ShapeError, InvalidModelError, UnsupportedOracleError) as exc:
        log.error("invalid configuration: %s", exc)
        return EXIT_INVALID_CONFIG
    except NumericalFailureError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except DependencyError as exc:
        log.error("missing prerequisite: %s", exc)
        return EXIT_DEPENDENCY
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
