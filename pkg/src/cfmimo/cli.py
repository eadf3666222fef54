"""Command-line interface.

    cfmimo simulate SPEC [--seed S] [--workers W] [--out DIR]
                         [--preset paper|desk] [--format csv,svg]
    cfmimo pmf | sweep-snr | cdf | sweep-density SPEC [...]
    cfmimo validate [--instances N] [--trials T] [--seed S]

Exit codes: 0 success, 1 configuration error, 2 validation failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .analysis import (compute_moments, moment_discrepancies, moments_agree,
                       oracle_moments, random_instance)
from .harness import emit, load_experiment, run_experiment
from .netgeom import ConfigError
from .precoding import Scheme

log = logging.getLogger(__name__)

_SHORTCUT_KINDS = {
    "pmf": "los_pmf",
    "sweep-snr": "rate_vs_snr",
    "cdf": "rate_cdf",
    "sweep-density": "rate_vs_density",
}


def _add_run_options(sub):
    sub.add_argument("spec", help="experiment file (flat key = value lines)")
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--workers", type=int, default=1)
    sub.add_argument("--out", default=".")
    sub.add_argument("--preset", choices=("paper", "desk"), default=None)
    sub.add_argument("--format", default="csv",
                     help="comma-separated outputs: csv,svg")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfmimo")
    parser.add_argument("-v", "--verbose", action="store_true")
    subs = parser.add_subparsers(dest="command", required=True)

    _add_run_options(subs.add_parser("simulate", help="run the experiment in SPEC"))
    for name in _SHORTCUT_KINDS:
        _add_run_options(subs.add_parser(name, help=f"run SPEC as {_SHORTCUT_KINDS[name]}"))

    val = subs.add_parser("validate",
                          help="closed-form moments vs the brute-force oracle")
    val.add_argument("--instances", type=int, default=6)
    val.add_argument("--trials", type=int, default=200_000)
    val.add_argument("--seed", type=int, default=0)
    return parser


def _run_simulation(args, kind_override: str | None) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if kind_override is not None:
        overrides["kind"] = kind_override
    spec = load_experiment(args.spec, preset=args.preset, **overrides)
    rows = run_experiment(spec, workers=args.workers)
    formats = tuple(tok.strip() for tok in args.format.split(",") if tok.strip())
    for path in emit(rows, spec, args.out, formats):
        print(path)
    return 0


def run_validation(instances: int, trials: int, seed: int,
                   n_sigma: float = 3.0, stream=sys.stdout) -> bool:
    """Compare every closed-form moment field against the sampling oracle
    on random small instances; prints one line per (instance, scheme)."""
    ok = True
    for i in range(instances):
        stats, alloc, sigma_u2, sigma_d2 = random_instance(seed + 17 * i)
        m, k, n = stats.shape
        for scheme in Scheme:
            closed = compute_moments(scheme, stats, alloc, sigma_u2, sigma_d2)
            rng = np.random.default_rng([seed, i, 99, list(Scheme).index(scheme)])
            oracle = oracle_moments(scheme, stats, alloc, sigma_u2, sigma_d2,
                                    trials, rng)
            verdict = moments_agree(closed, oracle, n_sigma=n_sigma)
            zmax = max(moment_discrepancies(closed, oracle).values())
            passed = all(verdict.values())
            ok &= passed
            stream.write(
                f"{'PASS' if passed else 'FAIL'} instance {i} (M={m} N={n} K={k}) "
                f"{scheme.value:20s} max|z| = {zmax:.2f}\n"
            )
    return ok


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "simulate":
            return _run_simulation(args, None)
        if args.command in _SHORTCUT_KINDS:
            return _run_simulation(args, _SHORTCUT_KINDS[args.command])
        if args.command == "validate":
            passed = run_validation(args.instances, args.trials, args.seed)
            print("validation " + ("PASSED" if passed else "FAILED"))
            return 0 if passed else 2
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
