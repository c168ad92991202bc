"""Command line entry point ``nonlocal-hjb``.

Exit status is 0 when every enabled check passes, 1 when a check fails
(the first failure is named on stderr) and 2 on usage or configuration
errors.
"""
from __future__ import annotations

import argparse
import sys

from .config import PROBLEMS
from .errors import ConfigError, InvalidParameter

FIXED = {
    "solve-linear": "linear-manufactured",
    "example-exp": "exp-utility",
    "example-power": "power-utility",
    "fk-verify": "fk-verify",
    "norms": "norms",
}
CHOOSE = {
    "solve-hjb": ("nonlinear-manufactured", "lq-scalar"),
    "check": PROBLEMS,
    "run": PROBLEMS,
}


def _common(p):
    p.add_argument("--config", metavar="PATH", help="flat section.key = value file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one key (repeatable, beats the file)")
    p.add_argument("--out", metavar="DIR", help="output directory (run.output_dir)")
    p.add_argument("--seed", metavar="U64", help="Monte Carlo seed (mc.seed)")
    p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nonlocal-hjb", description="Nonlocal parabolic systems for time-inconsistent games.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, problem in FIXED.items():
        _common(sub.add_parser(name, help=f"run the {problem} problem"))
    for name, choices in CHOOSE.items():
        p = sub.add_parser(name, help="hypothesis checks only" if name == "check" else f"{name} a chosen problem")
        p.add_argument("--problem", choices=choices, default=choices[0] if name == "solve-hjb" else None)
        _common(p)
    return ap


def main(argv=None) -> int:
    from .config import parse_config
    from .report import execute

    ap = build_parser()
    args = ap.parse_args(argv)
    problem = FIXED.get(args.command, getattr(args, "problem", None))
    overrides = list(args.overrides)
    if args.out is not None:
        overrides.append(f"run.output_dir={args.out}")
    if args.seed is not None:
        overrides.append(f"mc.seed={args.seed}")
    if args.no_figures:
        overrides.append("run.figures=false")
    try:
        cfg = parse_config(args.config, overrides, problem=problem)
    except ConfigError as exc:
        print(f"nonlocal-hjb: error: {exc}", file=sys.stderr)
        return 2
    try:
        res = execute(cfg, command=" ".join(["nonlocal-hjb", *(argv if argv is not None else sys.argv[1:])]),
                      config_path=args.config, checks_only=args.command == "check")
    except InvalidParameter as exc:
        print(f"nonlocal-hjb: error: {exc}", file=sys.stderr)
        return 2
    for c in res.checks:
        status = "info" if c.relation == "info" else ("pass" if c.passed else "FAIL")
        bound = "" if c.threshold is None else f" (need {c.relation} {c.threshold:g})"
        print(f"{status:4s} {c.name} = {c.value:.6g}{bound}")
    bad = res.first_failure()
    if bad is not None:
        print(f"nonlocal-hjb: check failed: {bad.name} = {bad.value:.6g}, need {bad.relation} {bad.threshold:g}",
              file=sys.stderr)
        return 1
    print(f"wrote {len(res.files)} files to {cfg.output_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
