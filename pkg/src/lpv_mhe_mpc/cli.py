"""Command line entry point: ``simulate``, ``learn``, ``verify`` and ``bench``.

Exit codes: 0 success, 1 verification failure, 2 config error, 3 runtime abort.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .experiment import (
    ConfigError,
    ExperimentConfig,
    RunAborted,
    bench,
    initial_theta,
    learn,
    load_theta,
    simulate,
)
from .nlp_solver import SolverError

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lpv-mhe-mpc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, theta=True):
        sp.add_argument("--config", type=Path, help="JSON experiment config (defaults when omitted)")
        sp.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        if theta:
            sp.add_argument("--theta", type=Path, help="theta snapshot to start from")

    sim = sub.add_parser("simulate", help="evaluation episodes under a fixed theta")
    common(sim)
    sim.add_argument("--debug-traces", action="store_true", help="dump MPC predictions per step")
    common(sub.add_parser("learn", help="run the RL loop"))
    ver = sub.add_parser("verify", help="run the oracle suite")
    ver.add_argument("--out", type=Path, help="write verify_report.txt here")
    ver.add_argument("--quick", action="store_true", help="fewer random instances")
    ver.add_argument("--inject-sign-error", action="store_true",
                     help="flip the parameter Jacobian sign (the FD checks must then fail)")
    common(sub.add_parser("bench", help="wall time per MHE and MPC solve"), theta=False)
    return p


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, output_dir=str(args.out))
    return cfg


def _theta(args, cfg):
    if getattr(args, "theta", None) is None:
        return None
    return load_theta(args.theta, initial_theta(cfg))


def _verify(args) -> int:
    from .verification import run_all

    results = run_all(mutate=args.inject_sign_error, quick=args.quick)
    lines = [r.line() for r in results]
    print("\n".join(lines))
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "verify_report.txt").write_text("\n".join(lines) + "\n")
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        if args.command == "verify":
            return _verify(args)
        cfg = _config(args)
        out = Path(cfg.output_dir)
        if args.command == "simulate":
            summary = simulate(cfg, out, _theta(args, cfg), debug=args.debug_traces)
            print(json.dumps(summary, indent=2))
        elif args.command == "learn":
            res = learn(cfg, out, _theta(args, cfg))
            print(f"J_eval initial {res['J_eval'][0]:.6g} final {res['J_eval'][-1]:.6g} "
                  f"max |x1(T_f)| {res['x1_final_max']:.3g} in {res['seconds']:.0f}s")
        elif args.command == "bench":
            print(json.dumps(bench(cfg, out), indent=2))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RunAborted, SolverError) as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
