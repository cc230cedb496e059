"""Command-line entry points.

Exit codes: 0 on success, 1 on usage/configuration errors, 2 on numerical
failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields

import numpy as np

from .config import RunConfig
from .linalg import SolverError
from .mcmc import ForwardModelError
from . import runner


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="FILE", help="key = value config file")
    parser.add_argument("--h0", type=float)
    parser.add_argument("--levels", type=int)
    parser.add_argument("--correlation-length", type=float, dest="correlation_length")
    parser.add_argument("--sigma2", type=float)
    parser.add_argument("--sigma-eta2", type=float, dest="sigma_eta2")
    parser.add_argument("--coarsest-sampler", choices=("kl", "spde"),
                        dest="coarsest_sampler")
    parser.add_argument("--kl-modes", type=int, dest="kl_modes")
    parser.add_argument("--beta", help="pCN step size (scalar or comma list per level)")
    parser.add_argument("--subchain", help="coarse steps per fine proposal (scalar or comma list)")
    parser.add_argument("--n-chains", type=int, dest="n_chains")
    parser.add_argument("--n-samples", type=int, dest="n_samples")
    parser.add_argument("--burnin-fraction", type=float, dest="burnin_fraction")
    parser.add_argument("--epsilon", type=float)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--output-dir", dest="output_dir")
    parser.add_argument("--observations-file", dest="observations_file")
    parser.add_argument("--n-workers", type=int, dest="n_workers")


def _config_from_args(args) -> RunConfig:
    if args.config:
        with open(args.config) as fh:
            config = RunConfig.from_text(fh.read())
    else:
        config = RunConfig()
    for f in fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is None:
            continue
        if f.name == "beta":
            value = tuple(float(v) for v in str(value).split(","))
        elif f.name == "subchain":
            value = tuple(int(v) for v in str(value).split(","))
        setattr(config, f.name, value)
    config.__post_init__()
    config.validate()
    return config


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mlgrf", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate-observations",
                         help="synthesize noisy pressure data on a reference mesh")
    _add_config_flags(gen)
    gen.add_argument("--out", help="observation file path (default: per config)")

    grf = sub.add_parser("sample-grf", help="emit one field realization CSV")
    _add_config_flags(grf)
    grf.add_argument("--sampler", choices=("spde", "kl", "multilevel"), default="spde")
    grf.add_argument("--level", type=int, default=0)
    grf.add_argument("--out", required=True)

    run_p = sub.add_parser("run", help="run the multilevel chains")
    _add_config_flags(run_p)

    diag = sub.add_parser("diagnostics", help="tables from a completed run")
    diag.add_argument("--run", required=True, dest="run_dir")
    diag.add_argument("--max-lag", type=int, default=100, dest="max_lag")

    val = sub.add_parser("validate", help="exact identity suite on tiny hierarchies")
    val.add_argument("--json", dest="json_out", help="also write the report to this file")
    val.add_argument("--demo-lumped-mass", action="store_true",
                     help="include the lumped-mass counterexample (expected failure)")
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "generate-observations":
            config = _config_from_args(args)
            runner.generate_observations(config, path=args.out)
            print(f"wrote {args.out or config.observations_path()}")
        elif args.command == "sample-grf":
            config = _config_from_args(args)
            runner.sample_field(config, args.sampler, args.level, args.out)
            print(f"wrote {args.out}")
        elif args.command == "run":
            config = _config_from_args(args)
            run_dir = runner.run(config)
            print(f"run complete: {run_dir}")
        elif args.command == "diagnostics":
            out = runner.diagnostics(args.run_dir, max_lag=args.max_lag)
            print(f"diagnostics written to {out}")
        elif args.command == "validate":
            checks = runner.validation_checks(include_lumped_demo=args.demo_lumped_mass)
            report = json.dumps(checks, indent=1)
            if args.json_out:
                with open(args.json_out, "w") as fh:
                    fh.write(report + "\n")
            for c in checks:
                status = "PASS" if c["passed"] else "FAIL"
                print(f"{status}  {c['check']}  "
                      f"(residual {c['residual']:.3e}, tol {c['tolerance']:.1e})")
            if not all(c["passed"] for c in checks):
                return 2
    except (ValueError, FileNotFoundError) as exc:
        print(f"mlgrf: error: {exc}", file=sys.stderr)
        return 1
    except (SolverError, ForwardModelError, np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"mlgrf: numerical failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
