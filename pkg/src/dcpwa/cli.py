"""Batch command-line front end.

Subcommands: examples, synth, simulate, verify, export-sdpa.  Exit codes:
0 success, 2 infeasible, 3 input error, 4 numerical failure.  Runs are
deterministic for a given configuration and seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys as _sys

import numpy as np

from . import benchmarks
from .errors import DCPWAError, Infeasible, NumericalFailure, ParseError
from .model import load_system, redefine_dc, save_system, system_hash
from .sdpa import export_sdpa
from .simulate import ArtifactMismatch, audit, export_csv, plot_svg, rollout
from .synthesis import (certify_gain, grid_search, load_artifact, make_problem,
                        save_artifact, synthesize)

EXIT_OK = 0
EXIT_INFEASIBLE = 2
EXIT_INPUT = 3
EXIT_NUMERICAL = 4


def _fail(code, message):
    print(f"error: {message}", file=_sys.stderr)
    return code


def _parse_x0(text, n):
    vals = [float(tok) for tok in text.replace(",", " ").split()]
    if len(vals) != n:
        raise ValueError(f"x0 needs {n} components, got {len(vals)}")
    return np.array(vals)


def cmd_examples(args):
    os.makedirs(args.out, exist_ok=True)
    for name in ("pendulum", "human-robot"):
        path = os.path.join(args.out, f"{name}.json")
        save_system(benchmarks.by_name(name), path)
        print(f"wrote {path}")
    return EXIT_OK


def cmd_synth(args):
    sys_model = load_system(args.system)
    problem = make_problem(sys_model, rho1=args.rho1, rho3=args.rho3, eps=args.eps)
    if args.solver == "export-only":
        from .conic import ConicFeasibility  # noqa: F401  (problem built below)
        return cmd_export_sdpa(args)
    try:
        artifact = synthesize(problem, rounds=args.rounds)
    except Infeasible as exc:
        return _fail(EXIT_INFEASIBLE, f"infeasible: {exc}")
    except NumericalFailure as exc:
        return _fail(EXIT_NUMERICAL, f"numerical failure: {exc}")
    artifact.provenance = {
        "system_file": os.path.basename(args.system),
        "rho1": args.rho1, "rho3": args.rho3, "eps": args.eps,
        "seed": args.seed,
    }
    save_artifact(artifact, args.out)
    print(f"feasible: margin {artifact.margin:.3e}, rho2 {artifact.rho2:.6g}; "
          f"wrote {args.out}")
    return EXIT_OK


def cmd_simulate(args):
    sys_model = load_system(args.system)
    artifact = load_artifact(args.artifact)
    if args.x0 is not None:
        x0_list = [_parse_x0(args.x0, sys_model.n)]
    else:
        defaults = sys_model.meta.get("x0_defaults")
        if not defaults:
            raise ValueError("no --x0 given and the system file has no defaults")
        x0_list = [np.array(v, dtype=float) for v in defaults]
    os.makedirs(args.out, exist_ok=True)
    for idx, x0 in enumerate(x0_list):
        record = rollout(sys_model, artifact, x0, args.horizon, args.seed,
                         strategy=args.strategy)
        path = os.path.join(args.out, f"trajectory_{idx}.csv")
        with open(path, "w") as fh:
            fh.write(export_csv(record))
        print(f"wrote {path} (final ||x|| = {np.linalg.norm(record.x[-1]):.3e})")
        if args.svg:
            svg_path = os.path.join(args.out, f"trajectory_{idx}.svg")
            plot_svg(record, svg_path)
            print(f"wrote {svg_path}")
    return EXIT_OK


def cmd_verify(args):
    sys_model = load_system(args.system)
    artifact = load_artifact(args.artifact)
    report = audit(sys_model, artifact, n_samples=args.samples, seed=args.seed)
    print(report.summary())
    if args.out:
        payload = {
            "ok": report.ok,
            "samples": report.samples,
            "max_decrease_violation": report.max_decrease_violation,
            "max_lower_violation": report.max_lower_violation,
            "max_upper_violation": report.max_upper_violation,
            "max_input_violation": report.max_input_violation,
            "tol": report.tol,
            "witnesses": report.witnesses,
        }
        with open(args.out, "w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
        print(f"wrote {args.out}")
    return EXIT_OK if report.ok else EXIT_INFEASIBLE


def cmd_export_sdpa(args):
    sys_model = load_system(args.system)
    problem = make_problem(sys_model, rho1=args.rho1, rho3=args.rho3, eps=args.eps)
    from .synthesis import _certify_problem, init_gain
    K0 = init_gain(problem)
    cf = _certify_problem(problem, K0)
    text = export_sdpa(cf)
    with open(args.out, "w") as fh:
        fh.write(text)
    print(f"wrote {args.out} ({len(cf.blocks)} matrix blocks, "
          f"{cf.n_vars + 1} variables)")
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="dcpwa",
                                 description="robust PWA policy synthesis in DC form")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("examples", help="write the built-in system files")
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(func=cmd_examples)

    def common_synth(p):
        p.add_argument("system", help="system specification file (JSON)")
        p.add_argument("--rho1", type=float, default=1e-3)
        p.add_argument("--rho3", type=float, default=0.995)
        p.add_argument("--eps", type=float, default=1e-6)
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("synth", help="synthesize a certified controller")
    common_synth(p)
    p.add_argument("--out", default="artifact.json")
    p.add_argument("--rounds", type=int, default=6)
    p.add_argument("--solver", choices=("embedded", "export-only"),
                   default="embedded")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("simulate", help="closed-loop rollout to CSV")
    p.add_argument("system")
    p.add_argument("artifact")
    p.add_argument("--x0", default=None, help="comma-separated initial state")
    p.add_argument("--horizon", type=int, default=3000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--strategy", default="dirichlet-uniform",
                   choices=("dirichlet-uniform", "vertex-only"))
    p.add_argument("--out", default="runs")
    p.add_argument("--svg", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", help="Monte-Carlo audit of an artifact")
    p.add_argument("system")
    p.add_argument("artifact")
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="machine-readable report (JSON)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("export-sdpa", help="write the assembled problem as .dat-s")
    common_synth(p)
    p.add_argument("--out", default="problem.dat-s")
    p.set_defaults(func=cmd_export_sdpa)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ParseError, ArtifactMismatch) as exc:
        return _fail(EXIT_INPUT, str(exc))
    except (FileNotFoundError, ValueError, KeyError) as exc:
        return _fail(EXIT_INPUT, str(exc))
    except Infeasible as exc:
        return _fail(EXIT_INFEASIBLE, str(exc))
    except NumericalFailure as exc:
        return _fail(EXIT_NUMERICAL, str(exc))
    except DCPWAError as exc:
        return _fail(EXIT_INPUT, str(exc))


if __name__ == "__main__":
    raise SystemExit(main())
