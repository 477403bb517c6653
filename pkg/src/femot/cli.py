"""Command line entry point.

Errors are reported on stderr as one line ``femot-error code=<n> kind=<name> reason=<text>``.
Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .assembly import CompatibilityError
from .config import ConfigError, load_config
from .densities import DensityError
from .experiments import (
    output_dir,
    projection_checks,
    run_dual_order_comparison,
    run_refinement_study,
    run_solve,
)
from .mesh import MeshError, load_mesh, mesh_quality
from .saddle_solver import SingularOperatorError, SolveError
from .transport import NumericalFailure

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

CONFIG_ERRORS = (ConfigError, MeshError, DensityError, CompatibilityError, OSError, ValueError)
NUMERICAL_ERRORS = (NumericalFailure, SingularOperatorError, SolveError, FloatingPointError, np.linalg.LinAlgError)


def _fail(code: int, exc: BaseException) -> int:
    reason = " ".join(str(exc).split()) or type(exc).__name__
    print(f"femot-error code={code} kind={type(exc).__name__} reason={reason}", file=sys.stderr)
    return code


def cmd_solve(args) -> int:
    cfg = load_config(args.config)
    _, summary = run_solve(cfg)
    print(f"W={summary['wasserstein']:.10g} iterations={summary['iterations']} converged={summary['converged']} "
          f"output={output_dir(cfg)}")
    return EXIT_OK


def cmd_study(args) -> int:
    cfg = load_config(args.config)
    if args.compare_dual:
        curves = run_dual_order_comparison(cfg)
        for r, c in curves.items():
            print(f"r={r} iterations={len(c)} final_dsigma={c[-1]:.6e}")
        return EXIT_OK
    if not args.levels:
        raise ConfigError("--levels is required unless --compare-dual is given")
    rows = run_refinement_study(cfg, args.levels)
    print(f"{'level':>6} {'h':>12} {'tau':>10} {'W':>14} {'error':>12}")
    for r in rows:
        print(f"{r['level']:>6} {r['h']:>12.6g} {r['tau']:>10.6g} {r['wasserstein']:>14.8g} {r['error']:>12.4e}")
    return EXIT_OK


def cmd_mesh_info(args) -> int:
    mesh = load_mesh(args.path)
    print(f"kind={mesh.kind} vertices={mesh.n_vertices} cells={mesh.n_cells} facets={mesh.n_facets} "
          f"boundary_facets={int(np.count_nonzero(mesh.boundary_facets))}")
    print(f"area={mesh.areas.sum():.12g} h={mesh.h:.6g} min_area={mesh.areas.min():.6g} quality={mesh_quality(mesh):.6g}")
    return EXIT_OK


def cmd_project_test(args) -> int:
    cfg = load_config(args.config)
    checks = projection_checks(cfg, seed=args.seed)
    for name, ok, value in checks:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {value:.3e}")
    if all(ok for _, ok, _ in checks):
        return EXIT_OK
    return _fail(EXIT_NUMERICAL, RuntimeError("property checks failed"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="femot", description="Mixed finite element dynamic optimal transport.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="run one configuration")
    p.add_argument("config")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("study", help="mesh refinement study or dual-order comparison")
    p.add_argument("config")
    p.add_argument("--levels", type=int, nargs="+", help="cells per axis of each level, e.g. 8 16 32")
    p.add_argument("--compare-dual", action="store_true", help="run r=0 and r=1 and write paired residual curves")
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("mesh-info", help="summarise a mesh file")
    p.add_argument("path")
    p.set_defaults(func=cmd_mesh_info)

    p = sub.add_parser("project-test", help="run projection and property oracles on a configuration")
    p.add_argument("config")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_project_test)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * args.verbose
    logging.basicConfig(level=max(level, logging.DEBUG), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NUMERICAL_ERRORS as exc:
        return _fail(EXIT_NUMERICAL, exc)
    except CONFIG_ERRORS as exc:
        return _fail(EXIT_CONFIG, exc)


if __name__ == "__main__":
    sys.exit(main())
