"""Problem setup and experiment drivers behind the command line."""

from __future__ import annotations

import dataclasses
import logging
import os
import time
import warnings
from importlib import resources
from pathlib import Path

import numpy as np

from .config import PACKAGE_PREFIX, ConfigError, RunConfig, serialize_config
from .densities import project_density
from .export import export_vtk, write_convergence_csv, write_json, write_table_csv
from .fespace import SpaceConfig
from .mesh import SpatialMesh, TimeGrid, build_structured_quadrilateral, build_structured_triangular, load_mesh
from .transport import (
    RunResult,
    StepSizeWarning,
    TransportProblem,
    continuity_residual,
    gradient_seminorm,
    node_masses,
    pdhg_run,
    project_K_point,
    step1,
    time_seminorm,
    _Operators,
)

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "FEMOT_OUTPUT_ROOT"


def mesh_path(name: str):
    """Filesystem path of a mesh file; ``package:<file>`` names refer to shipped fixtures."""
    if name.startswith(PACKAGE_PREFIX):
        return resources.files("femot") / "data" / name[len(PACKAGE_PREFIX) :]
    return Path(name)


def build_mesh(cfg: RunConfig) -> SpatialMesh:
    if cfg.mesh_kind == "file":
        mesh = load_mesh(mesh_path(cfg.mesh_file))
        if (mesh.kind == "quad") != (cfg.family == "RTq0"):
            raise ConfigError(f"{cfg.family} cannot be used on a {mesh.kind} mesh")
        return mesh
    if cfg.mesh_kind == "tri":
        return build_structured_triangular(cfg.mesh_n, cfg.mesh_n, cfg.mesh_pattern)
    return build_structured_quadrilateral(cfg.mesh_n, cfg.mesh_n)


def build_problem(cfg: RunConfig) -> TransportProblem:
    cfg.validate()
    mesh = build_mesh(cfg)
    rho0 = project_density(mesh, cfg.rho0)
    rho1 = project_density(mesh, cfg.rho1)
    return TransportProblem(
        mesh,
        TimeGrid.uniform(cfg.intervals),
        SpaceConfig(cfg.family, cfg.dual_order),
        rho0,
        rho1,
        regularization=cfg.reg_kind,
        alpha=cfg.reg_alpha,
        backend=cfg.backend,
        exact_dual_projection=cfg.exact_dual,
    )


def output_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def snapshot_nodes(n_nodes: int, every: int) -> list[int]:
    """Time nodes to export: the stride ``every`` plus both ends and the midpoint."""
    last = n_nodes - 1
    nodes = set(range(0, n_nodes, every)) if every > 0 else set()
    nodes |= {0, last, last // 2 if last % 2 == 0 else (last + 1) // 2}
    return sorted(nodes)


def run_summary(problem: TransportProblem, result: RunResult) -> dict:
    dofs = problem.dofs
    sigma = result.sigma.flat()
    rep = result.report
    rho = result.sigma.rho
    return {
        "wasserstein": rep.wasserstein,
        "action": rep.final_action,
        "duality": rep.duality[-1] if rep.duality else float("nan"),
        "gap": rep.gap,
        "iterations": rep.iterations,
        "converged": rep.converged,
        "final_dsigma": rep.dsigma[-1] if rep.dsigma else float("nan"),
        "min_rho": float(rho.min()),
        "min_rho_midpoint": float(rho[(rho.shape[0] - 1) // 2].min()),
        "max_continuity_residual": float(np.abs(continuity_residual(dofs, sigma)).max()),
        "max_mass_error": float(np.abs(node_masses(dofs, sigma) - 1.0).max()),
        "grad_seminorm": gradient_seminorm(dofs, rho),
        "time_seminorm": float(np.sqrt(max(time_seminorm(dofs, rho), 0.0))),
        "n_cells": problem.mesh.n_cells,
        "n_intervals": dofs.n_intervals,
        "h": problem.mesh.h,
    }


def run_solve(cfg: RunConfig, *, write: bool = True) -> tuple[RunResult, dict]:
    """Run one configuration and write its artifacts.

    Artifacts: ``convergence.csv``, ``summary.json``, ``config.txt``,
    ``density_node<k>.vtk`` per exported node and ``timings.json``.  All
    but the last are byte-identical across repeated runs.
    """
    t0 = time.perf_counter()
    problem = build_problem(cfg)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StepSizeWarning)
        if cfg.tau1 * cfg.tau2 >= 1:
            log.warning("tau1*tau2 >= 1: outside the proven convergence range")
        result = pdhg_run(problem, cfg.tau1, cfg.tau2, cfg.max_iters, cfg.stop_tol, init=cfg.init)
    summary = run_summary(problem, result)
    if cfg.reference is not None:
        summary["reference"] = cfg.reference
        summary["error"] = abs(summary["wasserstein"] - cfg.reference)
    if write:
        out = output_dir(cfg)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(serialize_config(cfg))
        write_convergence_csv(result.report, out / "convergence.csv")
        write_json(summary, out / "summary.json")
        nodes = problem.time.nodes
        for k in snapshot_nodes(len(nodes), cfg.output_every):
            export_vtk(problem.mesh, result.sigma.rho[k], out / f"density_node{k:03d}.vtk", title=f"density t={nodes[k]:.6g}")
        timings = dict(result.report.timings, total=time.perf_counter() - t0)
        write_json(timings, out / "timings.json")
    return result, summary


def run_refinement_study(base: RunConfig, levels, *, write: bool = True) -> list[dict]:
    """Solve ``base`` on ``n x n`` meshes for each level ``n``.

    The number of time intervals scales with the level.  Errors are taken
    against ``base.reference`` when set and against the finest level
    otherwise.  Rows are ordered from the coarsest to the finest mesh.
    """
    if base.mesh_kind == "file":
        raise ConfigError("refinement studies need a generated mesh")
    levels = sorted({int(n) for n in levels})
    if not levels or levels[0] < 1:
        raise ConfigError("levels must be positive integers")
    rows = []
    root = output_dir(base)
    for n in levels:
        intervals = max(1, round(base.intervals * n / base.mesh_n))
        cfg = dataclasses.replace(base, mesh_n=n, intervals=intervals, output_dir=str(Path(base.output_dir) / f"level{n:03d}"))
        _, summary = run_solve(cfg, write=write)
        rows.append({"level": n, "h": summary["h"], "tau": 1.0 / intervals, "wasserstein": summary["wasserstein"],
                     "iterations": summary["iterations"]})
    ref = base.reference if base.reference is not None else rows[-1]["wasserstein"]
    for r in rows:
        r["error"] = abs(r["wasserstein"] - ref)
    rows.sort(key=lambda r: -r["h"])
    if write:
        root.mkdir(parents=True, exist_ok=True)
        write_table_csv(rows, root / "study.csv")
    return rows


def run_dual_order_comparison(base: RunConfig, *, write: bool = True) -> dict[int, list[float]]:
    """Residual curves ``||sigma^{k+1} - sigma^k||`` for ``r = 0`` and ``r = 1``."""
    curves = {}
    root = output_dir(base)
    for r in (0, 1):
        cfg = dataclasses.replace(base, dual_order=r, output_dir=str(Path(base.output_dir) / f"dual{r}"))
        result, _ = run_solve(cfg, write=write)
        curves[r] = list(result.report.dsigma)
    if write:
        n = max(len(c) for c in curves.values())
        pad = {r: c + [float("nan")] * (n - len(c)) for r, c in curves.items()}
        rows = [{"iter": k + 1, "dsigma_r0": pad[0][k], "dsigma_r1": pad[1][k]} for k in range(n)]
        write_table_csv(rows, root / "dual_order.csv")
    return curves


# ----------------------------------------------------------- property checks
def projection_checks(cfg: RunConfig, *, n_points: int = 10_000, n_fields: int = 5, seed: int = 0) -> list[tuple[str, bool, float]]:
    """Oracle checks on the configured problem: ``(name, passed, value)`` per check."""
    rng = np.random.default_rng(seed)
    checks = []
    a = rng.uniform(-5, 5, n_points)
    b = rng.uniform(-5, 5, (n_points, 2))
    pa, pb = project_K_point(a, b)
    memb = float((pa + 0.5 * (pb**2).sum(-1)).max())
    checks.append(("K membership", memb <= 1e-12, memb))
    qa, qb = project_K_point(pa, pb)
    idem = float(max(np.abs(qa - pa).max(), np.abs(qb - pb).max()))
    checks.append(("K idempotence", idem <= 1e-13, idem))
    a2 = a + rng.normal(scale=0.1, size=n_points)
    b2 = b + rng.normal(scale=0.1, size=(n_points, 2))
    ra, rb = project_K_point(a2, b2)
    d_out = np.sqrt((pa - ra) ** 2 + ((pb - rb) ** 2).sum(-1))
    d_in = np.sqrt((a - a2) ** 2 + ((b - b2) ** 2).sum(-1))
    ratio = float((d_out / d_in).max())
    checks.append(("K non-expansive", ratio <= 1 + 1e-12, ratio))

    problem = build_problem(cfg)
    ops = _Operators(problem, cfg.tau1)
    dofs = problem.dofs
    zero_q = np.zeros(ops.proj.shape[0])
    xi = rng.standard_normal(dofs.n_sigma)
    p1, _, _ = step1(ops, xi, zero_q)
    p2, _, _ = step1(ops, p1, zero_q)
    res = float(np.abs(continuity_residual(dofs, p1)).max())
    checks.append(("continuity residual", res <= 1e-10, res))
    mass = float(np.abs(node_masses(dofs, p1) - 1.0).max())
    checks.append(("node masses", mass <= 1e-10, mass))
    if cfg.reg_kind == "none":
        scale = max(ops.norm_m(p1), 1e-300)
        idem = ops.norm_m(p2 - p1) / scale
        checks.append(("projection idempotence", idem <= 1e-9, idem))
        worst = 0.0
        hom = dataclasses.replace(problem, rho0=np.zeros_like(problem.rho0), rho1=np.zeros_like(problem.rho1))
        hom_ops = _Operators(hom, cfg.tau1)
        for _ in range(n_fields):
            v, _, _ = step1(hom_ops, rng.standard_normal(dofs.n_sigma), zero_q)
            inner = abs((xi - p1) @ (ops.mass @ v))
            worst = max(worst, inner / max(ops.norm_m(xi - p1) * ops.norm_m(v), 1e-300))
        checks.append(("projection orthogonality", worst <= 1e-9, worst))
    return checks
