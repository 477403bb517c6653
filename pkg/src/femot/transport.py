"""Primal-dual iteration for the discrete dynamic transport problem.

One iteration is

* Step 1: ``sigma <- P_C(sigma - tau1 * q)``, a constrained L2 projection
  (or the regularised prox) computed with the factorised saddle operator;
* Step 2: ``q <- P_K(q + tau2 * P_X(2 sigma_new - sigma))`` with ``P_X`` the
  map into the dual space and ``P_K`` applied to every dual dof.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .assembly import (
    apply_flux_bc,
    assemble_divergence,
    assemble_mass,
    build_saddle_operator,
    discrete_gradient,
    dual_coupling,
    dual_mass,
    dual_projection,
    time_variation,
)
from .fespace import DofMap, SpaceConfig
from .mesh import SpatialMesh, TimeGrid
from .saddle_solver import factorize, solve

log = logging.getLogger(__name__)

EPS_RHO = 1e-12
EPS_M = 1e-12


class NumericalFailure(RuntimeError):
    """Non-finite values appeared in the iteration."""

    def __init__(self, message: str, iteration: int):
        self.iteration = iteration
        super().__init__(f"iteration {iteration}: {message}")


class StepSizeWarning(UserWarning):
    pass


# ------------------------------------------------------------ K projection
def project_K_point(a, b):
    """Project ``(a, b)`` onto ``K = {a + |b|^2 / 2 <= 0}``.

    Vectorised: ``a`` has shape ``S`` and ``b`` shape ``S + (2,)``.  Points
    outside ``K`` go to ``(-mu^2/2, mu b/|b|)`` with ``mu`` the largest root of
    ``mu^3/2 + mu (a + 1) - |b|``.  The cubic is convex for ``mu > 0``, so
    Newton started right of the root decreases monotonically onto it.
    The start is ``min(mu_max, |b|)`` with ``mu_max = max(2, |b| + |a|)``:
    outside ``K`` the cubic is positive at ``|b|``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scalar = a.ndim == 0
    a2 = np.atleast_1d(a).copy()
    b2 = np.atleast_2d(b).reshape(a2.shape + (2,)).copy()
    nb = np.sqrt((b2**2).sum(-1))
    out = a2 + 0.5 * nb**2 > 0
    if np.any(out):
        aa, bb, nn = a2[out], b2[out], nb[out]
        mu = np.minimum(np.maximum(2.0, nn + np.abs(aa)), nn)
        active = np.flatnonzero(mu > 0)
        for _ in range(200):
            if active.size == 0:
                break
            m, ap1, n = mu[active], aa[active] + 1.0, nn[active]
            f = 0.5 * m**3 + m * ap1 - n
            fp = 1.5 * m**2 + ap1
            # fp > 0 right of the root; the clip only guards roundoff
            step = np.clip(f / np.maximum(fp, 1e-300), 0.0, m)
            mu[active] = m - step
            active = active[step > 4e-16 * m]
        unit = np.divide(bb, nn[:, None], out=np.zeros_like(bb), where=nn[:, None] > 0)
        bnew = mu[:, None] * unit
        b2[out] = bnew
        a2[out] = -0.5 * (bnew**2).sum(-1)
    if scalar:
        return float(a2[0]), b2[0]
    return a2.reshape(a.shape), b2.reshape(b.shape)


# ------------------------------------------------------------------ fields
@dataclass
class PrimalField:
    """``rho`` per time node and cell, ``m`` per interval and velocity dof."""

    rho: np.ndarray
    m: np.ndarray

    @classmethod
    def from_flat(cls, dofs: DofMap, sigma: np.ndarray) -> "PrimalField":
        rho, m = dofs.split(np.asarray(sigma, dtype=float))
        return cls(rho.copy(), m.copy())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.rho.ravel(), self.m.ravel()])


@dataclass
class DualField:
    """``a`` with shape ``(n_intervals, n_cells, n_local)``; ``b`` adds a trailing axis of 2."""

    a: np.ndarray
    b: np.ndarray

    @classmethod
    def zeros(cls, dofs: DofMap) -> "DualField":
        shape = (dofs.n_intervals, dofs.n_cells, dofs.dual.n_local)
        return cls(np.zeros(shape), np.zeros(shape + (2,)))

    @classmethod
    def from_flat(cls, dofs: DofMap, q: np.ndarray) -> "DualField":
        shape = (dofs.n_intervals, dofs.n_cells, dofs.dual.n_local)
        n = int(np.prod(shape))
        q = np.asarray(q, dtype=float)
        return cls(q[:n].reshape(shape).copy(), np.stack([q[n : 2 * n], q[2 * n :]], axis=-1).reshape(shape + (2,)))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.a.ravel(), self.b[..., 0].ravel(), self.b[..., 1].ravel()])

    def membership(self) -> float:
        """Largest value of ``a + |b|^2/2`` over all dofs."""
        return float((self.a + 0.5 * (self.b**2).sum(-1)).max())


# ----------------------------------------------------------------- problem
@dataclass
class TransportProblem:
    """A discretised transport problem with its boundary densities.

    ``rho0`` and ``rho1`` are cell coefficients (see
    :func:`femot.densities.project_density`).
    """

    mesh: SpatialMesh
    time: TimeGrid
    config: SpaceConfig
    rho0: np.ndarray
    rho1: np.ndarray
    regularization: str = "none"
    alpha: float = 0.0
    backend: str = "tensor"
    exact_dual_projection: bool = False

    def __post_init__(self):
        if self.regularization not in ("none", "l2", "h1"):
            raise ValueError(f"unknown regularization {self.regularization!r}")
        if self.regularization != "none" and not self.alpha > 0:
            raise ValueError("regularization needs alpha > 0")

    @cached_property
    def dofs(self) -> DofMap:
        return DofMap(self.mesh, self.time, self.config)


class _Operators:
    """Everything an iteration needs, built once per ``(problem, tau1)``."""

    def __init__(self, problem: TransportProblem, tau1: float):
        d = problem.dofs
        self.dofs = d
        op = build_saddle_operator(d, problem.regularization, problem.alpha, tau1)
        self.operator = apply_flux_bc(op, d, problem.rho0, problem.rho1)
        t0 = time.perf_counter()
        self.fac = factorize(self.operator, problem.backend)
        self.factor_time = time.perf_counter() - t0
        self.mass = assemble_mass(d)
        self.proj = dual_projection(d)
        self.mx = dual_mass(d)
        self.coupling = dual_coupling(d)
        self.exact = problem.exact_dual_projection and d.dual.order == 1
        self.tau1 = tau1

    def norm_m(self, x: np.ndarray) -> float:
        return float(np.sqrt(max(x @ (self.mass @ x), 0.0)))

    def norm_x(self, q: np.ndarray) -> float:
        return float(np.sqrt(max(q @ (self.mx @ q), 0.0)))


# ------------------------------------------------------------------- steps
def project_dual_space(dofs: DofMap, sigma: np.ndarray, *, proj: sp.spmatrix | None = None) -> DualField:
    """Dual-space representation of a primal field.

    ``a`` is the time-averaged density and ``b`` the momentum, either as
    cell means (``r=0``) or as values at the cell vertices (``r=1``).
    """
    proj = dual_projection(dofs) if proj is None else proj
    return DualField.from_flat(dofs, proj @ np.asarray(sigma, dtype=float))


def _exact_k_projection(dofs: DofMap, z: DualField, *, iters: int = 500, tol: float = 1e-13) -> DualField:
    """Per-cell L2 projection onto ``{q : q(x) in K on the whole cell}``.

    For nodal P1/Q1 fields this is the set with every vertex value in ``K``.
    Solved by ADMM with the splitting ``y = w``, ``w`` in ``K`` dof-wise.
    """
    mloc = dofs.dual.local_mass / dofs.mesh.areas[:, None, None]  # scale-free per cell
    nl = mloc.shape[1]
    lhs_inv = np.linalg.inv(mloc + np.eye(nl)[None])
    zv = np.concatenate([z.a[..., None], z.b], axis=-1)  # (nt, nc, nl, 3)
    mz = np.einsum("clk,tckj->tclj", mloc, zv)
    w = zv.copy()
    u = np.zeros_like(zv)
    for _ in range(iters):
        y = np.einsum("clk,tckj->tclj", lhs_inv, mz + w - u)
        wa, wb = project_K_point(y[..., 0] + u[..., 0], y[..., 1:] + u[..., 1:])
        w_new = np.concatenate([wa[..., None], wb], axis=-1)
        u = u + y - w_new
        change = np.abs(w_new - w).max()
        w = w_new
        if change < tol and np.abs(y - w).max() < tol:
            break
    return DualField(w[..., 0].copy(), w[..., 1:].copy())


def step1(ops: _Operators, sigma: np.ndarray, q: np.ndarray):
    """``P_C(sigma - tau1 q)`` (or the regularised prox); returns ``(sigma', phi, eta)``."""
    load = np.zeros(ops.operator.size)
    n = ops.dofs.n_sigma
    load[:n] = ops.mass @ sigma - ops.tau1 * (ops.coupling @ q)
    return solve(ops.fac, load)


def step2(ops: _Operators, q: np.ndarray, sigma_new: np.ndarray, sigma: np.ndarray, tau2: float) -> np.ndarray:
    """``P_K(q + tau2 P_X(2 sigma_new - sigma))`` applied dof-wise."""
    z = DualField.from_flat(ops.dofs, q + tau2 * (ops.proj @ (2.0 * sigma_new - sigma)))
    if ops.exact:
        return _exact_k_projection(ops.dofs, z).flat()
    a, b = project_K_point(z.a, z.b)
    return DualField(a, b).flat()


# ------------------------------------------------------------ diagnostics
def evaluate_action(dofs: DofMap, sigma: np.ndarray, *, eps_rho: float = EPS_RHO, eps_m: float = EPS_M) -> float:
    """Space-time kinetic energy of a primal field.

    Per interval and cell this is ``int_T |m_i|^2 / (2 rho_bar)`` with
    ``rho_bar`` the time-averaged cell density; the integral of ``|m_i|^2``
    uses the exact local mass matrix.  Cells with ``rho_bar <= eps_rho``
    contribute 0 when that integral is at most ``eps_m`` and make the action
    infinite otherwise.
    """
    rho, m = dofs.split(np.asarray(sigma, dtype=float))
    rbar = 0.5 * (rho[1:] + rho[:-1])  # (nt, nc)
    loc = m[:, dofs.velocity.cell_dofs]  # (nt, nc, nl)
    m2 = np.einsum("tcl,clk,tck->tc", loc, dofs.velocity.local_mass, loc)
    small = rbar <= eps_rho
    if np.any(small & (m2 > eps_m)):
        return float("inf")
    dens = np.divide(m2, 2.0 * rbar, out=np.zeros_like(m2), where=~small)
    return float(dofs.time.steps @ dens.sum(axis=1))


def wasserstein_estimate(action: float) -> float:
    """``sqrt(2 * action)``; infinite actions are rejected."""
    if not np.isfinite(action):
        raise ValueError("action is infinite: density vanishes where momentum does not")
    return float(np.sqrt(2.0 * max(action, 0.0)))


@dataclass
class RunReport:
    """Per-iteration diagnostics and final estimates of a run."""

    dsigma: list = field(default_factory=list)
    dq: list = field(default_factory=list)
    duality: list = field(default_factory=list)
    action: list = field(default_factory=list)
    min_rho: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    final_action: float = float("nan")
    wasserstein: float = float("nan")
    timings: dict = field(default_factory=dict)

    def as_dict(self, *, timings: bool = False) -> dict:
        out = asdict(self)
        if not timings:
            out.pop("timings")
        return out

    @property
    def gap(self) -> float:
        """Difference between the action and the duality value at the last iterate."""
        return self.final_action - self.duality[-1] if self.duality else float("nan")


@dataclass
class RunResult:
    sigma: PrimalField
    q: DualField
    report: RunReport
    phi: np.ndarray | None = None
    eta: np.ndarray | None = None


def pdhg_run(
    problem: TransportProblem,
    tau1: float = 1.0,
    tau2: float = 1.0,
    max_iters: int = 10_000,
    stop_tol: float = 1e-6,
    *,
    track_action: bool = True,
    init: str = "min_norm",
    callback=None,
) -> RunResult:
    """Run the primal-dual iteration.

    Starts from the minimal-norm admissible field (Step 1 of the zero field)
    and ``q = 0``.  Stops after ``max_iters`` iterations or once
    ``||sigma^{k+1} - sigma^k||`` drops to ``stop_tol`` (checked from the
    second iteration on, since the first one leaves the start unchanged).  ``callback(k, sigma)``
    is called after every iteration.

    ``init="interpolation"`` starts instead from the admissible field closest
    to the linear-in-time interpolation of the end densities with zero
    momentum; it is stationary when both densities coincide.
    """
    if not (tau1 > 0 and tau2 > 0):
        raise ValueError("step sizes must be positive")
    if tau1 * tau2 >= 1.0:
        warnings.warn(
            f"tau1*tau2 = {tau1 * tau2:g} >= 1: outside the proven convergence range (common in practice)",
            StepSizeWarning,
            stacklevel=2,
        )
    timings = {"setup": 0.0, "factor": 0.0, "step1": 0.0, "step2": 0.0, "diagnostics": 0.0}
    t0 = time.perf_counter()
    ops = _Operators(problem, tau1)
    timings["factor"] = ops.factor_time
    timings["setup"] = time.perf_counter() - t0 - ops.factor_time
    dofs = ops.dofs
    report = RunReport(timings=timings)

    q = np.zeros(ops.proj.shape[0])
    if init == "min_norm":
        start = np.zeros(dofs.n_sigma)
    elif init == "interpolation":
        t = problem.time.nodes[:, None]
        start = dofs.join((1.0 - t) * problem.rho0 + t * problem.rho1, np.zeros((dofs.n_intervals, dofs.velocity.n_dofs)))
    else:
        raise ValueError(f"unknown init {init!r}")
    sigma, phi, eta = step1(ops, start, q)
    for k in range(1, max_iters + 1):
        t = time.perf_counter()
        sigma_new, phi, eta = step1(ops, sigma, q)
        timings["step1"] += time.perf_counter() - t
        t = time.perf_counter()
        q_new = step2(ops, q, sigma_new, sigma, tau2)
        timings["step2"] += time.perf_counter() - t
        if not (np.all(np.isfinite(sigma_new)) and np.all(np.isfinite(q_new))):
            raise NumericalFailure("non-finite values in the iterates", k)
        t = time.perf_counter()
        ds = ops.norm_m(sigma_new - sigma)
        report.dsigma.append(ds)
        report.dq.append(ops.norm_x(q_new - q))
        sigma, q = sigma_new, q_new
        report.duality.append(float((ops.coupling @ q) @ sigma))
        rho = sigma[: dofs.n_rho]
        report.min_rho.append(float(rho.min()))
        if track_action:
            report.action.append(evaluate_action(dofs, sigma))
        timings["diagnostics"] += time.perf_counter() - t
        report.iterations = k
        if callback is not None:
            callback(k, sigma)
        # the first primal step re-projects the feasible start with q = 0
        if k > 1 and ds <= stop_tol:
            report.converged = True
            break
    report.final_action = evaluate_action(dofs, sigma)
    report.wasserstein = float(np.sqrt(2.0 * report.final_action)) if np.isfinite(report.final_action) else float("inf")
    log.info("pdhg: %d iterations, converged=%s, W=%.6g", report.iterations, report.converged, report.wasserstein)
    return RunResult(PrimalField.from_flat(dofs, sigma), DualField.from_flat(dofs, q), report, phi, eta)


def gradient_seminorm(dofs: DofMap, rho: np.ndarray) -> float:
    """``||grad_h rho||`` over space-time."""
    return float(np.sqrt(discrete_gradient(dofs, rho)[1]))


def time_seminorm(dofs: DofMap, rho: np.ndarray) -> float:
    """``<d_t rho, d_t rho>`` over space-time."""
    return time_variation(dofs, rho)


def continuity_residual(dofs: DofMap, sigma: np.ndarray) -> np.ndarray:
    """Per slab and cell ``|T|(rho_i - rho_{i-1}) + dt_i * fluxsum(m_i)``, shape ``(n_intervals, n_cells)``."""
    return (assemble_divergence(dofs) @ np.asarray(sigma, dtype=float)).reshape(dofs.n_intervals, dofs.n_cells)


def node_masses(dofs: DofMap, sigma: np.ndarray) -> np.ndarray:
    rho, _ = dofs.split(np.asarray(sigma, dtype=float))
    return rho @ dofs.mesh.areas
