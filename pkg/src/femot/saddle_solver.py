"""Factor-once, solve-many backend for the constrained saddle operator."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import (
    SaddleOperator,
    boundary_constraints,
    cell_divergence,
    interior_velocity_dofs,
    time_difference,
    time_mass_p1,
    time_stiffness_p1,
    velocity_mass,
)

log = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-10
# relative pivot size below which the matrix is treated as singular
PIVOT_TOL = 1e-13


class SingularOperatorError(RuntimeError):
    def __init__(self, message: str, pivot: float | None = None):
        self.pivot = pivot
        super().__init__(message)


class SolveError(RuntimeError):
    pass


@dataclass
class Factorization:
    """Reusable factorization of ``operator.reduced()``.

    ``inertia`` is the expected ``(n_positive, n_negative)`` split implied by
    the block structure; SuperLU does not expose a computed inertia.
    """

    operator: SaddleOperator
    matrix: sp.csc_matrix
    backend: str
    lu: object = None
    precond: object = None
    permutation: np.ndarray | None = None
    fill: int = 0
    factor_time: float = 0.0
    inertia: tuple[int, int] = (0, 0)
    stats: dict = field(default_factory=lambda: {"solves": 0, "refinements": 0})

    def _apply(self, b: np.ndarray) -> np.ndarray:
        if self.backend == "direct":
            return self.lu.solve(b)
        if self.backend == "tensor":
            return self.lu.solve(b)
        x, info = spla.gmres(
            self.matrix, b, M=self.precond, rtol=1e-13, atol=0.0, restart=200, maxiter=50
        )
        if info != 0:
            raise SolveError(f"gmres did not converge (info={info})")
        return x


def factorize(operator: SaddleOperator, backend: str = "direct") -> Factorization:
    """Factor the constrained operator; raises :class:`SingularOperatorError`.

    ``backend`` is ``"direct"`` (monolithic sparse LU), ``"tensor"``
    (:class:`TensorSolver`, exact and much cheaper on space-time problems) or
    ``"iterative"`` (ILU-preconditioned GMRES).
    """
    mat = operator.reduced()
    n = mat.shape[0]
    n_eta = operator.n_eta
    n_primal = n - operator.n_phi - n_eta - int(operator.augmented)
    n_neg = operator.n_phi + int(operator.augmented) + n_eta
    t0 = time.perf_counter()
    fac = Factorization(operator, mat, backend, inertia=(n_primal, n_neg))
    if backend == "direct":
        try:
            lu = spla.splu(mat, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.1, options={"SymmetricMode": True})
        except RuntimeError as exc:
            raise SingularOperatorError(f"factorization failed: {exc}", 0.0) from None
        udiag = np.abs(lu.U.diagonal())
        scale = max(udiag.max(), 1e-300)
        k = int(np.argmin(udiag))
        if udiag[k] <= PIVOT_TOL * scale:
            raise SingularOperatorError(
                f"numerically singular: smallest pivot {udiag[k]:.3e} at position {k} (max {scale:.3e})",
                float(udiag[k]),
            )
        fac.lu = lu
        fac.permutation = lu.perm_c.copy()
        fac.fill = int(lu.L.nnz + lu.U.nnz)
    elif backend == "tensor":
        fac.lu = TensorSolver(operator)
        fac.fill = fac.lu.fill
    elif backend == "iterative":
        ilu = spla.spilu(mat, drop_tol=1e-6, fill_factor=20, permc_spec="MMD_AT_PLUS_A")
        fac.precond = spla.LinearOperator(mat.shape, ilu.solve)
        fac.permutation = ilu.perm_c.copy()
        fac.fill = int(ilu.L.nnz + ilu.U.nnz)
    else:
        raise ValueError(f"unknown backend {backend!r}")
    fac.factor_time = time.perf_counter() - t0
    log.debug("factorized n=%d nnz=%d fill=%d in %.3fs", n, mat.nnz, fac.fill, fac.factor_time)
    return fac


def solve(fac: Factorization, load: np.ndarray, *, check: bool = True):
    """Solve with a full-length load vector.

    Returns ``(sigma, phi, eta)`` where constrained dofs carry their fixed
    values and ``eta`` is ``None`` without H1 regularisation.
    """
    op = fac.operator
    b = op.reduced_rhs(np.asarray(load, dtype=float))
    x = fac._apply(b)
    if check:
        bnorm = np.linalg.norm(b)
        res = np.linalg.norm(fac.matrix @ x - b)
        if res > RESIDUAL_TOL * bnorm:
            fac.stats["refinements"] += 1
            x = x + fac._apply(b - fac.matrix @ x)
            res = np.linalg.norm(fac.matrix @ x - b)
            if res > RESIDUAL_TOL * bnorm:
                raise SolveError(f"relative residual {res / bnorm:.3e} exceeds {RESIDUAL_TOL:.0e}")
    fac.stats["solves"] += 1
    full = op.expand(x)
    sigma = full[: op.n_sigma]
    eta = full[op.n_sigma : op.n_sigma + op.n_eta] if op.n_eta else None
    return sigma, full[op.phi_slice], eta


def _check_pivots(lu, what: str):
    udiag = np.abs(lu.U.diagonal())
    if udiag.size == 0:
        return
    scale = max(udiag.max(), 1e-300)
    k = int(np.argmin(udiag))
    if udiag[k] <= PIVOT_TOL * scale:
        raise SingularOperatorError(
            f"numerically singular {what}: smallest pivot {udiag[k]:.3e} at position {k} (max {scale:.3e})",
            float(udiag[k]),
        )


def _splu(mat, what: str):
    try:
        lu = spla.splu(sp.csc_matrix(mat), permc_spec="MMD_AT_PLUS_A")
    except RuntimeError as exc:
        raise SingularOperatorError(f"factorization of {what} failed: {exc}", 0.0) from None
    _check_pivots(lu, what)
    return lu


class TensorSolver:
    """Exact solver exploiting the Kronecker structure of the space-time operator.

    Densities (and ``eta``) live on time nodes and are eliminated first: their
    block is a 1-D time matrix times a spatial one.  What is left couples
    ``m`` and ``phi`` per interval through ``[[dt M_V, dt D^T], [dt D, -S_t x S_x]]``.
    The generalized eigenvectors ``W`` of ``S_t w = lam diag(dt) w`` decouple
    it into one sparse spatial system per time mode; the ``lam = 0`` mode
    (constants in time) carries the mean constraint on ``phi``.

    Only operators built by :func:`build_saddle_operator` with the standard
    boundary elimination of :func:`apply_flux_bc` are supported.
    """

    def __init__(self, operator: SaddleOperator):
        dofs = operator.dofs
        if dofs is None:
            raise ValueError("tensor backend needs an operator that carries its DofMap")
        if not operator.augmented:
            raise SingularOperatorError("operator is not augmented: constant multipliers form a nullspace", 0.0)
        idx, _ = boundary_constraints(dofs, np.zeros(dofs.n_cells), np.zeros(dofs.n_cells))
        if not np.array_equal(np.sort(operator.fixed_index), np.sort(idx)):
            raise ValueError("tensor backend requires the flux boundary elimination")
        self.reg = operator.regularization
        self.s = operator.alpha * operator.tau1
        self.nt = nt = dofs.n_intervals
        self.ni = nt - 1
        self.nc = dofs.n_cells
        self.area = dofs.mesh.areas
        self.dt = dt = dofs.time.steps
        inner = interior_velocity_dofs(dofs)
        self.nv = len(inner)
        mv = velocity_mass(dofs.velocity)[inner][:, inner].tocsc()
        d = cell_divergence(dofs.velocity)[:, inner].tocsr()
        self.d = d
        self.dT = d.T.tocsr()
        lam_inv = sp.diags(1.0 / self.area)
        k = (self.dT @ lam_inv @ d).tocsc()
        fill = 0

        mt = time_mass_p1(dofs.time).toarray()
        self.gi = time_difference(dofs.time).toarray()[:, 1:-1]
        if self.reg == "h1":
            at = mt[1:-1, 1:-1]
            self.mt_inv = np.linalg.inv(mt)
            self.mv_lu = _splu(mv, "velocity mass")
            # (area + s L)^{-1} with L = D M_V^{-1} D^T, kept sparse via an auxiliary unknown
            ext = sp.bmat([[sp.diags(self.area), self.s * d], [self.dT, -mv]])
            self.ext_lu = _splu(ext, "gradient block")
            fill += self.mv_lu.L.nnz + self.mv_lu.U.nnz + self.ext_lu.L.nnz + self.ext_lu.U.nnz
        else:
            at = mt[1:-1, 1:-1]
            if self.reg == "l2":
                at = at + self.s * time_stiffness_p1(dofs.time).toarray()[1:-1, 1:-1]
        self.at_inv = np.linalg.inv(at) if self.ni else np.zeros((0, 0))

        st = self.gi @ self.at_inv @ self.gi.T
        lam, w = sla.eigh(st, np.diag(dt))
        # the time-constant mode is known exactly
        j0 = int(np.argmin(np.abs(lam)))
        order = [j0] + [j for j in range(nt) if j != j0]
        lam, w = lam[order], w[:, order]
        lam[0] = 0.0
        w[:, 0] = 1.0 / np.sqrt(dt.sum())
        if nt > 1 and lam[1:].min() <= 1e-12 * max(lam.max(), 1.0):
            raise SingularOperatorError("time coupling has a second null mode", float(lam[1:].min()))
        self.lam, self.w = lam, w
        self.wt = w.T.copy()
        self.c0 = float(dt @ w[:, 0])

        zero = sp.bmat(
            [
                [mv, self.dT, None],
                [d, None, sp.csr_matrix(self.c0 * self.area[:, None])],
                [None, sp.csr_matrix(self.c0 * self.area[None, :]), None],
            ]
        )
        self.mode_lu = [_splu(zero, "time-constant mode")]
        for lk in lam[1:]:
            if self.reg == "h1":
                a = mv + k / lk
                mat = sp.bmat([[a, (self.s / lk) * k], [(self.s / lk) * k, -(self.s / lk) * mv]])
            else:
                mat = mv + k / lk
            self.mode_lu.append(_splu(mat, "time mode"))
        fill += sum(lu.L.nnz + lu.U.nnz for lu in self.mode_lu)
        self.fill = int(fill)
        self.n_eta = operator.n_eta

    # ------------------------------------------------------------------
    def _node_solve(self, f_r, f_e):
        """Solve the density (and gradient) block for given right-hand sides."""
        if self.reg != "h1":
            return (self.at_inv @ f_r) / self.area, None
        s = self.s
        w = self.mv_lu.solve(np.ascontiguousarray(f_e.T))  # (nv, nt+1)
        rhs = f_r - (self.d @ w[:, 1:-1]).T
        y = self.at_inv @ rhs
        ext = self.ext_lu.solve(np.vstack([y.T, np.zeros((self.nv, self.ni))]))
        rho = ext[: self.nc].T
        eta = -(self.mt_inv @ w.T) / s
        if self.ni:
            eta[1:-1] -= self.mv_lu.solve(np.ascontiguousarray((self.dT @ rho.T))).T
        return rho, eta

    def solve(self, b: np.ndarray) -> np.ndarray:
        nt, ni, nc, nv = self.nt, self.ni, self.nc, self.nv
        pos = 0

        def take(n, shape):
            nonlocal pos
            out = b[pos : pos + n].reshape(shape)
            pos += n
            return out

        f_r = take(ni * nc, (ni, nc))
        f_m = take(nt * nv, (nt, nv))
        f_e = take(self.n_eta, (nt + 1, nv)) if self.n_eta else None
        g = take(nt * nc, (nt, nc))
        g_l = float(b[pos])

        rho0, _ = self._node_solve(f_r, f_e)
        g = g - self.gi @ (rho0 * self.area)
        r1 = self.wt @ f_m
        r2 = self.wt @ g
        mh = np.empty((nt, nv))
        ph = np.empty((nt, nc))
        x0 = self.mode_lu[0].solve(np.concatenate([r1[0], r2[0], [g_l]]))
        mh[0], ph[0] = x0[:nv], x0[nv : nv + nc]
        lam_mult = x0[-1]
        for k in range(1, nt):
            lk = self.lam[k]
            q = self.dT @ (r2[k] / self.area)
            if self.reg == "h1":
                z = self.mode_lu[k].solve(np.concatenate([r1[k] + q / lk, (self.s / lk) * q]))
                mh[k] = z[:nv]
                u = (self.d @ mh[k] - r2[k]) / self.area
                ph[k] = (u + self.s * (self.d @ z[nv:]) / self.area) / lk
            else:
                mh[k] = self.mode_lu[k].solve(r1[k] + q / lk)
                ph[k] = (self.d @ mh[k] - r2[k]) / (lk * self.area)
        m = self.w @ mh
        phi = self.w @ ph
        rho, eta = self._node_solve(f_r - self.gi.T @ (phi * self.area), f_e)
        parts = [rho.ravel(), m.ravel()]
        if eta is not None:
            parts.append(eta.ravel())
        parts += [phi.ravel(), [lam_mult]]
        return np.concatenate(parts)
