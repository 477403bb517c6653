"""Global sparse operators of the space-time mixed problem.

Everything is assembled from small spatial matrices combined with 1-D time
matrices by Kronecker products:

* ``rho`` is continuous P1 in time, ``m`` and ``phi`` are P0 per interval;
* ``Q_h`` mass is ``diag(|T|)``, ``V_h`` mass is the facet-basis mass matrix;
* the space-time divergence row of slab ``i`` and cell ``T`` reads
  ``|T| (rho_i - rho_{i-1}) + dt_i * sum_j m_ij * int_T div phi_j``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .fespace import DofMap, VelocitySpace
from .mesh import TimeGrid


class CompatibilityError(ValueError):
    """Boundary densities with different masses: the constraint set is empty."""


# ------------------------------------------------------------ 1-D time blocks
def time_mass_p1(time: TimeGrid) -> sp.csr_matrix:
    dt = time.steps
    n = time.n_nodes
    diag = np.zeros(n)
    diag[:-1] += dt / 3.0
    diag[1:] += dt / 3.0
    return sp.diags([dt / 6.0, diag, dt / 6.0], [-1, 0, 1], format="csr")


def time_stiffness_p1(time: TimeGrid) -> sp.csr_matrix:
    inv = 1.0 / time.steps
    n = time.n_nodes
    diag = np.zeros(n)
    diag[:-1] += inv
    diag[1:] += inv
    return sp.diags([-inv, diag, -inv], [-1, 0, 1], format="csr")


def time_difference(time: TimeGrid) -> sp.csr_matrix:
    """``(n_intervals, n_nodes)`` matrix with rows ``e_i - e_{i-1}``."""
    n = time.n_intervals
    return sp.diags([-np.ones(n), np.ones(n)], [0, 1], shape=(n, n + 1), format="csr")


def time_average(time: TimeGrid) -> sp.csr_matrix:
    """``(n_intervals, n_nodes)`` matrix with rows ``(e_i + e_{i-1}) / 2``."""
    n = time.n_intervals
    return sp.diags([0.5 * np.ones(n), 0.5 * np.ones(n)], [0, 1], shape=(n, n + 1), format="csr")


# --------------------------------------------------------- spatial matrices
def _scatter(rows, cols, vals, shape) -> sp.csr_matrix:
    # COO -> CSR sums duplicates in a fixed order, so assembly is reproducible
    return sp.coo_matrix((np.ravel(vals), (np.ravel(rows), np.ravel(cols))), shape=shape).tocsr()


def velocity_mass(space: VelocitySpace) -> sp.csr_matrix:
    d = space.cell_dofs
    rows = np.repeat(d[:, :, None], d.shape[1], axis=2)
    cols = np.repeat(d[:, None, :], d.shape[1], axis=1)
    return _scatter(rows, cols, space.local_mass, (space.n_dofs, space.n_dofs))


def cell_divergence(space: VelocitySpace) -> sp.csr_matrix:
    """``(n_cells, n_V)`` matrix of ``int_T div phi_j``."""
    nc = space.mesh.n_cells
    rows = np.repeat(np.arange(nc)[:, None], space.n_local, axis=1)
    mat = _scatter(rows, space.cell_dofs, space.cell_divergence, (nc, space.n_dofs))
    # the flux moments make these exact small integers; strip quadrature noise
    mat.data = np.round(mat.data)
    mat.eliminate_zeros()
    return mat


# ------------------------------------------------------------ global blocks
def assemble_mass(dofs: DofMap) -> sp.csr_matrix:
    """L2 mass matrix of the space-time primal space."""
    areas = sp.diags(dofs.mesh.areas)
    m_rho = sp.kron(time_mass_p1(dofs.time), areas)
    m_m = sp.kron(sp.diags(dofs.time.steps), velocity_mass(dofs.velocity))
    return sp.block_diag([m_rho, m_m], format="csr")


def assemble_divergence(dofs: DofMap) -> sp.csr_matrix:
    """Space-time divergence tested against slab-cell indicators."""
    areas = sp.diags(dofs.mesh.areas)
    b_rho = sp.kron(time_difference(dofs.time), areas)
    b_m = sp.kron(sp.diags(dofs.time.steps), cell_divergence(dofs.velocity))
    return sp.hstack([b_rho, b_m], format="csr")


def assemble_l2_reg(alpha: float, tau1: float, dofs: DofMap) -> sp.csr_matrix:
    """``alpha * tau1 * <d_t rho, d_t v>`` on the density dofs."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return (alpha * tau1) * sp.kron(time_stiffness_p1(dofs.time), sp.diags(dofs.mesh.areas), format="csr")


def interior_velocity_dofs(dofs: DofMap) -> np.ndarray:
    mask = np.ones(dofs.velocity.n_dofs, dtype=bool)
    mask[dofs.velocity.boundary_dofs] = False
    return np.flatnonzero(mask)


def assemble_h1_reg(alpha: float, tau1: float, dofs: DofMap) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Coupling ``G`` and mass ``M_W`` of the auxiliary gradient field.

    ``eta`` lives in P1(time) x V_h with zero flux on the lateral boundary.
    ``G[w, rho] = <rho, div_x w>`` and ``M_W[w, w'] = <w, w'>``, so the
    discrete gradient is ``eta = -M_W^{-1} G rho`` and
    ``|grad_h rho|^2 = rho^T G^T M_W^{-1} G rho``.  ``alpha`` and ``tau1``
    only scale the blocks when inserted into the saddle operator.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    inner = interior_velocity_dofs(dofs)
    mt = time_mass_p1(dofs.time)
    d = cell_divergence(dofs.velocity)[:, inner]
    g = sp.kron(mt, d.T, format="csr")
    mv = velocity_mass(dofs.velocity)[inner][:, inner]
    mw = sp.kron(mt, mv, format="csr")
    return g, mw


def discrete_gradient(dofs: DofMap, rho: np.ndarray) -> tuple[np.ndarray, float]:
    """``eta = grad_h rho`` and ``||grad_h rho||^2`` for a flat density vector."""
    import scipy.sparse.linalg as spla

    g, mw = assemble_h1_reg(1.0, 1.0, dofs)
    rhs = -(g @ np.ravel(rho))
    eta = spla.spsolve(mw.tocsc(), rhs)
    return eta, float(eta @ (mw @ eta))


def time_variation(dofs: DofMap, rho: np.ndarray) -> float:
    """``<d_t rho, d_t rho>`` over the space-time domain."""
    r = np.ravel(rho)
    return float(r @ (sp.kron(time_stiffness_p1(dofs.time), sp.diags(dofs.mesh.areas)) @ r))


# ---------------------------------------------------------- saddle operator
@dataclass(frozen=True)
class SaddleOperator:
    """Symmetric block system over ``[sigma, eta, phi, lam]``.

    ``lam`` is the single multiplier pinning the volume-weighted mean of
    ``phi`` to zero.  ``eta`` is empty unless H1 regularisation is used.
    Constrained primal dofs are eliminated symmetrically on request via
    :meth:`reduced`; their values are held in ``fixed_values``.
    """

    matrix: sp.csr_matrix
    n_sigma: int
    n_eta: int
    n_phi: int
    augmented: bool = True
    fixed_index: np.ndarray = dataclasses.field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    fixed_values: np.ndarray = dataclasses.field(default_factory=lambda: np.zeros(0))
    regularization: str = "none"
    alpha: float = 0.0
    tau1: float = 1.0
    dofs: DofMap | None = dataclasses.field(default=None, repr=False, compare=False)

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    @property
    def phi_slice(self) -> slice:
        start = self.n_sigma + self.n_eta
        return slice(start, start + self.n_phi)

    @property
    def free_index(self) -> np.ndarray:
        mask = np.ones(self.size, dtype=bool)
        mask[self.fixed_index] = False
        return np.flatnonzero(mask)

    def reduced(self) -> sp.csc_matrix:
        free = self.free_index
        return self.matrix[free][:, free].tocsc()

    def reduced_rhs(self, load: np.ndarray) -> np.ndarray:
        """Right-hand side on free dofs with the fixed-value correction."""
        if load.shape != (self.size,):
            raise ValueError(f"load has shape {load.shape}, expected ({self.size},)")
        x_fixed = np.zeros(self.size)
        x_fixed[self.fixed_index] = self.fixed_values
        corr = self.matrix @ x_fixed
        return (load - corr)[self.free_index]

    def expand(self, x_free: np.ndarray) -> np.ndarray:
        x = np.zeros(self.size)
        x[self.free_index] = x_free
        x[self.fixed_index] = self.fixed_values
        return x


def build_saddle_operator(
    dofs: DofMap,
    regularization: str = "none",
    alpha: float = 0.0,
    tau1: float = 1.0,
    *,
    augmented: bool = True,
) -> SaddleOperator:
    """Assemble ``[[M + R, B^T], [B, 0]]`` plus the mean constraint on ``phi``.

    With ``regularization="h1"`` the auxiliary field enters as a third block
    row scaled by ``-alpha * tau1`` so the system stays symmetric.
    """
    mass = assemble_mass(dofs)
    div = assemble_divergence(dofs)
    n_sigma, n_phi = dofs.n_sigma, dofs.n_phi
    if regularization == "l2":
        reg = assemble_l2_reg(alpha, tau1, dofs)
        mass = mass + sp.block_diag([reg, sp.csr_matrix((dofs.n_m, dofs.n_m))])
    vol = np.kron(dofs.time.steps, dofs.mesh.areas)[:, None]
    if regularization == "h1":
        g, mw = assemble_h1_reg(alpha, tau1, dofs)
        s = alpha * tau1
        n_eta = mw.shape[0]
        g_sigma = sp.hstack([g, sp.csr_matrix((n_eta, dofs.n_m))])
        blocks = [
            [mass, -s * g_sigma.T, div.T],
            [-s * g_sigma, -s * mw, None],
            [div, None, None],
        ]
    elif regularization in ("none", "l2"):
        n_eta = 0
        blocks = [[mass, div.T], [div, None]]
    else:
        raise ValueError(f"unknown regularization {regularization!r}")
    mat = sp.bmat(blocks, format="csr")
    if augmented:
        col = sp.vstack([sp.csr_matrix((n_sigma + n_eta, 1)), sp.csr_matrix(vol)])
        mat = sp.bmat([[mat, col], [col.T, None]], format="csr")
    mat.sum_duplicates()
    mat.sort_indices()
    return SaddleOperator(
        mat, n_sigma, n_eta, n_phi, augmented, regularization=regularization, alpha=alpha, tau1=tau1, dofs=dofs
    )


def boundary_constraints(dofs: DofMap, rho0: np.ndarray, rho1: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Indices and values of the primal dofs fixed by the flux conditions."""
    last = dofs.n_nodes - 1
    idx = [dofs.rho_index(0), dofs.rho_index(last)]
    vals = [np.asarray(rho0, dtype=float), np.asarray(rho1, dtype=float)]
    bnd = dofs.velocity.boundary_dofs
    for i in range(dofs.n_intervals):
        idx.append(dofs.m_index(i, bnd))
        vals.append(np.zeros(len(bnd)))
    return np.concatenate(idx), np.concatenate(vals)


def apply_flux_bc(
    operator: SaddleOperator, dofs: DofMap, rho0: np.ndarray, rho1: np.ndarray, *, tol: float = 1e-12
) -> SaddleOperator:
    """Fix the end densities and zero the lateral flux by symmetric elimination."""
    rho0 = np.asarray(rho0, dtype=float)
    rho1 = np.asarray(rho1, dtype=float)
    if rho0.shape != (dofs.n_cells,) or rho1.shape != (dofs.n_cells,):
        raise ValueError("boundary densities must have one value per cell")
    mass0 = float(rho0 @ dofs.mesh.areas)
    mass1 = float(rho1 @ dofs.mesh.areas)
    if abs(mass0 - mass1) > tol * max(1.0, abs(mass0), abs(mass1)):
        raise CompatibilityError(f"boundary masses differ: {mass0!r} vs {mass1!r}")
    idx, vals = boundary_constraints(dofs, rho0, rho1)
    return dataclasses.replace(operator, fixed_index=idx, fixed_values=vals)


# ------------------------------------------------------ dual-space coupling
def dual_mass(dofs: DofMap) -> sp.csr_matrix:
    """L2 mass of ``(a, b_x, b_y)`` over the space-time dual space."""
    x = dofs.dual
    nl = x.n_local
    cell_dofs = np.arange(x.n_dofs).reshape(-1, nl)
    rows = np.repeat(cell_dofs[:, :, None], nl, axis=2)
    cols = np.repeat(cell_dofs[:, None, :], nl, axis=1)
    mx = _scatter(rows, cols, x.local_mass, (x.n_dofs, x.n_dofs))
    block = sp.kron(sp.diags(dofs.time.steps), mx)
    return sp.block_diag([block, block, block], format="csr")


def dual_layout(dofs: DofMap) -> tuple[int, int]:
    """``(n_intervals, n_X)``; the flat dual vector is ``[a, b_x, b_y]``, each interval-major."""
    return dofs.n_intervals, dofs.dual.n_dofs


def velocity_at_dual_nodes(dofs: DofMap) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Matrices giving the X_h^r representation of the velocity field.

    For ``r=1`` this is evaluation at the cell vertices (exact, since V_h(T)
    is contained in the nodal space); for ``r=0`` it is the cell mean.
    """
    v = dofs.velocity
    mesh = dofs.mesh
    nc, nl = mesh.n_cells, dofs.dual.n_local
    if dofs.dual.order == 1:
        from .fespace import REF_VERTICES

        vals, _ = v.evaluate(REF_VERTICES[mesh.kind])  # (nc, nv, nloc, 2)
    else:
        from .fespace import reference_rule

        pts, wts = reference_rule(mesh.kind)
        vq, _ = v.evaluate(pts)
        ref_area = wts.sum()
        vals = np.einsum("q,cqli->cli", wts / ref_area, vq)[:, None]
    rows = np.repeat((np.arange(nc)[:, None] * nl + np.arange(nl))[:, :, None], v.n_local, axis=2)
    cols = np.repeat(v.cell_dofs[:, None, :], nl, axis=1)
    ex = _scatter(rows, cols, vals[..., 0], (nc * nl, v.n_dofs))
    ey = _scatter(rows, cols, vals[..., 1], (nc * nl, v.n_dofs))
    return ex, ey


def dual_projection(dofs: DofMap) -> sp.csr_matrix:
    """L2 projection ``Z_{h,tau} -> (X^r_{h,tau})^3`` as a sparse matrix."""
    nl = dofs.dual.n_local
    cell_to_dual = sp.kron(sp.identity(dofs.n_cells), np.ones((nl, 1)), format="csr")
    p_rho = sp.kron(time_average(dofs.time), cell_to_dual)
    ex, ey = velocity_at_dual_nodes(dofs)
    it = sp.identity(dofs.n_intervals)
    n_a = p_rho.shape[0]
    zero_rho = sp.csr_matrix((n_a, dofs.n_rho))
    zero_m = sp.csr_matrix((n_a, dofs.n_m))
    return sp.bmat(
        [
            [p_rho, zero_m],
            [zero_rho, sp.kron(it, ex)],
            [zero_rho, sp.kron(it, ey)],
        ],
        format="csr",
    )


def dual_coupling(dofs: DofMap) -> sp.csr_matrix:
    """``C`` with ``(C q)_j = <q, z_j>`` for primal basis functions ``z_j``.

    Since the projection is orthogonal, ``C = P^T M_X`` with ``P`` from
    :func:`dual_projection`.
    """
    return (dual_projection(dofs).T @ dual_mass(dofs)).tocsr()
