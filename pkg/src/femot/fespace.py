"""Finite element spaces on a :class:`~femot.mesh.SpatialMesh`.

* ``Q_h``: piecewise constants, one dof per cell.
* ``V_h``: H(div)-conforming fluxes, RT0 / BDM1 on triangles and the
  tensor-product RT[0] ("RTq0") on parallelograms.  Local bases are built by
  contravariant Piola mapping of a reference shape space and inverting the
  facet-moment dof matrix, with the moments taken w.r.t. the *global* facet
  normal so that inter-element continuity is a plain dof identification.
* ``X_h^r``: discontinuous P0 (r=0) or nodal P1/Q1 (r=1) functions for the
  dual variable.

The space-time layout of all coefficient vectors lives in :class:`DofMap`.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .mesh import SpatialMesh, TimeGrid

VELOCITY_FAMILIES = ("RT0", "BDM1", "RTq0")

# degree-4 Dunavant rule, weights normalised to the reference triangle area 1/2
_A1, _W1 = 0.44594849091596488632, 0.22338158967801146570
_A2, _W2 = 0.09157621350977074346, 0.10995174365532186764
_TRI_BARY = np.array(
    [
        [_A1, _A1, 1 - 2 * _A1],
        [_A1, 1 - 2 * _A1, _A1],
        [1 - 2 * _A1, _A1, _A1],
        [_A2, _A2, 1 - 2 * _A2],
        [_A2, 1 - 2 * _A2, _A2],
        [1 - 2 * _A2, _A2, _A2],
    ]
)
TRI_POINTS = _TRI_BARY[:, 1:].copy()
TRI_WEIGHTS = 0.5 * np.array([_W1] * 3 + [_W2] * 3)

_G3 = np.array([0.5 - np.sqrt(0.15), 0.5, 0.5 + np.sqrt(0.15)])
_G3W = np.array([5.0, 8.0, 5.0]) / 18.0
QUAD_POINTS = np.array([[x, y] for y in _G3 for x in _G3])
QUAD_WEIGHTS = np.array([wx * wy for wy in _G3W for wx in _G3W])

# 2-point Gauss-Legendre on [0, 1] for facet moments
_G2 = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
_G2W = np.array([0.5, 0.5])

REF_VERTICES = {
    "tri": np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
    "quad": np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]),
}


def reference_rule(kind: str) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature points and weights on the reference cell of ``kind``."""
    if kind == "tri":
        return TRI_POINTS, TRI_WEIGHTS
    return QUAD_POINTS, QUAD_WEIGHTS


def subdivided_rule(kind: str, level: int) -> tuple[np.ndarray, np.ndarray]:
    """Composite rule: the base rule on a uniform ``level x level`` split."""
    pts, wts = reference_rule(kind)
    if level <= 1:
        return pts, wts
    h = 1.0 / level
    out_p, out_w = [], []
    for j in range(level):
        for i in range(level):
            if kind == "tri" and i + j > level - 1:
                break
            out_p.append((np.array([i, j]) + pts) * h)
            out_w.append(wts * h * h)
            if kind == "tri" and i + j < level - 1:
                # the flipped sub-triangle of the lattice square
                out_p.append((np.array([i + 1, j + 1]) - pts) * h)
                out_w.append(wts * h * h)
    return np.concatenate(out_p), np.concatenate(out_w)


# ------------------------------------------------------------ reference shapes
def _ref_shape(family: str, xhat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reference shape space: values ``(ns, nq, 2)`` and divergences ``(ns,)``."""
    x, y = xhat[:, 0], xhat[:, 1]
    one, zero = np.ones_like(x), np.zeros_like(x)
    if family == "RT0":
        vals = [(one, zero), (zero, one), (x, y)]
        div = [0.0, 0.0, 2.0]
    elif family == "BDM1":
        vals = [(one, zero), (x, zero), (y, zero), (zero, one), (zero, x), (zero, y)]
        div = [0.0, 1.0, 0.0, 0.0, 0.0, 1.0]
    elif family == "RTq0":
        vals = [(one, zero), (x, zero), (zero, one), (zero, y)]
        div = [0.0, 1.0, 0.0, 1.0]
    else:
        raise ValueError(f"unknown velocity family {family!r}")
    return np.array([np.stack(v, axis=-1) for v in vals]), np.array(div)


@dataclass(frozen=True)
class SpaceConfig:
    velocity_family: str = "RT0"
    dual_order: int = 1

    def __post_init__(self):
        if self.velocity_family not in VELOCITY_FAMILIES:
            raise ValueError(f"unknown velocity family {self.velocity_family!r}")
        if self.dual_order not in (0, 1):
            raise ValueError("dual order must be 0 or 1")

    def check_mesh(self, mesh: SpatialMesh) -> None:
        if self.velocity_family == "RTq0" and mesh.kind != "quad":
            raise ValueError("RTq0 requires a quadrilateral mesh")
        if self.velocity_family in ("RT0", "BDM1") and mesh.kind != "tri":
            raise ValueError(f"{self.velocity_family} requires a triangular mesh")


class VelocitySpace:
    """Lowest-order H(div) space with global-orientation facet moment dofs."""

    def __init__(self, mesh: SpatialMesh, family: str):
        SpaceConfig(family, 0).check_mesh(mesh)
        self.mesh = mesh
        self.family = family
        self.dofs_per_facet = 2 if family == "BDM1" else 1
        self.n_dofs = mesh.n_facets * self.dofs_per_facet
        nc, k = mesh.cells.shape
        dpf = self.dofs_per_facet
        self.n_local = k * dpf
        self.cell_dofs = (mesh.cell_facets[:, :, None] * dpf + np.arange(dpf)).reshape(nc, -1)
        self.coef = self._invert_dofs()
        bnd = np.flatnonzero(mesh.boundary_facets)
        self.boundary_dofs = (bnd[:, None] * dpf + np.arange(dpf)).ravel()

    def _shape_physical(self, xhat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        # contravariant Piola: v = J vhat / det J, div v = divhat / det J
        vals, div = _ref_shape(self.family, xhat)
        m = self.mesh
        phys = np.einsum("cij,sqj->csqi", m.jacobians, vals) / m.dets[:, None, None, None]
        return phys, div[None, :] / m.dets[:, None]

    def _invert_dofs(self) -> np.ndarray:
        m = self.mesh
        nc, k = m.cells.shape
        inv_jac = np.linalg.inv(m.jacobians)
        ns = _ref_shape(self.family, np.zeros((1, 2)))[0].shape[0]
        dofmat = np.zeros((nc, self.n_local, ns))
        for e in range(k):
            f = m.cell_facets[:, e]
            p0 = m.vertices[m.facets[f, 0]]
            p1 = m.vertices[m.facets[f, 1]]
            t = p1 - p0
            nlen = np.stack([t[:, 1], -t[:, 0]], axis=1)  # global normal * length
            for g, (s, w) in enumerate(zip(_G2, _G2W)):
                x = p0 + s * t
                xhat = np.einsum("cij,cj->ci", inv_jac, x - m.origins)
                vals, _ = _ref_shape(self.family, xhat)  # (ns, nc, 2)
                phys = np.einsum("cij,scj->csi", m.jacobians, vals) / m.dets[:, None, None]
                flux = np.einsum("csi,ci->cs", phys, nlen)
                for j in range(self.dofs_per_facet):
                    leg = 1.0 if j == 0 else 2.0 * s - 1.0
                    dofmat[:, e * self.dofs_per_facet + j, :] += w * leg * flux
        # basis_i = sum_s coef[s, i] shape_s  with  dofmat @ coef = I
        return np.linalg.inv(dofmat)

    def evaluate(self, xhat) -> tuple[np.ndarray, np.ndarray]:
        """Basis values ``(nc, nq, nloc, 2)`` and divergences ``(nc, nloc)``."""
        xhat = np.atleast_2d(np.asarray(xhat, dtype=float))
        phys, div = self._shape_physical(xhat)
        vals = np.einsum("csqi,csl->cqli", phys, self.coef)
        return vals, np.einsum("cs,csl->cl", div, self.coef)

    @cached_property
    def local_mass(self) -> np.ndarray:
        pts, wts = reference_rule(self.mesh.kind)
        vals, _ = self.evaluate(pts)
        w = wts[None, :] * np.abs(self.mesh.dets)[:, None]
        return np.einsum("cq,cqli,cqki->clk", w, vals, vals)

    @cached_property
    def cell_divergence(self) -> np.ndarray:
        """``(nc, nloc)`` integrals of the basis divergences over each cell."""
        _, div = self.evaluate(np.zeros((1, 2)))
        return div * self.mesh.areas[:, None]


class DualSpace:
    """Discontinuous scalar space ``X_h^r`` (per-cell constants or nodal P1/Q1)."""

    def __init__(self, mesh: SpatialMesh, order: int):
        if order not in (0, 1):
            raise ValueError("dual order must be 0 or 1")
        self.mesh = mesh
        self.order = order
        self.n_local = 1 if order == 0 else mesh.n_cell_vertices
        self.n_dofs = mesh.n_cells * self.n_local

    def shape(self, xhat) -> np.ndarray:
        """Reference nodal basis values ``(nq, nloc)``."""
        xhat = np.atleast_2d(np.asarray(xhat, dtype=float))
        x, y = xhat[:, 0], xhat[:, 1]
        if self.order == 0:
            return np.ones((len(xhat), 1))
        if self.mesh.kind == "tri":
            return np.stack([1 - x - y, x, y], axis=1)
        return np.stack([(1 - x) * (1 - y), x * (1 - y), x * y, (1 - x) * y], axis=1)

    @cached_property
    def local_mass(self) -> np.ndarray:
        pts, wts = reference_rule(self.mesh.kind)
        n = self.shape(pts)
        ref = np.einsum("q,ql,qk->lk", wts, n, n)
        return np.abs(self.mesh.dets)[:, None, None] * ref[None]

    @cached_property
    def local_weights(self) -> np.ndarray:
        """``(nc, nloc)`` integrals of each nodal basis function."""
        return self.local_mass.sum(axis=2)


class DofMap:
    """Space-time layout of primal, multiplier and dual coefficient vectors.

    The primal vector is ``[rho (n_nodes x n_cells), m (n_intervals x n_V)]``
    flattened time-major.  Multipliers are ``(n_intervals x n_cells)``.
    """

    def __init__(self, mesh: SpatialMesh, time: TimeGrid, config: SpaceConfig):
        config.check_mesh(mesh)
        self.mesh = mesh
        self.time = time
        self.config = config
        self.velocity = VelocitySpace(mesh, config.velocity_family)
        self.dual = DualSpace(mesh, config.dual_order)
        self.n_cells = mesh.n_cells
        self.n_nodes = time.n_nodes
        self.n_intervals = time.n_intervals
        self.n_rho = self.n_nodes * self.n_cells
        self.n_m = self.n_intervals * self.velocity.n_dofs
        self.n_sigma = self.n_rho + self.n_m
        self.n_phi = self.n_intervals * self.n_cells
        self.n_eta = self.n_nodes * self.velocity.n_dofs

    def rho_index(self, node, cells=None) -> np.ndarray:
        cells = np.arange(self.n_cells) if cells is None else np.asarray(cells)
        return node * self.n_cells + cells

    def m_index(self, interval, dofs=None) -> np.ndarray:
        dofs = np.arange(self.velocity.n_dofs) if dofs is None else np.asarray(dofs)
        return self.n_rho + interval * self.velocity.n_dofs + dofs

    def split(self, sigma: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Views ``rho (n_nodes, nc)`` and ``m (n_intervals, n_V)`` of ``sigma``."""
        rho = sigma[: self.n_rho].reshape(self.n_nodes, self.n_cells)
        m = sigma[self.n_rho :].reshape(self.n_intervals, self.velocity.n_dofs)
        return rho, m

    def join(self, rho: np.ndarray, m: np.ndarray) -> np.ndarray:
        return np.concatenate([np.ravel(rho), np.ravel(m)])


def eval_velocity_basis(config: SpaceConfig, mesh: SpatialMesh, cell: int, reference_point):
    """Values and divergences of the local velocity basis on one cell.

    Returns a list of ``(value (2,), divergence)`` pairs, one per local dof,
    at the physical image of ``reference_point``.
    """
    config.check_mesh(mesh)
    space = VelocitySpace(mesh, config.velocity_family)
    vals, div = space.evaluate(np.asarray(reference_point, dtype=float)[None])
    return [(vals[cell, 0, i].copy(), float(div[cell, i])) for i in range(space.n_local)]


def local_mass_matrix(space, mesh: SpatialMesh, cell: int) -> np.ndarray:
    """Dense local mass matrix of ``space`` ("Q", "RT0", "BDM1", "RTq0", "X0", "X1")."""
    if space == "Q":
        return np.array([[mesh.areas[cell]]])
    if space in ("X0", "X1"):
        return DualSpace(mesh, int(space[1])).local_mass[cell].copy()
    if mesh.areas[cell] <= 0:
        raise ValueError("degenerate cell")
    return VelocitySpace(mesh, space).local_mass[cell].copy()
