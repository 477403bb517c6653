import numpy as np
import pytest
from numpy.polynomial.legendre import leggauss

from femot.fespace import DofMap, SpaceConfig, VelocitySpace, eval_velocity_basis, local_mass_matrix
from femot.mesh import SpatialMesh, TimeGrid, build_structured_quadrilateral, build_structured_triangular

REF_TRI = SpatialMesh([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]], "tri")
REF_QUAD = SpatialMesh([[0, 0], [1, 0], [1, 1], [0, 1]], [[0, 1, 2, 3]], "quad")


def skewed_tri():
    return SpatialMesh([[0.1, -0.2], [1.3, 0.4], [0.2, 0.9]], [[0, 1, 2]], "tri")


def edge_moments(mesh, family, cell=0, order=1):
    """Flux moments of each local basis function across each local edge by 5-point Gauss."""
    space = VelocitySpace(mesh, family)
    inv = np.linalg.inv(mesh.jacobians[cell])
    s, w = leggauss(5)
    s, w = 0.5 * (s + 1), 0.5 * w
    k = mesh.n_cell_vertices
    out = np.zeros((k, order + 1, space.n_local))
    for e in range(k):
        f = mesh.cell_facets[cell, e]
        p0, p1 = mesh.vertices[mesh.facets[f]]
        t = p1 - p0
        nlen = np.array([t[1], -t[0]])
        xhat = (p0 + s[:, None] * t - mesh.origins[cell]) @ inv.T
        vals, _ = space.evaluate(xhat)
        flux = vals[cell] @ nlen  # (nq, nloc)
        for j in range(order + 1):
            leg = np.ones_like(s) if j == 0 else 2 * s - 1
            out[e, j] = (w * leg) @ flux
    return out


@pytest.mark.parametrize("mesh", [REF_TRI, skewed_tri()])
def test_rt0_flux_duality(mesh):
    mom = edge_moments(mesh, "RT0", order=0)[:, 0, :]
    np.testing.assert_allclose(mom, np.eye(3), atol=1e-13)


@pytest.mark.parametrize("mesh", [REF_TRI, skewed_tri()])
def test_bdm1_moment_duality(mesh):
    # dofs are the flux moments against 1 and the Legendre weight 2s-1, per facet
    mom = edge_moments(mesh, "BDM1", order=1).reshape(6, 6)
    np.testing.assert_allclose(mom, np.eye(6), atol=1e-12)


def test_rtq0_flux_duality():
    mesh = SpatialMesh([[0, 0], [2, 0], [2.5, 1], [0.5, 1]], [[0, 1, 2, 3]], "quad")
    mom = edge_moments(mesh, "RTq0", order=0)[:, 0, :]
    np.testing.assert_allclose(mom, np.eye(4), atol=1e-13)


def fd_divergence(mesh, family, x, h=1e-6):
    """Central-difference divergence of each basis function at a physical point."""
    inv = np.linalg.inv(mesh.jacobians[0])

    def vals(p):
        xhat = (np.asarray(p) - mesh.origins[0]) @ inv.T
        return np.array([v for v, _ in eval_velocity_basis(SpaceConfig(family, 0), mesh, 0, xhat)])

    dx = (vals(x + [h, 0]) - vals(x - [h, 0]))[:, 0] / (2 * h)
    dy = (vals(x + [0, h]) - vals(x - [0, h]))[:, 1] / (2 * h)
    return dx + dy


@pytest.mark.parametrize(
    "family, mesh, n_local",
    [("RT0", skewed_tri(), 3), ("BDM1", skewed_tri(), 6), ("RTq0", REF_QUAD, 4)],
)
def test_divergence_is_cellwise_constant(family, mesh, n_local):
    pts = mesh.map_to_physical([[0.2, 0.2], [0.5, 0.1], [0.1, 0.6]])[0]
    divs = [fd_divergence(mesh, family, p) for p in pts]
    reported = np.array([d for _, d in eval_velocity_basis(SpaceConfig(family, 0), mesh, 0, [0.3, 0.3])])
    assert len(reported) == n_local
    for d in divs:
        np.testing.assert_allclose(d, reported, atol=1e-7)


def test_bdm1_divergence_constants():
    # unit flux functions have divergence 1/|T|; Legendre moment functions carry no net flux
    div = np.array([d for _, d in eval_velocity_basis(SpaceConfig("BDM1", 0), REF_TRI, 0, [0.2, 0.3])])
    np.testing.assert_allclose(div, [2, 0, 2, 0, 2, 0], atol=1e-12)


@pytest.mark.parametrize("family, kind", [("RT0", "tri"), ("BDM1", "tri"), ("RTq0", "quad")])
@pytest.mark.parametrize("n", [2, 5])
def test_discrete_stokes(family, kind, n):
    mesh = build_structured_triangular(n, n, "alternating") if kind == "tri" else build_structured_quadrilateral(n, n)
    space = VelocitySpace(mesh, family)
    dpf = space.dofs_per_facet
    # signed facet flux of the facet's own dofs: +-1 for the zeroth moment, 0 for the Legendre one
    expect = np.zeros((mesh.n_cells, space.n_local))
    expect[:, ::dpf] = mesh.cell_signs
    np.testing.assert_allclose(space.cell_divergence, expect, atol=1e-12)


def collapsed_rule(n):
    """Conical Gauss product rule on the reference triangle (exact to degree 2n-2)."""
    x, w = leggauss(n)
    x, w = 0.5 * (x + 1), 0.5 * w
    u, v = np.meshgrid(x, x, indexing="ij")
    wu, wv = np.meshgrid(w, w, indexing="ij")
    pts = np.column_stack([u.ravel(), (v * (1 - u)).ravel()])
    return pts, (wu * wv * (1 - u)).ravel()


def oracle_mass(mesh, family):
    space = VelocitySpace(mesh, family)
    if mesh.kind == "tri":
        pts, wts = collapsed_rule(8)
    else:
        x, w = leggauss(8)
        x, w = 0.5 * (x + 1), 0.5 * w
        pts = np.array([[a, b] for a in x for b in x])
        wts = np.array([p * q for p in w for q in w])
    vals, _ = space.evaluate(pts)
    return np.einsum("q,qli,qki->lk", wts * abs(mesh.dets[0]), vals[0], vals[0])


@pytest.mark.parametrize(
    "family, mesh",
    [("RT0", REF_TRI), ("RT0", skewed_tri()), ("BDM1", skewed_tri()), ("RTq0", REF_QUAD)],
)
def test_mass_matrix_against_oracle(family, mesh):
    m = local_mass_matrix(family, mesh, 0)
    np.testing.assert_allclose(m, oracle_mass(mesh, family), rtol=1e-13, atol=1e-14)
    np.testing.assert_allclose(m, m.T, atol=1e-15)
    assert np.linalg.eigvalsh(m).min() > 0


@pytest.mark.parametrize("family, base", [("RT0", skewed_tri()), ("BDM1", skewed_tri()), ("RTq0", REF_QUAD)])
@pytest.mark.parametrize("scale", [0.5, 2.0])
def test_mass_scaling(family, base, scale):
    # flux-normalised Piola basis: values scale as 1/s and area as s^2, so the mass is scale invariant in 2-D
    mesh = SpatialMesh(base.vertices * scale, base.cells, base.kind)
    np.testing.assert_allclose(local_mass_matrix(family, mesh, 0), oracle_mass(mesh, family), rtol=1e-13, atol=1e-14)
    np.testing.assert_allclose(local_mass_matrix(family, mesh, 0), local_mass_matrix(family, base, 0), rtol=1e-12)


def test_q_and_dual_mass():
    mesh = build_structured_triangular(2, 2)
    assert local_mass_matrix("Q", mesh, 3)[0, 0] == pytest.approx(1 / 8)
    x1 = local_mass_matrix("X1", mesh, 0)
    np.testing.assert_allclose(x1, (1 / 8) * (np.ones((3, 3)) + np.eye(3)) / 12, atol=1e-16)
    quad = local_mass_matrix("X1", REF_QUAD, 0)
    np.testing.assert_allclose(quad.sum(), 1.0, atol=1e-15)
    np.testing.assert_allclose(quad[0], [4 / 36, 2 / 36, 1 / 36, 2 / 36], atol=1e-15)


@pytest.mark.parametrize("family, kind", [("RT0", "tri"), ("BDM1", "tri"), ("RTq0", "quad")])
@pytest.mark.parametrize("order", [0, 1])
def test_dofmap_bijective(family, kind, order):
    mesh = build_structured_triangular(3, 3) if kind == "tri" else build_structured_quadrilateral(3, 3)
    d = DofMap(mesh, TimeGrid.uniform(3), SpaceConfig(family, order))
    hits = np.concatenate(
        [d.rho_index(i) for i in range(d.n_nodes)] + [d.m_index(i) for i in range(d.n_intervals)]
    )
    assert np.array_equal(np.sort(hits), np.arange(d.n_sigma))
    # cell_dofs covers every velocity dof, interior ones twice
    counts = np.bincount(d.velocity.cell_dofs.ravel(), minlength=d.velocity.n_dofs)
    assert counts.min() >= 1 and counts.max() <= 2
    x = np.arange(d.n_sigma, dtype=float)
    rho, m = d.split(x)
    assert np.array_equal(d.join(rho, m), x)
    assert rho[2, 5] == d.rho_index(2, [5])[0]
    assert m[1, 4] == d.m_index(1, [4])[0]


def test_space_config_checks():
    with pytest.raises(ValueError):
        SpaceConfig("RT1", 0)
    with pytest.raises(ValueError):
        SpaceConfig("RT0", 2)
    with pytest.raises(ValueError, match="quadrilateral"):
        SpaceConfig("RTq0", 0).check_mesh(build_structured_triangular(1, 1))
    with pytest.raises(ValueError, match="triangular"):
        SpaceConfig("BDM1", 0).check_mesh(build_structured_quadrilateral(1, 1))
