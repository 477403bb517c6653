import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import bisect

import femot.transport as tr
from femot.assembly import assemble_divergence, assemble_mass, boundary_constraints
from femot.densities import DensitySource
from femot.fespace import SpaceConfig, eval_velocity_basis, REF_VERTICES
from femot.transport import (
    DualField,
    NumericalFailure,
    StepSizeWarning,
    _Operators,
    continuity_residual,
    evaluate_action,
    node_masses,
    pdhg_run,
    project_dual_space,
    project_K_point,
    step1,
    step2,
    time_seminorm,
    wasserstein_estimate,
)

from conftest import FAMILIES, make_problem

UNIFORM = DensitySource("uniform")
finite = st.floats(-5, 5, allow_nan=False)


def dist(p, q):
    return np.sqrt((p[0] - q[0]) ** 2 + ((p[1] - q[1]) ** 2).sum(-1))


# ------------------------------------------------------------ K projection
@pytest.mark.parametrize(
    "a, b, ea, eb",
    [(-1.0, (0.0, 0.0), -1.0, (0.0, 0.0)), (0.5, (0.0, 0.0), 0.0, (0.0, 0.0)), (-2.0, (1.0, -1.0), -2.0, (1.0, -1.0))],
)
def test_k_examples(a, b, ea, eb):
    pa, pb = project_K_point(a, np.array(b))
    assert isinstance(pa, float)
    assert pa == ea and np.array_equal(pb, eb)


def test_k_cubic_root_and_optimality(rng):
    mu = bisect(lambda x: x**3 / 2 + x - 2, 0, 2, xtol=1e-15)
    pa, pb = project_K_point(0.0, np.array([2.0, 0.0]))
    assert pa == pytest.approx(-(mu**2) / 2, abs=1e-14)
    np.testing.assert_allclose(pb, [mu, 0.0], atol=1e-14)
    best = np.hypot(pa, np.hypot(*(pb - [2, 0])))
    # 1e6 points of K: boundary points and interior points below them
    b = rng.uniform(-3, 3, (10**6, 2))
    a = -0.5 * (b**2).sum(1) - np.where(rng.random(10**6) < 0.5, 0.0, rng.exponential(0.5, 10**6))
    d = np.sqrt(a**2 + ((b - [2, 0]) ** 2).sum(1))
    assert d.min() >= best - 1e-12


@given(a=finite, bx=finite, by=finite)
@settings(max_examples=300, deadline=None)
def test_k_membership_and_idempotence(a, bx, by):
    pa, pb = project_K_point(a, np.array([bx, by]))
    assert pa + 0.5 * pb @ pb <= 1e-12
    qa, qb = project_K_point(pa, pb)
    assert abs(qa - pa) <= 1e-13 and np.abs(qb - pb).max() <= 1e-13
    if a + 0.5 * (bx * bx + by * by) <= 0:
        assert pa == a and np.array_equal(pb, [bx, by])
    else:
        # outside points land on the paraboloid, along the same direction of b
        assert abs(pa + 0.5 * pb @ pb) <= 1e-12
        assert pb[0] * by - pb[1] * bx == pytest.approx(0.0, abs=1e-12)


def test_k_non_expansive(rng):
    x = (rng.uniform(-5, 5, 10**4), rng.uniform(-5, 5, (10**4, 2)))
    y = (rng.uniform(-5, 5, 10**4), rng.uniform(-5, 5, (10**4, 2)))
    assert np.all(dist(project_K_point(*x), project_K_point(*y)) <= dist(x, y) * (1 + 1e-12))
    near = (x[0] + rng.normal(0, 1e-3, 10**4), x[1] + rng.normal(0, 1e-3, (10**4, 2)))
    assert np.all(dist(project_K_point(*x), project_K_point(*near)) <= dist(x, near) * (1 + 1e-12))


@given(arrays(float, (7, 3), elements=finite))
@settings(max_examples=50, deadline=None)
def test_k_vectorised_matches_pointwise(x):
    pa, pb = project_K_point(x[:, 0], x[:, 1:])
    for i in range(len(x)):
        sa, sb = project_K_point(x[i, 0], x[i, 1:])
        assert sa == pa[i] and np.array_equal(sb, pb[i])


# ----------------------------------------------------------- dual space
@pytest.mark.parametrize("kind, family", FAMILIES)
@pytest.mark.parametrize("order", [0, 1])
def test_dual_of_constant_field(kind, family, order):
    p = make_problem(kind, family, order=order, src0=UNIFORM, src1=UNIFORM)
    d = p.dofs
    sigma = d.join(np.ones((d.n_nodes, d.n_cells)), np.zeros((d.n_intervals, d.velocity.n_dofs)))
    q = project_dual_space(d, sigma)
    np.testing.assert_allclose(q.a, 1.0, atol=1e-15)
    np.testing.assert_allclose(q.b, 0.0, atol=1e-15)


def test_r0_is_staggered_average(rng):
    n = 4
    p = make_problem("quad", "RTq0", n=n, intervals=3, order=0)
    d, mesh = p.dofs, p.mesh
    sigma = rng.standard_normal(d.n_sigma)
    rho, m = d.split(sigma)
    q = project_dual_space(d, sigma)
    np.testing.assert_allclose(q.a[..., 0], 0.5 * (rho[1:] + rho[:-1]), atol=1e-14)
    h = 1.0 / n
    for c in range(mesh.n_cells):
        # local edges: bottom, right, top, left; fluxes divided by the facet length are staggered values
        f = mesh.cell_facets[c]
        nrm = mesh.facet_normals[f]
        left, right = m[:, f[3]] * nrm[3, 0], m[:, f[1]] * nrm[1, 0]
        bottom, top = m[:, f[0]] * nrm[0, 1], m[:, f[2]] * nrm[2, 1]
        np.testing.assert_allclose(q.b[:, c, 0, 0], 0.5 * (left + right) / h, atol=1e-12)
        np.testing.assert_allclose(q.b[:, c, 0, 1], 0.5 * (bottom + top) / h, atol=1e-12)


def test_r1_single_facet_vertex_values():
    p = make_problem("tri", "RT0", n=2, intervals=1, order=1)
    d, mesh = p.dofs, p.mesh
    f = int(np.flatnonzero(~mesh.boundary_facets)[0])
    sigma = np.zeros(d.n_sigma)
    sigma[d.m_index(0, [f])] = 1.0
    q = project_dual_space(d, sigma)
    for c in range(mesh.n_cells):
        if f not in mesh.cell_facets[c]:
            np.testing.assert_array_equal(q.b[0, c], 0.0)
            continue
        k = list(mesh.cell_facets[c]).index(f)
        for v, xhat in enumerate(REF_VERTICES["tri"]):
            val, _ = eval_velocity_basis(SpaceConfig("RT0", 1), mesh, c, xhat)[k]
            np.testing.assert_allclose(q.b[0, c, v], val, atol=1e-14)


# ------------------------------------------------------------------ steps
@pytest.mark.parametrize("kind, family", FAMILIES)
def test_step1_keeps_admissible_field(kind, family, rng):
    ops = _Operators(make_problem(kind, family), 1.0)
    zero = np.zeros(ops.proj.shape[0])
    s1, _, _ = step1(ops, rng.standard_normal(ops.dofs.n_sigma), zero)
    s2, _, _ = step1(ops, s1, zero)
    assert ops.norm_m(s2 - s1) <= 1e-10 * ops.norm_m(s1)


@pytest.mark.parametrize("kind, family", FAMILIES)
def test_min_norm_field_against_dense_oracle(kind, family):
    p = make_problem(kind, family, n=2, intervals=2)
    d = p.dofs
    ops = _Operators(p, 1.0)
    got, _, _ = step1(ops, np.zeros(d.n_sigma), np.zeros(ops.proj.shape[0]))
    # minimise ||s||_M over {B s = 0, boundary dofs fixed} through a null-space basis
    idx, vals = boundary_constraints(d, p.rho0, p.rho1)
    free = np.setdiff1d(np.arange(d.n_sigma), idx)
    b = assemble_divergence(d).toarray()
    m = assemble_mass(d).toarray()
    fixed = np.zeros(d.n_sigma)
    fixed[idx] = vals
    bf = b[:, free]
    part = np.linalg.lstsq(bf, -b @ fixed, rcond=None)[0]
    ns = scipy.linalg.null_space(bf)
    base = fixed.copy()
    base[free] = part
    e = np.zeros((d.n_sigma, ns.shape[1]))
    e[free] = ns
    z = np.linalg.solve(e.T @ m @ e, -e.T @ m @ base)
    np.testing.assert_allclose(got, base + e @ z, atol=1e-11)


def test_l2_regularisation_reduces_time_variation(rng):
    xi = None
    values = []
    for alpha in (0.0, 0.002, 0.02, 0.2):
        reg = "l2" if alpha > 0 else "none"
        p = make_problem("quad", "RTq0", regularization=reg, alpha=alpha)
        ops = _Operators(p, 1.0)
        if xi is None:
            xi = rng.standard_normal(p.dofs.n_sigma)
        s, _, _ = step1(ops, xi, np.zeros(ops.proj.shape[0]))
        values.append(time_seminorm(p.dofs, p.dofs.split(s)[0]))
    assert np.all(np.diff(values) < 0)


def test_step2_inactive_projection(rng):
    p = make_problem("quad", "RTq0", src0=UNIFORM, src1=UNIFORM)
    ops = _Operators(p, 1.0)
    d = p.dofs
    q = DualField.zeros(d)
    q.a[:] = -10.0
    sigma = rng.uniform(-1, 1, d.n_sigma)
    out = step2(ops, q.flat(), sigma, sigma, 0.01)
    np.testing.assert_allclose(out, q.flat() + 0.01 * (ops.proj @ sigma), atol=1e-15)


def test_step2_zero():
    p = make_problem("tri", "BDM1")
    ops = _Operators(p, 1.0)
    n = ops.proj.shape[0]
    assert np.array_equal(step2(ops, np.zeros(n), np.zeros(p.dofs.n_sigma), np.zeros(p.dofs.n_sigma), 1.0), np.zeros(n))


@pytest.mark.parametrize("exact", [False, True])
def test_step2_large_momentum_lands_on_paraboloid(exact):
    p = make_problem("quad", "RTq0", n=1, intervals=1, src0=UNIFORM, src1=UNIFORM, exact_dual_projection=exact)
    ops = _Operators(p, 1.0)
    d, mesh = p.dofs, p.mesh
    # constant momentum (20, 0): each facet dof is the flux through that facet
    m = 20.0 * mesh.facet_normals[:, 0] * mesh.facet_lengths
    sigma = d.join(np.ones((2, 1)), m[None])
    q = DualField.from_flat(d, step2(ops, np.zeros(ops.proj.shape[0]), sigma, sigma, 1.0))
    np.testing.assert_allclose(q.a + 0.5 * (q.b**2).sum(-1), 0.0, atol=1e-12)
    assert np.all(q.b[..., 0] > 0)


def test_exact_projection_beats_dofwise(rng):
    p = make_problem("tri", "RT0", n=2, intervals=2, exact_dual_projection=True)
    d = p.dofs
    z = DualField.from_flat(d, 3 * rng.standard_normal(3 * d.n_intervals * d.dual.n_dofs))
    exact = tr._exact_k_projection(d, z)
    assert exact.membership() <= 1e-10
    a, b = project_K_point(z.a, z.b)
    ops = _Operators(p, 1.0)
    assert ops.norm_x(exact.flat() - z.flat()) <= ops.norm_x(DualField(a, b).flat() - z.flat()) + 1e-12
    inside = DualField(a, b)
    again = tr._exact_k_projection(d, inside)
    np.testing.assert_allclose(again.flat(), inside.flat(), atol=1e-10)


# ----------------------------------------------------------------- action
@pytest.mark.parametrize("kind, family", [("tri", "RT0"), ("quad", "RTq0")])
@pytest.mark.parametrize("c", [0.0, 0.7, -2.0])
def test_action_of_constant_momentum(kind, family, c):
    p = make_problem(kind, family, n=2, intervals=1, src0=UNIFORM, src1=UNIFORM)
    d, mesh = p.dofs, p.mesh
    m = c * mesh.facet_normals[:, 0] * mesh.facet_lengths
    sigma = d.join(np.ones((2, d.n_cells)), m[None])
    assert evaluate_action(d, sigma) == pytest.approx(c**2 / 2, abs=1e-14)


def test_action_guard():
    p = make_problem("quad", "RTq0", n=2, intervals=1, src0=UNIFORM, src1=UNIFORM)
    d, mesh = p.dofs, p.mesh
    rho = np.ones((2, 4))
    rho[:, 0] = 0.0
    m = np.zeros(d.velocity.n_dofs)
    assert evaluate_action(d, d.join(rho, m[None])) == 0.0
    m[mesh.cell_facets[0, 1]] = 0.3
    assert evaluate_action(d, d.join(rho, m[None])) == float("inf")
    with pytest.raises(ValueError):
        wasserstein_estimate(float("inf"))
    assert wasserstein_estimate(0.08) == pytest.approx(0.4)


# ------------------------------------------------------------------ runs
def test_stationary_run():
    p = make_problem("tri", "RT0", src0=UNIFORM, src1=UNIFORM)
    res = pdhg_run(p, max_iters=50)
    assert res.report.final_action <= 1e-8
    assert res.report.wasserstein <= 1e-4
    np.testing.assert_allclose(res.sigma.rho, 1.0, atol=1e-12)


@pytest.mark.parametrize("kind, family", FAMILIES)
@pytest.mark.parametrize("order", [0, 1])
def test_run_invariants(kind, family, order):
    p = make_problem(kind, family, order=order)
    d = p.dofs
    worst = {"res": 0.0, "mass": 0.0}

    def check(k, sigma):
        worst["res"] = max(worst["res"], np.abs(continuity_residual(d, sigma)).max())
        worst["mass"] = max(worst["mass"], np.abs(node_masses(d, sigma) - 1).max())

    res = pdhg_run(p, max_iters=40, stop_tol=0, callback=check)
    assert worst["res"] <= 1e-10 and worst["mass"] <= 1e-10
    assert res.q.membership() <= 1e-12
    rep = res.report
    assert rep.iterations == 40 and len(rep.dsigma) == len(rep.duality) == len(rep.action) == 40
    assert np.isfinite(rep.gap)


def test_run_is_deterministic():
    p = make_problem("tri", "BDM1", order=0)
    a = pdhg_run(p, max_iters=30, stop_tol=0)
    b = pdhg_run(make_problem("tri", "BDM1", order=0), max_iters=30, stop_tol=0)
    assert a.report.as_dict() == b.report.as_dict()
    assert np.array_equal(a.sigma.flat(), b.sigma.flat())


def test_stop_tolerance():
    res = pdhg_run(make_problem(), max_iters=5000, stop_tol=1e-5)
    assert res.report.converged and res.report.dsigma[-1] <= 1e-5
    assert all(ds > 1e-5 for ds in res.report.dsigma[1:-1])


def test_step_size_warning():
    p = make_problem(n=2, intervals=2)
    with pytest.warns(StepSizeWarning):
        pdhg_run(p, 1.0, 1.0, max_iters=1)
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("error", StepSizeWarning)
        pdhg_run(p, 0.99, 0.99, max_iters=1)
    with pytest.raises(ValueError):
        pdhg_run(p, 0.0, 1.0)


def test_numerical_failure(monkeypatch):
    def broken(a, b):
        return np.full_like(a, np.nan), b

    monkeypatch.setattr(tr, "project_K_point", broken)
    with pytest.raises(NumericalFailure) as info:
        pdhg_run(make_problem(n=2, intervals=2), max_iters=5)
    assert info.value.iteration == 1


def test_interpolation_start_is_stationary_for_equal_ends():
    # the default minimal-norm start is not stationary for non-uniform rho0 = rho1
    src = DensitySource("cosine_pair", {"end": 0})
    p = make_problem("quad", "RTq0", n=8, intervals=8, src0=src, src1=src)
    res = pdhg_run(p, max_iters=50, init="interpolation")
    assert res.report.final_action <= 1e-8
