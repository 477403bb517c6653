"""Gaussian translate on the unit square against an independent 1-D oracle."""

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import truncnorm

from femot.densities import DensitySource, project_density
from femot.fespace import SpaceConfig
from femot.mesh import TimeGrid, build_structured_quadrilateral
from femot.transport import TransportProblem, pdhg_run


def truncated_gaussian_distance(y0, y1, s):
    """W2 between unit-square Gaussians that differ only in their y centre.

    Both densities factor as f(x) g_i(y) with the same f, so the distance is
    the 1-D distance of the truncated y marginals, given by their quantiles.
    """
    a = truncnorm(-y0 / s, (1 - y0) / s, loc=y0, scale=s)
    b = truncnorm(-y1 / s, (1 - y1) / s, loc=y1, scale=s)
    w2, _ = quad(lambda u: (a.ppf(u) - b.ppf(u)) ** 2, 0, 1, limit=200)
    return float(np.sqrt(w2))


def test_oracle_differs_from_the_centre_distance():
    # truncation by the square breaks the translation: the ends are not translates
    exact = truncated_gaussian_distance(0.1, 0.9, 0.1)
    assert exact == pytest.approx(0.74294, abs=1e-5)
    assert abs(exact - 0.8) / 0.8 > 0.05
    # far from the boundary the oracle recovers the shift
    assert truncated_gaussian_distance(0.4, 0.6, 0.05) == pytest.approx(0.2, abs=1e-6)


@pytest.mark.slow
def test_gaussian_translate_32():
    mesh = build_structured_quadrilateral(32, 32)
    rho0 = project_density(mesh, DensitySource("gaussian", {"x0": (0.5, 0.1), "s": 0.1}))
    rho1 = project_density(mesh, DensitySource("gaussian", {"x0": (0.5, 0.9), "s": 0.1}))
    p = TransportProblem(mesh, TimeGrid.uniform(16), SpaceConfig("RTq0", 1), rho0, rho1)
    rep = pdhg_run(p, max_iters=5000, stop_tol=0, track_action=False).report
    exact = truncated_gaussian_distance(0.1, 0.9, 0.1)
    assert np.isfinite(rep.wasserstein)
    assert abs(rep.wasserstein - exact) / exact <= 0.05
