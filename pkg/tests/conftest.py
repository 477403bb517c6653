import warnings

import numpy as np
import pytest

from femot.densities import DensitySource, project_density
from femot.fespace import SpaceConfig
from femot.mesh import TimeGrid, build_structured_quadrilateral, build_structured_triangular
from femot.transport import StepSizeWarning, TransportProblem

COSINE0 = DensitySource("cosine_pair", {"end": 0})
COSINE1 = DensitySource("cosine_pair", {"end": 1})

# (mesh kind, velocity family) pairs that are legal together
FAMILIES = [("tri", "RT0"), ("tri", "BDM1"), ("quad", "RTq0")]


def make_mesh(kind, n, pattern="uniform"):
    if kind == "tri":
        return build_structured_triangular(n, n, pattern)
    return build_structured_quadrilateral(n, n)


def make_problem(kind="quad", family="RTq0", n=4, intervals=4, order=1, src0=COSINE0, src1=COSINE1, **kw):
    mesh = make_mesh(kind, n)
    rho0 = project_density(mesh, src0)
    rho1 = project_density(mesh, src1)
    return TransportProblem(mesh, TimeGrid.uniform(intervals), SpaceConfig(family, order), rho0, rho1, **kw)


@pytest.fixture(autouse=True)
def _quiet_step_warning():
    # tau1 = tau2 = 1 is the default and warns on every run
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StepSizeWarning)
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ------------------------------------------------------- acceptance report
ACCEPTANCE = {}


def record_criterion(number, title, ok, detail):
    """Store and print one acceptance line; the calling test asserts ``ok`` afterwards."""
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
