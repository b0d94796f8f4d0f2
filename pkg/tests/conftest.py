import numpy as np
import pytest

from tetsdf.isosurface import EPS_GRAD, clamp_small_phi, marching_tetrahedra
from tetsdf.mesh import Sphere, build_band_tetmesh, sample_exact_sdf
from tetsdf.render import Camera


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_band():
    """Sphere band of under 2000 tets, the size used for gradient checks."""
    mesh = build_band_tetmesh(Sphere((0.0, 0.0, 0.0), 0.5), 0.2, 0.2)
    assert mesh.n_tets <= 2000
    return mesh


@pytest.fixture(scope="session")
def sphere_band():
    mesh = build_band_tetmesh(Sphere((0.0, 0.0, 0.0), 1.0), 0.14, 0.3)
    phi = clamp_small_phi(sample_exact_sdf(Sphere((0.0, 0.0, 0.0), 1.0), mesh), EPS_GRAD)
    return mesh, phi


@pytest.fixture(scope="session")
def sphere_surface(sphere_band):
    mesh, phi = sphere_band
    return marching_tetrahedra(mesh, phi)


@pytest.fixture
def front_camera():
    return Camera.look_at((0.0, 0.0, 4.0), near=0.5, far=10.0, width=64, height=64)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: acceptance criterion test")
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


_ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not report.failed:
        return
    n = marker.args[0]
    if report.when == "call" or n not in _ACCEPTANCE:
        _ACCEPTANCE[n] = (report.passed, dict(item.user_properties))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, props = _ACCEPTANCE[n]
        detail = ", ".join(f"{k}={v}" for k, v in props.items())
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
