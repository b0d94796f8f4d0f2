import math

import numpy as np
import pytest

from tetsdf.energy import (
    EnergyConfig, eikonal_energy, expand_loss, mean_curvature_energy, multiview_consistency,
    normal_map_loss, shrink_loss, silhouette_sets, smeared_heaviside, smeared_heaviside_derivative,
    tet_linear_coeffs,
)
from tetsdf.isosurface import EPS_GRAD, clamp_small_phi, marching_tetrahedra
from tetsdf.mesh import Sphere, TetMesh, build_band_tetmesh, sample_exact_sdf
from tetsdf.optim.gradcheck import fd_gradient_check, sample_support
from tetsdf.render import Camera, rasterize
from tetsdf.render.raster import NormalMap

from fields import random_smooth_field


def unit_volume_tet():
    # right tet with legs 1, 1, 6 has volume 1
    return TetMesh.from_arrays([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 6]], [[0, 1, 2, 3]])


def random_map(rng, h=6, w=5, coverage=0.7):
    n = rng.normal(size=(h, w, 3))
    n /= np.linalg.norm(n, axis=2, keepdims=True)
    mask = rng.uniform(size=(h, w)) < coverage
    n[~mask] = 0
    return NormalMap(n, mask, np.zeros((h, w)))


def energy_closure(fn):
    def loss(phi):
        r = fn(phi)
        return r.value, r.grad_phi
    return loss


# ---------------------------------------------------------------------------
# normal-map loss
# ---------------------------------------------------------------------------


def test_normal_loss_identical_is_zero(rng):
    m = random_map(rng)
    value, grad = normal_map_loss(m, m)
    assert value == 0.0
    assert np.all(grad == 0)


def test_normal_loss_opposite_pixel():
    a = NormalMap(np.array([[[0.0, 0.0, 1.0]]]), np.ones((1, 1), bool), np.zeros((1, 1)))
    b = NormalMap(np.array([[[0.0, 0.0, -1.0]]]), np.ones((1, 1), bool), np.zeros((1, 1)))
    value, grad = normal_map_loss(a, b)
    assert value == 2.0
    assert np.allclose(grad[0, 0], [0, 0, 2])


def test_normal_loss_fd(rng):
    pred, target = random_map(rng), random_map(rng)
    value, grad = normal_map_loss(pred, target)
    h = 1e-6
    for r, c in np.argwhere(pred.mask):
        for k in range(3):
            p = pred.normals.copy()
            p[r, c, k] += h
            fp = normal_map_loss(NormalMap(p, pred.mask, pred.depth), target)[0]
            p[r, c, k] -= 2 * h
            fm = normal_map_loss(NormalMap(p, pred.mask, pred.depth), target)[0]
            fd = (fp - fm) / (2 * h)
            assert fd == pytest.approx(grad[r, c, k], rel=1e-6, abs=1e-10)


def test_normal_loss_ignores_single_coverage(rng):
    pred, target = random_map(rng), random_map(rng)
    only = pred.mask & ~target.mask
    _, grad = normal_map_loss(pred, target)
    assert np.all(grad[only] == 0)


def test_normal_loss_size_mismatch(rng):
    with pytest.raises(ValueError):
        normal_map_loss(random_map(rng, 4, 4), random_map(rng, 4, 5))


# ---------------------------------------------------------------------------
# linear fits
# ---------------------------------------------------------------------------


def test_linear_coeffs_examples():
    u = np.array([[0.1, 0.2, 0.3], [1.0, 0.0, 0.2], [0.0, 1.5, 0.0], [0.3, 0.1, 2.0]])
    assert np.allclose(tet_linear_coeffs(u, u[:, 0]), [1, 0, 0, 0], atol=1e-14)
    assert np.allclose(tet_linear_coeffs(u, np.full(4, 2.5)), [0, 0, 0, 2.5], atol=1e-14)


def test_linear_coeffs_reconstruct(rng):
    for _ in range(20):
        u = rng.normal(size=(4, 3))
        s = rng.normal(size=4)
        c = tet_linear_coeffs(u, s)
        assert np.abs(u @ c[:3] + c[3] - s).max() <= 1e-10 * np.abs(s).max()


def test_linear_coeffs_degenerate():
    u = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
    with pytest.raises(np.linalg.LinAlgError):
        tet_linear_coeffs(u, np.zeros(4))


# ---------------------------------------------------------------------------
# Eikonal
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("variant", ["E1a", "E1b", "E1c"])
def test_eikonal_planar_zero(small_band, variant):
    r = eikonal_energy(small_band, small_band.vertices[:, 0], variant)
    assert r.value <= 1e-24
    assert np.abs(r.grad_phi).max() <= 1e-10


def test_eikonal_uniform_gradient():
    mesh = unit_volume_tet()
    assert mesh.volumes[0] == pytest.approx(1.0)
    phi = 2.0 * mesh.vertices[:, 0]
    assert eikonal_energy(mesh, phi, "E1b").value == pytest.approx(4.5)
    assert eikonal_energy(mesh, phi, "E1c").value == pytest.approx(4.5 * mesh.volumes[0])
    assert eikonal_energy(mesh, phi, "E1a").value == pytest.approx(0.5)


def test_eikonal_unknown_variant(small_band):
    with pytest.raises(ValueError):
        eikonal_energy(small_band, small_band.vertices[:, 0], "E9")


@pytest.mark.parametrize("variant", ["E1b", "E1c"])
def test_eikonal_fd(small_band, variant):
    rng = np.random.default_rng(3)
    phi = random_smooth_field(small_band, rng, scale=0.5)
    loss = energy_closure(lambda p: eikonal_energy(small_band, p, variant))
    idx = sample_support(loss(phi)[1], 50, rng)
    err, _, _ = fd_gradient_check(loss, phi, idx, h=1e-6)
    assert err <= 1e-5


def test_eikonal_e1a_fd_away_from_zero(small_band):
    rng = np.random.default_rng(4)
    phi = random_smooth_field(small_band, rng, scale=0.5)
    loss = energy_closure(lambda p: eikonal_energy(small_band, p, "E1a"))
    idx = sample_support(loss(phi)[1], 50, rng)
    err, _, _ = fd_gradient_check(loss, phi, idx, h=1e-6)
    assert err <= 1e-5


def test_eikonal_e1a_zero_gradient_guard():
    mesh = unit_volume_tet()
    r = eikonal_energy(mesh, np.zeros(4), "E1a")
    assert r.value == pytest.approx(0.5)
    assert np.all(np.isfinite(r.grad_phi))
    assert np.all(r.grad_phi == 0)


def test_eikonal_zero_iff_unit_gradient(small_band):
    x = small_band.vertices
    assert eikonal_energy(small_band, x @ np.array([0.6, 0.8, 0.0]), "E1c").value <= 1e-24
    assert eikonal_energy(small_band, x @ np.array([0.6, 0.8, 0.1]), "E1c").value > 1e-6


# ---------------------------------------------------------------------------
# mean curvature
# ---------------------------------------------------------------------------


def test_heaviside_endpoints():
    eps = 0.3
    assert smeared_heaviside(0.0, eps) == 0.5
    assert smeared_heaviside(eps, eps) == pytest.approx(1.0, abs=1e-15)
    assert smeared_heaviside(-eps, eps) == pytest.approx(0.0, abs=1e-15)
    assert smeared_heaviside(5.0, eps) == 1.0
    assert smeared_heaviside(-5.0, eps) == 0.0


def test_heaviside_derivative_fd():
    eps = 0.3
    x = np.linspace(-0.29, 0.29, 31)
    h = 1e-6
    fd = (smeared_heaviside(x + h, eps) - smeared_heaviside(x - h, eps)) / (2 * h)
    assert np.allclose(fd, smeared_heaviside_derivative(x, eps), rtol=1e-6, atol=1e-9)


def test_curvature_constant_tet_contributes_zero():
    mesh = unit_volume_tet()
    cfg = EnergyConfig(eps_H=0.1)
    for phi in (np.full(4, 0.5), np.array([0.2, 0.3, 0.5, 0.9]), -np.array([0.2, 0.3, 0.5, 0.9])):
        r = mean_curvature_energy(mesh, phi, cfg)
        assert r.value == 0.0
        assert np.all(r.grad_phi == 0)


def test_curvature_sphere_area():
    s = Sphere((0.0, 0.0, 0.0), 1.0)
    mesh = build_band_tetmesh(s, 0.25, 0.3)
    r = mean_curvature_energy(mesh, sample_exact_sdf(s, mesh), EnergyConfig())
    assert abs(r.value / (4 * math.pi) - 1.0) <= 0.15


def test_curvature_fd(small_band):
    rng = np.random.default_rng(5)
    phi = random_smooth_field(small_band, rng, scale=0.5)
    cfg = EnergyConfig().resolved(small_band)
    loss = energy_closure(lambda p: mean_curvature_energy(small_band, p, cfg))
    idx = sample_support(loss(phi)[1], 50, rng)
    err, _, _ = fd_gradient_check(loss, phi, idx, h=1e-6)
    assert err <= 1e-4


def test_curvature_descent_decreases():
    s = Sphere((0.0, 0.0, 0.0), 1.0)
    mesh = build_band_tetmesh(s, 0.25, 0.3)
    cfg = EnergyConfig().resolved(mesh)
    phi = sample_exact_sdf(s, mesh)
    values = []
    for _ in range(51):
        r = mean_curvature_energy(mesh, phi, cfg)
        values.append(r.value)
        phi = phi - 0.5 * r.grad_phi
    assert np.all(np.diff(values) < 0)


# ---------------------------------------------------------------------------
# silhouettes
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def silhouette_scene():
    s = Sphere((0.0, 0.0, 0.0), 1.0)
    mesh = build_band_tetmesh(s, 0.14, 0.3)
    cam = Camera.look_at((0.0, 0.0, 4.0), near=0.5, far=10.0, width=64, height=64)

    def field(r):
        return clamp_small_phi(sample_exact_sdf(Sphere((0.0, 0.0, 0.0), r), mesh), EPS_GRAD)

    def render(phi):
        tri = marching_tetrahedra(mesh, phi)
        return tri, rasterize(tri, cam)

    return mesh, cam, field, render


def _sets(scene, r_pred, r_target):
    mesh, cam, field, render = scene
    phi = field(r_pred)
    tri, pred = render(phi)
    _, target = render(field(r_target))
    eps_s = EnergyConfig().resolved(mesh).eps_s
    return phi, pred, target, silhouette_sets(pred, target, mesh, phi, tri, cam, eps_s)


def test_silhouette_equal_empty(silhouette_scene):
    _, _, _, (shrink, expand) = _sets(silhouette_scene, 1.0, 1.0)
    assert len(shrink) == 0 and len(expand) == 0


def test_silhouette_larger_shrinks_only(silhouette_scene):
    phi, pred, target, (shrink, expand) = _sets(silhouette_scene, 1.1, 0.9)
    # brute-force classification: some pixels covered by pred only, none by target only
    assert (pred.mask & ~target.mask).any()
    assert not (target.mask & ~pred.mask).any()
    assert len(shrink) > 0 and len(expand) == 0
    assert np.all(phi[shrink] < 0)


def test_silhouette_smaller_expands_only(silhouette_scene):
    phi, pred, target, (shrink, expand) = _sets(silhouette_scene, 0.9, 1.1)
    assert (target.mask & ~pred.mask).any()
    assert not (pred.mask & ~target.mask).any()
    assert len(shrink) == 0 and len(expand) > 0
    assert np.all(phi[expand] > 0)


def test_silhouette_requires_provenance(silhouette_scene):
    mesh, cam, field, render = silhouette_scene
    phi = field(1.0)
    tri, pred = render(phi)
    stripped = NormalMap(pred.normals, pred.mask, pred.depth)
    with pytest.raises(ValueError):
        silhouette_sets(stripped, pred, mesh, phi, tri, cam, 0.05)


# ---------------------------------------------------------------------------
# shrink / expand
# ---------------------------------------------------------------------------


def test_shrink_expand_empty():
    phi = np.array([0.1, -0.2])
    assert shrink_loss(phi, [], 5e-3).value == 0.0
    assert expand_loss(phi, [], 5e-3).value == 0.0


def test_shrink_example():
    r = shrink_loss(np.array([-0.01]), [0], 5e-3)
    assert r.value == pytest.approx(1.125e-4, rel=1e-12)
    assert r.grad_phi[0] == pytest.approx(-0.015, rel=1e-12)


def test_expand_example():
    r = expand_loss(np.array([0.02]), [0], 5e-3)
    assert r.value == pytest.approx(3.125e-4, rel=1e-12)
    assert r.grad_phi[0] == pytest.approx(0.025, rel=1e-12)


def test_shrink_expand_support_and_fd(rng):
    phi = rng.normal(size=40)
    U = np.sort(rng.choice(40, 12, replace=False))
    for fn in (shrink_loss, expand_loss):
        r = fn(phi, U, 0.01)
        off = np.setdiff1d(np.arange(40), U)
        assert np.all(r.grad_phi[off] == 0)
        assert np.all(r.grad_phi[U] != 0)
        err, _, _ = fd_gradient_check(energy_closure(lambda p: fn(p, U, 0.01)), phi, U, h=1e-6)
        assert err <= 1e-6


# ---------------------------------------------------------------------------
# multiview
# ---------------------------------------------------------------------------


def test_multiview_identical_zero():
    f = np.linspace(-1, 1, 30)
    r = multiview_consistency([f, f.copy(), f.copy()], 0)
    assert r.value == pytest.approx(0.0, abs=1e-5)
    assert np.all(r.grad_phi == 0)


def test_multiview_constant_offset():
    V = 49
    f = np.zeros(V)
    r = multiview_consistency([f, f + 1.0], 0)
    assert r.value == pytest.approx(math.sqrt(V), rel=1e-12)


def test_multiview_brute_force(rng):
    fs = [rng.normal(size=25) for _ in range(3)]
    for ref in range(3):
        expected = sum(np.linalg.norm(fs[ref] - fs[c]) for c in range(3) if c != ref)
        assert multiview_consistency(fs, ref).value == pytest.approx(expected, rel=1e-12)


def test_multiview_fd(rng):
    fs = [rng.normal(size=25) for _ in range(3)]

    def loss(p):
        r = multiview_consistency([p, fs[1], fs[2]], 0)
        return r.value, r.grad_phi

    err, _, _ = fd_gradient_check(loss, fs[0], np.arange(25), h=1e-6)
    assert err <= 1e-4


def test_multiview_length_mismatch():
    with pytest.raises(ValueError):
        multiview_consistency([np.zeros(3), np.zeros(4)], 0)


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


def test_config_resolves_bandwidths(small_band):
    cfg = EnergyConfig().resolved(small_band)
    h = small_band.avg_edge_length
    assert cfg.eps_H == pytest.approx(1.5 * h)
    assert cfg.eps_s == pytest.approx(0.5 * h)


def test_config_validation():
    with pytest.raises(ValueError):
        EnergyConfig.from_dict({"eps_grad": -1.0})
    with pytest.raises(ValueError):
        EnergyConfig.from_dict({"weights": {"normal": float("nan")}})
    with pytest.raises(ValueError):
        EnergyConfig.from_dict({"bogus": 1})
    cfg = EnergyConfig.from_dict({"weights": {"eikonal": 3.0}})
    assert cfg.weights["eikonal"] == 3.0
    assert cfg.weights["normal"] == EnergyConfig().weights["normal"]
