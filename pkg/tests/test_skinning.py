import json

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from tetsdf.isosurface import EPS_GRAD, clamp_small_phi, marching_tetrahedra, mt_vertex_jacobian
from tetsdf.mesh import Capsule, CapsuleUnion, build_band_tetmesh, sample_exact_sdf
from tetsdf.skinning import (
    Pose, Skeleton, compute_skin_weights, interpolate_tri_weights, load_pose, load_skeleton,
    march_skinned, pose_to_dict, rigid, skeleton_to_dict, skin_points, skin_pose_vjp,
    skin_tet_vertices, skin_triangle_mesh, skinned_vertex_jacobian, triangle_vertex_weights,
)


def one_joint():
    return Skeleton(("root",), np.array([-1]), np.array([rigid()]),
                    np.array([[[0, 0, -0.3], [0, 0, 0.3]]], dtype=float))


def two_bones():
    """Upper bone along +x from the origin, lower bone from (0.6, 0, 0) to (1.2, 0, 0)."""
    rest = np.array([rigid(), rigid(translation=(0.6, 0, 0))])
    seg = np.array([[[0, 0, 0], [0.6, 0, 0]], [[0.6, 0, 0], [1.2, 0, 0]]], dtype=float)
    return Skeleton(("upper", "lower"), np.array([-1, 0]), rest, seg)


def arm_scene():
    skel = two_bones()
    shape = CapsuleUnion((Capsule((0, 0, 0), (0.6, 0, 0), 0.15), Capsule((0.6, 0, 0), (1.2, 0, 0), 0.15)))
    mesh = build_band_tetmesh(shape, 0.1, 0.1)
    phi = clamp_small_phi(sample_exact_sdf(shape, mesh), EPS_GRAD)
    return skel, mesh, phi, compute_skin_weights(mesh, skel)


def random_pose(skel, rng, max_deg=45.0):
    out = []
    for r in skel.rest:
        rot = Rotation.from_rotvec(rng.normal(size=3) * np.radians(max_deg) / np.sqrt(3)).as_matrix()
        if np.degrees(Rotation.from_matrix(rot).magnitude()) > max_deg:
            rot = np.eye(3)
        out.append(rigid(rot @ r[:, :3], r[:, 3] + rng.normal(scale=0.05, size=3)))
    return Pose(np.array(out))


def bend(skel, deg=40.0):
    rot = Rotation.from_euler("z", deg, degrees=True).as_matrix()
    lower = rigid(rot, skel.rest[1][:, 3])
    return Pose(np.array([skel.rest[0], lower]))


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------


def test_single_joint_weights_are_one():
    w = compute_skin_weights(np.random.default_rng(0).normal(size=(20, 3)), one_joint())
    assert np.array_equal(w, np.ones((20, 1)))


def test_vertex_on_bone_dominates():
    rest = np.array([rigid(), rigid(translation=(10, 0, 0))])
    seg = np.array([[[0, 0, 0], [1, 0, 0]], [[10, 0, 0], [11, 0, 0]]], dtype=float)
    skel = Skeleton(("a", "b"), np.array([-1, -1]), rest, seg)
    w = compute_skin_weights(np.array([[0.5, 0.0, 0.0], [0.5, 0.05, 0.0]]), skel)
    assert np.all(w[:, 0] >= 0.99)


def test_midpoint_between_parallel_bones():
    rest = np.array([rigid(), rigid()])
    seg = np.array([[[0, -1, 0], [1, -1, 0]], [[0, 1, 0], [1, 1, 0]]], dtype=float)
    skel = Skeleton(("a", "b"), np.array([-1, -1]), rest, seg)
    w = compute_skin_weights(np.array([[0.5, 0.0, 0.0]]), skel)
    assert np.allclose(w, [[0.5, 0.5]], atol=1e-15)


def test_partition_of_unity():
    skel, mesh, _, w = arm_scene()
    assert np.all(w >= 0)
    assert np.allclose(w.sum(axis=1), 1.0, atol=1e-9)


def test_skeleton_validation():
    with pytest.raises(ValueError):
        Skeleton((), np.zeros(0, dtype=int), np.zeros((0, 3, 4)), np.zeros((0, 2, 3)))
    with pytest.raises(ValueError):
        Pose(np.array([rigid(2 * np.eye(3))]))


# ---------------------------------------------------------------------------
# tet-vertex skinning
# ---------------------------------------------------------------------------


def test_identity_pose_exact():
    skel, mesh, _, w = arm_scene()
    assert np.array_equal(skin_tet_vertices(mesh, w, skel, skel.rest_pose()), mesh.vertices)


def test_common_translation():
    skel, mesh, _, w = arm_scene()
    t = np.array([0.3, -0.2, 0.7])
    pose = Pose(np.array([rigid(r[:, :3], r[:, 3] + t) for r in skel.rest]))
    assert np.allclose(skin_tet_vertices(mesh, w, skel, pose), mesh.vertices + t, atol=1e-14)


def test_single_joint_rotation():
    skel = one_joint()
    rot = Rotation.from_euler("z", 90, degrees=True).as_matrix()
    out = skin_points(np.array([[1.0, 0.0, 0.0]]), np.ones((1, 1)), skel, Pose(np.array([rigid(rot)])))
    assert np.allclose(out, [[0.0, 1.0, 0.0]], atol=1e-15)


def test_pose_vjp_matches_fd():
    skel, mesh, _, w = arm_scene()
    rng = np.random.default_rng(1)
    pts = mesh.vertices[:50]
    pose = random_pose(skel, rng)
    g = rng.normal(size=(50, 3))
    an = skin_pose_vjp(pts, w[:50], skel, g)
    h = 1e-6
    for j in range(skel.n_joints):
        for a in range(3):
            for b in range(4):
                tp = pose.transforms.copy()
                tp[j, a, b] += h
                tm = pose.transforms.copy()
                tm[j, a, b] -= h
                # bypass the orthonormality check for the perturbed matrices
                fp = np.sum(g * _skin_raw(pts, w[:50], skel, tp))
                fm = np.sum(g * _skin_raw(pts, w[:50], skel, tm))
                assert (fp - fm) / (2 * h) == pytest.approx(an[j, a, b], rel=1e-6, abs=1e-8)


def _skin_raw(points, weights, skel, transforms):
    from tetsdf.skinning import compose, invert_rigid
    m = np.stack([compose(t, invert_rigid(b)) for t, b in zip(transforms, skel.rest)])
    blended = np.einsum("nj,jab->nab", weights, m)
    return np.einsum("nab,nb->na", blended[:, :, :3], points) + blended[:, :, 3]


# ---------------------------------------------------------------------------
# triangle weights
# ---------------------------------------------------------------------------


def test_interpolated_weights_midpoint():
    w = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert np.allclose(interpolate_tri_weights([-1.0, 1.0], (0, 1), w), [0.5, 0.5])


def test_interpolated_weights_equal_ends():
    w = np.array([[0.3, 0.7], [0.3, 0.7]])
    for phi in ([-1.0, 1.0], [-0.1, 5.0]):
        assert np.allclose(interpolate_tri_weights(phi, (0, 1), w), [0.3, 0.7])


def test_interpolated_weights_quarter():
    w = np.array([[0.9, 0.1], [0.2, 0.8]])
    out = interpolate_tri_weights([-1.0, 3.0], (0, 1), w)
    assert np.allclose(out, 0.75 * w[0] + 0.25 * w[1])
    assert out.sum() == pytest.approx(1.0)


def test_triangle_weights_partition_of_unity():
    skel, mesh, phi, w = arm_scene()
    tri = marching_tetrahedra(mesh, phi)
    wt = triangle_vertex_weights(tri, phi, w)
    assert np.allclose(wt.sum(axis=1), 1.0, atol=1e-9)


# ---------------------------------------------------------------------------
# both orderings
# ---------------------------------------------------------------------------


def test_option1_identity():
    skel, mesh, phi, w = arm_scene()
    tri = marching_tetrahedra(mesh, phi)
    out = skin_triangle_mesh(tri, phi, w, skel, skel.rest_pose())
    assert np.allclose(out.vertices, tri.vertices, atol=1e-15)
    assert np.array_equal(out.triangles, tri.triangles)


def test_option1_single_joint_is_rigid():
    skel = one_joint()
    shape = Capsule((0, 0, -0.3), (0, 0, 0.3), 0.2)
    mesh = build_band_tetmesh(shape, 0.1, 0.1)
    phi = clamp_small_phi(sample_exact_sdf(shape, mesh), EPS_GRAD)
    w = compute_skin_weights(mesh, skel)
    tri = marching_tetrahedra(mesh, phi)
    rot = Rotation.from_euler("xyz", [20, -35, 50], degrees=True).as_matrix()
    pose = Pose(np.array([rigid(rot, (0.1, 0.2, -0.3))]))
    out = skin_triangle_mesh(tri, phi, w, skel, pose)
    assert np.allclose(out.vertices, tri.vertices @ rot.T + [0.1, 0.2, -0.3], atol=1e-14)
    opt2 = march_skinned(mesh, phi, w, skel, pose)
    assert np.allclose(opt2.vertices, out.vertices, atol=1e-14)


def test_option2_identity():
    skel, mesh, phi, w = arm_scene()
    a = march_skinned(mesh, phi, w, skel, skel.rest_pose())
    b = marching_tetrahedra(mesh, phi)
    assert a.vertices.tobytes() == b.vertices.tobytes()
    assert np.array_equal(a.triangles, b.triangles)


def test_option2_rigid_global_pose():
    skel, mesh, phi, w = arm_scene()
    rot = Rotation.from_euler("y", 30, degrees=True).as_matrix()
    t = np.array([0.2, 0.0, -0.1])
    pose = Pose(np.array([rigid(rot @ r[:, :3], rot @ r[:, 3] + t) for r in skel.rest]))
    out = march_skinned(mesh, phi, w, skel, pose)
    rest = marching_tetrahedra(mesh, phi)
    assert np.allclose(out.vertices, rest.vertices @ rot.T + t, atol=1e-13)


def test_orderings_agree_where_edge_weights_match():
    skel, mesh, phi, w = arm_scene()
    tri = marching_tetrahedra(mesh, phi)
    pose = bend(skel)
    o1 = skin_triangle_mesh(tri, phi, w, skel, pose).vertices
    o2 = march_skinned(mesh, phi, w, skel, pose).vertices
    k1, k2 = tri.endpoints[:, 0], tri.endpoints[:, 1]
    same = np.all(np.abs(w[k1] - w[k2]) < 1e-12, axis=1)
    assert np.allclose(o1[same], o2[same], atol=1e-12)


def test_orderings_difference_bounded():
    skel, mesh, phi, w = arm_scene()
    tri = marching_tetrahedra(mesh, phi)
    pose = bend(skel, 60.0)
    o1 = skin_triangle_mesh(tri, phi, w, skel, pose).vertices
    o2 = march_skinned(mesh, phi, w, skel, pose).vertices
    k1, k2 = tri.endpoints[:, 0], tri.endpoints[:, 1]
    spread = np.abs(w[k1] - w[k2]).max(axis=1)
    edge_len = np.linalg.norm(mesh.vertices[k1] - mesh.vertices[k2], axis=1)
    diff = np.linalg.norm(o1 - o2, axis=1)
    # articulated pose: the two orderings differ somewhere
    assert diff.max() > 1e-6
    # the per-joint displacement difference is at most |M_a - M_b| over the
    # edge, scaled by the weight spread; rotations are bounded by 2 in norm
    assert np.all(diff <= 2.0 * spread * edge_len + 1e-12)


# ---------------------------------------------------------------------------
# Jacobians
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("order", ["march_then_skin", "skin_then_march"])
def test_skinned_jacobian_identity_pose(order):
    skel, mesh, phi, w = arm_scene()
    tri = marching_tetrahedra(mesh, phi)
    J = skinned_vertex_jacobian(mesh, phi, tri, w, skel, skel.rest_pose(), order)
    J0 = mt_vertex_jacobian(mesh, phi, tri)
    assert np.array_equal(J.cols, J0.cols)
    assert np.allclose(J.values, J0.values, atol=1e-12)


@pytest.mark.parametrize("order", ["march_then_skin", "skin_then_march"])
def test_skinned_jacobian_single_joint_rotation(order):
    skel = one_joint()
    shape = Capsule((0, 0, -0.3), (0, 0, 0.3), 0.2)
    mesh = build_band_tetmesh(shape, 0.1, 0.1)
    phi = clamp_small_phi(sample_exact_sdf(shape, mesh), EPS_GRAD)
    w = compute_skin_weights(mesh, skel)
    tri = marching_tetrahedra(mesh, phi)
    Q = Rotation.from_euler("xyz", [10, 70, -25], degrees=True).as_matrix()
    J = skinned_vertex_jacobian(mesh, phi, tri, w, skel, Pose(np.array([rigid(Q, (1, 2, 3))])), order)
    J0 = mt_vertex_jacobian(mesh, phi, tri)
    assert np.allclose(J.values, J0.values @ Q.T, atol=1e-12)


def _skinned_positions(mesh, phi, w, skel, pose, order):
    tri = marching_tetrahedra(mesh, phi)
    if order == "march_then_skin":
        return skin_triangle_mesh(tri, phi, w, skel, pose).vertices
    return march_skinned(mesh, phi, w, skel, pose).vertices


@pytest.mark.parametrize("order", ["march_then_skin", "skin_then_march"])
def test_skinned_jacobian_fd_random_poses(order):
    skel, mesh, phi, w = arm_scene()
    rng = np.random.default_rng(11)
    tri = marching_tetrahedra(mesh, phi)
    h = 1e-6
    worst = 0.0
    for _ in range(3):
        pose = random_pose(skel, rng)
        J = skinned_vertex_jacobian(mesh, phi, tri, w, skel, pose, order)
        entry = {(r, c): v for r, c, v in zip(J.rows, J.cols, J.values)}
        ks = rng.choice(np.unique(tri.endpoints), 20, replace=False)
        for k in ks:
            p = phi.copy()
            p[k] += h
            vp = _skinned_positions(mesh, p, w, skel, pose, order)
            p[k] -= 2 * h
            vm = _skinned_positions(mesh, p, w, skel, pose, order)
            fd = (vp - vm) / (2 * h)
            for r in np.flatnonzero(np.any(tri.endpoints == k, axis=1)):
                an = entry[(r, k)]
                worst = max(worst, np.linalg.norm(fd[r] - an) / max(np.linalg.norm(an), 1e-12))
    assert worst <= 1e-4


def test_unknown_order_rejected():
    skel, mesh, phi, w = arm_scene()
    tri = marching_tetrahedra(mesh, phi)
    with pytest.raises(ValueError):
        skinned_vertex_jacobian(mesh, phi, tri, w, skel, skel.rest_pose(), "sideways")


# ---------------------------------------------------------------------------
# JSON
# ---------------------------------------------------------------------------


def test_json_roundtrip(tmp_path):
    skel = two_bones()
    pose = bend(skel, 25.0)
    (tmp_path / "skel.json").write_text(json.dumps(skeleton_to_dict(skel)))
    (tmp_path / "pose.json").write_text(json.dumps(pose_to_dict(pose, skel)))
    s2 = load_skeleton(tmp_path / "skel.json")
    p2 = load_pose(tmp_path / "pose.json", s2)
    assert s2.names == skel.names
    assert np.array_equal(s2.parents, skel.parents)
    assert np.allclose(s2.rest, skel.rest, atol=1e-15)
    assert np.allclose(p2.transforms, pose.transforms, atol=1e-15)
