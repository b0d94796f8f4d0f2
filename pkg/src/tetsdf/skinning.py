"""Linear blend skinning of the tet mesh and of the extracted triangle mesh.

Two orderings are supported:

* march then skin (:func:`skin_triangle_mesh`): triangle vertices carry
  weights interpolated from their parent edge with the zero-crossing
  coefficients, so both the weights and the rest positions depend on phi;
* skin then march (:func:`march_skinned`): the tet vertices are skinned and
  Marching Tetrahedra runs on the deformed positions.

Joint transforms are 3x4 world-from-joint matrices. The rest-space position of
a point for joint ``j`` is ``B_j^-1 x`` where ``B_j`` is the joint's rest frame,
so skinning applies ``M_j = T_j B_j^-1`` blended by the weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .isosurface import (EPS_CLAMP, EPS_GRAD, SparseJacobian, TriMesh, check_gradient_clamp,
                         edge_lambda_derivatives, marching_tetrahedra, mt_vertex_jacobian)
from .mesh import TetMesh, check_field


def rigid(rotation=None, translation=None) -> np.ndarray:
    """3x4 transform from a 3x3 rotation and a translation."""
    m = np.zeros((3, 4))
    m[:, :3] = np.eye(3) if rotation is None else rotation
    if translation is not None:
        m[:, 3] = translation
    return m


def invert_rigid(m) -> np.ndarray:
    r = m[:, :3]
    return rigid(r.T, -r.T @ m[:, 3])


def compose(a, b) -> np.ndarray:
    """``a @ b`` for 3x4 rigid transforms."""
    return rigid(a[:, :3] @ b[:, :3], a[:, :3] @ b[:, 3] + a[:, 3])


def apply(m, points) -> np.ndarray:
    return np.asarray(points) @ m[:, :3].T + m[:, 3]


@dataclass(frozen=True)
class Skeleton:
    """Joint rest frames plus one bone segment per joint (used for weights)."""

    names: tuple[str, ...]
    parents: np.ndarray  # (J,) parent index, -1 for roots
    rest: np.ndarray  # (J, 3, 4) world-from-joint rest frames
    segments: np.ndarray  # (J, 2, 3) bone segment endpoints in the rest pose

    def __post_init__(self):
        parents = np.asarray(self.parents)
        if len(parents) == 0:
            raise ValueError("skeleton has no joints")
        for j, p in enumerate(parents):
            if p >= j:
                raise ValueError("joints must be listed parents-first (tree order)")
        for r in self.rest:
            if abs(np.linalg.det(r[:, :3])) < 1e-12:
                raise ValueError("rest frame is not invertible")

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    def rest_pose(self) -> "Pose":
        return Pose(np.array(self.rest, dtype=np.float64))


@dataclass(frozen=True)
class Pose:
    transforms: np.ndarray  # (J, 3, 4) world-from-joint T_j(theta)

    def __post_init__(self):
        r = np.asarray(self.transforms)[:, :, :3]
        err = np.abs(np.einsum("jik,jil->jkl", r, r) - np.eye(3)).max()
        if err > 1e-9:
            raise ValueError("pose rotation blocks are not orthonormal")


def blend_matrices(skel: Skeleton, pose: Pose) -> np.ndarray:
    """``M_j = T_j B_j^-1`` for every joint, shape (J, 3, 4).

    A joint posed exactly at its rest frame gets an exact identity so the rest
    pose reproduces rest positions bit for bit.
    """
    return np.stack([rigid() if np.array_equal(t, b) else compose(t, invert_rigid(b))
                     for t, b in zip(pose.transforms, skel.rest)])


def _segment_distance(points, a, b):
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(points - a, axis=1)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    return np.linalg.norm(points - (a + t[:, None] * ab), axis=1)


def compute_skin_weights(mesh_or_points, skel: Skeleton, softening: float = 1e-8) -> np.ndarray:
    """Inverse-square distance-to-bone weights, normalized per vertex."""
    pts = mesh_or_points.vertices if isinstance(mesh_or_points, TetMesh) else np.asarray(mesh_or_points)
    d2 = np.stack([_segment_distance(pts, s[0], s[1]) ** 2 for s in skel.segments], axis=1)
    k = 1.0 / (d2 + softening)
    total = k.sum(axis=1, keepdims=True)
    bad = ~np.isfinite(total[:, 0]) | (total[:, 0] <= 0)
    w = k / np.where(bad[:, None], 1.0, total)
    w[bad] = 1.0 / skel.n_joints
    return w


def skin_points(points, weights, skel: Skeleton, pose: Pose) -> np.ndarray:
    """``sum_j w_j T_j B_j^-1 x`` for each point."""
    m = blend_matrices(skel, pose)
    x = np.asarray(points, dtype=np.float64)
    if np.array_equal(m, np.broadcast_to(rigid(), m.shape)):
        return x.copy()
    blended = np.einsum("nj,jab->nab", np.asarray(weights), m)  # (N, 3, 4)
    return np.einsum("nab,nb->na", blended[:, :, :3], x) + blended[:, :, 3]


def skin_tet_vertices(mesh: TetMesh, weights, skel: Skeleton, pose: Pose) -> np.ndarray:
    return skin_points(mesh.vertices, weights, skel, pose)


def skin_pose_vjp(points, weights, skel: Skeleton, grad_out) -> np.ndarray:
    """Gradient with respect to each joint transform T_j (J, 3, 4) given
    ``grad_out`` = dL/d(skinned points)."""
    inv = np.stack([invert_rigid(b) for b in skel.rest])
    x = np.asarray(points, dtype=np.float64)
    local = np.einsum("jab,nb->nja", inv[:, :, :3], x) + inv[None, :, :, 3]  # (N, J, 3)
    hom = np.concatenate([local, np.ones(local.shape[:2] + (1,))], axis=2)  # (N, J, 4)
    g = np.asarray(grad_out, dtype=np.float64)
    return np.einsum("nj,na,njb->jab", np.asarray(weights), g, hom)


def interpolate_tri_weights(phi, edge, weights) -> np.ndarray:
    """Per-joint weights at the zero crossing of ``edge = (k1, k2)``."""
    k1, k2 = edge
    p1, p2 = float(phi[k1]), float(phi[k2])
    d = p1 - p2
    w = np.asarray(weights)
    return (-p2 / d) * w[k1] + (p1 / d) * w[k2]


def triangle_vertex_weights(tri: TriMesh, phi, weights) -> np.ndarray:
    """Vectorised :func:`interpolate_tri_weights` over all triangle vertices."""
    if not tri.has_provenance:
        raise ValueError("triangle mesh has no tet-edge provenance")
    k1, k2 = tri.endpoints[:, 0], tri.endpoints[:, 1]
    p1, p2 = phi[k1], phi[k2]
    d = (p1 - p2)[:, None]
    w = np.asarray(weights)
    return (-p2[:, None] / d) * w[k1] + (p1[:, None] / d) * w[k2]


def skin_triangle_mesh(tri: TriMesh, phi, weights, skel: Skeleton, pose: Pose) -> TriMesh:
    """March-then-skin: blend each triangle vertex with its interpolated weights."""
    if not tri.has_provenance:
        raise ValueError("triangle mesh has no tet-edge provenance")
    w = triangle_vertex_weights(tri, np.asarray(phi, dtype=np.float64), weights)
    return tri.with_vertices(skin_points(tri.vertices, w, skel, pose))


def march_skinned(mesh: TetMesh, phi, weights, skel: Skeleton, pose: Pose,
                  eps: float = EPS_CLAMP) -> TriMesh:
    """Skin-then-march: Marching Tetrahedra on the deformed tet vertices."""
    deformed = skin_tet_vertices(mesh, weights, skel, pose)
    return marching_tetrahedra(mesh, phi, eps=eps, positions=deformed)


def skinned_vertex_jacobian(mesh: TetMesh, phi, tri: TriMesh, weights, skel: Skeleton,
                            pose: Pose, order: str = "march_then_skin",
                            eps_grad: float = EPS_GRAD) -> SparseJacobian:
    """``d(deformed v_i)/d phi`` for either ordering.

    For ``"march_then_skin"`` the product rule gives a weight term and a
    position term: ``sum_j dw_ij M_j v_i + sum_j w_ij A_j dv_i`` where ``A_j``
    is the rotation block of ``M_j``. For ``"skin_then_march"`` the crossing
    Jacobian is evaluated at the skinned tet vertices.
    """
    phi = check_field(mesh, phi)
    if order == "skin_then_march":
        deformed = skin_tet_vertices(mesh, weights, skel, pose)
        return mt_vertex_jacobian(mesh, phi, tri, eps_grad=eps_grad, positions=deformed)
    if order != "march_then_skin":
        raise ValueError(f"unknown skinning order {order!r}")
    if not tri.has_provenance:
        raise ValueError("triangle mesh has no tet-edge provenance")

    k1, k2 = tri.endpoints[:, 0], tri.endpoints[:, 1]
    p1, p2 = phi[k1], phi[k2]
    check_gradient_clamp(p1, p2, eps_grad)
    # rest-space crossing positions (phi dependent, independent of the pose)
    d = p1 - p2
    l1, l2 = -p2 / d, p1 / d
    u = mesh.vertices
    v = l1[:, None] * u[k1] + l2[:, None] * u[k2]
    w = np.asarray(weights)
    wi = l1[:, None] * w[k1] + l2[:, None] * w[k2]

    m = blend_matrices(skel, pose)
    mv = np.einsum("jab,nb->nja", m[:, :, :3], v) + m[None, :, :, 3]  # (N, J, 3)
    a_blend = np.einsum("nj,jab->nab", wi, m[:, :, :3])  # (N, 3, 3)
    dl1_dp1, dl1_dp2, dl2_dp1, dl2_dp2 = edge_lambda_derivatives(p1, p2)

    cols_out = []
    for dl1, dl2 in ((dl1_dp1, dl2_dp1), (dl1_dp2, dl2_dp2)):
        dv = dl1[:, None] * u[k1] + dl2[:, None] * u[k2]
        dw = dl1[:, None] * w[k1] + dl2[:, None] * w[k2]
        term_w = np.einsum("nj,nja->na", dw, mv)
        term_v = np.einsum("nab,nb->na", a_blend, dv)
        cols_out.append(term_w + term_v)
    n = tri.n_vertices
    rows = np.repeat(np.arange(n), 2)
    cols = np.stack([k1, k2], axis=1).ravel()
    values = np.stack(cols_out, axis=1).reshape(-1, 3)
    return SparseJacobian(rows, cols, values, n, mesh.n_vertices)


# ---------------------------------------------------------------------------
# JSON
# ---------------------------------------------------------------------------
# quaternions are stored scalar-last (x, y, z, w)


def _quat_to_matrix(q) -> np.ndarray:
    return Rotation.from_quat(np.asarray(q, dtype=np.float64)).as_matrix()


def _matrix_to_quat(r) -> list[float]:
    return Rotation.from_matrix(r).as_quat().tolist()


def skeleton_from_dict(data: dict) -> Skeleton:
    joints = data["joints"]
    names = tuple(j["name"] for j in joints)
    index = {n: i for i, n in enumerate(names)}
    parents, rest, segments = [], [], []
    for j in joints:
        parent = j.get("parent")
        parents.append(-1 if parent is None else index[parent])
        rest.append(rigid(_quat_to_matrix(j.get("rotation", (0, 0, 0, 1))), j.get("translation", (0, 0, 0))))
        seg = j.get("segment")
        if seg is None:
            t = np.asarray(j.get("translation", (0, 0, 0)), dtype=np.float64)
            seg = (t, t)
        segments.append(np.asarray(seg, dtype=np.float64))
    return Skeleton(names, np.array(parents), np.array(rest), np.array(segments))


def skeleton_to_dict(skel: Skeleton) -> dict:
    joints = []
    for j, name in enumerate(skel.names):
        p = skel.parents[j]
        joints.append({
            "name": name,
            "parent": None if p < 0 else skel.names[p],
            "rotation": _matrix_to_quat(skel.rest[j][:, :3]),
            "translation": skel.rest[j][:, 3].tolist(),
            "segment": skel.segments[j].tolist(),
        })
    return {"joints": joints}


def pose_from_dict(data: dict, skel: Skeleton) -> Pose:
    by_name = {p["name"]: p for p in data["joints"]}
    transforms = []
    for j, name in enumerate(skel.names):
        if name in by_name:
            p = by_name[name]
            transforms.append(rigid(_quat_to_matrix(p["rotation"]), p["translation"]))
        else:
            transforms.append(np.array(skel.rest[j]))
    return Pose(np.array(transforms))


def pose_to_dict(pose: Pose, skel: Skeleton) -> dict:
    return {"joints": [{"name": n, "rotation": _matrix_to_quat(t[:, :3]), "translation": t[:, 3].tolist()}
                       for n, t in zip(skel.names, pose.transforms)]}


def load_skeleton(path) -> Skeleton:
    with open(path) as f:
        return skeleton_from_dict(json.load(f))


def load_pose(path, skel: Skeleton) -> Pose:
    with open(path) as f:
        return pose_from_dict(json.load(f), skel)
