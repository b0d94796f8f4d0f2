"""Differentiable Marching Tetrahedra, normal-map rendering and SDF fitting."""

import os

# the TBB layer shipped with some numba wheels is too old and warns on import
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

from .isosurface import TriMesh, clamp_small_phi, marching_tetrahedra, mt_vertex_jacobian  # noqa: E402
from .mesh import (Capsule, CapsuleUnion, Sphere, TetMesh, build_band_tetmesh,  # noqa: E402
                   sample_exact_sdf)

__version__ = "0.1.0"

__all__ = [
    "Capsule", "CapsuleUnion", "Sphere", "TetMesh", "TriMesh", "build_band_tetmesh",
    "clamp_small_phi", "marching_tetrahedra", "mt_vertex_jacobian", "sample_exact_sdf",
]
