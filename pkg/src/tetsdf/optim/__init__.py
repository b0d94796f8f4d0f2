from .fit import (
    DivergenceError, FitConfig, FitReport, View, evaluate_views, fit_sdf, scene_loss, sphere_target,
    sphere_surface_distance,
)
from .gradcheck import fd_gradient_check, sample_support
from .icp import DegeneratePointSetError, camera_after_mesh_motion, icp_rigid_align, refine_cameras
from .metrics import MISMATCH_DEPTH, e_depth, e_normal, silhouette_mismatch
from .prune import prune_inconsistent_triangles, triangle_angular_errors

__all__ = [
    "DegeneratePointSetError", "DivergenceError", "FitConfig", "FitReport", "MISMATCH_DEPTH", "View",
    "camera_after_mesh_motion", "e_depth", "e_normal", "evaluate_views", "fd_gradient_check",
    "fit_sdf", "icp_rigid_align", "prune_inconsistent_triangles", "refine_cameras", "sample_support",
    "scene_loss", "silhouette_mismatch", "sphere_target", "sphere_surface_distance",
    "triangle_angular_errors",
]
