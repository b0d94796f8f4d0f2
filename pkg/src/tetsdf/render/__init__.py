from .backprop import backprop_pixels, vertex_normals_vjp
from .camera import BehindCameraError, Camera, load_camera, orbit_cameras, project_to_screen, save_camera
from .imageio import decode_png, encode_png, load_target, read_depth_png, write_depth_png
from .oracle import hit_points, raytrace_oracle
from .raster import DegenerateNormalError, NormalMap, rasterize, set_threads, vertex_normals

__all__ = [
    "BehindCameraError", "Camera", "DegenerateNormalError", "NormalMap",
    "backprop_pixels", "decode_png", "encode_png", "hit_points", "load_camera", "load_target",
    "orbit_cameras", "project_to_screen", "rasterize", "raytrace_oracle", "read_depth_png",
    "save_camera", "set_threads", "vertex_normals", "vertex_normals_vjp", "write_depth_png",
]
