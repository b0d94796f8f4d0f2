"""Command-line driver: ``tetsdf <command> ...``.

Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import plotting
from .config import ConfigError, load_scene
from .energy import EnergyConfig, eikonal_energy, mean_curvature_energy
from .isosurface import EPS_GRAD, GradientClampError, clamp_small_phi, marching_tetrahedra, read_obj, write_obj
from .mesh import (
    EmptyDomainError, Sphere, build_band_tetmesh, read_field, read_tetmesh, sample_exact_sdf,
    write_field, write_tetmesh,
)
from .optim.fit import DivergenceError, View, fit_sdf
from .optim.gradcheck import fd_gradient_check, normal_loss_closure, sample_support
from .optim.icp import refine_cameras
from .optim.metrics import e_depth, e_normal
from .optim.prune import prune_inconsistent_triangles
from .render.camera import Camera, load_camera, save_camera
from .render.imageio import decode_png, encode_png, load_target, read_depth_png, write_depth_png
from .render.oracle import raytrace_oracle
from .render.raster import DegenerateNormalError, rasterize, set_threads
from .skinning import compute_skin_weights, load_pose, load_skeleton, march_skinned

log = logging.getLogger("tetsdf")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2
NUMERIC_ERRORS = (FloatingPointError, np.linalg.LinAlgError, GradientClampError, DegenerateNormalError)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_template(args) -> int:
    scene = load_scene(args.config)
    scene.validate()
    shape = scene.shape()
    mesh = build_band_tetmesh(shape, scene.cell_size, scene.inflation)
    phi = sample_exact_sdf(shape, mesh)
    out = Path(args.out) if args.out else scene.output
    out.mkdir(parents=True, exist_ok=True)
    write_tetmesh(out / "mesh.tet", mesh)
    write_field(out / "phi.field", phi)
    result = {"vertices": mesh.n_vertices, "tets": mesh.n_tets, "edges": mesh.n_edges,
              "avg_edge_length": mesh.avg_edge_length,
              "mesh": str(out / "mesh.tet"), "field": str(out / "phi.field")}
    if scene.skeleton is not None and scene.pose is not None:
        skel = load_skeleton(scene.skeleton)
        pose = load_pose(scene.pose, skel)
        weights = compute_skin_weights(mesh, skel)
        posed = march_skinned(mesh, clamp_small_phi(phi, EPS_GRAD), weights, skel, pose)
        write_obj(out / "posed.obj", posed)
        result["posed"] = str(out / "posed.obj")
    _emit(result)
    return EXIT_OK


def _surface(mesh_path, field_path):
    mesh = read_tetmesh(mesh_path)
    phi = read_field(field_path)
    if len(phi) != mesh.n_vertices:
        raise ConfigError(f"field has {len(phi)} values, mesh has {mesh.n_vertices} vertices")
    return mesh, phi, marching_tetrahedra(mesh, clamp_small_phi(phi, EPS_GRAD))


def cmd_render(args) -> int:
    mesh, phi, tri = _surface(args.mesh, args.field)
    cam = load_camera(args.camera)
    nm = raytrace_oracle(tri, cam) if args.oracle else rasterize(tri, cam)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    encode_png(nm, out)
    depth = Path(args.depth) if args.depth else out.with_name(out.stem + "_depth.png")
    write_depth_png(nm, depth)
    if args.obj:
        write_obj(args.obj, tri)
    _emit({"normal_png": str(out), "depth_png": str(depth), "covered_pixels": int(nm.mask.sum()),
           "triangles": tri.n_triangles, "path": "oracle" if args.oracle else "raster"})
    return EXIT_OK


def _load_views(scene):
    views = []
    for v in scene.views:
        cam = load_camera(v.camera)
        target = load_target(v.normal, v.depth)
        if target.shape != (cam.height, cam.width):
            raise ConfigError(f"{v.normal}: image size does not match camera {v.camera}")
        views.append(View(cam, target))
    return views


def cmd_fit(args) -> int:
    scene = load_scene(args.config)
    if args.iterations is not None:
        scene.fit.iterations = args.iterations
    scene.validate(need_targets=True)  # before any compute
    out = Path(args.out) if args.out else scene.output
    out.mkdir(parents=True, exist_ok=True)
    views = _load_views(scene)
    if scene.mesh is not None:
        mesh = read_tetmesh(scene.mesh)
    else:
        mesh = build_band_tetmesh(scene.shape(), scene.cell_size, scene.inflation)
    phi0 = read_field(scene.init) if scene.init is not None else sample_exact_sdf(scene.shape(), mesh)
    ckpt = out / "checkpoints"
    if scene.fit.checkpoint_every:
        ckpt.mkdir(exist_ok=True)

    def progress(it, total, terms):
        if it % 25 == 0:
            log.info("iteration %d: total %.6g", it, total)

    status = EXIT_OK
    try:
        report = fit_sdf(mesh, phi0, views, scene.fit, checkpoint_dir=ckpt, callback=progress)
    except DivergenceError as e:
        log.error("%s", e)
        report = e.report
        status = EXIT_NUMERIC
    write_tetmesh(out / "mesh.tet", mesh)
    write_field(out / "phi.field", report.phi)
    report.write_json(out / "report.json")
    report.write_ndjson(out / "loss.ndjson")
    if status == EXIT_OK:
        tri = marching_tetrahedra(mesh, clamp_small_phi(report.phi, scene.energy.eps_grad))
        write_obj(out / "surface.obj", tri)
        if report.total:
            plotting.plot_loss_curves(report, out / "loss_curves.png")
        for i, v in enumerate(views):
            pred = rasterize(tri, v.camera)
            encode_png(pred, out / f"view{i:02d}_normal.png")
            write_depth_png(pred, out / f"view{i:02d}_depth.png")
            plotting.plot_view_panel(pred, v.target, out / f"view{i:02d}_panel.png",
                                     f"view {i}: e_normal {report.e_normal[i]:.4g}")
    _emit({"status": report.status, "iterations": report.iterations,
           "mean_e_normal": report.to_dict()["mean_e_normal"], "e_normal": report.e_normal,
           "e_depth": report.e_depth, "output": str(out)})
    return status


def cmd_eval(args) -> int:
    pred = decode_png(args.pred)
    target = decode_png(args.target)
    if pred.shape != target.shape:
        raise ConfigError(f"image size mismatch: {pred.shape} vs {target.shape}")
    result = {"e_normal": e_normal(pred, target), "e_depth": None,
              "mismatch_pixels": int(np.count_nonzero(pred.mask ^ target.mask))}
    if args.pred_depth and args.target_depth:
        if not args.camera:
            raise ConfigError("depth evaluation needs --camera to convert to meters")
        cam = load_camera(args.camera)
        pd = cam.camera_depth(read_depth_png(args.pred_depth, pred.mask))
        td = cam.camera_depth(read_depth_png(args.target_depth, target.mask))
        pd[~pred.mask] = np.inf
        td[~target.mask] = np.inf
        result["e_depth"] = e_depth(pd, td, pred.mask, target.mask)
    _emit(result)
    return EXIT_OK


def _gradcheck_fixture():
    """Small sphere band rendered against a slightly smaller target sphere."""
    mesh = build_band_tetmesh(Sphere((0.0, 0.0, 0.0), 0.5), 0.2, 0.2)
    phi = clamp_small_phi(sample_exact_sdf(Sphere((0.0, 0.0, 0.0), 0.52), mesh), EPS_GRAD)
    cam = Camera.look_at((0.3, 0.4, 2.5), width=48, height=48)
    exact = clamp_small_phi(sample_exact_sdf(Sphere((0.0, 0.0, 0.0), 0.5), mesh), EPS_GRAD)
    return mesh, phi, cam, rasterize(marching_tetrahedra(mesh, exact), cam)


def cmd_gradcheck(args) -> int:
    if args.mesh:
        if not (args.field and args.camera and args.target):
            raise ConfigError("--mesh needs --field, --camera and --target")
        mesh = read_tetmesh(args.mesh)
        phi = clamp_small_phi(read_field(args.field), EPS_GRAD)
        cam = load_camera(args.camera)
        target = decode_png(args.target)
    else:
        mesh, phi, cam, target = _gradcheck_fixture()
    ecfg = EnergyConfig().resolved(mesh)
    if args.term == "normal":
        loss = normal_loss_closure(mesh, cam, target)
    elif args.term == "eikonal":
        def loss(p):
            r = eikonal_energy(mesh, p, "E1c")
            return r.value, r.grad_phi
    else:
        def loss(p):
            r = mean_curvature_energy(mesh, p, ecfg)
            return r.value, r.grad_phi
    _, grad = loss(phi)
    rng = np.random.default_rng(args.seed)
    idx = sample_support(grad, args.samples, rng)
    err, _, _ = fd_gradient_check(loss, phi, idx, h=args.h, analytic=grad)
    ok = err <= args.threshold
    _emit({"term": args.term, "samples": int(len(idx)), "h": args.h, "max_rel_err": err,
           "threshold": args.threshold, "pass": bool(ok)})
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_icp(args) -> int:
    if len(args.meshes) != len(args.cameras):
        raise ConfigError("need one camera per mesh")
    meshes = [read_obj(p).vertices for p in args.meshes]
    cams = [load_camera(p) for p in args.cameras]
    new, history = refine_cameras(meshes, cams, reference=args.reference, max_outer=args.max_outer)
    result = {"rms_history": history, "cameras": []}
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    for i, (old, cam) in enumerate(zip(cams, new)):
        # camera-space delta: x_new = dR x_old + dT
        dR = cam.R @ old.R.T
        dT = cam.T - dR @ old.T
        entry = {"index": i, "delta_rotation": dR.tolist(), "delta_translation": dT.tolist(),
                 "camera": cam.to_dict()}
        if out:
            save_camera(out / f"camera{i:02d}.json", cam)
        result["cameras"].append(entry)
    _emit(result)
    return EXIT_OK


def cmd_prune(args) -> int:
    tri = read_obj(args.mesh)
    cam = load_camera(args.camera)
    target = decode_png(args.target)
    pruned = prune_inconsistent_triangles(tri, cam, target, args.tol)
    write_obj(args.out, pruned)
    _emit({"triangles_in": tri.n_triangles, "triangles_out": pruned.n_triangles,
           "removed": tri.n_triangles - pruned.n_triangles, "output": str(args.out)})
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tetsdf", description=__doc__.splitlines()[0])
    p.add_argument("--workdir", default=".", help="directory all relative paths resolve against")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads for rendering (1 = fully deterministic mode)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("template", help="build the band tet mesh and its exact SDF from a scene config")
    s.add_argument("config", help="scene TOML file")
    s.add_argument("--out", help="output directory (default: the config's output)")
    s.set_defaults(func=cmd_template)

    s = sub.add_parser("render", help="render normal and depth PNGs of a field's zero level set")
    s.add_argument("mesh", help="tet mesh file")
    s.add_argument("field", help="scalar field file")
    s.add_argument("camera", help="camera JSON")
    s.add_argument("out", help="output normal-map PNG")
    s.add_argument("--depth", help="output depth PNG (default: <out>_depth.png)")
    s.add_argument("--oracle", action="store_true", help="use the brute-force ray caster")
    s.add_argument("--obj", help="also write the extracted surface as OBJ")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("fit", help="fit the field to the target views of a scene config")
    s.add_argument("config", help="scene TOML file")
    s.add_argument("--out", help="output directory (default: the config's output)")
    s.add_argument("--iterations", type=int, help="override fit.iterations")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("eval", help="e_normal / e_depth between two renders")
    s.add_argument("pred", help="predicted normal PNG")
    s.add_argument("target", help="target normal PNG")
    s.add_argument("--pred-depth", help="predicted depth PNG")
    s.add_argument("--target-depth", help="target depth PNG")
    s.add_argument("--camera", help="camera JSON, needed to convert depth to meters")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of an analytic gradient")
    s.add_argument("--term", choices=("normal", "eikonal", "curvature"), default="normal",
                   help="energy term whose gradient is checked")
    s.add_argument("--mesh", help="tet mesh file (default: built-in fixture)")
    s.add_argument("--field", help="scalar field file")
    s.add_argument("--camera", help="camera JSON")
    s.add_argument("--target", help="target normal PNG")
    s.add_argument("--samples", type=int, default=50, help="number of sampled field entries")
    s.add_argument("--h", type=float, default=1e-6, help="central-difference step")
    s.add_argument("--threshold", type=float, default=1e-4, help="pass threshold on max relative error")
    s.add_argument("--seed", type=int, default=0, help="seed for choosing the sampled entries")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("icp-refine", help="refine cameras by rigidly aligning per-view meshes")
    s.add_argument("--meshes", nargs="+", required=True, help="per-view OBJ files")
    s.add_argument("--cameras", nargs="+", required=True, help="per-view camera JSON files")
    s.add_argument("--reference", type=int, default=0, help="index of the fixed reference view")
    s.add_argument("--max-outer", type=int, default=10, help="outer refinement iterations")
    s.add_argument("--out", help="directory for the updated camera JSON files")
    s.set_defaults(func=cmd_icp)

    s = sub.add_parser("prune", help="delete visible triangles that disagree with a target normal map")
    s.add_argument("mesh", help="input OBJ")
    s.add_argument("camera", help="camera JSON")
    s.add_argument("target", help="target normal PNG")
    s.add_argument("out", help="output OBJ")
    s.add_argument("--tol", type=float, default=30.0, help="mean angular error threshold in degrees")
    s.set_defaults(func=cmd_prune)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    set_threads(args.threads)
    cwd = os.getcwd()
    try:
        os.chdir(args.workdir)
    except OSError as e:
        print(f"error: cannot enter workdir: {e}", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except NUMERIC_ERRORS as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, EmptyDomainError, ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    finally:
        os.chdir(cwd)


if __name__ == "__main__":
    sys.exit(main())
