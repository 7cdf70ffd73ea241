"""Command-line entry points: render, template, track, evaluate.

Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import fileio, synth
from .camera import Camera, build_pyramid
from .config import ConfigError, TrackerConfig, load_config
from .energy import FrameState
from .evaluation import EvalReport, evaluate_rms
from .fileio import FileFormatError
from .mesh import build_mesh, vertex_normals
from .raster import rasterize
from .rotations import rotation_matrix
from .shading import sh_basis
from .template import (RigidSubsequence, RigidView, Template,
                       acquire_template)
from .tracking import initial_state, track_frame

_RENDER_KEYS = {
    "scenario", "name", "surface", "lighting", "frames", "width", "height",
    "light1_dir", "light2_dir", "fixed_intensities", "changing_range",
    "changing_phases", "k_s", "p", "amplitude", "subdivisions", "radius",
    "center_z", "rotation_deg", "seed", "orbit_frames", "orbit_sweep_deg",
    "fx", "fy", "cx", "cy", "checker_tiles",
}


def _scenario_from_doc(doc: dict) -> synth.Scenario:
    frames = int(doc.get("frames", 60))
    width = int(doc.get("width", 320))
    height = int(doc.get("height", 240))
    if "scenario" in doc:
        base = synth.Scenario.preset(doc["scenario"], frames, width, height)
    else:
        base = synth.Scenario(
            name=doc.get("name", "custom"), surface=doc["surface"],
            lighting=doc["lighting"], frames=frames,
            width=width, height=height)
    kw = {}
    if "light1_dir" in doc or "light2_dir" in doc:
        kw["light_dirs"] = (tuple(doc.get("light1_dir", base.light_dirs[0])),
                            tuple(doc.get("light2_dir", base.light_dirs[1])))
    for key in ("fixed_intensities", "changing_range", "changing_phases"):
        if key in doc:
            kw[key] = tuple(doc[key])
    for key in ("k_s", "p"):
        if key in doc:
            kw[key] = float(doc[key])
    if "surface" in doc:
        kw["surface"] = doc["surface"]
    if "lighting" in doc:
        kw["lighting"] = doc["lighting"]
    return dataclasses.replace(base, **kw) if kw else base


def _orbit_poses(frames: int, center, sweep_deg: float) -> np.ndarray:
    """Rigid warm-up sweep about the object center: a yaw arc with a
    gentle pitch wobble so the visible set varies in both axes."""
    c = np.asarray(center, dtype=float)
    poses = np.zeros((frames, 6))
    for f in range(frames):
        u = f / max(frames - 1, 1)
        yaw = math.radians(sweep_deg) * (u - 0.5)
        pitch = math.radians(0.25 * sweep_deg) * math.sin(2.0 * math.pi * u)
        w_yaw = np.array([0.0, yaw, 0.0])
        w_pitch = np.array([pitch, 0.0, 0.0])
        R = rotation_matrix(w_pitch) @ rotation_matrix(w_yaw)
        # compose back into a single angle-axis via the rotation logarithm
        w = _rotation_log(R)
        poses[f, :3] = w
        poses[f, 3:] = c - R @ c
    return poses


def _rotation_log(R: np.ndarray) -> np.ndarray:
    cos = max(-1.0, min(1.0, 0.5 * (np.trace(R) - 1.0)))
    angle = math.acos(cos)
    if angle < 1e-12:
        return np.zeros(3)
    axis = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0],
                     R[1, 0] - R[0, 1]]) / (2.0 * math.sin(angle))
    return angle * axis


def cmd_render(args) -> int:
    doc = dict(fileio.load_toml(args.scenario))
    unknown = set(doc) - _RENDER_KEYS
    if unknown:
        raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
    scenario = _scenario_from_doc(doc)

    seed = int(doc.get("seed", 0))
    amplitude = float(doc.get("amplitude", 8.0))
    subdivisions = int(doc.get("subdivisions", 3))
    radius = float(doc.get("radius", 57.7))
    center = (0.0, 0.0, float(doc.get("center_z", 230.0)))
    rotation_deg = float(doc.get("rotation_deg", 0.1))

    if args.orbit:
        frames = int(doc.get("orbit_frames", 20))
        sweep = float(doc.get("orbit_sweep_deg", 60.0))
        # a camera orbit of the rigid object: illumination is constant in
        # the scene, so in camera coordinates the lights ride with the pose
        scenario = dataclasses.replace(
            scenario, name=scenario.name + "-orbit", lighting="fixed",
            frames=frames, light_frame="object")
        mesh, _, _ = synth.make_deforming_sphere(
            2, 0.0, subdivisions=subdivisions, radius=radius, center=center,
            seed=seed)
        positions = np.broadcast_to(
            mesh.vertices, (frames, mesh.n_vertices, 3)).copy()
        poses = _orbit_poses(frames, center, sweep)
    else:
        mesh, positions, poses = synth.make_deforming_sphere(
            scenario.frames, amplitude, subdivisions=subdivisions,
            radius=radius, center=center, rotation_deg=rotation_deg,
            seed=seed)

    phase = np.random.default_rng(seed + 1).uniform(0.0, 2.0 * math.pi)
    albedo = synth.checker_albedo(mesh, center,
                                  tiles=float(doc.get("checker_tiles", 6.0)),
                                  phase=phase)
    camera = Camera(
        float(doc.get("fx", 300.0)), float(doc.get("fy", 300.0)),
        float(doc.get("cx", (scenario.width - 1) / 2.0)),
        float(doc.get("cy", (scenario.height - 1) / 2.0)))
    # benchmark datasets ship a reference template (true albedo, lighting
    # fit to the first frame); orbit datasets leave the sidecar to the
    # template command, whose job is to estimate one
    sidecar = None if args.orbit else _reference_sidecar(
        mesh, positions[0], poses[0], albedo, scenario)
    synth.generate_sequence(mesh, positions, albedo, scenario, camera,
                            args.out, poses=poses, template_sidecar=sidecar)
    print(f"wrote {scenario.frames} frames of scenario "
          f"'{scenario.name}' to {args.out}")
    return 0


def _reference_sidecar(mesh, positions0, pose0, albedo, scenario):
    """Ground-truth reflectance sidecar for a rendered dataset: the true
    albedo, the first frame's diffuse vertex colors, and the best
    order-2 lighting fit to the first frame's shading."""
    R = rotation_matrix(pose0[:3])
    normals = vertex_normals(mesh, positions0) @ R.T
    dirs, intensities = scenario.lights(0)
    shading = np.zeros(mesh.n_vertices)
    for d, s in zip(dirs, intensities):
        shading += s * np.maximum(normals @ d, 0.0)
    lighting, *_ = np.linalg.lstsq(sh_basis(normals), shading, rcond=None)
    diffuse = np.clip(albedo * shading[:, None], 0.0, 1.0)
    holes = np.zeros(mesh.n_vertices, dtype=bool)
    return albedo, diffuse, holes, lighting


# ---------------------------------------------------------------------------


def _render_template_view(template: Template, camera: Camera, pose,
                          resolution):
    """Diffuse-only prediction image of the template at a rigid pose."""
    R, t = pose
    posed = template.mesh.vertices @ R.T + t
    res = rasterize(posed, template.mesh.faces, camera, resolution)
    nrm = res.interpolate(
        vertex_normals(template.mesh, template.mesh.vertices) @ R.T)
    alb = res.interpolate(template.albedo)
    cov = res.coverage()
    flat = nrm.reshape(-1, 3)
    norms = np.maximum(np.linalg.norm(flat, axis=1, keepdims=True), 1e-30)
    shading = sh_basis(flat / norms) @ template.lighting
    img = np.clip(alb.reshape(-1, 3) * shading[:, None], 0.0, 1.0)
    img[~cov.ravel()] = 0.0
    return img.reshape(alb.shape), cov


def cmd_template(args) -> int:
    config = load_config(args.config, args.set or ())
    if args.init_albedo:
        config.init_albedo = args.init_albedo
        TrackerConfig.__post_init__(config)

    vertices, faces, _ = fileio.read_ply(args.mesh)
    mesh = build_mesh(vertices, faces)
    w_all, t_all = fileio.read_poses(args.poses)
    frame_paths = sorted(Path(args.frames).glob("[0-9]" * 5 + ".png"))
    if len(frame_paths) != len(w_all):
        raise ConfigError(
            f"{len(frame_paths)} frames but {len(w_all)} poses")
    if not frame_paths:
        raise ConfigError(f"no frames found in {args.frames}")

    holdout_every = int(args.holdout or 0)
    fit_views, held = [], []
    for i, path in enumerate(frame_paths):
        view = RigidView(fileio.read_image(path),
                         rotation_matrix(w_all[i]), t_all[i])
        if holdout_every and i % holdout_every == holdout_every - 1:
            held.append(view)
        else:
            fit_views.append(view)
    if not fit_views:
        raise ConfigError("holdout left no frames to fit")

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        template = acquire_template(mesh, RigidSubsequence(fit_views),
                                    _dataset_camera(args, fit_views), config)
    for warning in caught:
        print(f"warning: {warning.message}")

    out_dir = Path(args.out) if args.out else Path(args.mesh).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    template.save(out_dir / "template.ply", out_dir / "template.tmpl")

    hole_frac = float(template.holes.mean())
    report = {"hole_fraction": hole_frac, "frames_fit": len(fit_views),
              "frames_held_out": len(held)}
    if held:
        errs = []
        for view in held:
            h, w = view.image.shape[:2]
            pred, cov = _render_template_view(
                template, _dataset_camera(args, [view]),
                (view.rotation, view.translation), (w, h))
            if cov.any():
                d = (pred - view.image)[cov]
                errs.append(float(np.sqrt(np.mean(d * d))))
        report["holdout_rms"] = max(errs) if errs else 0.0
        print(f"held-out re-render RMS: {report['holdout_rms']:.5f} "
              f"({len(held)} views)")
    print(f"hole fraction: {hole_frac:.4f}")
    report.update(config.to_dict())
    fileio.dump_toml(out_dir / "template_report.toml", report)
    return 0


def _dataset_camera(args, views) -> Camera:
    if args.camera:
        return fileio.read_camera(args.camera)
    doc_path = Path(args.frames).parent / "scenario.toml"
    if doc_path.exists():
        doc = fileio.load_toml(doc_path)
        return Camera(doc["fx"], doc["fy"], doc["cx"], doc["cy"])
    h, w = views[0].image.shape[:2]
    return Camera(300.0, 300.0, (w - 1) / 2.0, (h - 1) / 2.0)


# ---------------------------------------------------------------------------


def _save_checkpoint(path, frame: int, state: FrameState):
    np.savez(path, frame=frame, positions=state.positions,
             rotation=state.rotation, translation=state.translation,
             lighting=state.lighting, specular=state.specular,
             local_rotations=state.local_rotations)


def _load_checkpoint(path):
    data = np.load(path)
    state = FrameState(
        positions=data["positions"], rotation=data["rotation"],
        translation=data["translation"], lighting=data["lighting"],
        specular=data["specular"], local_rotations=data["local_rotations"])
    return int(data["frame"]), state


def cmd_track(args) -> int:
    config = load_config(args.config, args.set or ())
    dataset = synth.GroundTruthSequence(args.dataset)
    root = Path(args.dataset)

    template_path = Path(args.template) if args.template \
        else root / "template.ply"
    config.template = str(template_path)
    config.frames_dir = str(root / "frames")
    if args.no_joint_refinement:
        config.solver = dataclasses.replace(config.solver,
                                            joint_refinement=False)
    if args.use_depth:
        config.solver = dataclasses.replace(config.solver, use_depth=True)
    config.check_paths()
    if not template_path.with_suffix(".tmpl").exists():
        raise ConfigError(
            f"missing reflectance sidecar next to {template_path} "
            f"(run the template command first)")
    template = Template.load(template_path)

    out = Path(args.out) if args.out else root / "track"
    out.mkdir(parents=True, exist_ok=True)
    config.output_dir = str(out)
    config.save(out / "config.toml")

    specular_dim = 1 if config.scalar_specular else 3
    weights = config.weights.resolved(template.mesh.bbox_diagonal())
    params = config.solver

    start = 0
    state = initial_state(template, specular_dim)
    rows = []
    checkpoint = out / "checkpoint.npz"
    if args.resume and checkpoint.exists():
        done, state = _load_checkpoint(checkpoint)
        start = done + 1
        prior = fileio.read_states(out / "states.txt")
        rows = [r for r in prior if r[0] <= done]
        print(f"resuming after frame {done}")

    t0 = time.time()
    for f in range(start, dataset.frames):
        depth = dataset.depth(f) if params.use_depth else None
        pyramid = build_pyramid(dataset.image(f), depth, dataset.camera)
        state, rep = track_frame(
            state, template, pyramid, weights, params,
            no_spec=args.no_spec, baseline=args.baseline,
            level_weight_mode=config.level_weight_mode)
        posed = state.positions @ rotation_matrix(state.rotation).T \
            + state.translation
        fileio.write_ply(out / f"{f:05d}.ply", posed, template.mesh.faces)
        rows.append((f, state.rotation, state.translation, state.lighting,
                     rep.final_energy, rep.neg_shading_frac))
        fileio.write_states(out / "states.txt", rows)
        _save_checkpoint(checkpoint, f, state)
        print(f"frame {f}: E={rep.final_energy:.6g} "
              f"iters={rep.total_iterations} "
              f"visible={rep.visible_per_level.get(0, 0)} "
              f"[{rep.convergence_reason}]")
    print(f"tracked {dataset.frames - start} frames "
          f"in {time.time() - t0:.1f}s -> {out}")
    return 0


# ---------------------------------------------------------------------------


def cmd_evaluate(args) -> int:
    track_dir = Path(args.track)
    gt_dir = Path(args.gt)
    track_plys = sorted(track_dir.glob("[0-9]" * 5 + ".ply"))
    if not track_plys:
        raise ConfigError(f"no tracked frames in {track_dir}")
    rec, gt = [], []
    for path in track_plys:
        gt_path = gt_dir / path.name
        if not gt_path.exists():
            raise ConfigError(f"missing ground truth {gt_path}")
        rec.append(fileio.read_ply(path)[0])
        gt.append(fileio.read_ply(gt_path)[0])

    energy = neg = None
    states_path = track_dir / "states.txt"
    if states_path.exists():
        states = fileio.read_states(states_path)
        by_frame = {int(r[0]): r for r in states}
        energy = [by_frame[i][4] if i in by_frame else 0.0
                  for i in range(len(rec))]
        neg = [by_frame[i][5] if i in by_frame else 0.0
               for i in range(len(rec))]

    config = {}
    config_path = track_dir / "config.toml"
    if config_path.exists():
        config = {k: v for k, v in fileio.load_toml(config_path).items()}
    report = evaluate_rms(rec, gt, energy=energy, neg_shading_frac=neg,
                          config=config)
    out = Path(args.out) if args.out else track_dir / "eval.tsv"
    report.write_tsv(out)
    print(f"frames: {report.frames}")
    print(f"mean RMS: {report.mean_rms:.6g}")
    print(f"max RMS:  {report.rms.max():.6g}")
    print(f"report -> {out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shadetrack",
        description="Template-based non-rigid tracking with shading and "
                    "specularity modeling, plus its synthetic benchmark.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="generate a synthetic dataset")
    p.add_argument("--scenario", required=True,
                   help="scenario TOML (preset name or full fields)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--orbit", action="store_true",
                   help="render a rigid warm-up orbit of the rest mesh "
                        "instead of the deforming sequence")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("template",
                       help="acquire template reflectance from rigid views")
    p.add_argument("--mesh", required=True, help="template mesh PLY")
    p.add_argument("--frames", required=True, help="directory of %%05d.png")
    p.add_argument("--poses", required=True, help="poses.txt for the frames")
    p.add_argument("--out", help="output directory (default: mesh's)")
    p.add_argument("--camera", help="camera intrinsics file (fx fy cx cy)")
    p.add_argument("--config", help="tracker config TOML")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key")
    p.add_argument("--init-albedo", help="'white' or 'kmeans:K'")
    p.add_argument("--holdout", type=int, default=0, metavar="K",
                   help="hold out every K-th frame and report re-render RMS")
    p.set_defaults(func=cmd_template)

    p = sub.add_parser("track", help="track a sequence against a template")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--template", help="template PLY (default: dataset's)")
    p.add_argument("--out", help="output directory (default: dataset/track)")
    p.add_argument("--config", help="tracker config TOML")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key")
    p.add_argument("--no-spec", action="store_true",
                   help="freeze specular residues at zero")
    p.add_argument("--no-joint-refinement", action="store_true",
                   help="skip the final all-variable solve")
    p.add_argument("--use-depth", action="store_true",
                   help="use the dataset's depth maps")
    p.add_argument("--baseline-brightness-constancy", dest="baseline",
                   action="store_true",
                   help="fixed-template-color ablation (no lighting or "
                        "specular model)")
    p.add_argument("--resume", action="store_true",
                   help="continue from the last checkpoint in the output "
                        "directory")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("evaluate", help="score tracked frames against "
                                        "ground truth")
    p.add_argument("--track", required=True, help="tracked-frames directory")
    p.add_argument("--gt", required=True, help="ground-truth directory")
    p.add_argument("--out", help="TSV path (default: track/eval.tsv)")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileFormatError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:                      # noqa: BLE001
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
