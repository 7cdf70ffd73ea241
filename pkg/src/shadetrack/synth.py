"""Synthetic ground-truth benchmark sequences.

Four scenarios pair a Lambertian or Phong-specular surface with fixed or
sinusoidally changing two-light illumination (LF, SF, LC, SC). Every frame
is rendered by the package's own perspective-correct rasterizer with
per-pixel shading, so rendered depth, color, and the specular-contribution
mask are mutually consistent to float precision. The deforming-sphere
benchmark object has closed-form geometry everywhere: a radial Gaussian
bump travels over a slowly rotating icosphere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fileio
from .camera import Camera
from .mesh import Mesh, build_mesh, icosphere, vertex_normals
from .raster import rasterize
from .rotations import rotation_matrix

_LIGHT_DIRS = np.array([[0.3, 0.3, -0.9], [-0.4, 0.2, -0.89]])
_LIGHT_DIRS /= np.linalg.norm(_LIGHT_DIRS, axis=1, keepdims=True)
_FIXED_INTENSITIES = (0.75, 0.45)
_CHANGING_RANGE = (0.3, 1.0)
_CHANGING_PHASES = (0.0, 2.1)
PHONG_KS = 0.4
PHONG_P = 32.0

_PRESETS = {
    "LF": ("lambertian", "fixed"),
    "SF": ("specular", "fixed"),
    "LC": ("lambertian", "changing"),
    "SC": ("specular", "changing"),
}


@dataclass(frozen=True)
class Scenario:
    """Benchmark recipe; everything needed to regenerate a dataset."""

    name: str
    surface: str                 # "lambertian" | "specular"
    lighting: str                # "fixed" | "changing"
    frames: int
    width: int = 320
    height: int = 240
    light_dirs: tuple = tuple(tuple(float(x) for x in row) for row in _LIGHT_DIRS)
    fixed_intensities: tuple = _FIXED_INTENSITIES
    changing_range: tuple = _CHANGING_RANGE
    changing_phases: tuple = _CHANGING_PHASES
    k_s: float = PHONG_KS
    p: float = PHONG_P
    light_frame: str = "camera"  # "object" = lights ride with the pose

    def __post_init__(self):
        if self.surface not in ("lambertian", "specular"):
            raise ValueError(f"unknown surface '{self.surface}'")
        if self.lighting not in ("fixed", "changing"):
            raise ValueError(f"unknown lighting '{self.lighting}'")
        if self.light_frame not in ("camera", "object"):
            raise ValueError(f"unknown light frame '{self.light_frame}'")
        if self.frames < 1:
            raise ValueError("frames must be >= 1")
        dirs = np.asarray(self.light_dirs, dtype=float)
        if not np.allclose(np.linalg.norm(dirs, axis=1), 1.0, atol=1e-9):
            raise ValueError("light directions must be unit vectors")
        if min(self.fixed_intensities) < 0 or min(self.changing_range) < 0:
            raise ValueError("intensities must be nonnegative")

    @classmethod
    def preset(cls, name: str, frames: int, width: int = 320,
               height: int = 240) -> "Scenario":
        if name not in _PRESETS:
            raise ValueError(f"unknown scenario '{name}' "
                             f"(choose from {sorted(_PRESETS)})")
        surface, lighting = _PRESETS[name]
        return cls(name=name, surface=surface, lighting=lighting,
                   frames=frames, width=width, height=height)

    def intensities(self, frame: int) -> np.ndarray:
        """Per-light intensity at the given frame index."""
        if self.lighting == "fixed":
            return np.asarray(self.fixed_intensities, dtype=float)
        lo, hi = self.changing_range
        mid, amp = 0.5 * (hi + lo), 0.5 * (hi - lo)
        u = frame / max(self.frames - 1, 1)
        ph = np.asarray(self.changing_phases)
        return mid + amp * np.sin(2.0 * math.pi * u + ph)

    def lights(self, frame: int):
        """(directions (2, 3) unit toward-light, intensities (2,))."""
        return np.asarray(self.light_dirs, dtype=float), \
            self.intensities(frame)

    def to_dict(self) -> dict:
        return {
            "name": self.name, "surface": self.surface,
            "lighting": self.lighting, "frames": self.frames,
            "width": self.width, "height": self.height,
            "light1_dir": list(self.light_dirs[0]),
            "light2_dir": list(self.light_dirs[1]),
            "fixed_intensities": list(self.fixed_intensities),
            "changing_range": list(self.changing_range),
            "changing_phases": list(self.changing_phases),
            "k_s": self.k_s, "p": self.p,
            "light_frame": self.light_frame,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        return cls(
            name=d["name"], surface=d["surface"], lighting=d["lighting"],
            frames=int(d["frames"]), width=int(d["width"]),
            height=int(d["height"]),
            light_dirs=(tuple(d["light1_dir"]), tuple(d["light2_dir"])),
            fixed_intensities=tuple(d["fixed_intensities"]),
            changing_range=tuple(d["changing_range"]),
            changing_phases=tuple(d["changing_phases"]),
            k_s=float(d["k_s"]), p=float(d["p"]),
            light_frame=d.get("light_frame", "camera"))


# ---------------------------------------------------------------------------
# rendering


def shade_points(points, normals, albedo, light_dirs, intensities,
                 k_s: float = 0.0, p: float = PHONG_P):
    """Shade camera-frame surface samples: clamped-cosine diffuse plus an
    optional classic-Phong specular lobe (reflection vector against the
    unit direction from the point toward the camera at the origin).

    Returns (diffuse (M, 3), specular (M, 3)) before any clamping.
    """
    points = np.asarray(points, dtype=float)
    n = np.asarray(normals, dtype=float)
    n = n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-30)
    albedo = np.asarray(albedo, dtype=float)
    diffuse = np.zeros_like(albedo)
    specular = np.zeros((len(points), 3))
    view = -points / np.maximum(
        np.linalg.norm(points, axis=-1, keepdims=True), 1e-30)
    for d, intensity in zip(np.asarray(light_dirs, float), intensities):
        cos = np.maximum(n @ d, 0.0)
        diffuse += intensity * albedo * cos[:, None]
        if k_s > 0.0:
            refl = 2.0 * (n @ d)[:, None] * n - d
            lobe = np.maximum(np.einsum("mi,mi->m", refl, view), 0.0) ** p
            specular += (k_s * intensity) * lobe[:, None]
    return diffuse, specular


def render_frame(positions, mesh: Mesh, albedo, pose, camera: Camera,
                 scenario: Scenario, frame: int = 0):
    """Render one frame; returns (rgb (H, W, 3), depth (H, W), spec mask).

    `positions` are rest-frame vertices, `pose` the (rotation 3x3,
    translation) pair posing them into the camera frame. Depth is 0 on
    uncovered pixels; the mask holds the raw specular contribution (zero
    everywhere for Lambertian scenarios). RGB is clamped to [0, 1].
    """
    R, t = pose
    R = np.asarray(R, dtype=float)
    posed = np.asarray(positions, float) @ R.T + np.asarray(t, float)
    res = rasterize(posed, mesh.faces, camera,
                    (scenario.width, scenario.height))
    pix_pos = res.interpolate(posed)
    pix_nrm = res.interpolate(vertex_normals(mesh, positions) @ R.T)
    pix_alb = res.interpolate(np.asarray(albedo, dtype=float))
    cov = res.coverage()

    dirs, intensities = scenario.lights(frame)
    if scenario.light_frame == "object":
        # lights fixed in the scene while the camera orbits: in the camera
        # frame they co-rotate with the pose, so object-frame shading is
        # constant across the sweep
        dirs = dirs @ R.T
    k_s = scenario.k_s if scenario.surface == "specular" else 0.0
    flat = cov.ravel()
    diffuse = np.zeros((scenario.height * scenario.width, 3))
    spec = np.zeros_like(diffuse)
    diffuse[flat], spec[flat] = shade_points(
        pix_pos.reshape(-1, 3)[flat], pix_nrm.reshape(-1, 3)[flat],
        pix_alb.reshape(-1, 3)[flat], dirs, intensities, k_s, scenario.p)
    shape = (scenario.height, scenario.width, 3)
    rgb = np.clip(diffuse + spec, 0.0, 1.0).reshape(shape)
    return rgb, res.depth_map(), spec.reshape(shape)


# ---------------------------------------------------------------------------
# benchmark geometry


def bump_center(u: float, lat_deg: float = 20.0,
                lon0: float = 0.0) -> np.ndarray:
    """Unit direction of the bump center at sequence position u in [0, 1]:
    a 270-degree sweep of the given latitude circle."""
    lat = math.radians(lat_deg)
    lon = lon0 + 1.5 * math.pi * u
    return np.array([
        math.cos(lat) * math.cos(lon),
        math.sin(lat),
        math.cos(lat) * math.sin(lon),
    ])


def sphere_bump_displacement(directions, u: float, amplitude: float,
                             sigma: float = 0.35, lat_deg: float = 20.0,
                             lon0: float = 0.0) -> np.ndarray:
    """Radial displacement of the traveling bump at sequence position
    u in [0, 1] for unit directions (M, 3).

    The bump is a Gaussian in angular distance to the traveling center,
    gated by a sin envelope that is 0 at both sequence ends; the analytic
    maximum over (direction, u) is exactly `amplitude`, reached at the
    center when u = 0.5.
    """
    directions = np.asarray(directions, dtype=float)
    center = bump_center(u, lat_deg, lon0)
    cos_theta = np.clip(directions @ center, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    envelope = math.sin(math.pi * u)
    return amplitude * envelope * np.exp(-0.5 * (theta / sigma) ** 2)


def make_deforming_sphere(frames: int, amplitude: float, *,
                          subdivisions: int = 3, radius: float = 57.7,
                          center=(0.0, 0.0, 230.0),
                          rotation_deg: float = 0.1, seed=None):
    """Closed-form benchmark object: icosphere with a traveling bump.

    Returns (mesh, positions (F, N, 3), poses (F, 6)). Positions are the
    rest-frame deformed shape (frame 0 is the rest icosphere exactly);
    poses rotate `rotation_deg` degrees per frame about a fixed skew axis
    through the sphere center, so the rigid and non-rigid motion are
    cleanly separated in the ground truth. A seed varies the bump path
    and rotation axis, giving statistically independent replicate
    sequences of the same difficulty.
    """
    if frames < 1:
        raise ValueError("frames must be >= 1")
    mesh = icosphere(subdivisions, radius=radius, center=center)
    c = np.asarray(center, dtype=float)
    dirs = (mesh.vertices - c) / radius

    lat_deg, lon0 = 20.0, 0.0
    axis = np.array([0.25, 1.0, 0.2])
    if seed is not None:
        rng = np.random.default_rng(seed)
        lat_deg = rng.uniform(12.0, 28.0)
        lon0 = rng.uniform(0.0, 2.0 * math.pi)
        axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)

    positions = np.empty((frames, mesh.n_vertices, 3))
    poses = np.zeros((frames, 6))
    for f in range(frames):
        u = f / max(frames - 1, 1)
        disp = sphere_bump_displacement(dirs, u, amplitude,
                                        lat_deg=lat_deg, lon0=lon0)
        positions[f] = mesh.vertices + disp[:, None] * dirs
        # rotate about the sphere center: x -> R (x - c) + c
        w = math.radians(rotation_deg * f) * axis
        R = rotation_matrix(w)
        poses[f, :3] = w
        poses[f, 3:] = c - R @ c
    return mesh, positions, poses


def checker_albedo(mesh: Mesh, center, tiles: float = 6.0,
                   lo: float = 0.35, hi: float = 0.85,
                   phase: float = 0.0) -> np.ndarray:
    """Two-tone angular checker over the sphere directions; tones stay
    strictly inside (0, 1) so renders don't saturate at typical lighting."""
    d = mesh.vertices - np.asarray(center, dtype=float)
    d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-30)
    lon = np.arctan2(d[:, 2], d[:, 0])
    lat = np.arcsin(np.clip(d[:, 1], -1.0, 1.0))
    cell = (np.floor(tiles * (lon + phase) / math.pi) +
            np.floor(tiles * (lat + phase) / math.pi)).astype(np.int64)
    tone = np.where(cell % 2 == 0, lo, hi)
    # slight channel separation so channel mixups show up in tests
    return np.column_stack([tone, tone * 0.95, tone * 0.90])


def perturb_template(mesh: Mesh, sigma: float, seed: int) -> Mesh:
    """Gaussian vertex noise with std sigma * bbox diagonal, same topology.

    sigma = 0 returns an identical copy; fixed seeds reproduce bitwise.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return build_mesh(mesh.vertices.copy(), mesh.faces.copy())
    rng = np.random.default_rng(seed)
    std = sigma * mesh.bbox_diagonal()
    noisy = mesh.vertices + rng.normal(0.0, std, size=mesh.vertices.shape)
    return build_mesh(noisy, mesh.faces.copy())


# ---------------------------------------------------------------------------
# dataset writer / reader


def generate_sequence(mesh: Mesh, positions, albedo, scenario: Scenario,
                      camera: Camera, out_dir, poses=None,
                      template_sidecar=None) -> "GroundTruthSequence":
    """Render and write the full dataset layout under `out_dir`:

    scenario.toml, template.ply (rest mesh), frames/%05d.png (RGB),
    frames/%05d.pfm (depth), frames/%05d_spec.png (specular mask),
    gt/%05d.ply (camera-frame ground-truth positions), gt/poses.txt.
    A .tmpl reflectance sidecar is written when supplied (the template
    command produces it otherwise).
    """
    positions = np.asarray(positions, dtype=float)
    if positions.ndim != 3 or positions.shape[0] != scenario.frames:
        raise ValueError("positions must be (frames, N, 3)")
    if positions.shape[0] < 2:
        raise ValueError("a sequence needs >= 2 frames")
    if poses is None:
        poses = np.zeros((scenario.frames, 6))
    poses = np.asarray(poses, dtype=float)

    root = Path(out_dir)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    (root / "gt").mkdir(parents=True, exist_ok=True)

    doc = scenario.to_dict()
    doc.update(fx=camera.fx, fy=camera.fy, cx=camera.cx, cy=camera.cy)
    fileio.dump_toml(root / "scenario.toml", doc)
    fileio.write_ply(root / "template.ply", mesh.vertices, mesh.faces)
    if template_sidecar is not None:
        albedo_t, diffuse_t, holes_t, lighting_t = template_sidecar
        fileio.write_template_sidecar(root / "template.tmpl", albedo_t,
                                      diffuse_t, holes_t, lighting_t)

    for f in range(scenario.frames):
        R = rotation_matrix(poses[f, :3])
        rgb, depth, spec = render_frame(
            positions[f], mesh, albedo, (R, poses[f, 3:]), camera,
            scenario, f)
        fileio.write_image(root / "frames" / f"{f:05d}.png", rgb)
        fileio.write_pfm(root / "frames" / f"{f:05d}.pfm", depth)
        fileio.write_image(root / "frames" / f"{f:05d}_spec.png",
                           np.clip(spec, 0.0, 1.0))
        fileio.write_ply(root / "gt" / f"{f:05d}.ply",
                         positions[f] @ R.T + poses[f, 3:], mesh.faces)
    fileio.write_poses(root / "gt" / "poses.txt", poses[:, :3], poses[:, 3:])
    return GroundTruthSequence(root)


class GroundTruthSequence:
    """Read-side handle for a generated dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        doc = fileio.load_toml(self.root / "scenario.toml")
        self.scenario = Scenario.from_dict(doc)
        self.camera = Camera(doc["fx"], doc["fy"], doc["cx"], doc["cy"])

    @property
    def frames(self) -> int:
        return self.scenario.frames

    def image(self, f: int) -> np.ndarray:
        return fileio.read_image(self.root / "frames" / f"{f:05d}.png")

    def depth(self, f: int) -> np.ndarray:
        return fileio.read_pfm(self.root / "frames" / f"{f:05d}.pfm")

    def spec_mask(self, f: int) -> np.ndarray:
        return fileio.read_image(self.root / "frames" / f"{f:05d}_spec.png")

    def gt_positions(self, f: int) -> np.ndarray:
        return fileio.read_ply(self.root / "gt" / f"{f:05d}.ply")[0]

    def poses(self) -> np.ndarray:
        w, t = fileio.read_poses(self.root / "gt" / "poses.txt")
        return np.hstack([w, t])

    def template_mesh(self) -> Mesh:
        v, faces, _ = fileio.read_ply(self.root / "template.ply")
        return build_mesh(v, faces)
