"""Template reflectance acquisition from a rigid warm-up subsequence.

Given the template mesh and a handful of frames with known rigid poses,
recover a per-vertex diffuse color (robust median over the frames), the
scene lighting coefficients, and a per-vertex albedo map. The reflectance
split carries a global scale ambiguity (albedo times shading is all the
images constrain); the white or k-means albedo initialization of the first
lighting fit pins it, so the fitted lighting scales linearly with image
brightness while the albedo stays brightness-free.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import factorized

from . import fileio
from .camera import Camera, sample_bilinear_masked
from .energy import huber
from .mesh import Mesh, build_mesh, vertex_normals
from .raster import compute_visibility
from .shading import SH_DIM, sh_basis

_HUBER_EPS = 0.05          # intensity units, same scale as the tracker
_IRLS_ROUNDS = 6
_ANCHOR = 1e-9             # keeps smoothing-only components solvable


class TemplateWarning(UserWarning):
    """Non-fatal acquisition problems (holes, degeneracy, conditioning)."""


@dataclass(frozen=True)
class RigidView:
    """One warm-up frame: image plus the rigid pose posing the template
    into the camera frame (x_cam = rotation @ x + translation)."""

    image: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).ravel()
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError("image must be (H, W, 3)")
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("pose must be a 3x3 rotation and a 3-translation")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) \
                or not np.isclose(np.linalg.det(R), 1.0, atol=1e-6):
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "image", img)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)


@dataclass(frozen=True)
class RigidSubsequence:
    frames: tuple

    def __init__(self, frames):
        object.__setattr__(self, "frames", tuple(
            f if isinstance(f, RigidView) else RigidView(*f) for f in frames))
        if not self.frames:
            raise ValueError("subsequence needs at least one frame")

    def __len__(self):
        return len(self.frames)


@dataclass
class Template:
    """Rest-shape mesh plus the per-vertex reflectance model."""

    mesh: Mesh
    albedo: np.ndarray         # (N, 3), nonnegative
    lighting: np.ndarray       # (SH_DIM,)
    diffuse: np.ndarray        # (N, 3), in [0, 1]
    holes: np.ndarray = None   # (N,) bool, True = never observed

    def __post_init__(self):
        n = self.mesh.n_vertices
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        self.lighting = np.asarray(self.lighting, dtype=np.float64).ravel()
        self.diffuse = np.asarray(self.diffuse, dtype=np.float64)
        if self.holes is None:
            self.holes = np.zeros(n, dtype=bool)
        self.holes = np.asarray(self.holes, dtype=bool).ravel()
        if self.albedo.shape != (n, 3) or self.diffuse.shape != (n, 3) \
                or self.holes.shape != (n,):
            raise ValueError("per-vertex arrays must match the vertex count")
        if self.lighting.shape != (SH_DIM,):
            raise ValueError(f"lighting must have {SH_DIM} coefficients")
        if np.any(self.albedo < 0):
            raise ValueError("albedo must be nonnegative")
        good = self.diffuse[~self.holes]
        if good.size and (good.min() < -1e-9 or good.max() > 1 + 1e-9):
            raise ValueError("diffuse must lie in [0, 1]")

    def save(self, mesh_path, sidecar_path=None):
        """PLY mesh next to the binary reflectance sidecar (.tmpl)."""
        mesh_path = str(mesh_path)
        if sidecar_path is None:
            sidecar_path = mesh_path.rsplit(".", 1)[0] + ".tmpl"
        fileio.write_ply(mesh_path, self.mesh.vertices, self.mesh.faces)
        fileio.write_template_sidecar(
            sidecar_path, self.albedo, self.diffuse, self.holes, self.lighting)

    @classmethod
    def load(cls, mesh_path, sidecar_path=None):
        mesh_path = str(mesh_path)
        if sidecar_path is None:
            sidecar_path = mesh_path.rsplit(".", 1)[0] + ".tmpl"
        vertices, faces, _ = fileio.read_ply(mesh_path)
        albedo, diffuse, holes, lighting = \
            fileio.read_template_sidecar(sidecar_path)
        mesh = build_mesh(vertices, faces)
        return cls(mesh=mesh, albedo=albedo, lighting=lighting,
                   diffuse=np.clip(diffuse, 0.0, 1.0), holes=holes)


# ---------------------------------------------------------------------------
# acquisition steps


def median_diffuse(mesh: Mesh, seq: RigidSubsequence, camera: Camera):
    """Per-channel lower median of each vertex's color over the frames
    where it passes the z-buffer visibility test.

    Returns (diffuse (N, 3), holes (N,) bool); a hole is a vertex visible
    in no frame, its diffuse is 0 and downstream fits skip it.
    """
    n = mesh.n_vertices
    samples = np.full((len(seq), n, 3), np.nan)
    for f, view in enumerate(seq.frames):
        h, w = view.image.shape[:2]
        vis = compute_visibility(mesh, mesh.vertices, view.rotation,
                                 view.translation, camera, (w, h))
        if not len(vis):
            continue
        posed = mesh.vertices[vis] @ view.rotation.T + view.translation
        uv = np.column_stack([
            camera.fx * posed[:, 0] / posed[:, 2] + camera.cx,
            camera.fy * posed[:, 1] / posed[:, 2] + camera.cy,
        ])
        vals, _, ok = sample_bilinear_masked(view.image, uv)
        samples[f, vis[ok]] = vals[ok]

    holes = np.all(np.isnan(samples[:, :, 0]), axis=0)
    diffuse = np.zeros((n, 3))
    if not holes.all():
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            med = np.nanquantile(samples, 0.5, axis=0, method="lower")
        diffuse[~holes] = med[~holes]
    if holes.any():
        warnings.warn(
            f"{int(holes.sum())} of {n} vertices visible in no frame",
            TemplateWarning, stacklevel=2)
    return diffuse, np.ascontiguousarray(holes)


def _init_albedo(mesh: Mesh, diffuse, holes, spec: str):
    """'white' or 'kmeans:K' (Lloyd's on the non-hole diffuse colors)."""
    n = mesh.n_vertices
    if spec == "white":
        return np.ones((n, 3))
    if not spec.startswith("kmeans:"):
        raise ValueError(f"unknown init_albedo '{spec}'")
    k = int(spec.split(":", 1)[1])
    if k < 1:
        raise ValueError("kmeans cluster count must be >= 1")
    pts = diffuse[~holes]
    if not len(pts):
        return np.ones((n, 3))
    rng = np.random.default_rng(0)
    k = min(k, len(np.unique(pts, axis=0)))
    centers = pts[rng.choice(len(pts), size=k, replace=False)]
    for _ in range(25):
        d = np.linalg.norm(pts[:, None] - centers[None], axis=2)
        lab = d.argmin(axis=1)
        new = np.array([
            pts[lab == c].mean(axis=0) if np.any(lab == c) else centers[c]
            for c in range(k)])
        if np.allclose(new, centers, atol=1e-12):
            centers = new
            break
        centers = new
    albedo = np.ones((n, 3))
    d = np.linalg.norm(diffuse[:, None] - centers[None], axis=2)
    albedo[~holes] = centers[d.argmin(axis=1)][~holes]
    # clusters live in diffuse units; rescale so the brightest is white-ish,
    # keeping the fitted lighting in the same gauge as the white init
    top = albedo[~holes].max()
    if top > 1e-12:
        albedo /= top
    return albedo


def fit_sh(diffuse, mesh: Mesh, init_albedo, holes=None):
    """Lighting coefficients minimizing the robust per-vertex mismatch
    between the diffuse color and albedo * (lighting . basis(normal)).

    The residual is linear in the coefficients, so each reweighting round
    is one 9x9 normal solve. A rank-deficient normal distribution (planar
    mesh) triggers a warning and the minimum-norm solution.
    """
    diffuse = np.asarray(diffuse, dtype=np.float64)
    albedo = np.asarray(init_albedo, dtype=np.float64)
    if holes is None:
        holes = np.zeros(mesh.n_vertices, dtype=bool)
    keep = ~np.asarray(holes, dtype=bool)
    if keep.sum() < SH_DIM:
        warnings.warn("fewer usable vertices than lighting coefficients",
                      TemplateWarning, stacklevel=2)
    Y = sh_basis(vertex_normals(mesh, mesh.vertices))[keep]
    a = albedo[keep]
    d = diffuse[keep]

    # per-vertex 3-row block: d - a * (Y @ l);  A_blk = a[:, :, None] * Y
    l = np.zeros(SH_DIM)
    warned = False
    for _ in range(_IRLS_ROUNDS):
        r = d - a * (Y @ l)[:, None]
        norms = np.linalg.norm(r, axis=1)
        w = np.where(norms <= _HUBER_EPS, 1.0,
                     _HUBER_EPS / np.maximum(norms, 1e-300))
        aw = a * w[:, None]                       # (V, 3)
        s2 = (aw * a).sum(axis=1)                 # sum_c w a_c^2
        M = (Y * s2[:, None]).T @ Y
        b = Y.T @ (aw * d).sum(axis=1)
        rank = np.linalg.matrix_rank(M, tol=1e-10 * max(np.trace(M), 1e-30))
        if rank < SH_DIM:
            if not warned:
                warnings.warn(
                    "normal directions span a rank-deficient basis; "
                    "returning the minimum-norm lighting",
                    TemplateWarning, stacklevel=2)
                warned = True
            l_new = np.linalg.lstsq(M, b, rcond=None)[0]
        else:
            l_new = np.linalg.solve(M, b)
        if np.allclose(l_new, l, rtol=0, atol=1e-14):
            l = l_new
            break
        l = l_new
    return l


def fit_albedo(diffuse, mesh: Mesh, lighting, sigma_s: float, holes=None):
    """Per-vertex albedo under known lighting.

    Data term: shading-confidence-weighted Huber on diffuse - albedo *
    shading, confidence max(shading, 0) so badly-lit vertices defer to
    their neighbors. Smoothness: squared color-similarity-weighted edge
    differences, weight exp(-|dI|^2 / (2 sigma_s^2)), so sharp intensity
    edges keep sharp albedo edges. Hole vertices have no data term.
    """
    diffuse = np.asarray(diffuse, dtype=np.float64)
    lighting = np.asarray(lighting, dtype=np.float64).ravel()
    n = mesh.n_vertices
    if holes is None:
        holes = np.zeros(n, dtype=bool)
    holes = np.asarray(holes, dtype=bool)

    shading = sh_basis(vertex_normals(mesh, mesh.vertices)) @ lighting
    conf = np.maximum(shading, 0.0)
    conf[holes] = 0.0
    init = np.ones((n, 3))
    if conf.max(initial=0.0) * np.abs(shading).max(initial=0.0) < 1e-20:
        warnings.warn("no usable shading signal; albedo is degenerate",
                      TemplateWarning, stacklevel=2)
        return init

    ei, ej = mesh.edges[:, 0], mesh.edges[:, 1]
    dI = np.linalg.norm(diffuse[ei] - diffuse[ej], axis=1)
    w_edge = np.exp(-(dI * dI) / (2.0 * sigma_s * sigma_s))
    # each undirected edge appears twice in the neighbor-sum formulation
    L = sp.coo_matrix(
        (np.r_[w_edge, w_edge, -w_edge, -w_edge],
         (np.r_[ei, ej, ei, ej], np.r_[ei, ej, ej, ei])),
        shape=(n, n)).tocsc() * 2.0

    albedo = init.copy()
    for _ in range(_IRLS_ROUNDS):
        r = diffuse - albedo * shading[:, None]
        norms = np.linalg.norm(r, axis=1)
        h = np.where(norms <= _HUBER_EPS, 1.0,
                     _HUBER_EPS / np.maximum(norms, 1e-300))
        dw = conf * h * shading * shading + _ANCHOR
        A = (L + sp.diags(dw)).tocsc()
        rhs = (conf * h * shading)[:, None] * diffuse + _ANCHOR * init
        solve = factorized(A)
        albedo = np.column_stack([solve(rhs[:, c]) for c in range(3)])
    return np.maximum(albedo, 0.0)


def acquire_template(mesh: Mesh, seq: RigidSubsequence, camera: Camera,
                     config=None) -> Template:
    """Full acquisition: robust median color, then alternating lighting
    and albedo fits (`albedo_sh_rounds` rounds, default 2)."""
    rounds = int(getattr(config, "albedo_sh_rounds", 2) or 2)
    init_spec = getattr(config, "init_albedo", "white") or "white"
    sigma_s = float(getattr(config, "sigma_s", 0.1) or 0.1)

    diffuse, holes = median_diffuse(mesh, seq, camera)
    if holes.sum() >= 0.1 * mesh.n_vertices:
        warnings.warn(
            f"{int(holes.sum())} hole vertices "
            f"({100.0 * holes.sum() / mesh.n_vertices:.1f}% of the mesh)",
            TemplateWarning, stacklevel=2)

    albedo = _init_albedo(mesh, diffuse, holes, init_spec)
    lighting = np.zeros(SH_DIM)
    for _ in range(max(rounds, 1)):
        lighting = fit_sh(diffuse, mesh, albedo, holes)
        albedo = fit_albedo(diffuse, mesh, lighting, sigma_s, holes)
    return Template(mesh=mesh, albedo=albedo, lighting=lighting,
                    diffuse=diffuse, holes=holes)
