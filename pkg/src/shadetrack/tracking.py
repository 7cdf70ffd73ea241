"""Per-frame tracking schedule: staged robust optimization over a 3-level
image pyramid.

Each frame starts from the previous frame's state. Visibility is computed
once from that initialization at the coarsest level, then refreshed once
per level right after the rigid stage (the rigid fit realigns the
silhouette, so the refresh sees the corrected pose). Shape and lighting
are solved per level; the specular residues and the optional joint
refinement run at the finest level only. The specular residues live on
vertices, not pixels, so the finest-level estimate carries to every level
of the next frame automatically.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .camera import Camera, FramePyramid, backproject_depth
from .energy import EnergyProblem, EnergyWeights, FrameState, GROUP_NAMES
from .lm import SolverParams, solve_lm
from .mesh import vertex_normals
from .raster import compute_visibility, rasterize
from .rotations import angle_axis, rotation_matrix
from .shading import sh_basis
from .template import Template


@dataclass
class TrackReport:
    """Everything one frame's solve produced besides the state itself."""

    stages: list = field(default_factory=list)      # StageReport, in order
    visible_per_level: dict = field(default_factory=dict)  # level -> count
    neg_shading_frac: float = 0.0

    @property
    def final_energy(self) -> float:
        return self.stages[-1].final_energy if self.stages else 0.0

    @property
    def total_iterations(self) -> int:
        return sum(s.iterations for s in self.stages)

    @property
    def convergence_reason(self) -> str:
        return self.stages[-1].reason if self.stages else ""

    def stage_energies(self):
        return [(s.name, s.level, s.final_energy) for s in self.stages]


@dataclass
class FrameLevelData:
    """One pyramid level's inputs bundled for the stage functions; builds
    and caches the energy problem for the current visibility set."""

    template: Template
    image: np.ndarray
    camera: Camera
    level: int
    weights: EnergyWeights
    visible: np.ndarray
    prev_state: FrameState | None = None
    depth_cloud: np.ndarray | None = None
    specular_dim: int = 3
    baseline: bool = False
    reg_scale: float = 1.0

    def __post_init__(self):
        self._problem = None

    def with_visibility(self, visible) -> "FrameLevelData":
        return FrameLevelData(
            template=self.template, image=self.image, camera=self.camera,
            level=self.level, weights=self.weights, visible=visible,
            prev_state=self.prev_state, depth_cloud=self.depth_cloud,
            specular_dim=self.specular_dim, baseline=self.baseline,
            reg_scale=self.reg_scale)

    def problem(self) -> EnergyProblem:
        if self._problem is None:
            t = self.template
            self._problem = EnergyProblem(
                t.mesh, t.mesh.vertices, t.albedo, t.diffuse, self.image,
                self.camera, self.visible, self.weights,
                prev_state=self.prev_state, depth_cloud=self.depth_cloud,
                specular_dim=self.specular_dim, baseline=self.baseline,
                reg_scale=self.reg_scale)
        return self._problem


# ---------------------------------------------------------------------------
# stages


def rigid_stage(state: FrameState, template: Template,
                frame_level: FrameLevelData, params: SolverParams):
    """Pose-only solve; every non-pose variable is untouched."""
    return solve_lm(frame_level.problem(), {"rotation", "translation"},
                    state, params, stage_name="rigid",
                    level=frame_level.level)


def shape_light_stage(state: FrameState, template: Template,
                      frame_level: FrameLevelData, params: SolverParams):
    """Deformation + lighting solve (plus the per-vertex alignment
    rotations the deformation regularizer carries); pose and specular
    residues held. The brightness-constancy baseline has no lighting
    model, so there the solve covers geometry only."""
    groups = {"positions", "local_rotations"}
    if not frame_level.baseline:
        groups.add("lighting")
    return solve_lm(frame_level.problem(), groups, state, params,
                    stage_name="shape_light", level=frame_level.level)


def specularity_stage(state: FrameState, frame_level: FrameLevelData,
                      params: SolverParams):
    """Specular-residue solve at the finest level, all else held."""
    return solve_lm(frame_level.problem(), {"specular"}, state, params,
                    stage_name="specular", level=frame_level.level)


def joint_stage(state: FrameState, frame_level: FrameLevelData,
                params: SolverParams, groups=None):
    if groups is None:
        groups = set(GROUP_NAMES)
    return solve_lm(frame_level.problem(), groups, state, params,
                    stage_name="joint", level=frame_level.level)


# ---------------------------------------------------------------------------
# per-frame schedule


def initial_state(template: Template, specular_dim: int = 3) -> FrameState:
    """Frame-0 bootstrap: rest shape, identity pose, template lighting,
    zero specular residue."""
    state = FrameState.rest(template.mesh, specular_dim)
    state.lighting = template.lighting.copy()
    return state


def _visibility(template: Template, state: FrameState, camera: Camera,
                image) -> np.ndarray:
    h, w = image.shape[:2]
    return compute_visibility(template.mesh, state.positions,
                              rotation_matrix(state.rotation),
                              state.translation, camera, (w, h))


def _coverage(template: Template, state: FrameState, camera: Camera,
              image) -> float:
    h, w = image.shape[:2]
    posed = state.positions @ rotation_matrix(state.rotation).T \
        + state.translation
    res = rasterize(posed, template.mesh.faces, camera, (w, h))
    return float(res.coverage().mean())


def neg_shading_fraction(state: FrameState, template: Template,
                         visible) -> float:
    """Fraction of visible vertices whose predicted shading is negative;
    a diagnostic for lighting fits drifting outside the physical range."""
    if not len(visible):
        return 0.0
    normals = vertex_normals(template.mesh, state.positions)[visible]
    shading = sh_basis(normals @ rotation_matrix(state.rotation).T) \
        @ state.lighting
    return float(np.mean(shading < 0.0))


def _refit_pose_gauge(state: FrameState, template: Template) -> None:
    """Fold the global-rotation content of the deformation into the pose.

    The split between rigid pose and per-vertex shape is a gauge freedom:
    R s + t is unchanged under R -> R W^T, s -> W s (with the matching
    translation shift). Left alone, slow object rotation leaks into the
    shape as a tangential crawl the regularizers barely resist, and since
    only the pose extrapolates to the unseen side of the object, the
    unseen side falls behind by the leaked amount every frame. Rigidly
    re-aligning the shape to the template after each frame returns that
    rotation to the pose, where it carries the whole mesh.
    """
    rest = template.mesh.vertices
    src_c = state.positions.mean(axis=0)
    dst_c = rest.mean(axis=0)
    H = (state.positions - src_c).T @ (rest - dst_c)
    U, _, Vt = np.linalg.svd(H)
    # W maps current shape onto the template, det +1 (reflections barred)
    W = (U * [1.0, 1.0, np.linalg.det(U @ Vt)]) @ Vt
    W = W.T
    new_pos = (state.positions - src_c) @ W.T + dst_c
    bbox = template.mesh.bbox_diagonal()
    if np.max(np.abs(new_pos - state.positions)) < 1e-9 * bbox:
        return  # already in template gauge; keep the state bit-identical
    R = rotation_matrix(state.rotation)
    state.translation = R @ src_c + state.translation - (R @ W.T) @ dst_c
    state.rotation = angle_axis(R @ W.T)
    state.positions = new_pos
    # local rigidity frames ride along so the term energy is unchanged
    A = rotation_matrix(state.local_rotations)
    WA = np.einsum("ij,bjk->bik", W, A)
    state.local_rotations = np.array([angle_axis(m) for m in WA])


def track_frame(prev: FrameState, template: Template, frame: FramePyramid,
                weights: EnergyWeights, params: SolverParams, *,
                no_spec: bool = False, baseline: bool = False,
                level_weight_mode: str = "none"):
    """Track one frame from the previous state; returns (state, report).

    `no_spec` freezes the specular residues at their initial value
    (ablation); `baseline` replaces the reflectance model with fixed
    template colors (brightness constancy). `level_weight_mode`
    "visible_fraction" scales regularizer weights by the fraction of the
    level's pixels the model covers, keeping the data/regularizer balance
    stable as the data residual count shrinks fourfold per level.
    """
    if level_weight_mode not in ("none", "visible_fraction"):
        raise ValueError(f"unknown level_weight_mode '{level_weight_mode}'")
    weights = weights.resolved(template.mesh.bbox_diagonal())
    report = TrackReport()
    state = prev.copy()
    coarsest = frame.levels - 1

    visible = _visibility(template, state, frame.camera(coarsest),
                          frame.color(coarsest))

    def level_data(level, vis):
        # depth joins at the finest level only: decimated coarse clouds are
        # too sparsely sampled to act as anything but quantization noise
        depth_cloud = None
        if params.use_depth and level == 0 and frame.depth(level) is not None:
            depth_cloud = backproject_depth(frame.depth(level),
                                            frame.camera(level))
        reg = 1.0
        if level_weight_mode == "visible_fraction":
            reg = max(_coverage(template, state, frame.camera(level),
                                frame.color(level)), 1e-3)
        return FrameLevelData(
            template=template, image=frame.color(level),
            camera=frame.camera(level), level=level, weights=weights,
            visible=vis, prev_state=prev, depth_cloud=depth_cloud,
            specular_dim=prev.specular_dim, baseline=baseline,
            reg_scale=reg)

    def run(stage_fn, *args):
        nonlocal state
        try:
            state, sub = stage_fn(*args)
        except Exception as err:
            err.report = report        # partial schedule up to the failure
            raise
        report.stages.append(sub)
        return sub

    # coarse passes only need to land in the basin the next level refines,
    # so their stop tolerance is far looser than the finest level's; the
    # residue-only pass likewise stops early since it never moves geometry
    coarse_params = replace(params, ftol=params.ftol * 100.0)
    spec_params = replace(params, ftol=params.ftol * 10.0)

    for level in range(coarsest, -1, -1):
        level_params = params if level == 0 else coarse_params
        data = level_data(level, visible)
        # the rigid fit keeps the full tolerance at every level: its motion
        # signal is subpixel, so it needs the deep tail of the descent, and
        # with only six unknowns those extra iterations are cheap
        run(rigid_stage, state, template, data, params)

        visible = _visibility(template, state, frame.camera(level),
                              frame.color(level))
        report.visible_per_level[level] = int(len(visible))
        data = data.with_visibility(visible)
        run(shape_light_stage, state, template, data, level_params)

        if level == 0:
            if not (no_spec or baseline):
                run(specularity_stage, state, data, spec_params)
            if params.joint_refinement:
                groups = set(GROUP_NAMES)
                if no_spec or baseline:
                    groups.discard("specular")
                if baseline:
                    groups.discard("lighting")
                run(joint_stage, state, data, params, groups)

    _refit_pose_gauge(state, template)
    report.neg_shading_frac = neg_shading_fraction(state, template, visible)
    return state, report


def track_sequence(template: Template, pyramids, weights: EnergyWeights,
                   params: SolverParams, *, no_spec: bool = False,
                   baseline: bool = False, level_weight_mode: str = "none",
                   initial: FrameState | None = None, on_frame=None):
    """Track an iterable of FramePyramids; yields (state, report) pairs.

    `on_frame(index, state, report)` runs after each frame (checkpointing,
    progress). Frame 0 starts from `initial` or the template bootstrap.
    """
    state = initial if initial is not None else initial_state(template)
    for index, pyramid in enumerate(pyramids):
        state, rep = track_frame(
            state, template, pyramid, weights, params, no_spec=no_spec,
            baseline=baseline, level_weight_mode=level_weight_mode)
        if on_frame is not None:
            on_frame(index, state, rep)
        yield state, rep
