"""Template-based non-rigid 3D tracking with shape-from-shading and
explicit specularity handling, plus the synthetic benchmark that
validates it end to end.

The usual flow: acquire a `Template` from a rigid warm-up subsequence
(`acquire_template`), then run `track_frame` per video frame, starting
from `initial_state`. The `shadetrack` command line wraps the same calls.
"""

from .camera import BehindCameraError, Camera, FramePyramid, build_pyramid
from .config import ConfigError, TrackerConfig, load_config
from .energy import (EnergyProblem, EnergyWeights, FrameState,
                     NonFiniteBlockError, total_energy)
from .evaluation import EvalReport, evaluate_rms
from .lm import SolverParams, StageReport, solve_lm
from .mesh import Mesh, build_mesh, icosphere, make_grid, vertex_normals
from .raster import compute_visibility, rasterize
from .shading import SH_DIM, irradiance, predict_intensity, sh_basis
from .synth import (GroundTruthSequence, Scenario, generate_sequence,
                    make_deforming_sphere, perturb_template, render_frame)
from .template import (RigidSubsequence, RigidView, Template,
                       TemplateWarning, acquire_template, fit_albedo,
                       fit_sh, median_diffuse)
from .tracking import (TrackReport, initial_state, rigid_stage,
                       shape_light_stage, specularity_stage, track_frame,
                       track_sequence)

__version__ = "0.1.0"

__all__ = [
    "BehindCameraError", "Camera", "ConfigError", "EnergyProblem",
    "EnergyWeights", "EvalReport", "FramePyramid", "FrameState",
    "GroundTruthSequence", "Mesh", "NonFiniteBlockError",
    "RigidSubsequence", "RigidView", "SH_DIM", "Scenario", "SolverParams",
    "StageReport", "Template", "TemplateWarning", "TrackReport",
    "TrackerConfig", "acquire_template", "build_mesh", "build_pyramid",
    "compute_visibility", "evaluate_rms", "fit_albedo", "fit_sh",
    "generate_sequence", "icosphere", "initial_state", "irradiance",
    "load_config", "make_deforming_sphere", "make_grid", "median_diffuse",
    "perturb_template", "predict_intensity", "rasterize", "render_frame",
    "rigid_stage", "shape_light_stage", "solve_lm", "specularity_stage",
    "total_energy", "track_frame", "track_sequence", "vertex_normals",
    "__version__",
]
