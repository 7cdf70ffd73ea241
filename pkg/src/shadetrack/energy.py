"""Per-frame tracking energy: residual families, robust weighting, and
sparse Jacobian assembly.

The total cost is a weighted sum over residual blocks

    E = sum_f w_f * sum_b loss_f(|| r_b ||_2)

where each family f is either plain squared or Huber-robust. For the
solver every family is expressed in iteratively-reweighted least-squares
form: rows of block b are scaled by sqrt(w_f * rho'(x)/(2x)) so that the
scaled normal equations carry the exact gradient of the true robust cost.
Step acceptance always re-evaluates the true cost, never the surrogate.

Jacobian sparsity structure (COO rows/cols) is precomputed per stage once
per visibility epoch; per-iteration work only refills the value array and
permutes it into a cached CSR layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from . import rotations
from .camera import Camera, project_jacobian, sample_bilinear_masked, sample_mask
from .mesh import Mesh, vertex_normals, vertex_normals_jacobian
from .shading import SH_DIM, _sh_basis_unchecked, sh_basis_jacobian

_MIN_Z = 1e-9

GROUP_NAMES = ("positions", "rotation", "translation", "lighting",
               "specular", "local_rotations")


class NonFiniteBlockError(RuntimeError):
    """A residual family produced NaN or infinity; names the family."""


# ---------------------------------------------------------------------------
# state, weights, layout


@dataclass
class FrameState:
    """All per-frame unknowns.

    positions       (N, 3) mesh vertex positions (template/world frame)
    rotation        (3,)   rigid rotation, angle-axis
    translation     (3,)   rigid translation
    lighting        (9,)   spherical-harmonic illumination coefficients
    specular        (N, 3) or (N, 1) additive specular intensity residues
    local_rotations (N, 3) per-vertex angle-axis rotations used by the
                           local-rigidity term
    """

    positions: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    lighting: np.ndarray
    specular: np.ndarray
    local_rotations: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.lighting = np.asarray(self.lighting, dtype=np.float64).reshape(SH_DIM)
        self.specular = np.asarray(self.specular, dtype=np.float64)
        self.local_rotations = np.asarray(self.local_rotations, dtype=np.float64)
        n = len(self.positions)
        if self.specular.ndim != 2 or self.specular.shape[0] != n:
            raise ValueError("specular must be (n_vertices, 1 or 3)")
        if self.local_rotations.shape != (n, 3):
            raise ValueError("local_rotations must be (n_vertices, 3)")

    @property
    def specular_dim(self) -> int:
        return self.specular.shape[1]

    def copy(self) -> "FrameState":
        return FrameState(
            self.positions.copy(), self.rotation.copy(), self.translation.copy(),
            self.lighting.copy(), self.specular.copy(), self.local_rotations.copy(),
        )

    @staticmethod
    def rest(mesh: Mesh, specular_dim: int = 3) -> "FrameState":
        n = mesh.n_vertices
        return FrameState(
            mesh.vertices.copy(), np.zeros(3), np.zeros(3),
            np.zeros(SH_DIM), np.zeros((n, specular_dim)), np.zeros((n, 3)),
        )


@dataclass(frozen=True)
class EnergyWeights:
    """Term weights and robust-loss thresholds.

    Geometric Huber thresholds (eps_huber_tv, eps_huber_depth) default to
    None meaning "resolve to 1% of the template bounding-box diagonal";
    intensity-scale thresholds default to 0.05.
    """

    w_data: float = 1.0
    w_tv: float = 0.5
    w_lap: float = 0.25
    w_spec_smooth: float = 0.1
    w_arap: float = 1.0
    w_temp_S: float = 0.05
    w_temp_t: float = 0.05
    w_temp_l: float = 0.05
    w_temp_beta: float = 0.05
    w_sparse: float = 0.5
    w_depth: float = 2.0
    eps_huber_data: float = 0.05
    eps_huber_tv: float | None = None
    eps_huber_spec: float = 0.05
    eps_huber_sparse: float = 0.05
    eps_huber_depth: float | None = None
    sigma_s: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if f.name.startswith("w_") and v < 0:
                raise ValueError(f"{f.name} must be nonnegative")
            if (f.name.startswith("eps_") or f.name == "sigma_s") and v <= 0:
                raise ValueError(f"{f.name} must be positive")

    def resolved(self, bbox_diagonal: float) -> "EnergyWeights":
        """Fill unresolved geometric thresholds from the object scale.

        TV gets 1% of the bbox diagonal. The depth threshold is far
        tighter (0.025%): it caps the nearest-point pull below the image
        term's forces, so the cloud's pixel-quantization jitter cannot
        overpower photometric evidence while coherent drift corrections
        still accumulate.
        """
        kw = {}
        if self.eps_huber_tv is None:
            kw["eps_huber_tv"] = 0.01 * float(bbox_diagonal)
        if self.eps_huber_depth is None:
            kw["eps_huber_depth"] = 0.00025 * float(bbox_diagonal)
        return replace(self, **kw) if kw else self


def huber(r, eps: float) -> float:
    """Robust penalty of the L2 norm of r: x^2 inside eps, linear outside."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = float(np.linalg.norm(np.asarray(r, dtype=float).ravel()))
    if x <= eps:
        return x * x
    return 2.0 * eps * x - eps * eps


def _huber_total(norms: np.ndarray, eps: float) -> float:
    out = np.where(norms <= eps, norms * norms, 2.0 * eps * norms - eps * eps)
    return float(out.sum())


def _irls_weights(norms: np.ndarray, eps: float) -> np.ndarray:
    # rho'(x)/(2x): 1 on the quadratic branch, eps/x on the linear branch
    w = np.ones_like(norms)
    big = norms > eps
    w[big] = eps / norms[big]
    return w


class VariableLayout:
    """Flat ordering of the unknowns:
    [positions | rotation | translation | lighting | specular | local_rotations]
    """

    def __init__(self, n_vertices: int, specular_dim: int = 3):
        if specular_dim not in (1, 3):
            raise ValueError("specular_dim must be 1 or 3")
        self.n_vertices = n_vertices
        self.specular_dim = specular_dim
        n = n_vertices
        cursor = 0
        self.slices: dict[str, slice] = {}
        for name, size in (
            ("positions", 3 * n), ("rotation", 3), ("translation", 3),
            ("lighting", SH_DIM), ("specular", specular_dim * n),
            ("local_rotations", 3 * n),
        ):
            self.slices[name] = slice(cursor, cursor + size)
            cursor += size
        self.n_variables = cursor

    def offset(self, group: str) -> int:
        return self.slices[group].start

    def flatten(self, state: FrameState) -> np.ndarray:
        x = np.empty(self.n_variables)
        x[self.slices["positions"]] = state.positions.ravel()
        x[self.slices["rotation"]] = state.rotation
        x[self.slices["translation"]] = state.translation
        x[self.slices["lighting"]] = state.lighting
        x[self.slices["specular"]] = state.specular.ravel()
        x[self.slices["local_rotations"]] = state.local_rotations.ravel()
        return x

    def unflatten(self, x: np.ndarray) -> FrameState:
        n = self.n_vertices
        return FrameState(
            x[self.slices["positions"]].reshape(n, 3),
            x[self.slices["rotation"]],
            x[self.slices["translation"]],
            x[self.slices["lighting"]],
            x[self.slices["specular"]].reshape(n, self.specular_dim),
            x[self.slices["local_rotations"]].reshape(n, 3),
        )

    def group_mask(self, groups) -> np.ndarray:
        mask = np.zeros(self.n_variables, dtype=bool)
        for g in groups:
            mask[self.slices[g]] = True
        return mask


# ---------------------------------------------------------------------------
# shared per-state evaluation cache


class StateEval:
    """Lazy cache of quantities several residual families share at one
    state: pose matrices, posed/projected vertices, image samples, normals
    and their derivatives, and the shading basis."""

    def __init__(self, problem: "EnergyProblem", state: FrameState):
        self.p = problem
        self.state = state

    @cached_property
    def R(self) -> np.ndarray:
        return rotations.rotation_matrix(self.state.rotation)

    @cached_property
    def posed_visible(self) -> np.ndarray:
        s = self.state.positions[self.p.visible]
        return s @ self.R.T + self.state.translation

    @cached_property
    def projection(self):
        """(uv, valid) for visible vertices; invalid rows are zeroed."""
        p = self.posed_visible
        z = p[:, 2]
        ok = z > _MIN_Z
        zsafe = np.where(ok, z, 1.0)
        cam = self.p.camera
        uv = np.stack(
            [cam.fx * p[:, 0] / zsafe + cam.cx, cam.fy * p[:, 1] / zsafe + cam.cy],
            axis=1,
        )
        uv[~ok] = -1.0  # guaranteed outside the sampling margin
        return uv, ok

    @cached_property
    def samples(self):
        """(colors, gradients, valid) of the frame image at the projections."""
        uv, ok = self.projection
        vals, grads, inside = sample_bilinear_masked(self.p.image, uv)
        return vals, grads, inside & ok

    @cached_property
    def normals(self) -> np.ndarray:
        return vertex_normals(self.p.mesh, self.state.positions)

    @cached_property
    def normals_and_pairs(self):
        return vertex_normals_jacobian(self.p.mesh, self.state.positions)

    @cached_property
    def rotated_normals_visible(self) -> np.ndarray:
        normals = self.normals_and_pairs[0] if "normals_and_pairs" in self.__dict__ \
            else self.normals
        return normals[self.p.visible] @ self.R.T

    @cached_property
    def sh_visible(self) -> np.ndarray:
        return _sh_basis_unchecked(self.rotated_normals_visible)

    @cached_property
    def shading_visible(self) -> np.ndarray:
        return self.sh_visible @ self.state.lighting


# ---------------------------------------------------------------------------
# residual families


def _block_coo(row_base, col_base, br: int, bc: int):
    """COO indices for dense (br x bc) blocks; entry order matches
    blocks.reshape(-1, br*bc).ravel()."""
    rb = np.asarray(row_base, dtype=np.int64)
    cb = np.asarray(col_base, dtype=np.int64)
    rows = (rb[:, None, None] + np.arange(br)[None, :, None] +
            np.zeros((1, 1, bc), dtype=np.int64)).ravel()
    cols = (cb[:, None, None] + np.zeros((1, br, 1), dtype=np.int64) +
            np.arange(bc)[None, None, :]).ravel()
    return rows, cols


def _diag_coo(row_base, col_base, b: int):
    """COO indices for diagonal b x b blocks (b entries per block)."""
    rb = np.asarray(row_base, dtype=np.int64)
    cb = np.asarray(col_base, dtype=np.int64)
    rows = (rb[:, None] + np.arange(b)[None, :]).ravel()
    cols = (cb[:, None] + np.arange(b)[None, :]).ravel()
    return rows, cols


class _Term:
    """One residual family.

    Subclasses define `segments` { name: (group, rows, cols) } plus
    `static_vals` { name: values } for structure whose values never change;
    `fill` returns values for the remaining segments.
    """

    name: str
    loss: str          # "huber" | "sq"
    weight_key: str
    eps_key: str | None = None
    block: int = 3

    def __init__(self):
        self.segments: dict[str, tuple[str, np.ndarray, np.ndarray]] = {}
        self.static_vals: dict[str, np.ndarray] = {}
        self.n_blocks = 0

    @property
    def n_rows(self) -> int:
        return self.block * self.n_blocks

    def groups(self):
        return {g for g, _, _ in self.segments.values()}

    def residuals(self, state: FrameState, ev: StateEval) -> np.ndarray:
        raise NotImplementedError

    def fill(self, state: FrameState, ev: StateEval, need=None):
        """-> (residuals, {segment: values}) for non-static segments.

        `need` restricts which segments require values (None = all);
        implementations may skip work for segments outside it.
        """
        return self.residuals(state, ev), {}

    def jacobian(self, state: FrameState, ev: StateEval,
                 n_variables: int) -> sp.csr_matrix:
        """Raw (unweighted) Jacobian over the full variable vector."""
        r, dyn = self.fill(state, ev)
        rows, cols, vals = [], [], []
        for seg, (_, rr, cc) in self.segments.items():
            rows.append(rr)
            cols.append(cc)
            vals.append(self.static_vals.get(seg, dyn.get(seg)))
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_rows, n_variables))


class DataTerm(_Term):
    """Photometric term: sampled image color minus predicted reflectance
    at each visible vertex. Prediction is albedo * SH shading + specular
    residue, or the fixed template diffuse color in baseline mode."""

    name = "data"
    loss = "huber"
    weight_key = "w_data"
    eps_key = "eps_huber_data"
    block = 3

    def __init__(self, problem: "EnergyProblem"):
        super().__init__()
        p = problem
        vis = p.visible
        nv = len(vis)
        self.n_blocks = nv
        lay = p.layout
        row3 = 3 * np.arange(nv, dtype=np.int64)
        mesh = p.mesh

        if not p.baseline:
            # normal-dependency pairs restricted to visible center vertices;
            # the (i, i) pair merges into the direct position block to keep
            # the COO structure duplicate-free
            center_visible = np.zeros(mesh.n_vertices, dtype=bool)
            center_visible[vis] = True
            keep = center_visible[mesh.normal_pair_i]
            self.pair_sel = np.flatnonzero(keep)
            pi = mesh.normal_pair_i[self.pair_sel]
            pj = mesh.normal_pair_j[self.pair_sel]
            self_mask = pi == pj
            self.pair_self = self.pair_sel[self_mask]
            self.pair_other = self.pair_sel[~self_mask]
            rank = np.searchsorted(vis, pi)
            self.rank_self = rank[self_mask]          # one per visible vertex
            self.rank_other = rank[~self_mask]
            self.pj_other = pj[~self_mask]

        self.segments["S_direct"] = (
            "positions", *_block_coo(row3, lay.offset("positions") + 3 * vis, 3, 3))
        if not p.baseline:
            self.segments["S_pairs"] = (
                "positions",
                *_block_coo(3 * self.rank_other,
                            lay.offset("positions") + 3 * self.pj_other, 3, 3))
        self.segments["w"] = (
            "rotation", *_block_coo(row3, np.full(nv, lay.offset("rotation")), 3, 3))
        self.segments["t"] = (
            "translation",
            *_block_coo(row3, np.full(nv, lay.offset("translation")), 3, 3))
        if not p.baseline:
            self.segments["l"] = (
                "lighting",
                *_block_coo(row3, np.full(nv, lay.offset("lighting")), 3, SH_DIM))
            sd = lay.specular_dim
            self.segments["beta"] = (
                "specular",
                *_block_coo(row3, lay.offset("specular") + sd * vis, 3, sd))
        self.problem = p

    def _prediction(self, state: FrameState, ev: StateEval):
        p = self.problem
        if p.baseline:
            return p.diffuse[p.visible]
        shading = ev.shading_visible
        pred = p.albedo[p.visible] * shading[:, None]
        beta = state.specular[p.visible]
        return pred + (beta if beta.shape[1] == 3 else beta)

    def residuals(self, state: FrameState, ev: StateEval) -> np.ndarray:
        colors, _, valid = ev.samples
        r = colors - self._prediction(state, ev)
        r[~valid] = 0.0
        return r.ravel()

    def fill(self, state: FrameState, ev: StateEval, need=None):
        p = self.problem
        vis = p.visible
        if need is None:
            need = set(self.segments)
        colors, grads, valid = ev.samples
        r = colors - self._prediction(state, ev)
        r[~valid] = 0.0

        vals = {}
        if need & {"S_direct", "w", "t"}:
            posed = ev.posed_visible
            P = project_jacobian(np.where(valid[:, None], posed,
                                          np.array([0.0, 0.0, 1.0])), p.camera)
            GP = grads @ P                               # (V, 3, 3)
            R = ev.R
            if "S_direct" in need:
                vals["S_direct"] = GP @ R
            if "t" in need:
                vals["t"] = GP.copy()
            if "w" in need:
                vals["w"] = GP @ rotations.rotate_jacobian(
                    state.rotation, state.positions[vis], R=R)

        if not p.baseline:
            alb = p.albedo[vis]
            if need & {"S_direct", "S_pairs", "w", "l"}:
                R = ev.R
                m = ev.rotated_normals_visible
                dY = sh_basis_jacobian(m)                # (V, 9, 3)
                qm = np.einsum("k,vki->vi", state.lighting, dY)  # d shading/dm
            if need & {"S_direct", "S_pairs"}:
                # normal chain: -albedo outer (qm @ R @ dn/ds_j); the (i, i)
                # pair folds into the direct position block
                pair_blocks = ev.normals_and_pairs[1]
                q = qm @ R
                qb_self = np.einsum("vi,vij->vj", q[self.rank_self],
                                    pair_blocks[self.pair_self])
                vals["S_direct"] = vals["S_direct"] \
                    - alb[:, :, None] * qb_self[:, None, :]
                qb_other = np.einsum("vi,vij->vj", q[self.rank_other],
                                     pair_blocks[self.pair_other])
                vals["S_pairs"] = -(alb[self.rank_other][:, :, None]
                                    * qb_other[:, None, :])
            if "w" in need:
                vals["w"] = vals["w"] - alb[:, :, None] * np.einsum(
                    "vi,vij->vj", qm,
                    rotations.rotate_jacobian(state.rotation, ev.normals[vis], R=R)
                )[:, None, :]
            if "l" in need:
                vals["l"] = -(alb[:, :, None] * ev.sh_visible[:, None, :])
            if "beta" in need:
                sd = p.layout.specular_dim
                eye = -np.eye(3)[:, :sd] if sd == 3 else -np.ones((3, 1))
                vals["beta"] = np.broadcast_to(eye, (len(vis), 3, sd)).copy()

        for key in vals:
            blocks = vals[key]
            if key == "S_pairs":
                blocks[~valid[self.rank_other]] = 0.0
            else:
                blocks[~valid] = 0.0
            vals[key] = blocks.reshape(len(blocks), -1).ravel()
        return r.ravel(), vals


class TVTerm(_Term):
    """Edge-difference deviation from the template, per visible edge."""

    name = "tv"
    loss = "huber"
    weight_key = "w_tv"
    eps_key = "eps_huber_tv"

    def __init__(self, problem: "EnergyProblem"):
        super().__init__()
        p = problem
        flag = np.zeros(p.mesh.n_vertices, dtype=bool)
        flag[p.visible] = True
        e = p.mesh.edges
        keep = flag[e[:, 0]] & flag[e[:, 1]]
        self.ei = e[keep, 0]
        self.ej = e[keep, 1]
        self.n_blocks = len(self.ei)
        self.rest = p.rest_positions[self.ei] - p.rest_positions[self.ej]
        row3 = 3 * np.arange(self.n_blocks, dtype=np.int64)
        off = p.layout.offset("positions")
        self.segments["pos_i"] = ("positions", *_diag_coo(row3, off + 3 * self.ei, 3))
        self.segments["pos_j"] = ("positions", *_diag_coo(row3, off + 3 * self.ej, 3))
        self.static_vals["pos_i"] = np.ones(3 * self.n_blocks)
        self.static_vals["pos_j"] = -np.ones(3 * self.n_blocks)

    def residuals(self, state, ev):
        cur = state.positions[self.ei] - state.positions[self.ej]
        return (cur - self.rest).ravel()


class LaplacianTerm(_Term):
    """Degree-normalized umbrella vector per visible vertex (squared)."""

    name = "laplacian"
    loss = "sq"
    weight_key = "w_lap"

    def __init__(self, problem: "EnergyProblem"):
        super().__init__()
        p = problem
        vis = p.visible
        self.vis = vis
        self.n_blocks = len(vis)
        adj = p.mesh.adjacency[vis]
        self.adj_rows = adj
        deg = p.mesh.degrees[vis].astype(np.float64)
        self.inv_deg = 1.0 / deg
        row3 = 3 * np.arange(self.n_blocks, dtype=np.int64)
        off = p.layout.offset("positions")
        self.segments["self"] = ("positions", *_diag_coo(row3, off + 3 * vis, 3))
        self.static_vals["self"] = np.ones(3 * self.n_blocks)
        nbr = adj.indices.astype(np.int64)
        counts = np.diff(adj.indptr)
        row_rep = np.repeat(row3, counts)
        self.segments["nbr"] = ("positions", *_diag_coo(row_rep, off + 3 * nbr, 3))
        # one diagonal 3-block per (vertex, neighbor) pair, all -1/deg_i
        self.static_vals["nbr"] = np.repeat(np.repeat(-self.inv_deg, counts), 3)

    def residuals(self, state, ev):
        s = state.positions
        if self.n_blocks == 0:
            return np.zeros(0)
        return (s[self.vis] - (self.adj_rows @ s) * self.inv_deg[:, None]).ravel()


class SpecSmoothTerm(_Term):
    """Specular residue difference per visible edge."""

    name = "spec_smooth"
    loss = "huber"
    weight_key = "w_spec_smooth"
    eps_key = "eps_huber_spec"

    def __init__(self, problem: "EnergyProblem"):
        super().__init__()
        p = problem
        sd = p.layout.specular_dim
        self.block = sd
        flag = np.zeros(p.mesh.n_vertices, dtype=bool)
        flag[p.visible] = True
        e = p.mesh.edges
        keep = flag[e[:, 0]] & flag[e[:, 1]]
        self.ei = e[keep, 0]
        self.ej = e[keep, 1]
        self.n_blocks = len(self.ei)
        rowb = sd * np.arange(self.n_blocks, dtype=np.int64)
        off = p.layout.offset("specular")
        self.segments["beta_i"] = ("specular", *_diag_coo(rowb, off + sd * self.ei, sd))
        self.segments["beta_j"] = ("specular", *_diag_coo(rowb, off + sd * self.ej, sd))
        self.static_vals["beta_i"] = np.ones(sd * self.n_blocks)
        self.static_vals["beta_j"] = -np.ones(sd * self.n_blocks)

    def residuals(self, state, ev):
        return (state.specular[self.ei] - state.specular[self.ej]).ravel()


class ArapTerm(_Term):
    """Local-rigidity term over all directed neighbor pairs: current edge
    vector minus the per-vertex-rotated template edge vector (squared)."""

    name = "arap"
    loss = "sq"
    weight_key = "w_arap"

    def __init__(self, problem: "EnergyProblem"):
        super().__init__()
        p = problem
        adj = p.mesh.adjacency
        self.j = adj.indices.astype(np.int64)
        self.i = np.repeat(np.arange(p.mesh.n_vertices, dtype=np.int64),
                           np.diff(adj.indptr))
        self.n_blocks = len(self.i)
        self.rest_edges = p.rest_positions[self.i] - p.rest_positions[self.j]
        row3 = 3 * np.arange(self.n_blocks, dtype=np.int64)
        lay = p.layout
        off_s = lay.offset("positions")
        self.segments["pos_i"] = ("positions", *_diag_coo(row3, off_s + 3 * self.i, 3))
        self.segments["pos_j"] = ("positions", *_diag_coo(row3, off_s + 3 * self.j, 3))
        self.static_vals["pos_i"] = np.ones(3 * self.n_blocks)
        self.static_vals["pos_j"] = -np.ones(3 * self.n_blocks)
        off_a = lay.offset("local_rotations")
        self.segments["A"] = (
            "local_rotations", *_block_coo(row3, off_a + 3 * self.i, 3, 3))

    def _rotated_rest(self, state):
        Ai = rotations.rotation_matrix(state.local_rotations)  # (N, 3, 3)
        return np.einsum("bij,bj->bi", Ai[self.i], self.rest_edges)

    def residuals(self, state, ev):
        cur = state.positions[self.i] - state.positions[self.j]
        return (cur - self._rotated_rest(state)).ravel()

    def fill(self, state, ev, need=None):
        r = self.residuals(state, ev)
        if need is not None and "A" not in need:
            return r, {}
        dA = -rotations.rotate_jacobian(state.local_rotations[self.i],
                                        self.rest_edges)
        return r, {"A": dA.reshape(self.n_blocks, -1).ravel()}


class _TemporalTerm(_Term):
    loss = "sq"

    def __init__(self, problem, group, prev_value, getter, block):
        super().__init__()
        self.block = block
        self.prev = np.asarray(prev_value, dtype=np.float64).ravel()
        self.getter = getter
        size = self.prev.size
        self.n_blocks = size // block
        rows = np.arange(0, size, block, dtype=np.int64)
        cols = problem.layout.offset(group) + rows
        self.segments["id"] = (group, *_diag_coo(rows, cols, block))
        self.static_vals["id"] = np.ones(size)

    def residuals(self, state, ev):
        return self.getter(state).ravel() - self.prev


class TemporalPositions(_TemporalTerm):
    name = "temp_positions"
    weight_key = "w_temp_S"

    def __init__(self, problem, prev_state):
        super().__init__(problem, "positions", prev_state.positions,
                         lambda s: s.positions, 3)


class TemporalTranslation(_TemporalTerm):
    name = "temp_translation"
    weight_key = "w_temp_t"

    def __init__(self, problem, prev_state):
        super().__init__(problem, "translation", prev_state.translation,
                         lambda s: s.translation, 3)


class TemporalLighting(_TemporalTerm):
    name = "temp_lighting"
    weight_key = "w_temp_l"

    def __init__(self, problem, prev_state):
        super().__init__(problem, "lighting", prev_state.lighting,
                         lambda s: s.lighting, SH_DIM)


class TemporalSpecular(_TemporalTerm):
    name = "temp_specular"
    weight_key = "w_temp_beta"

    def __init__(self, problem, prev_state):
        super().__init__(problem, "specular", prev_state.specular,
                         lambda s: s.specular, prev_state.specular.shape[1])


class SparsityTerm(_Term):
    """Huber penalty on each visible vertex's specular residue."""

    name = "sparsity"
    loss = "huber"
    weight_key = "w_sparse"
    eps_key = "eps_huber_sparse"

    def __init__(self, problem: "EnergyProblem"):
        super().__init__()
        p = problem
        sd = p.layout.specular_dim
        self.block = sd
        self.vis = p.visible
        self.n_blocks = len(self.vis)
        rowb = sd * np.arange(self.n_blocks, dtype=np.int64)
        off = p.layout.offset("specular")
        self.segments["id"] = ("specular", *_diag_coo(rowb, off + sd * self.vis, sd))
        self.static_vals["id"] = np.ones(sd * self.n_blocks)

    def residuals(self, state, ev):
        return state.specular[self.vis].ravel()


class DepthTerm(_Term):
    """Distance from each posed visible vertex to its nearest point of the
    backprojected depth cloud. The association is frozen during each
    linearization and refreshed between solver iterations; a refresh can
    only tighten distances, so the true cost never increases from it."""

    name = "depth"
    loss = "huber"
    weight_key = "w_depth"
    eps_key = "eps_huber_depth"

    def __init__(self, problem: "EnergyProblem", cloud: np.ndarray):
        super().__init__()
        p = problem
        self.problem = p
        self.cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
        self.tree = cKDTree(self.cloud)
        vis = p.visible
        self.vis = vis
        self.n_blocks = len(vis)
        self.targets = np.zeros((self.n_blocks, 3))
        row3 = 3 * np.arange(self.n_blocks, dtype=np.int64)
        lay = p.layout
        self.segments["S"] = (
            "positions", *_block_coo(row3, lay.offset("positions") + 3 * vis, 3, 3))
        self.segments["w"] = (
            "rotation",
            *_block_coo(row3, np.full(self.n_blocks, lay.offset("rotation")), 3, 3))
        self.segments["t"] = (
            "translation",
            *_diag_coo(row3, np.full(self.n_blocks, lay.offset("translation")), 3))
        self.static_vals["t"] = np.ones(3 * self.n_blocks)

    def refresh(self, state: FrameState):
        R = rotations.rotation_matrix(state.rotation)
        posed = state.positions[self.vis] @ R.T + state.translation
        _, idx = self.tree.query(posed)
        self.targets = self.cloud[idx]

    def residuals(self, state, ev):
        return (ev.posed_visible - self.targets).ravel()

    def fill(self, state, ev, need=None):
        r = self.residuals(state, ev)
        if need is None:
            need = set(self.segments)
        R = ev.R
        nb = self.n_blocks
        vals = {}
        if "S" in need:
            vals["S"] = np.broadcast_to(R, (nb, 3, 3)).reshape(nb, -1).ravel()
        if "w" in need:
            vals["w"] = rotations.rotate_jacobian(
                state.rotation, state.positions[self.vis], R=R
            ).reshape(nb, -1).ravel()
        return r, vals


# ---------------------------------------------------------------------------
# assembled problem


class StageSystem:
    """Precomputed sparse structure for one set of active variable groups.

    Terms touching no active group are excluded entirely (they contribute
    a constant to the energy and nothing to the gradient on active
    columns). For included terms only segments on active groups enter the
    Jacobian; all their rows stay so residual bookkeeping is shared.
    """

    def __init__(self, problem: "EnergyProblem", groups: frozenset):
        self.problem = problem
        self.groups = groups
        active = problem.layout.group_mask(groups)
        self.active_cols = np.flatnonzero(active)
        self.n_cols = len(self.active_cols)
        col_local = np.full(problem.layout.n_variables, -1, dtype=np.int64)
        col_local[self.active_cols] = np.arange(self.n_cols)

        # (start, size) runs in local column space: 3 per vertex quantity,
        # the lighting coefficients as one block, pose vectors whole
        layout = problem.layout
        self.precond_blocks = []
        cursor = 0
        for g in GROUP_NAMES:
            if g not in groups:
                continue
            width = layout.slices[g].stop - layout.slices[g].start
            per = {"rotation": 3, "translation": 3, "lighting": SH_DIM,
                   "specular": layout.specular_dim}.get(g, 3)
            self.precond_blocks += [(cursor + s, per)
                                    for s in range(0, width, per)]
            cursor += width

        self.terms = [t for t in problem.terms if t.groups() & groups]
        rows_cat, cols_cat = [], []
        self.plan = []            # (term, row_offset, need, [(seg, val slice)])
        self.n_rows = 0
        nval = 0
        for term in self.terms:
            seg_plan = []
            for seg, (group, rows, cols) in term.segments.items():
                if group not in groups:
                    continue
                rows_cat.append(rows + self.n_rows)
                cols_cat.append(col_local[cols])
                seg_plan.append((seg, slice(nval, nval + len(rows))))
                nval += len(rows)
            need = {seg for seg, _ in seg_plan
                    if seg not in term.static_vals}
            self.plan.append((term, self.n_rows, need, seg_plan))
            self.n_rows += term.n_rows
        self.n_values = nval

        rows_cat = np.concatenate(rows_cat) if rows_cat else np.zeros(0, np.int64)
        cols_cat = np.concatenate(cols_cat) if cols_cat else np.zeros(0, np.int64)
        # cache the CSR layout once; per-iteration refills only permute values
        tmpl = sp.csr_matrix(
            (np.arange(len(rows_cat), dtype=np.float64), (rows_cat, cols_cat)),
            shape=(self.n_rows, self.n_cols),
        )
        self._perm = tmpl.data.astype(np.int64)
        self._J = sp.csr_matrix(
            (np.zeros(len(self._perm)), tmpl.indices, tmpl.indptr), shape=tmpl.shape)

    def linearize(self, state: FrameState):
        """Assemble (J, r) with robust row scaling at the given state.

        J is (n_rows, n_active_cols) CSR; r the matching scaled residual.
        The gradient of the true cost on active columns is 2 J^T r.
        """
        p = self.problem
        ev = StateEval(p, state)
        vals = np.zeros(self.n_values)
        r_full = np.zeros(self.n_rows)
        for term, row0, need, seg_plan in self.plan:
            r, dyn = term.fill(state, ev, need)
            if not np.all(np.isfinite(r)):
                raise NonFiniteBlockError(
                    f"non-finite residuals in the '{term.name}' family")
            scale = p.row_scales(term, r)
            r_full[row0:row0 + term.n_rows] = r * scale
            for seg, sl in seg_plan:
                v = term.static_vals.get(seg)
                if v is None:
                    v = dyn[seg]
                    if not np.all(np.isfinite(v)):
                        raise NonFiniteBlockError(
                            f"non-finite Jacobian values in the "
                            f"'{term.name}' family ({seg})")
                rows_local = term.segments[seg][1]
                vals[sl] = v * scale[rows_local]
        self._J.data[:] = vals[self._perm]
        return self._J, r_full


class EnergyProblem:
    """Tracking energy at one pyramid level for one visibility set.

    Parameters
    ----------
    mesh : Mesh topology (rest positions come from `rest_positions`)
    rest_positions : (N, 3) template vertex positions
    albedo, diffuse : (N, 3) per-vertex template reflectance data
    image : (H, W, 3) frame image at this level
    camera : level camera
    visible : sorted int array of visible vertex indices
    weights : EnergyWeights with all thresholds resolved
    prev_state : previous-frame state or None (temporal terms off)
    depth_cloud : (M, 3) backprojected depth points or None
    specular_dim : 1 or 3
    baseline : brightness-constancy ablation (fixed template color, no
        lighting/specular coupling in the photometric term)
    """

    def __init__(self, mesh: Mesh, rest_positions, albedo, diffuse, image,
                 camera: Camera, visible, weights: EnergyWeights,
                 prev_state: FrameState | None = None, depth_cloud=None,
                 specular_dim: int = 3, baseline: bool = False,
                 data_scale: float = 1.0, reg_scale: float = 1.0):
        self.mesh = mesh
        self.rest_positions = np.asarray(rest_positions, dtype=np.float64)
        self.albedo = np.asarray(albedo, dtype=np.float64)
        self.diffuse = np.asarray(diffuse, dtype=np.float64)
        self.image = np.ascontiguousarray(image, dtype=np.float64)
        self.camera = camera
        self.visible = np.asarray(visible, dtype=np.int64)
        if weights.eps_huber_tv is None or weights.eps_huber_depth is None:
            weights = weights.resolved(mesh.bbox_diagonal(self.rest_positions))
        self.weights = weights
        self.baseline = baseline
        self.layout = VariableLayout(mesh.n_vertices, specular_dim)
        self.data_scale = float(data_scale)
        self.reg_scale = float(reg_scale)

        self.terms: list[_Term] = []
        w = weights
        if w.w_data > 0 and len(self.visible):
            self.terms.append(DataTerm(self))
        if w.w_tv > 0 and len(self.visible):
            t = TVTerm(self)
            if t.n_blocks:
                self.terms.append(t)
        if w.w_lap > 0 and len(self.visible):
            self.terms.append(LaplacianTerm(self))
        if not baseline and w.w_spec_smooth > 0 and len(self.visible):
            t = SpecSmoothTerm(self)
            if t.n_blocks:
                self.terms.append(t)
        if w.w_arap > 0:
            self.terms.append(ArapTerm(self))
        if prev_state is not None:
            if w.w_temp_S > 0:
                self.terms.append(TemporalPositions(self, prev_state))
            if w.w_temp_t > 0:
                self.terms.append(TemporalTranslation(self, prev_state))
            if not baseline and w.w_temp_l > 0:
                self.terms.append(TemporalLighting(self, prev_state))
            if not baseline and w.w_temp_beta > 0:
                self.terms.append(TemporalSpecular(self, prev_state))
        if not baseline and w.w_sparse > 0 and len(self.visible):
            self.terms.append(SparsityTerm(self))
        self.depth_term = None
        if depth_cloud is not None and len(depth_cloud) and w.w_depth > 0 \
                and len(self.visible):
            self.depth_term = DepthTerm(self, depth_cloud)
            self.terms.append(self.depth_term)
        self._stages: dict[frozenset, StageSystem] = {}

    # -- robust weighting -------------------------------------------------

    def _family_weight(self, term: _Term) -> float:
        w = getattr(self.weights, term.weight_key)
        if term.name == "data":
            w = w * self.data_scale
        else:
            w = w * self.reg_scale
        return w

    def block_norms(self, term: _Term, r: np.ndarray) -> np.ndarray:
        return np.linalg.norm(r.reshape(term.n_blocks, term.block), axis=1)

    def row_scales(self, term: _Term, r: np.ndarray) -> np.ndarray:
        w_fam = self._family_weight(term)
        if term.loss == "sq":
            s = np.full(term.n_blocks, np.sqrt(w_fam))
        else:
            eps = getattr(self.weights, term.eps_key)
            s = np.sqrt(w_fam * _irls_weights(self.block_norms(term, r), eps))
        return np.repeat(s, term.block)

    def term_energy(self, term: _Term, state: FrameState,
                    ev: StateEval | None = None) -> float:
        ev = ev or StateEval(self, state)
        r = term.residuals(state, ev)
        norms = self.block_norms(term, r)
        w_fam = self._family_weight(term)
        if term.loss == "sq":
            return w_fam * float((norms * norms).sum())
        return w_fam * _huber_total(norms, getattr(self.weights, term.eps_key))

    def energy(self, state: FrameState) -> float:
        ev = StateEval(self, state)
        return sum(self.term_energy(t, state, ev) for t in self.terms)

    def term_energies(self, state: FrameState) -> dict[str, float]:
        ev = StateEval(self, state)
        return {t.name: self.term_energy(t, state, ev) for t in self.terms}

    def refresh_associations(self, state: FrameState):
        if self.depth_term is not None:
            self.depth_term.refresh(state)

    def stage(self, groups) -> StageSystem:
        groups = frozenset(groups)
        if groups not in self._stages:
            self._stages[groups] = StageSystem(self, groups)
        return self._stages[groups]


# ---------------------------------------------------------------------------
# standalone per-family evaluators (thin wrappers over the term machinery)


def _mini_problem(template, mesh=None, image=None, camera=None, visible=None,
                  weights=None, prev_state=None, depth_cloud=None,
                  specular_dim=3):
    mesh = mesh if mesh is not None else template.mesh
    n = mesh.n_vertices
    if visible is None:
        visible = np.arange(n)
    if image is None:
        image = np.zeros((8, 8, 3))
        camera = camera or Camera(1.0, 1.0, 4.0, 4.0)
    weights = weights or EnergyWeights()
    albedo = getattr(template, "albedo", np.ones((n, 3)))
    diffuse = getattr(template, "diffuse", np.ones((n, 3)))
    return EnergyProblem(mesh, template.mesh.vertices, albedo, diffuse, image,
                         camera, visible, weights, prev_state=prev_state,
                         depth_cloud=depth_cloud, specular_dim=specular_dim)


def data_residuals(state: FrameState, template, pyramid, level: int,
                   visibility) -> np.ndarray:
    """Photometric residual blocks, one RGB row per visible vertex."""
    prob = EnergyProblem(
        template.mesh, template.mesh.vertices, template.albedo,
        template.diffuse, pyramid.color(level), pyramid.camera(level),
        visibility, EnergyWeights(), specular_dim=state.specular_dim)
    term = next(t for t in prob.terms if t.name == "data")
    return term.residuals(state, StateEval(prob, state)).reshape(-1, 3)


def smoothness_residuals(state: FrameState, template, visibility) -> dict:
    """TV, Laplacian, and specular-smoothness blocks for visible vertices."""
    prob = _mini_problem(template, visible=np.asarray(visibility),
                         specular_dim=state.specular_dim)
    ev = StateEval(prob, state)
    out = {}
    for t in prob.terms:
        if t.name in ("tv", "laplacian", "spec_smooth"):
            out[t.name] = t.residuals(state, ev).reshape(-1, t.block)
    for name, width in (("tv", 3), ("laplacian", 3),
                        ("spec_smooth", state.specular_dim)):
        out.setdefault(name, np.zeros((0, width)))
    return out


def arap_residuals(state: FrameState, template) -> np.ndarray:
    prob = _mini_problem(template, specular_dim=state.specular_dim)
    term = next(t for t in prob.terms if t.name == "arap")
    return term.residuals(state, StateEval(prob, state)).reshape(-1, 3)


def temporal_residuals(state: FrameState, prev: FrameState) -> dict:
    return {
        "positions": state.positions - prev.positions,
        "translation": state.translation - prev.translation,
        "lighting": state.lighting - prev.lighting,
        "specular": state.specular - prev.specular,
    }


def sparsity_residuals(state: FrameState, visibility) -> np.ndarray:
    return state.specular[np.asarray(visibility, dtype=np.int64)]


def depth_residuals(state: FrameState, cloud) -> np.ndarray:
    """Posed vertex minus nearest cloud point, one row per vertex; empty
    cloud yields no blocks."""
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if len(cloud) == 0:
        return np.zeros((0, 3))
    R = rotations.rotation_matrix(state.rotation)
    posed = state.positions @ R.T + state.translation
    _, idx = cKDTree(cloud).query(posed)
    return posed - cloud[idx]


def total_energy(state: FrameState, template, pyramid, level: int,
                 prev: FrameState | None, weights: EnergyWeights,
                 visibility, depth_cloud=None) -> float:
    """True robust energy; the quantity step acceptance and the
    monotonicity checks use."""
    prob = EnergyProblem(
        template.mesh, template.mesh.vertices, template.albedo,
        template.diffuse, pyramid.color(level), pyramid.camera(level),
        visibility, weights, prev_state=prev, depth_cloud=depth_cloud,
        specular_dim=state.specular_dim)
    if prob.depth_term is not None:
        prob.refresh_associations(state)
    return prob.energy(state)
