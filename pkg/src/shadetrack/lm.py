"""Robust Levenberg-Marquardt with damped normal equations.

The solver is duck-typed over a small problem protocol so it also runs on
toy problems in tests:

    problem.layout.flatten(state) / unflatten(x)
    problem.stage(groups) -> system with .linearize(state) -> (J, r),
        .active_cols, .n_cols, .n_rows
    problem.energy(state) -> float (the true cost; may be robust)
    problem.refresh_associations(state)   (optional)

Each candidate step solves (J^T J + lam * diag(J^T J)) delta = -J^T r and
is accepted only if the true energy strictly decreases, which makes the
reported energy trajectory non-increasing by construction. The normal
equations are solved densely for small active sets and otherwise with
conjugate gradients under a block-Jacobi preconditioner whose blocks
follow the variable-group structure.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .energy import NonFiniteBlockError

_LAMBDA_MAX = 1e12
_LAMBDA_MIN = 1e-12
_DENSE_LIMIT = 72          # active columns at or below this solve densely
_PCG_MAX_ITER = 200
_PCG_RTOL = 1e-3


@dataclass(frozen=True)
class SolverParams:
    """Optimizer knobs; every field is a flat config key."""

    max_iterations_coarse: int = 30
    max_iterations_finest: int = 50
    init_damping: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 2.0
    ftol: float = 1e-6
    gtol: float = 1e-10
    pyramid_levels: int = 3
    joint_refinement: bool = True
    use_depth: bool = False

    def __post_init__(self):
        if self.ftol <= 0 or self.gtol <= 0:
            raise ValueError("tolerances must be positive")
        if self.damping_up <= 1 or self.damping_down <= 1:
            raise ValueError("damping factors must exceed 1")
        if self.init_damping <= 0:
            raise ValueError("init_damping must be positive")
        if self.pyramid_levels != 3:
            raise ValueError("the pyramid is fixed at 3 levels")

    def max_iterations(self, level: int) -> int:
        return self.max_iterations_finest if level == 0 \
            else self.max_iterations_coarse


@dataclass
class StageReport:
    """Energy trajectory of one staged solve; energies[0] is the initial
    value and each later entry is one accepted step (after any
    depth-association refresh)."""

    name: str
    level: int
    energies: list = field(default_factory=list)
    iterations: int = 0
    reason: str = ""
    n_visible: int = 0

    @property
    def initial_energy(self) -> float:
        return self.energies[0]

    @property
    def final_energy(self) -> float:
        return self.energies[-1]

    @property
    def monotonic(self) -> bool:
        e = np.asarray(self.energies)
        if len(e) < 2:
            return True
        return bool(np.all(np.diff(e) <= 1e-9 * np.maximum(e[:-1], 1e-30)))


# ---------------------------------------------------------------------------
# preconditioned conjugate gradients


class _BlockJacobi:
    """Block-diagonal preconditioner for J^T J + lam diag.

    Blocks are the contiguous column runs the layout defines (3 per
    vertex-quantity, the full lighting block, scalars otherwise). The
    gather indices depend only on the Jacobian's sparsity pattern, which
    is fixed within a stage, so they are built once and each subsequent
    linearization only re-accumulates the block values; each damping
    retry only re-adds lam*diag and re-inverts.
    """

    def __init__(self, system, J):
        blocks = getattr(system, "precond_blocks", None)
        if blocks is None:
            blocks = _default_blocks(system)
        n_cols = J.shape[1]
        blk_of = np.full(n_cols, -1, dtype=np.intp)
        pos_of = np.zeros(n_cols, dtype=np.intp)
        cls_of = np.full(n_cols, -1, dtype=np.intp)
        self._starts = []
        for k, size in enumerate(sorted({n for _, n in blocks})):
            starts = np.asarray([s for s, n in blocks if n == size])
            for i, s in enumerate(starts):
                blk_of[s:s + size] = i
                pos_of[s:s + size] = np.arange(size)
                cls_of[s:s + size] = k
            self._starts.append((size, starts))
        self._blk_of, self._pos_of, self._cls_of = blk_of, pos_of, cls_of
        self._pattern = None
        self.update(J)

    def _rebuild(self, J):
        # gather/scatter index plan; depends on the pattern only
        self._pattern = (J.indptr.copy(), J.indices.copy())
        n_rows = J.shape[0]
        coo = J.tocoo()   # keeps CSR data order
        row, col = coo.row.astype(np.int64), coo.col
        self._plan = []
        for k, (size, starts) in enumerate(self._starts):
            sel = np.flatnonzero(self._cls_of[col] == k)
            key = self._blk_of[col[sel]].astype(np.int64) * n_rows + row[sel]
            order = np.argsort(key, kind="stable")
            take = sel[order]
            key_s = key[order]
            new_grp = np.r_[True, key_s[1:] != key_s[:-1]]
            gid = np.cumsum(new_grp) - 1
            gblk = (key_s[new_grp] // n_rows).astype(np.intp)
            pos_s = self._pos_of[col[take]]
            cols = (starts[:, None] + np.arange(size)[None, :]).ravel()
            n_groups = int(gid[-1]) + 1 if len(gid) else 0
            self._plan.append(
                (size, cols, take, gid, pos_s, gblk, len(starts), n_groups))

    def update(self, J):
        """Accumulate the undamped J^T J blocks from the CSR values."""
        if self._pattern is None or not (
                np.array_equal(self._pattern[0], J.indptr)
                and np.array_equal(self._pattern[1], J.indices)):
            self._rebuild(J)
        data = J.data
        self._B = []
        for size, cols, take, gid, pos_s, gblk, nb, n_groups in self._plan:
            # per-(row, block) coefficient vectors, then outer-product sums
            G = np.zeros((n_groups, size))
            G[gid, pos_s] = data[take]
            if nb == 1:
                B = (G.T @ G)[None]
            else:
                B = np.zeros((nb, size, size))
                for a in range(size):
                    for b in range(a, size):
                        acc = np.bincount(gblk, G[:, a] * G[:, b],
                                          minlength=nb)
                        B[:, a, b] = acc
                        if a != b:
                            B[:, b, a] = acc
            self._B.append((size, cols, B))

    def factor(self, diag: np.ndarray, lam: float):
        self._inv = []
        for size, cols, B in self._B:
            D = B.copy()
            dd = lam * diag[cols].reshape(-1, size)
            idx = np.arange(size)
            D[:, idx, idx] += dd + 1e-12
            try:
                inv = np.linalg.inv(D)
            except np.linalg.LinAlgError:
                D[:, idx, idx] += 1e-8 * (1.0 + dd)
                inv = np.linalg.inv(D)
            self._inv.append((size, cols, inv))

    def apply(self, r: np.ndarray) -> np.ndarray:
        z = np.empty_like(r)
        for size, cols, inv in self._inv:
            rb = r[cols].reshape(-1, size)
            z[cols] = np.einsum("bij,bj->bi", inv, rb).ravel()
        return z


def _default_blocks(system):
    """Contiguous 3-column blocks padded with trailing scalars."""
    n = system.n_cols
    blocks = [(s, 3) for s in range(0, n - n % 3, 3)]
    blocks += [(s, 1) for s in range(n - n % 3, n)]
    return blocks


def _pcg(J, diag, lam, g, precond: _BlockJacobi,
         rtol=_PCG_RTOL, max_iter=_PCG_MAX_ITER):
    """Solve (J^T J + lam diag) x = -g by preconditioned CG."""
    b = -g
    x = np.zeros_like(b)
    r = b.copy()
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return x
    precond.factor(diag, lam)
    JT = J.T
    ld = lam * diag
    z = precond.apply(r)
    p = z.copy()
    rz = float(r @ z)
    for _ in range(max_iter):
        Jp = J @ p
        Ap = JT @ Jp + ld * p
        pAp = float(p @ Ap)
        if pAp <= 0 or not np.isfinite(pAp):
            break
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        if np.linalg.norm(r) <= rtol * bnorm:
            break
        z = precond.apply(r)
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x


def _dense_step(H0, g, diag, lam):
    H = H0.copy()
    H[np.diag_indices_from(H)] += lam * diag + 1e-15
    try:
        return np.linalg.solve(H, -g)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(H, -g, rcond=None)[0]


# ---------------------------------------------------------------------------
# outer loop


def solve_lm(problem, groups, state, params: SolverParams,
             max_iterations: int | None = None, stage_name: str = "",
             level: int = 0):
    """Minimize the problem's energy over the given variable groups.

    Returns (new_state, StageReport). Variables outside the groups are
    unchanged. The report's energy list is strictly non-increasing.
    """
    system = problem.stage(frozenset(groups))
    name = stage_name or "+".join(sorted(groups))
    if max_iterations is None:
        max_iterations = params.max_iterations(level)
    report = StageReport(name=name, level=level,
                         n_visible=len(getattr(problem, "visible", [])))
    refresh = getattr(problem, "refresh_associations", None)
    has_depth = getattr(problem, "depth_term", None) is not None

    if refresh is not None:
        refresh(state)
    energy = problem.energy(state)
    if not np.isfinite(energy):
        offender = ""
        if hasattr(problem, "term_energies"):
            for tname, te in problem.term_energies(state).items():
                if not np.isfinite(te):
                    offender = f" ('{tname}' family)"
                    break
        raise NonFiniteBlockError(
            f"non-finite initial energy in stage '{name}'{offender}")
    report.energies.append(energy)

    if system.n_rows == 0 or system.n_cols == 0:
        report.reason = "no residuals"
        return state, report

    layout = problem.layout
    x = layout.flatten(state)
    lam = params.init_damping
    report.reason = "max_iterations"
    dense = system.n_cols <= _DENSE_LIMIT
    precond = None

    for it in range(max_iterations):
        J, r = system.linearize(state)
        g_half = J.T @ r
        if 2.0 * np.max(np.abs(g_half), initial=0.0) <= params.gtol:
            report.reason = "already converged" if it == 0 else "gtol"
            break
        diag = np.maximum(np.asarray((J.multiply(J)).sum(axis=0)).ravel(),
                          1e-12)
        if dense:
            H0 = (J.T @ J).toarray()
        elif precond is None:
            precond = _BlockJacobi(system, J)
        else:
            precond.update(J)
        accepted = False
        while lam <= _LAMBDA_MAX:
            delta = (_dense_step(H0, g_half, diag, lam) if dense
                     else _pcg(J, diag, lam, g_half, precond))
            if not np.all(np.isfinite(delta)):
                lam *= params.damping_up
                continue
            x_try = x.copy()
            x_try[system.active_cols] += delta
            state_try = layout.unflatten(x_try)
            e_try = problem.energy(state_try)
            if np.isfinite(e_try) and e_try < energy:
                state, x = state_try, x_try
                prev_energy, energy = energy, e_try
                lam = max(lam / params.damping_down, _LAMBDA_MIN)
                if refresh is not None and has_depth:
                    refresh(state)
                    energy = problem.energy(state)  # assoc only tightens
                report.energies.append(energy)
                report.iterations += 1
                accepted = True
                break
            lam *= params.damping_up
        if not accepted:
            report.reason = "damping overflow"
            break
        if prev_energy - energy <= params.ftol * max(prev_energy, 1e-30):
            report.reason = "ftol"
            break
    return state, report
