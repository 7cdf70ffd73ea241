import numpy as np
import scipy.sparse as sp

from shadetrack import camera as cam
from shadetrack import mesh as meshmod
from shadetrack import raster, shading
from shadetrack.energy import EnergyProblem, EnergyWeights, FrameState
from shadetrack.lm import SolverParams, solve_lm

rng = np.random.default_rng(0)


class MockLayout:
    def __init__(self, n):
        self.n_variables = n

    def flatten(self, state):
        return np.asarray(state, dtype=float).copy()

    def unflatten(self, x):
        return x.copy()


class MockSystem:
    def __init__(self, problem):
        self.problem = problem
        self.n_cols = problem.layout.n_variables
        self.active_cols = np.arange(self.n_cols)
        self.n_rows = problem.n_rows

    def linearize(self, state):
        r, J = self.problem.residuals_jac(state)
        return sp.csr_matrix(J), r


class MockProblem:
    def __init__(self, n_rows, n_vars, fn):
        self.layout = MockLayout(n_vars)
        self.n_rows = n_rows
        self.fn = fn

    def stage(self, groups):
        return MockSystem(self)

    def residuals_jac(self, x):
        return self.fn(x)

    def energy(self, x):
        r, _ = self.fn(x)
        return float(r @ r)


params = SolverParams()

# 1. quadratic bowl
target = rng.normal(size=5)
A = rng.normal(size=(8, 5))


def bowl(x):
    return A @ (x - target), A


p = MockProblem(8, 5, bowl)
x0 = np.zeros(5)
x1, rep = solve_lm(p, {"all"}, x0, params, max_iterations=10, stage_name="bowl")
print("bowl:", rep.reason, "iters", rep.iterations,
      "err", np.abs(x1 - target).max(), "monotonic", rep.monotonic)
assert np.abs(x1 - target).max() < 1e-8, "bowl failed"
assert rep.iterations <= 10

# 2. Rosenbrock
def rosen(x):
    r = np.array([10.0 * (x[1] - x[0] ** 2), 1.0 - x[0]])
    J = np.array([[-20.0 * x[0], 10.0], [-1.0, 0.0]])
    return r, J


p = MockProblem(2, 2, rosen)
x1, rep = solve_lm(p, {"all"}, np.array([-1.2, 1.0]), params,
                   max_iterations=200, stage_name="rosen")
print("rosen:", rep.reason, "iters", rep.iterations,
      "f", p.energy(x1), "monotonic", rep.monotonic)
assert p.energy(x1) < 1e-6, "rosenbrock failed"

# 3. already converged at start
p = MockProblem(8, 5, bowl)
x1, rep = solve_lm(p, {"all"}, target.copy(), params, max_iterations=10)
print("zero-start:", repr(rep.reason), "iters", rep.iterations)
assert rep.reason == "already converged" and rep.iterations == 0

# 4. real problem, single stage
from shadetrack.rotations import rotation_matrix

m = meshmod.icosphere(2, radius=1.0, center=(0.0, 0.0, 4.0))
camera = cam.Camera(fx=300.0, fy=300.0, cx=160.0, cy=120.0)
resolution = (320, 240)
albedo = 0.5 + 0.4 * rng.random((m.n_vertices, 3))
light = np.zeros(9)
light[0], light[2] = 2.0, 0.6
true_state = FrameState.rest(m, 3)
true_state.positions = m.vertices + 0.01 * rng.normal(size=(m.n_vertices, 3))
true_state.rotation = np.array([0.02, -0.03, 0.01])
true_state.translation = np.array([0.01, -0.02, 0.015])
R = rotation_matrix(true_state.rotation)
posed = true_state.positions @ R.T + true_state.translation
normals = meshmod.vertex_normals(m, posed) @ R.T \
    if False else meshmod.vertex_normals(m, posed)
sh = shading.sh_basis(normals)
shade = np.clip(sh @ light, 0.05, None)
res = raster.rasterize(posed, m.faces, camera, resolution)
colors = np.clip(albedo * shade[:, None], 0.0, 1.0)
img = res.interpolate(colors)
vis = raster.compute_visibility(m, true_state.positions, R,
                                true_state.translation, camera, resolution)
print("visible:", len(vis), "/", m.n_vertices)

weights = EnergyWeights().resolved(m.bbox_diagonal())
init = FrameState.rest(m, 3)
init.lighting = light.copy()
problem = EnergyProblem(m, m.vertices, albedo, albedo * shade[:, None],
                        img, camera, vis, weights)

import time
t0 = time.time()
st, rep = solve_lm(problem, {"rotation", "translation"}, init, params,
                   max_iterations=30, stage_name="rigid")
t_rigid = time.time() - t0
print("rigid:", rep.reason, "iters", rep.iterations,
      "E %.6g -> %.6g" % (rep.initial_energy, rep.final_energy),
      "monotonic", rep.monotonic, "%.3fs" % t_rigid)
assert rep.monotonic
assert rep.final_energy < rep.initial_energy

t0 = time.time()
st2, rep2 = solve_lm(problem, {"positions", "lighting", "local_rotations"},
                     st, params, max_iterations=30, stage_name="shape_light")
t_sl = time.time() - t0
print("shape_light:", rep2.reason, "iters", rep2.iterations,
      "E %.6g -> %.6g" % (rep2.initial_energy, rep2.final_energy),
      "monotonic", rep2.monotonic, "%.3fs" % t_sl)
assert rep2.monotonic
assert rep2.final_energy <= rep.final_energy

t0 = time.time()
st3, rep3 = solve_lm(problem, set(["positions", "rotation", "translation",
                                   "lighting", "specular",
                                   "local_rotations"]), st2, params,
                     max_iterations=20, stage_name="joint")
t_j = time.time() - t0
print("joint:", rep3.reason, "iters", rep3.iterations,
      "E %.6g -> %.6g" % (rep3.initial_energy, rep3.final_energy),
      "monotonic", rep3.monotonic, "%.3fs" % t_j)
assert rep3.monotonic

err0 = np.linalg.norm(true_state.positions - m.vertices, axis=1)[vis].max()
err1 = np.linalg.norm(true_state.positions - st3.positions, axis=1)[vis].max()
print("max visible vertex error: %.5f -> %.5f" % (err0, err1))
print("OK")
