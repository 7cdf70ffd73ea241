import numpy as np
import pytest

from shadetrack.mesh import (Mesh, icosphere, laplacian_vector,
                             laplacian_vectors, make_grid, vertex_normals,
                             vertex_normals_jacobian)
from shadetrack.rotations import rotation_matrix


def single_triangle():
    v = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    f = np.array([[0, 1, 2]])
    return Mesh(v, f)


# ---------------------------------------------------------------- topology


def test_single_triangle_neighbors():
    m = single_triangle()
    assert set(m.neighbors(0)) == {1, 2}
    assert set(m.neighbors(1)) == {0, 2}
    assert set(m.neighbors(2)) == {0, 1}


def test_adjacency_is_symmetric():
    m = icosphere(2)
    a = m.adjacency
    assert (a != a.T).nnz == 0


def test_degenerate_face_rejected():
    v = np.zeros((2, 3))
    with pytest.raises(ValueError, match="degenerate"):
        Mesh(v, np.array([[0, 0, 1]]))


def test_out_of_range_face_rejected():
    v = np.zeros((3, 3))
    with pytest.raises(ValueError, match="out of range"):
        Mesh(v, np.array([[0, 1, 3]]))


def test_disconnected_mesh_rejected():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0],
                  [5, 5, 5], [6, 5, 5], [5, 6, 5]], dtype=float)
    f = np.array([[0, 1, 2], [3, 4, 5]])
    with pytest.raises(ValueError, match="connected"):
        Mesh(v, f)


def test_icosphere_subdivision1_degrees():
    m = icosphere(1)
    assert m.n_vertices == 42
    assert set(m.degrees.tolist()) <= {5, 6}


def test_icosphere_vertex_counts():
    assert icosphere(2).n_vertices == 162
    assert icosphere(3).n_vertices == 642


def test_icosphere_radius_and_center():
    m = icosphere(2, radius=57.7, center=(0.0, 0.0, 230.0))
    r = np.linalg.norm(m.vertices - [0, 0, 230], axis=1)
    assert np.allclose(r, 57.7, atol=1e-9)


def test_bbox_diagonal():
    m = single_triangle()
    assert np.isclose(m.bbox_diagonal(), np.sqrt(2.0))
    stretched = m.vertices * [2.0, 1.0, 1.0]
    assert np.isclose(m.bbox_diagonal(stretched), np.sqrt(5.0))


# ----------------------------------------------------------------- normals


def test_planar_grid_normals_up():
    m = make_grid(5, 4)
    n = vertex_normals(m, m.vertices)
    assert np.allclose(n, [0.0, 0.0, 1.0], atol=1e-12)


def test_flipped_grid_normals_down():
    m = make_grid(4, 4, flip=True)
    n = vertex_normals(m, m.vertices)
    assert np.allclose(n, [0.0, 0.0, -1.0], atol=1e-12)


def test_icosphere_normals_near_radial():
    m = icosphere(2)
    n = vertex_normals(m, m.vertices)
    radial = m.vertices / np.linalg.norm(m.vertices, axis=1, keepdims=True)
    cosang = np.einsum("ij,ij->i", n, radial)
    assert np.all(cosang > np.cos(np.radians(2.0)))


def test_normals_translation_invariant(rng):
    m = icosphere(1)
    shift = rng.normal(size=3) * 10
    assert np.allclose(vertex_normals(m, m.vertices),
                       vertex_normals(m, m.vertices + shift), atol=1e-12)


def test_normals_rotation_equivariant(rng):
    m = icosphere(1)
    pos = m.vertices + rng.normal(size=m.vertices.shape) * 0.02
    R = rotation_matrix(rng.normal(size=3))
    n1 = vertex_normals(m, pos @ R.T)
    n0 = vertex_normals(m, pos) @ R.T
    assert np.abs(n1 - n0).max() < 1e-10


def test_zero_area_star_rejected():
    m = single_triangle()
    collinear = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    with pytest.raises(ValueError, match="vertex"):
        vertex_normals(m, collinear)


def test_normal_jacobian_matches_finite_differences(rng):
    m = icosphere(0)
    pos = m.vertices + rng.normal(size=m.vertices.shape) * 0.05
    normals, pair_blocks = vertex_normals_jacobian(m, pos)
    assert np.allclose(normals, vertex_normals(m, pos), atol=1e-12)

    # assemble the dense Jacobian from the pair blocks
    N = m.n_vertices
    J = np.zeros((3 * N, 3 * N))
    for blk, i, j in zip(pair_blocks, m.normal_pair_i, m.normal_pair_j):
        J[3 * i:3 * i + 3, 3 * j:3 * j + 3] += blk

    h = 1e-6
    fd = np.zeros_like(J)
    for col in range(3 * N):
        d = np.zeros(3 * N)
        d[col] = h
        np_p = vertex_normals(m, pos + d.reshape(N, 3))
        np_m = vertex_normals(m, pos - d.reshape(N, 3))
        fd[:, col] = ((np_p - np_m) / (2 * h)).ravel()
    scale = max(np.abs(fd).max(), 1.0)
    assert np.abs(J - fd).max() / scale < 1e-5


# --------------------------------------------------------------- laplacian


def test_laplacian_zero_at_neighbor_centroid():
    m = single_triangle()
    pos = m.vertices.copy()
    pos[0] = (pos[1] + pos[2]) / 2.0
    assert np.allclose(laplacian_vector(m, pos, 0), 0.0, atol=1e-12)


def test_laplacian_zero_on_grid_interior():
    m = make_grid(5, 5)
    lap = laplacian_vector(m, m.vertices, 12)  # center vertex of 5x5
    assert np.allclose(lap, 0.0, atol=1e-12)


def test_laplacian_chain_hand_value():
    # chain 0-1-2 with positions 0, 1, 3 on the x axis; at vertex 1 the
    # unnormalized sum is (1-0) + (1-3) = -1
    m = single_triangle()
    pos = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]])
    lap = laplacian_vector(m, pos, 1)
    assert np.allclose(lap, [-1.0, 0.0, 0.0], atol=1e-12)


def test_laplacian_vectors_matches_single(rng):
    m = icosphere(1)
    pos = m.vertices + rng.normal(size=m.vertices.shape) * 0.1
    all_lap = laplacian_vectors(m, pos)
    for i in [0, 7, 41]:
        assert np.allclose(all_lap[i], laplacian_vector(m, pos, i), atol=1e-12)


# -------------------------------------------------------------------- grid


def test_grid_neighbor_counts():
    m = make_grid(4, 3)
    # corner vertices of a triangulated grid have degree 2 or 3, interior 6
    degs = m.degrees
    assert degs.min() >= 2
    interior = [i for i in range(m.n_vertices)
                if 0 < i % 4 < 3 and 0 < i // 4 < 2]
    assert all(degs[i] == 6 for i in interior)
