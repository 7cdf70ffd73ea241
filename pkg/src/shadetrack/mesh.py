"""Triangle meshes: topology, differential quantities, and generators.

A `Mesh` is immutable after construction. Vertex positions passed to the
differential operators may differ from the rest positions stored on the
mesh, so the same topology serves both the template and any deformed
configuration of it.
"""

from __future__ import annotations

from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

_DEGENERATE_AREA = 1e-30


class Mesh:
    """Triangle mesh with precomputed adjacency.

    Parameters
    ----------
    vertices : (N, 3) float array
        Rest positions, world units.
    faces : (F, 3) int array
        Vertex index triples. Must describe a single edge-connected
        component with no degenerate faces.

    Raises
    ------
    ValueError
        On out-of-range indices, degenerate faces, or a disconnected mesh.
    """

    def __init__(self, vertices, faces):
        vertices = np.ascontiguousarray(vertices, dtype=float)
        faces = np.ascontiguousarray(faces, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise ValueError("vertices must be (N, 3)")
        if faces.ndim != 2 or faces.shape[1] != 3 or len(faces) < 1:
            raise ValueError("faces must be (F, 3) with at least one face")
        if not np.isfinite(vertices).all():
            raise ValueError("non-finite vertex position")
        n = len(vertices)
        bad = np.nonzero((faces < 0) | (faces >= n))[0]
        if bad.size:
            raise ValueError(f"face {bad[0]} references a vertex out of range")
        degen = np.nonzero(
            (faces[:, 0] == faces[:, 1])
            | (faces[:, 1] == faces[:, 2])
            | (faces[:, 0] == faces[:, 2])
        )[0]
        if degen.size:
            raise ValueError(f"face {degen[0]} is degenerate (repeated vertex index)")
        self.vertices = vertices
        self.faces = faces
        self.n_vertices = n
        self.n_faces = len(faces)
        ncomp, labels = connected_components(self.adjacency, directed=False)
        if ncomp != 1:
            worst = int(np.argmax(labels))
            raise ValueError(
                f"mesh has {ncomp} connected components (e.g. vertex {worst} "
                f"is in component {labels[worst]})"
            )
        self.vertices.setflags(write=False)
        self.faces.setflags(write=False)

    # ------------------------------------------------------------------ topology

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as a sorted (E, 2) index array."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        e = np.unique(e, axis=0)
        return e

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        """Symmetric vertex adjacency matrix (1 where an edge exists)."""
        f = self.faces
        i = np.concatenate([f[:, 0], f[:, 1], f[:, 2], f[:, 1], f[:, 2], f[:, 0]])
        j = np.concatenate([f[:, 1], f[:, 2], f[:, 0], f[:, 0], f[:, 1], f[:, 2]])
        a = sp.coo_matrix(
            (np.ones(len(i)), (i, j)), shape=(self.n_vertices, self.n_vertices)
        ).tocsr()
        a.data[:] = 1.0
        return a

    @cached_property
    def degrees(self) -> np.ndarray:
        """|N_i| per vertex."""
        return np.asarray(self.adjacency.sum(axis=1)).ravel()

    def neighbors(self, i: int) -> np.ndarray:
        """Sorted neighbor indices of vertex i."""
        a = self.adjacency
        return a.indices[a.indptr[i]:a.indptr[i + 1]]

    @cached_property
    def _face_incidence(self) -> sp.csr_matrix:
        """(N, F) matrix summing incident face quantities per vertex."""
        f = self.faces
        rows = f.ravel()
        cols = np.repeat(np.arange(self.n_faces), 3)
        return sp.coo_matrix(
            (np.ones(3 * self.n_faces), (rows, cols)),
            shape=(self.n_vertices, self.n_faces),
        ).tocsr()

    # Structure for d n_i / d v_j. A pair (i, j) exists whenever i and j share
    # a face (including i == j); the per-face contribution to d g_i / d v_j is
    # skew(v_prev(j) - v_next(j)) with (prev, next) the other two face members
    # in cyclic order, independent of i.
    @cached_property
    def _normal_pair_structure(self):
        f = self.faces
        n = self.n_vertices
        fcount = self.n_faces
        # contribution order: j_role major, i_role minor, face fastest
        all_i = np.concatenate([f[:, ir] for jr in range(3) for ir in range(3)])
        all_j = np.concatenate([f[:, jr] for jr in range(3) for ir in range(3)])
        keys = all_i * n + all_j
        uniq, inverse = np.unique(keys, return_inverse=True)
        pair_i = uniq // n
        pair_j = uniq % n
        # scatter matrix: pairs x (j_role, face) blocks; each contribution is
        # a unit weight on the (j_role*F + face) column
        cols = np.concatenate(
            [jr * fcount + np.arange(fcount) for jr in range(3) for ir in range(3)]
        )
        scatter = sp.coo_matrix(
            (np.ones(len(cols)), (inverse, cols)),
            shape=(len(uniq), 3 * fcount),
        ).tocsr()
        return pair_i, pair_j, scatter

    @property
    def normal_pair_i(self) -> np.ndarray:
        return self._normal_pair_structure[0]

    @property
    def normal_pair_j(self) -> np.ndarray:
        return self._normal_pair_structure[1]

    def bbox_diagonal(self, positions: np.ndarray | None = None) -> float:
        p = self.vertices if positions is None else np.asarray(positions)
        return float(np.linalg.norm(p.max(axis=0) - p.min(axis=0)))


def build_mesh(vertices, faces) -> Mesh:
    """Validating constructor; see `Mesh`."""
    return Mesh(vertices, faces)


# ---------------------------------------------------------------------- normals


def _normal_sums(mesh: Mesh, positions: np.ndarray) -> np.ndarray:
    p = positions
    f = mesh.faces
    fn = np.cross(p[f[:, 1]] - p[f[:, 0]], p[f[:, 2]] - p[f[:, 0]])
    return mesh._face_incidence @ fn


def vertex_normals(mesh: Mesh, positions) -> np.ndarray:
    """Unit vertex normals: normalized area-weighted sum of incident face normals.

    Raises
    ------
    ValueError
        If some vertex star has (numerically) zero total area.
    """
    positions = np.asarray(positions, dtype=float)
    if positions.shape != (mesh.n_vertices, 3):
        raise ValueError("positions length must equal vertex count")
    g = _normal_sums(mesh, positions)
    norm = np.linalg.norm(g, axis=1)
    bad = np.nonzero(norm <= _DEGENERATE_AREA)[0]
    if bad.size:
        raise ValueError(f"vertex {bad[0]} has a zero-area star; normal undefined")
    return g / norm[:, None]


def vertex_normals_jacobian(mesh: Mesh, positions):
    """Normals together with their exact derivative blocks.

    Returns
    -------
    normals : (N, 3) unit normals.
    pair_blocks : (P, 3, 3) arrays where block p is d n_i / d v_j for the
        pair (i, j) = (mesh.normal_pair_i[p], mesh.normal_pair_j[p]).
    """
    positions = np.asarray(positions, dtype=float)
    g = _normal_sums(mesh, positions)
    norm = np.linalg.norm(g, axis=1)
    bad = np.nonzero(norm <= _DEGENERATE_AREA)[0]
    if bad.size:
        raise ValueError(f"vertex {bad[0]} has a zero-area star; normal undefined")
    n = g / norm[:, None]

    f = mesh.faces
    pair_i, _, scatter = mesh._normal_pair_structure
    # d g / d v_j accumulation: skew(prev - next) per (j_role, face)
    prev_roles = (2, 0, 1)
    next_roles = (1, 2, 0)
    m = np.empty((3 * mesh.n_faces, 3, 3))
    from .rotations import skew

    for jr in range(3):
        edge = positions[f[:, prev_roles[jr]]] - positions[f[:, next_roles[jr]]]
        m[jr * mesh.n_faces:(jr + 1) * mesh.n_faces] = skew(edge)
    acc = (scatter @ m.reshape(-1, 9)).reshape(-1, 3, 3)
    # chain through the normalization: d n / d g = (I - n n^T) / |g|
    ni = n[pair_i]
    proj = (np.eye(3) - ni[:, :, None] * ni[:, None, :]) / norm[pair_i][:, None, None]
    return n, proj @ acc


# ------------------------------------------------------------------- laplacian


def laplacian_vectors(mesh: Mesh, positions) -> np.ndarray:
    """sum_{j in N_i} (s_i - s_j) for every vertex, as an (N, 3) array."""
    positions = np.asarray(positions, dtype=float)
    return mesh.degrees[:, None] * positions - mesh.adjacency @ positions


def laplacian_vector(mesh: Mesh, positions, i: int) -> np.ndarray:
    """Unnormalized neighborhood difference sum at vertex i (3-vector)."""
    if not 0 <= i < mesh.n_vertices:
        raise ValueError(f"vertex index {i} out of range")
    positions = np.asarray(positions, dtype=float)
    nb = mesh.neighbors(i)
    return len(nb) * positions[i] - positions[nb].sum(axis=0)


# ------------------------------------------------------------------ generators


def icosphere(subdivisions: int = 2, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> Mesh:
    """Icosahedron subdivided `subdivisions` times, projected to a sphere.

    Vertex counts: 12, 42, 162, 642, 2562 for subdivisions 0..4.
    Construction order is deterministic.
    """
    if subdivisions < 0:
        raise ValueError("subdivisions must be >= 0")
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=float,
    )
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = list(verts / np.linalg.norm(verts[0]))

    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            idx = cache.get(key)
            if idx is None:
                v = verts[a] + verts[b]
                v = v / np.linalg.norm(v)
                idx = len(verts)
                verts.append(v)
                cache[key] = idx
            return idx

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces

    v = np.asarray(verts) * radius + np.asarray(center, dtype=float)
    return Mesh(v, np.asarray(faces, dtype=np.int64))


def make_grid(nx: int, ny: int, spacing: float = 1.0, z: float = 0.0,
              origin=(0.0, 0.0), flip: bool = False) -> Mesh:
    """Regular planar grid in a constant-z plane, two triangles per cell.

    Faces wind counter-clockwise in the xy plane (normals +z) unless
    ``flip`` is set, which reverses the winding (normals -z, e.g. for a
    camera at the origin looking down +z).
    """
    if nx < 2 or ny < 2:
        raise ValueError("grid needs at least 2x2 vertices")
    xs = origin[0] + spacing * np.arange(nx)
    ys = origin[1] + spacing * np.arange(ny)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    verts = np.column_stack([gx.ravel(), gy.ravel(), np.full(nx * ny, float(z))])
    idx = np.arange(nx * ny).reshape(ny, nx)
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, :-1].ravel()
    d = idx[1:, 1:].ravel()
    faces = np.concatenate(
        [np.column_stack([a, b, c]), np.column_stack([b, d, c])]
    )
    if flip:
        faces = faces[:, ::-1]
    return Mesh(verts, faces)
