"""File I/O: meshes (OBJ, binary PLY), images (PNG), depth maps (PFM),
cameras, pose lists, flat TOML configs, and the template sidecar format.

All binary formats are little-endian. Depth value 0 means "missing".
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
from PIL import Image

if sys.version_info >= (3, 11):
    import tomllib as _toml
else:
    import tomli as _toml


class FileFormatError(ValueError):
    """Raised when a file does not match its declared format."""


# ---------------------------------------------------------------------------
# OBJ (ASCII)

def read_obj(path):
    """Read vertices and triangular faces from an ASCII OBJ file."""
    vertices = []
    faces = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "v":
                if len(parts) < 4:
                    raise FileFormatError(f"{path}:{lineno}: malformed vertex line")
                vertices.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise FileFormatError(
                        f"{path}:{lineno}: only triangular faces are supported"
                    )
                # tokens may be i, i/j, i/j/k, i//k; the vertex index leads
                idx = [int(p.split("/")[0]) for p in parts[1:4]]
                faces.append([i - 1 if i > 0 else len(vertices) + i for i in idx])
    return (
        np.asarray(vertices, dtype=np.float64).reshape(-1, 3),
        np.asarray(faces, dtype=np.int64).reshape(-1, 3),
    )


def write_obj(path, vertices, faces):
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    with open(path, "w", encoding="utf-8") as fh:
        for v in vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


# ---------------------------------------------------------------------------
# PLY (binary little-endian)

def write_ply(path, vertices, faces, colors=None):
    """Write a binary little-endian PLY: float32 positions, optional
    uchar RGB colors, int32 face indices."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    n, m = len(vertices), len(faces)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += ["property float x", "property float y", "property float z"]
    if colors is not None:
        colors = np.asarray(colors)
        if colors.shape != (n, 3):
            raise ValueError("colors must be (n_vertices, 3)")
        header += [
            "property uchar red",
            "property uchar green",
            "property uchar blue",
        ]
    header += [
        f"element face {m}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if colors is None:
            fh.write(vertices.astype("<f4").tobytes())
        else:
            if colors.dtype != np.uint8:
                colors = np.clip(np.rint(colors * 255.0), 0, 255).astype(np.uint8)
            vert = np.zeros(n, dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)])
            vert["xyz"] = vertices
            vert["rgb"] = colors
            fh.write(vert.tobytes())
        face = np.zeros(m, dtype=[("cnt", "u1"), ("idx", "<i4", 3)])
        face["cnt"] = 3
        face["idx"] = faces
        fh.write(face.tobytes())


_PLY_SCALAR = {
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "ushort": "<u2", "uint16": "<u2", "short": "<i2", "int16": "<i2",
    "uint": "<u4", "uint32": "<u4", "int": "<i4", "int32": "<i4",
}


def read_ply(path):
    """Read a binary little-endian PLY. Returns (vertices, faces, colors);
    colors is None when the file has no vertex color properties."""
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise FileFormatError(f"{path}: not a PLY file")
        fmt = fh.readline().strip()
        if fmt != b"format binary_little_endian 1.0":
            raise FileFormatError(f"{path}: expected binary little-endian PLY")
        elements = []  # (name, count, [(prop_name, dtype) or ('list', ...)])
        while True:
            line = fh.readline()
            if not line:
                raise FileFormatError(f"{path}: truncated header")
            parts = line.decode("ascii").strip().split()
            if not parts or parts[0] == "comment":
                continue
            if parts[0] == "end_header":
                break
            if parts[0] == "element":
                elements.append((parts[1], int(parts[2]), []))
            elif parts[0] == "property":
                if not elements:
                    raise FileFormatError(f"{path}: property before element")
                if parts[1] == "list":
                    elements[-1][2].append(("list", parts[2], parts[3], parts[4]))
                else:
                    elements[-1][2].append(("scalar", parts[1], parts[2]))
        vertices = faces = colors = None
        for name, count, props in elements:
            if name == "vertex":
                fields = []
                for p in props:
                    if p[0] != "scalar":
                        raise FileFormatError(f"{path}: list property on vertices")
                    fields.append((p[2], _PLY_SCALAR[p[1]]))
                rec = np.frombuffer(
                    fh.read(np.dtype(fields).itemsize * count), dtype=fields
                )
                vertices = np.stack(
                    [rec["x"], rec["y"], rec["z"]], axis=1
                ).astype(np.float64)
                if "red" in rec.dtype.names:
                    colors = np.stack(
                        [rec["red"], rec["green"], rec["blue"]], axis=1
                    )
                    if colors.dtype == np.uint8:
                        colors = colors.astype(np.float64) / 255.0
            elif name == "face":
                if len(props) != 1 or props[0][0] != "list":
                    raise FileFormatError(f"{path}: unsupported face properties")
                cnt_t = _PLY_SCALAR[props[0][1]]
                idx_t = _PLY_SCALAR[props[0][2]]
                face_dt = np.dtype([("cnt", cnt_t), ("idx", idx_t, 3)])
                rec = np.frombuffer(fh.read(face_dt.itemsize * count), dtype=face_dt)
                if count and not np.all(rec["cnt"] == 3):
                    raise FileFormatError(f"{path}: non-triangular face")
                faces = rec["idx"].astype(np.int64)
            else:
                raise FileFormatError(f"{path}: unknown element '{name}'")
        if vertices is None or faces is None:
            raise FileFormatError(f"{path}: missing vertex or face element")
        return vertices, faces, colors


# ---------------------------------------------------------------------------
# PFM depth maps (grayscale 'Pf', scale -1.0 = little-endian, rows bottom-up)

def write_pfm(path, data):
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise ValueError("PFM writer expects a 2D grayscale array")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(data[::-1]).astype("<f4").tobytes())


def read_pfm(path):
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"Pf":
            raise FileFormatError(f"{path}: expected grayscale PFM ('Pf')")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(fh.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(w * h * 4), dtype=dtype)
        if data.size != w * h:
            raise FileFormatError(f"{path}: truncated PFM payload")
        return data.reshape(h, w)[::-1].astype(np.float32)


# ---------------------------------------------------------------------------
# PNG images

def read_image(path):
    """Load an 8-bit PNG as float64 RGB in [0, 1], shape (H, W, 3)."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_image(path, image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# Plain-text camera and pose files

def write_camera(path, camera):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{camera.fx:.9g} {camera.fy:.9g} {camera.cx:.9g} {camera.cy:.9g}\n")


def read_camera(path):
    from .camera import Camera

    values = Path(path).read_text(encoding="utf-8").split()
    if len(values) != 4:
        raise FileFormatError(f"{path}: expected exactly 'fx fy cx cy'")
    fx, fy, cx, cy = (float(v) for v in values)
    return Camera(fx, fy, cx, cy)


def write_poses(path, rotations, translations):
    """One pose per line: angle-axis rotation (3 floats) then translation."""
    rotations = np.asarray(rotations, dtype=np.float64).reshape(-1, 3)
    translations = np.asarray(translations, dtype=np.float64).reshape(-1, 3)
    if len(rotations) != len(translations):
        raise ValueError("rotation/translation count mismatch")
    with open(path, "w", encoding="utf-8") as fh:
        for w, t in zip(rotations, translations):
            fh.write(" ".join(f"{v:.17g}" for v in (*w, *t)) + "\n")


def read_poses(path):
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(v) for v in line.split()]
            if len(vals) != 6:
                raise FileFormatError(f"{path}:{lineno}: expected 6 values per pose")
            rows.append(vals)
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, 6)
    return arr[:, :3].copy(), arr[:, 3:].copy()


# ---------------------------------------------------------------------------
# Per-frame tracker state log

_STATES_HEADER = (
    "# frame wx wy wz tx ty tz l0 l1 l2 l3 l4 l5 l6 l7 l8 energy"
    " neg_shading_frac\n"
)


def write_states(path, rows):
    """rows: iterable of (frame, w(3), t(3), l(9), energy, neg_shading_frac)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_STATES_HEADER)
        for frame, w, t, l, energy, neg in rows:
            nums = [*np.asarray(w, float), *np.asarray(t, float),
                    *np.asarray(l, float), float(energy), float(neg)]
            fh.write(f"{int(frame)} " + " ".join(f"{v:.17g}" for v in nums) + "\n")


def read_states(path):
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            vals = line.split()
            if len(vals) != 18:
                raise FileFormatError(f"{path}: expected 18 columns per state row")
            frame = int(vals[0])
            nums = np.asarray([float(v) for v in vals[1:]])
            out.append((frame, nums[0:3], nums[3:6], nums[6:15],
                        float(nums[15]), float(nums[16])))
    return out


# ---------------------------------------------------------------------------
# Template sidecar (.tmpl)
#
# Layout, all little-endian, no padding:
#   magic   4 bytes      b"TMPL"
#   version uint32       1
#   n       uint32       vertex count
#   albedo  n*3 float32  per-vertex RGB albedo
#   diffuse n*3 float32  per-vertex RGB diffuse color
#   holes   ceil(n/8) bytes, one bit per vertex (numpy packbits order,
#                        MSB of byte 0 = vertex 0); 1 = never observed
#   light   9 float32    spherical harmonic lighting coefficients

_TMPL_MAGIC = b"TMPL"
_TMPL_VERSION = 1


def write_template_sidecar(path, albedo, diffuse, holes, lighting):
    albedo = np.asarray(albedo, dtype=np.float64)
    diffuse = np.asarray(diffuse, dtype=np.float64)
    holes = np.asarray(holes, dtype=bool).ravel()
    lighting = np.asarray(lighting, dtype=np.float64).ravel()
    n = len(holes)
    if albedo.shape != (n, 3) or diffuse.shape != (n, 3):
        raise ValueError("albedo/diffuse must be (n, 3) matching the hole mask")
    if lighting.shape != (9,):
        raise ValueError("lighting must have 9 coefficients")
    with open(path, "wb") as fh:
        fh.write(_TMPL_MAGIC)
        fh.write(np.asarray([_TMPL_VERSION, n], dtype="<u4").tobytes())
        fh.write(albedo.astype("<f4").tobytes())
        fh.write(diffuse.astype("<f4").tobytes())
        fh.write(np.packbits(holes).tobytes())
        fh.write(lighting.astype("<f4").tobytes())


def read_template_sidecar(path):
    with open(path, "rb") as fh:
        if fh.read(4) != _TMPL_MAGIC:
            raise FileFormatError(f"{path}: not a template sidecar")
        version, n = np.frombuffer(fh.read(8), dtype="<u4")
        if version != _TMPL_VERSION:
            raise FileFormatError(f"{path}: unsupported version {version}")
        albedo = np.frombuffer(fh.read(12 * n), dtype="<f4")
        diffuse = np.frombuffer(fh.read(12 * n), dtype="<f4")
        nbytes = (int(n) + 7) // 8
        holes = np.unpackbits(
            np.frombuffer(fh.read(nbytes), dtype=np.uint8), count=int(n)
        ).astype(bool)
        lighting = np.frombuffer(fh.read(36), dtype="<f4")
        if albedo.size != 3 * n or diffuse.size != 3 * n or lighting.size != 9:
            raise FileFormatError(f"{path}: truncated sidecar")
    return (
        albedo.reshape(-1, 3).astype(np.float64),
        diffuse.reshape(-1, 3).astype(np.float64),
        holes,
        lighting.astype(np.float64),
    )


# ---------------------------------------------------------------------------
# Flat TOML

def load_toml(path):
    with open(path, "rb") as fh:
        return _toml.load(fh)


def _toml_value(value):
    if isinstance(value, (np.bool_, np.integer, np.floating)):
        value = value.item()
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise TypeError(f"cannot serialize {type(value).__name__} to TOML")


def dump_toml(path, mapping):
    """Write a flat (no tables) TOML file; values round-trip via tomllib."""
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in mapping.items():
            fh.write(f"{key} = {_toml_value(value)}\n")
