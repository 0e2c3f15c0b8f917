"""Triangle meshes with per-corner UVs: loading, normalization, atlas generation.

The mesh is the fixed substrate of the whole pipeline. It is loaded once,
normalized so camera distances have a consistent meaning, given a UV atlas
if it lacks one, and never modified afterwards.
"""

import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import MeshError


@dataclass(frozen=True)
class TriangleMesh:
    """Immutable triangle mesh.

    Attributes:
        vertices: (V, 3) float64 positions in object units.
        faces: (F, 3) int64 vertex indices.
        corner_uvs: (F, 3, 2) float64 per-face-corner UVs in [0, 1]^2,
            or None when the source had no usable atlas.
        normals: (V, 3) float64 unit vertex normals.
    """

    vertices: np.ndarray
    faces: np.ndarray
    corner_uvs: np.ndarray | None
    normals: np.ndarray

    def __post_init__(self):
        for arr in (self.vertices, self.faces, self.corner_uvs, self.normals):
            if arr is not None:
                arr.setflags(write=False)

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]

    def face_corners(self) -> np.ndarray:
        """(F, 3, 3) corner positions per face."""
        return self.vertices[self.faces]


def _make_mesh(vertices, faces, corner_uvs, normals=None) -> TriangleMesh:
    vertices = np.ascontiguousarray(vertices, dtype=np.float64)
    faces = np.ascontiguousarray(faces, dtype=np.int64)
    if corner_uvs is not None:
        corner_uvs = np.ascontiguousarray(corner_uvs, dtype=np.float64)
    if faces.shape[0] == 0:
        raise MeshError("mesh has zero faces")
    if faces.min() < 0 or faces.max() >= vertices.shape[0]:
        raise MeshError("face index out of range: malformed indices")
    if normals is None:
        normals = compute_vertex_normals(vertices, faces)
    else:
        normals = np.ascontiguousarray(normals, dtype=np.float64)
    return TriangleMesh(vertices, faces, corner_uvs, normals)


def compute_vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted accumulation of face normals, then normalization."""
    a = vertices[faces[:, 0]]
    b = vertices[faces[:, 1]]
    c = vertices[faces[:, 2]]
    face_n = np.cross(b - a, c - a)  # magnitude = 2 * area
    normals = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(normals, faces[:, k], face_n)
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    degenerate = lengths[:, 0] < 1e-20
    lengths[degenerate] = 1.0
    normals = normals / lengths
    normals[degenerate] = (0.0, 0.0, 1.0)
    return normals


def _parse_index(token: str, count: int, what: str) -> int:
    try:
        idx = int(token)
    except ValueError as exc:
        raise MeshError(f"malformed {what} index {token!r}") from exc
    if idx > 0:
        idx -= 1
    elif idx < 0:
        idx += count
    else:
        raise MeshError(f"{what} index 0 is not valid in OBJ")
    if idx < 0 or idx >= count:
        raise MeshError(f"{what} index {token!r} out of range")
    return idx


def load_mesh(path: str | os.PathLike) -> TriangleMesh:
    """Load a Wavefront OBJ file as a triangulated mesh.

    Polygon faces are fan-triangulated from their first corner. Per-corner
    UVs are kept only when every corner of every face carries a `vt`
    reference; vertex normals from `vn` records are used when every corner
    references one, otherwise normals are recomputed. Material statements
    are ignored.
    """
    path = os.fspath(path)
    if not os.path.exists(path):
        raise MeshError(f"file not found: {path}")

    positions: list[tuple[float, float, float]] = []
    texcoords: list[tuple[float, float]] = []
    file_normals: list[tuple[float, float, float]] = []
    # per face: list of (v_idx, vt_idx | None, vn_idx | None)
    face_records: list[list[tuple[int, int | None, int | None]]] = []

    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            try:
                if tag == "v":
                    positions.append((float(parts[1]), float(parts[2]), float(parts[3])))
                elif tag == "vt":
                    texcoords.append((float(parts[1]), float(parts[2])))
                elif tag == "vn":
                    file_normals.append((float(parts[1]), float(parts[2]), float(parts[3])))
                elif tag == "f":
                    corners = []
                    for token in parts[1:]:
                        fields = token.split("/")
                        vi = _parse_index(fields[0], len(positions), "vertex")
                        ti = None
                        ni = None
                        if len(fields) > 1 and fields[1]:
                            ti = _parse_index(fields[1], len(texcoords), "texcoord")
                        if len(fields) > 2 and fields[2]:
                            ni = _parse_index(fields[2], len(file_normals), "normal")
                        corners.append((vi, ti, ni))
                    if len(corners) < 3:
                        raise MeshError(f"face with fewer than 3 corners at line {lineno}")
                    face_records.append(corners)
            except (IndexError, ValueError) as exc:
                raise MeshError(f"malformed OBJ record at line {lineno}: {line!r}") from exc

    if not face_records:
        raise MeshError(f"mesh has zero faces: {path}")

    faces = []
    corner_refs = []  # parallel (vt, vn) triples
    for corners in face_records:
        for i in range(1, len(corners) - 1):
            tri = (corners[0], corners[i], corners[i + 1])
            faces.append([c[0] for c in tri])
            corner_refs.append(tri)

    faces = np.asarray(faces, dtype=np.int64)
    vertices = np.asarray(positions, dtype=np.float64)

    corner_uvs = None
    if all(c[1] is not None for tri in corner_refs for c in tri):
        corner_uvs = np.asarray(
            [[texcoords[c[1]] for c in tri] for tri in corner_refs], dtype=np.float64
        )

    normals = None
    if file_normals and all(c[2] is not None for tri in corner_refs for c in tri):
        acc = np.zeros((len(positions), 3), dtype=np.float64)
        for tri in corner_refs:
            for vi, _, ni in tri:
                acc[vi] += file_normals[ni]
        lengths = np.linalg.norm(acc, axis=1, keepdims=True)
        ok = lengths[:, 0] > 1e-20
        acc[ok] /= lengths[ok]
        acc[~ok] = (0.0, 0.0, 1.0)
        normals = acc

    return _make_mesh(vertices, faces, corner_uvs, normals)


def normalize_mesh(mesh: TriangleMesh) -> TriangleMesh:
    """Center the bounding box at the origin and scale max vertex norm to 1.

    Topology, UVs, and normals are unchanged. Raises MeshError for meshes
    with no spatial extent.
    """
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    centered = mesh.vertices - (lo + hi) / 2.0
    radius = np.linalg.norm(centered, axis=1).max()
    if radius < 1e-12:
        raise MeshError("degenerate extent: all vertices coincide")
    vertices = centered / radius
    return _make_mesh(vertices, mesh.faces, mesh.corner_uvs, mesh.normals)


def has_valid_atlas(mesh: TriangleMesh) -> bool:
    uvs = mesh.corner_uvs
    if uvs is None or uvs.shape != (mesh.num_faces, 3, 2):
        return False
    return bool(np.isfinite(uvs).all() and uvs.min() >= 0.0 and uvs.max() <= 1.0)


def ensure_uv_atlas(
    mesh: TriangleMesh, bake_resolution: int = 512, force: bool = False
) -> TriangleMesh:
    """Return a mesh whose corner UVs form a usable atlas.

    A mesh with complete, finite UVs inside [0,1]^2 passes through
    unchanged. Otherwise each triangle receives its own axis-aligned cell
    in a ceil(sqrt(F)) x ceil(sqrt(F)) grid, flattened isometrically into
    the cell with a 2-texel gutter at `bake_resolution`, preserving aspect.
    The resulting charts are disjoint by construction.
    """
    if not force and has_valid_atlas(mesh):
        return mesh

    nf = mesh.num_faces
    grid = math.ceil(math.sqrt(nf))
    cell = 1.0 / grid
    gutter = 2.0 / bake_resolution
    usable = cell - 2.0 * gutter
    if usable <= 0:
        raise MeshError(
            f"atlas grid too fine for bake resolution {bake_resolution}: "
            f"{nf} faces need cells larger than the gutter"
        )

    corners = mesh.face_corners()
    uvs = np.zeros((nf, 3, 2), dtype=np.float64)
    for f in range(nf):
        a, b, c = corners[f]
        e1 = b - a
        n = np.cross(e1, c - a)
        len_e1 = np.linalg.norm(e1)
        len_n = np.linalg.norm(n)
        if len_e1 < 1e-15 or len_n < 1e-15:
            # degenerate triangle: collapse its chart to the cell center
            local = np.zeros((3, 2))
        else:
            u_axis = e1 / len_e1
            v_axis = np.cross(n / len_n, u_axis)
            local = np.stack(
                [
                    np.array([np.dot(p - a, u_axis), np.dot(p - a, v_axis)])
                    for p in (a, b, c)
                ]
            )
        lo = local.min(axis=0)
        span = (local.max(axis=0) - lo).max()
        scale = usable / span if span > 1e-15 else 0.0
        col = f % grid
        row = f // grid
        origin = np.array([col * cell + gutter, row * cell + gutter])
        uvs[f] = origin + (local - lo) * scale

    return _make_mesh(mesh.vertices, mesh.faces, uvs, mesh.normals)


def prepare_mesh(
    path: str | os.PathLike, bake_resolution: int = 512, regenerate_uvs: bool = False
) -> TriangleMesh:
    """load -> normalize -> ensure_uv_atlas, the standard ingest pipeline."""
    mesh = load_mesh(path)
    mesh = normalize_mesh(mesh)
    return ensure_uv_atlas(mesh, bake_resolution=bake_resolution, force=regenerate_uvs)
