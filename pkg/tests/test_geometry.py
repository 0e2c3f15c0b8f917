import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import write_cube_obj
from oracles import polygon_area_3d, rasterize_chart_claims, triangle_area_3d

from texsds.errors import MeshError
from texsds.geometry import (
    TriangleMesh,
    compute_vertex_normals,
    ensure_uv_atlas,
    has_valid_atlas,
    load_mesh,
    normalize_mesh,
)


def test_load_cube_triangulates_quads(tmp_path):
    path = write_cube_obj(tmp_path / "cube.obj")
    mesh = load_mesh(path)
    assert mesh.num_faces == 12
    assert mesh.num_vertices == 8
    assert mesh.corner_uvs is None


def test_load_reads_corner_uvs_verbatim(tmp_path):
    path = write_cube_obj(tmp_path / "cube_uv.obj", with_uv=True)
    mesh = load_mesh(path)
    assert mesh.corner_uvs is not None
    assert mesh.corner_uvs.shape == (12, 3, 2)
    # first triangle of the first quad carries the file's first three vt records
    np.testing.assert_allclose(
        mesh.corner_uvs[0], [[0.01, 0.01], [0.24, 0.01], [0.24, 0.49]]
    )


def test_load_missing_file():
    with pytest.raises(MeshError, match="file not found"):
        load_mesh("/nonexistent/never/model.obj")


def test_load_zero_faces(tmp_path):
    p = tmp_path / "pts.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\n")
    with pytest.raises(MeshError, match="zero faces"):
        load_mesh(p)


def test_load_malformed_indices(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n")
    with pytest.raises(MeshError):
        load_mesh(p)


def test_normalize_cube_corners(tmp_path):
    mesh = normalize_mesh(load_mesh(write_cube_obj(tmp_path / "c.obj")))
    c = 1.0 / math.sqrt(3.0)
    assert np.allclose(np.abs(mesh.vertices), c, atol=1e-12)
    assert abs(np.linalg.norm(mesh.vertices, axis=1).max() - 1.0) < 1e-6
    center = (mesh.vertices.min(axis=0) + mesh.vertices.max(axis=0)) / 2
    assert np.allclose(center, 0.0, atol=1e-12)


def test_normalize_identity_when_already_normalized(tmp_path):
    mesh = normalize_mesh(load_mesh(write_cube_obj(tmp_path / "c.obj")))
    again = normalize_mesh(mesh)
    assert np.allclose(again.vertices, mesh.vertices, atol=1e-6)


def test_normalize_degenerate_extent():
    verts = np.ones((3, 3))
    faces = np.array([[0, 1, 2]])
    mesh = TriangleMesh(verts, faces, None, compute_vertex_normals(verts, faces))
    with pytest.raises(MeshError, match="degenerate extent"):
        normalize_mesh(mesh)


def test_atlas_passthrough_when_valid(tmp_path):
    mesh = load_mesh(write_cube_obj(tmp_path / "c.obj", with_uv=True))
    out = ensure_uv_atlas(mesh)
    assert out is mesh


def test_atlas_two_triangles(tmp_path):
    p = tmp_path / "two.obj"
    p.write_text(
        "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 1\nf 1 2 3\nf 2 4 3\n"
    )
    mesh = ensure_uv_atlas(load_mesh(p))
    assert has_valid_atlas(mesh)
    # 2 faces -> 2x2 cell grid, both charts inside the unit square
    assert mesh.corner_uvs.min() >= 0.0
    assert mesh.corner_uvs.max() <= 1.0
    centers = mesh.corner_uvs.mean(axis=1)
    assert centers[0][0] < 0.5 and centers[1][0] > 0.5  # separate grid cells


def test_atlas_cube_charts_disjoint(tmp_path):
    mesh = ensure_uv_atlas(load_mesh(write_cube_obj(tmp_path / "c.obj")))
    claims = rasterize_chart_claims(mesh.corner_uvs, 512)
    assert claims.max() <= 1
    assert (claims == 1).sum() > 0


def test_atlas_respects_force(tmp_path):
    mesh = load_mesh(write_cube_obj(tmp_path / "c.obj", with_uv=True))
    out = ensure_uv_atlas(mesh, force=True)
    assert out is not mesh
    assert has_valid_atlas(out)


def test_pipeline_idempotent(tmp_path):
    mesh = ensure_uv_atlas(normalize_mesh(load_mesh(write_cube_obj(tmp_path / "c.obj"))))
    again = ensure_uv_atlas(normalize_mesh(mesh))
    assert np.allclose(again.vertices, mesh.vertices, atol=1e-6)
    np.testing.assert_array_equal(again.faces, mesh.faces)
    assert np.allclose(again.corner_uvs, mesh.corner_uvs, atol=1e-6)


def test_fan_triangulation_preserves_polygon_area(tmp_path):
    # planar pentagon in the z=0.3 plane
    pent = [
        (math.cos(2 * math.pi * k / 5), math.sin(2 * math.pi * k / 5), 0.3)
        for k in range(5)
    ]
    lines = [f"v {x} {y} {z}" for x, y, z in pent] + ["f 1 2 3 4 5"]
    p = tmp_path / "pent.obj"
    p.write_text("\n".join(lines) + "\n")
    mesh = load_mesh(p)
    assert mesh.num_faces == 3
    tri_area = sum(
        triangle_area_3d(*mesh.vertices[mesh.faces[t]]) for t in range(mesh.num_faces)
    )
    poly_area = polygon_area_3d(pent)
    assert abs(tri_area - poly_area) / poly_area < 1e-5


def test_normals_unit_length(tmp_path):
    mesh = load_mesh(write_cube_obj(tmp_path / "c.obj"))
    lengths = np.linalg.norm(mesh.normals, axis=1)
    assert np.allclose(lengths, 1.0, atol=1e-6)


def test_normals_area_weighted_flat_plate(tmp_path):
    p = tmp_path / "plate.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    mesh = load_mesh(p)
    assert np.allclose(np.abs(mesh.normals[:, 2]), 1.0, atol=1e-12)


def test_mesh_arrays_immutable(cube_mesh):
    with pytest.raises(ValueError):
        cube_mesh.vertices[0, 0] = 99.0


@settings(max_examples=25, deadline=None)
@given(
    st.lists(
        st.tuples(
            st.floats(-50, 50, allow_nan=False),
            st.floats(-50, 50, allow_nan=False),
            st.floats(-50, 50, allow_nan=False),
        ),
        min_size=3,
        max_size=12,
        unique=True,
    )
)
def test_normalize_idempotent_property(points):
    verts = np.array(points, dtype=np.float64)
    spread = verts.max(axis=0) - verts.min(axis=0)
    if np.linalg.norm(spread) < 1e-6:
        return
    faces = np.array([[0, 1, 2]], dtype=np.int64)
    mesh = TriangleMesh(verts, faces, None, compute_vertex_normals(verts, faces))
    once = normalize_mesh(mesh)
    twice = normalize_mesh(once)
    assert abs(np.linalg.norm(once.vertices, axis=1).max() - 1.0) < 1e-9
    assert np.allclose(once.vertices, twice.vertices, atol=1e-6)
