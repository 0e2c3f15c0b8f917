"""Bake the optimized field into a standard UV texture and export it.

Texels covered by a chart get the field color of their reconstructed 3D
surface point; a nearest-occupied dilation pads chart borders so bilinear
filtering never samples background at seams. Exported files are plain
OBJ + MTL + 8-bit RGB PNG.

Texture space convention: u maps to columns left-to-right, v maps up, so
image row 0 holds v near 1. Standard v-up samplers read the PNG directly.
"""

import os
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .errors import BakeError, ConfigError, MeshError
from .geometry import TriangleMesh, has_valid_atlas
from .render import CameraSample, rasterize
from .texfield import TextureField

DEFAULT_BAKE_RESOLUTION = 512
DILATION_TEXELS = 4


@dataclass
class BakedTexture:
    image: np.ndarray  # (R, R, 3) float32 in [0, 1]
    occupancy: np.ndarray  # (R, R) bool, texels covered by charts
    uv_source: TriangleMesh


def _uv_to_pixels(uvs: np.ndarray, resolution: int) -> np.ndarray:
    """Map (…, 2) UVs to continuous pixel coordinates (x right, y down)."""
    out = np.empty_like(uvs)
    out[..., 0] = uvs[..., 0] * resolution
    out[..., 1] = (1.0 - uvs[..., 1]) * resolution
    return out


def bake(
    mesh: TriangleMesh,
    field: TextureField,
    resolution: int = DEFAULT_BAKE_RESOLUTION,
    dilation: int = DILATION_TEXELS,
) -> BakedTexture:
    """Rasterize charts in UV space, query the field per texel, and dilate.

    Raises BakeError when two charts claim interior ownership of the same
    texel, naming the offending triangles.
    """
    if resolution < 64:
        raise ConfigError("bake resolution must be >= 64")
    if not has_valid_atlas(mesh):
        raise MeshError("mesh has no valid UV atlas; run ensure_uv_atlas first")

    res = resolution
    tri_buf = np.full((res, res), -1, dtype=np.int64)
    b0 = np.zeros((res, res))
    b1 = np.zeros((res, res))
    pix = _uv_to_pixels(mesh.corner_uvs, res)  # (F, 3, 2)

    for t in range(mesh.num_faces):
        (x0, y0), (x1, y1), (x2, y2) = pix[t]
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if abs(area) < 1e-12:
            continue
        xmin = max(int(np.floor(min(x0, x1, x2) - 0.5)), 0)
        xmax = min(int(np.ceil(max(x0, x1, x2) + 0.5)), res - 1)
        ymin = max(int(np.floor(min(y0, y1, y2) - 0.5)), 0)
        ymax = min(int(np.ceil(max(y0, y1, y2) + 0.5)), res - 1)
        if xmin > xmax or ymin > ymax:
            continue
        xs = np.arange(xmin, xmax + 1) + 0.5
        ys = np.arange(ymin, ymax + 1) + 0.5
        gx, gy = np.meshgrid(xs, ys)
        l0 = ((x2 - x1) * (gy - y1) - (y2 - y1) * (gx - x1)) / area
        l1 = ((x0 - x2) * (gy - y2) - (y0 - y2) * (gx - x2)) / area
        l2 = 1.0 - l0 - l1
        inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        if not inside.any():
            continue
        window = tri_buf[ymin : ymax + 1, xmin : xmax + 1]
        # interior double-claims mean the atlas genuinely overlaps
        eps = 1e-7
        interior = (l0 > eps) & (l1 > eps) & (l2 > eps)
        clash = interior & (window >= 0) & (window != t)
        if clash.any():
            other = int(window[clash][0])
            raise BakeError(
                f"overlapping UV charts: triangles {other} and {t} share texels"
            )
        write = inside & (window < 0)
        window[write] = t
        b0[ymin : ymax + 1, xmin : xmax + 1][write] = l0[write]
        b1[ymin : ymax + 1, xmin : xmax + 1][write] = l1[write]

    occupancy = tri_buf >= 0
    image = np.full((res, res, 3), 0.5, dtype=np.float32)
    rows, cols = np.nonzero(occupancy)
    if rows.size:
        tri_ids = tri_buf[rows, cols]
        w0 = b0[rows, cols]
        w1 = b1[rows, cols]
        bary = np.stack([w0, w1, 1.0 - w0 - w1], axis=1)
        corner_pos = mesh.vertices[mesh.faces[tri_ids]]
        points = np.einsum("nk,nkd->nd", bary, corner_pos)
        dtype = next(field.parameters()).dtype
        with torch.no_grad():
            colors = field.query(torch.from_numpy(points).to(dtype))
        image[rows, cols] = colors.cpu().numpy().astype(np.float32)

    image = _dilate(image, occupancy, dilation)
    return BakedTexture(image=image, occupancy=occupancy, uv_source=mesh)


def _dilate(image: np.ndarray, occupancy: np.ndarray, texels: int) -> np.ndarray:
    """Fill unoccupied texels within `texels` of a chart with the nearest
    occupied color. Occupied texels are never altered."""
    if texels <= 0 or occupancy.all() or not occupancy.any():
        return image
    dist, (ir, ic) = ndimage.distance_transform_edt(~occupancy, return_indices=True)
    fill = (~occupancy) & (dist <= texels)
    out = image.copy()
    out[fill] = image[ir[fill], ic[fill]]
    return out


def sample_texture_bilinear(image: np.ndarray, uvs: np.ndarray) -> np.ndarray:
    """Bilinear lookup of (N, 2) UVs in an (R, R, 3) texture image."""
    res = image.shape[0]
    pix = _uv_to_pixels(uvs, res) - 0.5  # texel centers at integer coords
    x = np.clip(pix[:, 0], 0.0, res - 1.0)
    y = np.clip(pix[:, 1], 0.0, res - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, res - 1)
    y1 = np.minimum(y0 + 1, res - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    c00 = image[y0, x0]
    c10 = image[y0, x1]
    c01 = image[y1, x0]
    c11 = image[y1, x1]
    return (
        c00 * (1 - fx) * (1 - fy)
        + c10 * fx * (1 - fy)
        + c01 * (1 - fx) * fy
        + c11 * fx * fy
    )


def render_textured(
    mesh: TriangleMesh,
    image: np.ndarray,
    camera: CameraSample,
    resolution: int,
    background: tuple[float, float, float] = (0.5, 0.5, 0.5),
) -> np.ndarray:
    """Render the mesh with a baked texture via standard UV lookup.

    Returns an (H, W, 3) float array. Used to verify bake fidelity against
    direct field renders.
    """
    frags = rasterize(mesh, camera, resolution)
    out = np.full((resolution, resolution, 3), background, dtype=np.float64)
    if frags.tri_ids.size:
        corner_uv = mesh.corner_uvs[frags.tri_ids]  # (N, 3, 2)
        uv = np.einsum("nk,nkd->nd", frags.bary, corner_uv)
        out[frags.rows, frags.cols] = sample_texture_bilinear(image, uv)
    return out


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def export(
    mesh: TriangleMesh, baked: BakedTexture, out_dir: str | os.PathLike
) -> dict[str, str]:
    """Write model.obj, model.mtl, and texture.png into out_dir.

    The OBJ carries per-corner vt records and references the MTL, whose
    map_Kd points at the texture. Returns the written paths by artifact name.
    """
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    obj_path = os.path.join(out_dir, "model.obj")
    mtl_path = os.path.join(out_dir, "model.mtl")
    png_path = os.path.join(out_dir, "texture.png")

    Image.fromarray(to_uint8(baked.image)).save(png_path)

    with open(mtl_path, "w", encoding="utf-8") as fh:
        fh.write("newmtl baked\n")
        fh.write("Ka 1.000 1.000 1.000\nKd 1.000 1.000 1.000\nKs 0.000 0.000 0.000\n")
        fh.write("map_Kd texture.png\n")

    with open(obj_path, "w", encoding="utf-8") as fh:
        fh.write("mtllib model.mtl\n")
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.8f} {v[1]:.8f} {v[2]:.8f}\n")
        for n in mesh.normals:
            fh.write(f"vn {n[0]:.6f} {n[1]:.6f} {n[2]:.6f}\n")
        for f in range(mesh.num_faces):
            for c in range(3):
                u, vv = mesh.corner_uvs[f, c]
                fh.write(f"vt {u:.6f} {vv:.6f}\n")
        fh.write("usemtl baked\n")
        for f in range(mesh.num_faces):
            i0, i1, i2 = (int(i) + 1 for i in mesh.faces[f])
            t0, t1, t2 = 3 * f + 1, 3 * f + 2, 3 * f + 3
            fh.write(
                f"f {i0}/{t0}/{i0} {i1}/{t1}/{i1} {i2}/{t2}/{i2}\n"
            )

    return {"obj": obj_path, "mtl": mtl_path, "texture": png_path}
