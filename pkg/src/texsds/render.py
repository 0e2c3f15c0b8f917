"""Differentiable rendering of the textured mesh plus depth conditioning prep.

The geometry pass (which triangle covers which pixel, with what barycentric
weights) runs outside autograd because the mesh is fixed; gradients flow
only through the texture field queried at the covered surface points. Depth
is the camera-space distance along the viewing axis, zero on background.
"""

import math
import os
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError
from .geometry import TriangleMesh
from .texfield import TextureField

DEFAULT_FOV_Y = 40.0
DEFAULT_BACKGROUND = (0.5, 0.5, 0.5)
_MIN_DEPTH = 1e-6


@dataclass(frozen=True)
class CameraSample:
    """Spherical camera looking at the origin.

    elevation/azimuth in degrees, distance in multiples of the unit-sphere
    radius of the normalized mesh.
    """

    elevation: float
    azimuth: float
    distance: float
    fov_y: float = DEFAULT_FOV_Y
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass
class RenderOutput:
    rgb: torch.Tensor  # (H, W, 3) in [0, 1]; keeps the autograd graph
    depth: torch.Tensor  # (H, W) float32, 0 on background
    mask: torch.Tensor  # (H, W) bool
    camera: CameraSample


@dataclass(frozen=True)
class DepthCondition:
    map: np.ndarray  # (h, w) float32 in [-1, 1]


def sample_cameras(
    rng: np.random.Generator,
    batch: int,
    elev_range: tuple[float, float] = (10.0, 80.0),
    dist_range: tuple[float, float] = (1.0, 1.5),
    azim_range: tuple[float, float] = (0.0, 360.0),
    fov_y: float = DEFAULT_FOV_Y,
) -> list[CameraSample]:
    """Independent uniform draws per coordinate per sample."""
    if batch < 1:
        raise ConfigError("camera batch must be >= 1")
    for name, (lo, hi) in (
        ("elevation", elev_range),
        ("distance", dist_range),
        ("azimuth", azim_range),
    ):
        if lo > hi:
            raise ConfigError(f"inverted {name} range [{lo}, {hi}]")
    elev = rng.uniform(elev_range[0], elev_range[1], size=batch)
    azim = rng.uniform(azim_range[0], azim_range[1], size=batch)
    dist = rng.uniform(dist_range[0], dist_range[1], size=batch)
    return [
        CameraSample(float(e), float(a), float(d), fov_y=fov_y)
        for e, a, d in zip(elev, azim, dist)
    ]


def camera_basis(camera: CameraSample):
    """Return (eye, right, up, forward) as float64 arrays. Z is world up."""
    el = math.radians(camera.elevation)
    az = math.radians(camera.azimuth)
    target = np.asarray(camera.look_at, dtype=np.float64)
    eye = target + camera.distance * np.array(
        [math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)]
    )
    forward = target - eye
    forward = forward / np.linalg.norm(forward)
    world_up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, world_up)
    nr = np.linalg.norm(right)
    if nr < 1e-9:  # looking straight up/down; pick an arbitrary horizontal right
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / nr
    up = np.cross(right, forward)
    return eye, right, up, forward


@dataclass
class RasterFragments:
    """Per-covered-pixel geometry produced by the non-differentiable pass."""

    rows: np.ndarray  # (N,) pixel row indices
    cols: np.ndarray  # (N,) pixel column indices
    tri_ids: np.ndarray  # (N,) triangle indices
    bary: np.ndarray  # (N, 3) perspective-correct barycentric weights
    points: np.ndarray  # (N, 3) world-space surface positions
    depth: np.ndarray  # (N,) camera-space distance along the view axis


def rasterize(mesh: TriangleMesh, camera: CameraSample, resolution: int) -> RasterFragments:
    """Z-buffered perspective rasterization at pixel centers.

    Barycentric weights are perspective-correct, so the interpolated surface
    point is exactly the intersection of the pixel-center ray with the
    winning triangle's plane.
    """
    if resolution < 16:
        raise ConfigError("render resolution must be >= 16")
    eye, right, up, forward = camera_basis(camera)
    res = resolution

    rel = mesh.vertices - eye
    xc = rel @ right
    yc = rel @ up
    zc = rel @ forward
    tanf = math.tan(math.radians(camera.fov_y) / 2.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        safe_z = np.where(zc > _MIN_DEPTH, zc, np.nan)
        px = (xc / (safe_z * tanf) + 1.0) * 0.5 * res
        py = (1.0 - yc / (safe_z * tanf)) * 0.5 * res

    zbuf = np.full((res, res), np.inf)
    tri_buf = np.full((res, res), -1, dtype=np.int64)
    b0 = np.zeros((res, res))
    b1 = np.zeros((res, res))

    tris = mesh.faces
    for t in range(tris.shape[0]):
        i0, i1, i2 = tris[t]
        z0, z1, z2 = zc[i0], zc[i1], zc[i2]
        if min(z0, z1, z2) <= _MIN_DEPTH:
            continue  # behind or grazing the eye; cameras sit outside the mesh
        x0, y0 = px[i0], py[i0]
        x1, y1 = px[i1], py[i1]
        x2, y2 = px[i2], py[i2]
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if abs(area) < 1e-12:
            continue
        xmin = max(int(math.floor(min(x0, x1, x2) - 0.5)), 0)
        xmax = min(int(math.ceil(max(x0, x1, x2) + 0.5)), res - 1)
        ymin = max(int(math.floor(min(y0, y1, y2) - 0.5)), 0)
        ymax = min(int(math.ceil(max(y0, y1, y2) + 0.5)), res - 1)
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
        # perspective correction: attribute/z is linear in screen space
        with np.errstate(divide="ignore", invalid="ignore"):
            inv_z = l0 / z0 + l1 / z1 + l2 / z2
            depth = 1.0 / inv_z
            w0 = (l0 / z0) * depth
            w1 = (l1 / z1) * depth
        rows = np.arange(ymin, ymax + 1)[:, None] + np.zeros_like(l0, dtype=np.int64)
        cols = np.arange(xmin, xmax + 1)[None, :] + np.zeros_like(l0, dtype=np.int64)
        closer = inside & (depth < zbuf[ymin : ymax + 1, xmin : xmax + 1])
        rr = rows[closer]
        cc = cols[closer]
        zbuf[rr, cc] = depth[closer]
        tri_buf[rr, cc] = t
        b0[rr, cc] = w0[closer]
        b1[rr, cc] = w1[closer]

    covered = tri_buf >= 0
    rows, cols = np.nonzero(covered)
    tri_ids = tri_buf[rows, cols]
    w0 = b0[rows, cols]
    w1 = b1[rows, cols]
    bary = np.stack([w0, w1, 1.0 - w0 - w1], axis=1)
    corner_pos = mesh.vertices[mesh.faces[tri_ids]]  # (N, 3, 3)
    points = np.einsum("nk,nkd->nd", bary, corner_pos)
    depth = zbuf[rows, cols]
    return RasterFragments(rows, cols, tri_ids, bary, points, depth)


def render(
    mesh: TriangleMesh,
    field: TextureField,
    camera: CameraSample,
    resolution: int,
    background: tuple[float, float, float] = DEFAULT_BACKGROUND,
) -> RenderOutput:
    """Render RGB/depth/mask from one camera.

    RGB gradients w.r.t. field parameters are exact; the mesh is constant so
    no silhouette gradients exist. Background pixels hold the constant
    background color and carry zero gradient.
    """
    frags = rasterize(mesh, camera, resolution)
    dtype = next(field.parameters()).dtype
    rgb = torch.empty(resolution, resolution, 3, dtype=dtype)
    rgb[:] = torch.tensor(background, dtype=dtype)
    depth = torch.zeros(resolution, resolution, dtype=torch.float32)
    mask = torch.zeros(resolution, resolution, dtype=torch.bool)
    if frags.points.shape[0] > 0:
        pts = torch.from_numpy(frags.points).to(dtype)
        colors = field.query(pts)
        rows = torch.from_numpy(frags.rows)
        cols = torch.from_numpy(frags.cols)
        rgb = rgb.index_put((rows, cols), colors)
        depth[rows, cols] = torch.from_numpy(frags.depth).to(torch.float32)
        mask[rows, cols] = True
    return RenderOutput(rgb=rgb, depth=depth, mask=mask, camera=camera)


def prepare_depth_condition(output: RenderOutput, target_size: int) -> DepthCondition:
    """Convert a depth map to the [-1, 1] disparity conditioning format.

    Foreground depth inverts to disparity, background takes the foreground
    disparity minimum, the map min-max normalizes to [-1, 1] (nearest
    surface maps to +1), then area-averages down to target_size square.
    An empty or constant-depth foreground yields all zeros.
    """
    if target_size < 8:
        raise ConfigError("depth condition size must be >= 8")
    depth = output.depth.detach().cpu().numpy().astype(np.float64)
    mask = output.mask.detach().cpu().numpy()
    h, w = depth.shape
    disp = np.zeros_like(depth)
    if mask.any():
        disp[mask] = 1.0 / depth[mask]
        lo = disp[mask].min()
        hi = disp[mask].max()
        disp[~mask] = lo
        if hi - lo > 1e-12:
            disp = (disp - lo) / (hi - lo) * 2.0 - 1.0
        else:
            disp = np.zeros_like(depth)
    small = (
        torch.nn.functional.adaptive_avg_pool2d(
            torch.from_numpy(disp).unsqueeze(0).unsqueeze(0), target_size
        )
        .squeeze()
        .numpy()
    )
    return DepthCondition(map=small.astype(np.float32))


def turntable_cameras(
    views: int,
    elevation: float = 30.0,
    distance: float = 1.25,
    fov_y: float = DEFAULT_FOV_Y,
) -> list[CameraSample]:
    """Evenly spaced azimuths starting at 0, for previews and reports."""
    return [
        CameraSample(elevation, 360.0 * i / views, distance, fov_y=fov_y)
        for i in range(views)
    ]


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def save_render_snapshot(output: RenderOutput, prefix: str | os.PathLike) -> list[str]:
    """Write rgb/depth/mask PNGs; depth is tone-mapped to 8 bit for inspection."""
    prefix = os.fspath(prefix)
    rgb = output.rgb.detach().cpu().numpy()
    depth = output.depth.cpu().numpy()
    mask = output.mask.cpu().numpy()
    paths = []
    Image.fromarray(_to_u8(rgb)).save(prefix + "_rgb.png")
    paths.append(prefix + "_rgb.png")
    toned = np.zeros_like(depth)
    if mask.any():
        lo, hi = depth[mask].min(), depth[mask].max()
        span = hi - lo if hi > lo else 1.0
        toned[mask] = 1.0 - (depth[mask] - lo) / span * 0.9
    Image.fromarray(_to_u8(toned)).save(prefix + "_depth.png")
    paths.append(prefix + "_depth.png")
    Image.fromarray((mask * 255).astype(np.uint8)).save(prefix + "_mask.png")
    paths.append(prefix + "_mask.png")
    return paths
