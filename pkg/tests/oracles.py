"""Independent reference implementations the tests check the package against.

Everything here is written from first principles (scalar math, ray casting,
brute-force loops) and must stay independent of the code paths under test.
"""

import math

import numpy as np

from texsds.render import camera_basis


def scalar_hash_index(x: int, y: int, z: int, log2_table_size: int) -> int:
    """Pure-python recompute of the XOR-prime spatial hash."""
    return ((x * 1) ^ (y * 2654435761) ^ (z * 805459861)) % (2**log2_table_size)


def raycast_depth(mesh, camera, res):
    """Per-pixel Moller-Trumbore ray casting.

    Returns (depth, covered): depth is the distance along the camera's view
    axis, zero where no triangle is hit.
    """
    eye, right, up, forward = camera_basis(camera)
    tanf = math.tan(math.radians(camera.fov_y) / 2)
    jj, ii = np.meshgrid(np.arange(res), np.arange(res))
    ndc_x = (jj + 0.5) / res * 2 - 1
    ndc_y = 1 - (ii + 0.5) / res * 2
    dirs = (
        forward[None, None, :]
        + tanf * (ndc_x[..., None] * right[None, None, :] + ndc_y[..., None] * up[None, None, :])
    )
    depth = np.full((res, res), np.inf)
    v = mesh.vertices
    f = mesh.faces
    for t in range(f.shape[0]):
        a, b, c = v[f[t, 0]], v[f[t, 1]], v[f[t, 2]]
        e1, e2 = b - a, c - a
        pvec = np.cross(dirs, e2)
        det = pvec @ e1
        tvec = eye - a
        qvec = np.cross(tvec, e1)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / det
            u = (pvec @ tvec) * inv
            w = (dirs @ qvec) * inv
            ray_t = (qvec @ e2) * inv
        hit = (np.abs(det) > 1e-14) & (u >= 0) & (w >= 0) & (u + w <= 1) & (ray_t > 1e-6)
        d_axis = ray_t * (dirs @ forward)
        depth = np.where(hit & (d_axis < depth), d_axis, depth)
    covered = np.isfinite(depth)
    return np.where(covered, depth, 0.0), covered


def point_in_triangle_2d(p, a, b, c, eps=0.0):
    """Inclusive barycentric point-in-triangle test."""
    area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    if abs(area) < 1e-15:
        return False
    l0 = ((c[0] - b[0]) * (p[1] - b[1]) - (c[1] - b[1]) * (p[0] - b[0])) / area
    l1 = ((a[0] - c[0]) * (p[1] - c[1]) - (a[1] - c[1]) * (p[0] - c[0])) / area
    l2 = 1.0 - l0 - l1
    return l0 >= -eps and l1 >= -eps and l2 >= -eps


def rasterize_chart_claims(corner_uvs: np.ndarray, resolution: int) -> np.ndarray:
    """Count how many triangles claim each texel center (inclusive test)."""
    claims = np.zeros((resolution, resolution), dtype=np.int32)
    for t in range(corner_uvs.shape[0]):
        uv = corner_uvs[t]
        pix = np.stack([uv[:, 0] * resolution, (1.0 - uv[:, 1]) * resolution], axis=1)
        xmin = max(int(np.floor(pix[:, 0].min())) - 1, 0)
        xmax = min(int(np.ceil(pix[:, 0].max())) + 1, resolution - 1)
        ymin = max(int(np.floor(pix[:, 1].min())) - 1, 0)
        ymax = min(int(np.ceil(pix[:, 1].max())) + 1, resolution - 1)
        for yy in range(ymin, ymax + 1):
            for xx in range(xmin, xmax + 1):
                if point_in_triangle_2d((xx + 0.5, yy + 0.5), pix[0], pix[1], pix[2]):
                    claims[yy, xx] += 1
    return claims


def sample_texture_nearest_of_bilinear(image, u, v):
    """Scalar bilinear texture lookup, v-up convention, texel centers at
    integer coordinates after the half-texel shift."""
    res = image.shape[0]
    x = min(max(u * res - 0.5, 0.0), res - 1.0)
    y = min(max((1.0 - v) * res - 0.5, 0.0), res - 1.0)
    x0, y0 = int(math.floor(x)), int(math.floor(y))
    x1, y1 = min(x0 + 1, res - 1), min(y0 + 1, res - 1)
    fx, fy = x - x0, y - y0
    return (
        image[y0, x0] * (1 - fx) * (1 - fy)
        + image[y0, x1] * fx * (1 - fy)
        + image[y1, x0] * (1 - fx) * fy
        + image[y1, x1] * fx * fy
    )


def triangle_area_3d(a, b, c) -> float:
    return 0.5 * float(np.linalg.norm(np.cross(np.asarray(b) - a, np.asarray(c) - a)))


def polygon_area_3d(points) -> float:
    """Area of a planar polygon via the cross-product shoelace."""
    pts = np.asarray(points, dtype=np.float64)
    total = np.zeros(3)
    for i in range(1, len(pts) - 1):
        total += np.cross(pts[i] - pts[0], pts[i + 1] - pts[0])
    return 0.5 * float(np.linalg.norm(total))


def shoelace_area_2d(pts) -> float:
    pts = np.asarray(pts, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * math.log10(peak**2 / mse)
