"""Pinhole camera model and ground-plane projective transforms.

World frame: x/y on the ground plane (z up), angles CCW from +x.
Ego frame: forward/left/up, origin on the ground under the rear axle.
Camera frame: x right, y down, z forward (optical axis); the camera sits
mount_height above the ego origin, pitch > 0 tilts the optical axis down.
Pixel centers are at integer coordinates, so the image covers the half-open
box [-0.5, width-0.5) x [-0.5, height-0.5).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Points closer than this to the image plane are not projectable; avoids
# division blow-up near z_cam = 0.
MIN_DEPTH = 0.1


class HorizonError(Exception):
    """Pixel ray does not intersect the ground ahead of the camera."""


class EmptyMaskError(Exception):
    """Rasterization produced no in-bounds pixels."""


def wrap_angle(a: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    a = math.remainder(a, math.tau)
    if a <= -math.pi:
        a += math.tau
    return a


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    yaw: float

    def __post_init__(self):
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))


@dataclass(frozen=True)
class GroundPoint:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError("ground point coordinates must be finite")

    def dist(self, other: "GroundPoint") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass(frozen=True)
class CameraModel:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    mount_height: float = 1.6
    mount_pitch: float = 0.0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.mount_height <= 0:
            raise ValueError("mount height must be positive")

    @staticmethod
    def default(resolution: int = 64, mount_height: float = 1.6,
                mount_pitch: float = 0.0) -> "CameraModel":
        """Square camera with a 90 degree horizontal FOV (fx = width/2)."""
        f = resolution / 2.0
        c = resolution / 2.0
        return CameraModel(resolution, resolution, f, f, c, c,
                           mount_height, mount_pitch)

    def horizon_row(self) -> float:
        """Row of the ground-plane vanishing line; rays at or above it never
        reach the ground."""
        return self.cy - self.fy * math.tan(self.mount_pitch)


class SemanticRaster:
    """Class-labeled image grid; binary masks restrict values to {0, 255}."""

    MASK_ON = 255

    def __init__(self, pixels: np.ndarray):
        pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
        if pixels.ndim != 2:
            raise ValueError("raster pixels must be a 2-d array")
        self.pixels = pixels

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def data(self) -> bytes:
        return self.pixels.tobytes()

    @staticmethod
    def zeros(width: int, height: int) -> "SemanticRaster":
        return SemanticRaster(np.zeros((height, width), dtype=np.uint8))

    def is_binary(self) -> bool:
        return bool(np.isin(self.pixels, (0, 255)).all())

    def __eq__(self, other) -> bool:
        return isinstance(other, SemanticRaster) and np.array_equal(
            self.pixels, other.pixels)


def _world_to_cam(xs, ys, ego: Pose2D, cam: CameraModel):
    """Vectorized world ground points -> camera-frame coordinates."""
    cy_, sy_ = math.cos(ego.yaw), math.sin(ego.yaw)
    dx = np.asarray(xs, dtype=np.float64) - ego.x
    dy = np.asarray(ys, dtype=np.float64) - ego.y
    f = cy_ * dx + sy_ * dy
    l = -sy_ * dx + cy_ * dy
    cp, sp = math.cos(cam.mount_pitch), math.sin(cam.mount_pitch)
    x_cam = -l
    y_cam = -sp * f + cp * cam.mount_height
    z_cam = cp * f + sp * cam.mount_height
    return x_cam, y_cam, z_cam


def _in_bounds(u, v, cam: CameraModel):
    return ((u >= -0.5) & (u < cam.width - 0.5)
            & (v >= -0.5) & (v < cam.height - 0.5))


def project(p: GroundPoint, ego: Pose2D, cam: CameraModel):
    """Project a world ground point into the image.

    Returns (u, v) pixel coordinates, or None when the point is behind the
    image plane (z_cam <= MIN_DEPTH) or falls outside the image.
    """
    x_cam, y_cam, z_cam = _world_to_cam(p.x, p.y, ego, cam)
    if z_cam <= MIN_DEPTH:
        return None
    u = cam.cx + cam.fx * x_cam / z_cam
    v = cam.cy + cam.fy * y_cam / z_cam
    if not _in_bounds(u, v, cam):
        return None
    return (float(u), float(v))


def project_points(xy: np.ndarray, ego: Pose2D, cam: CameraModel):
    """Vectorized project; xy is (N, 2).

    Returns (uv (N, 2) float64, valid (N,) bool); uv rows are meaningful only
    where valid.
    """
    x_cam, y_cam, z_cam = _world_to_cam(xy[:, 0], xy[:, 1], ego, cam)
    valid = z_cam > MIN_DEPTH
    z_safe = np.where(valid, z_cam, 1.0)
    u = cam.cx + cam.fx * x_cam / z_safe
    v = cam.cy + cam.fy * y_cam / z_safe
    valid &= _in_bounds(u, v, cam)
    return np.stack([u, v], axis=1), valid


def inverse_project(u: float, v: float, ego: Pose2D, cam: CameraModel) -> GroundPoint:
    """Cast the pixel ray and intersect the ground plane.

    Raises HorizonError when the ray is level or ascending (v at or above the
    horizon row), which signals an unusable click/centroid.
    """
    dxc = (u - cam.cx) / cam.fx
    dyc = (v - cam.cy) / cam.fy
    cp, sp = math.cos(cam.mount_pitch), math.sin(cam.mount_pitch)
    descent = dyc * cp + sp
    if descent <= 0.0:
        raise HorizonError(f"pixel ({u}, {v}) is at or above the horizon row "
                           f"{cam.horizon_row():.2f}")
    t = cam.mount_height / descent
    f = t * (-sp * dyc + cp)
    l = t * -dxc
    cy_, sy_ = math.cos(ego.yaw), math.sin(ego.yaw)
    return GroundPoint(ego.x + cy_ * f - sy_ * l, ego.y + sy_ * f + cy_ * l)


def ground_grid(ego: Pose2D, cam: CameraModel):
    """Inverse-project every pixel center at once.

    Returns (xy (H, W, 2) world coordinates, valid (H, W) bool); pixels at or
    above the horizon are invalid.
    """
    us = np.arange(cam.width, dtype=np.float64)
    vs = np.arange(cam.height, dtype=np.float64)
    dxc = (us[None, :] - cam.cx) / cam.fx
    dyc = (vs[:, None] - cam.cy) / cam.fy
    cp, sp = math.cos(cam.mount_pitch), math.sin(cam.mount_pitch)
    descent = dyc * cp + sp
    valid = descent > 0.0
    t = np.where(valid, cam.mount_height / np.where(valid, descent, 1.0), 0.0)
    f = t * (-sp * dyc + cp)
    l = np.broadcast_to(-dxc, (cam.height, cam.width)) * t
    cy_, sy_ = math.cos(ego.yaw), math.sin(ego.yaw)
    x = ego.x + cy_ * f - sy_ * l
    y = ego.y + sy_ * f + cy_ * l
    shape = (cam.height, cam.width)
    return (np.stack([np.broadcast_to(x, shape), np.broadcast_to(y, shape)],
                     axis=-1),
            np.broadcast_to(valid, shape).copy())


def _clip_near(poly_cam: list) -> list:
    """Sutherland-Hodgman clip of a camera-space polygon against z=MIN_DEPTH."""
    out = []
    n = len(poly_cam)
    for i in range(n):
        cur, nxt = poly_cam[i], poly_cam[(i + 1) % n]
        cur_in = cur[2] > MIN_DEPTH
        nxt_in = nxt[2] > MIN_DEPTH
        if cur_in:
            out.append(cur)
        if cur_in != nxt_in:
            t = (MIN_DEPTH - cur[2]) / (nxt[2] - cur[2])
            out.append(tuple(c + t * (n_ - c) for c, n_ in zip(cur, nxt)))
    return out


def fill_polygon(uv: list, width: int, height: int) -> np.ndarray:
    """Scanline fill with half-open pixel-center coverage.

    A pixel is set when its center lies inside the polygon under the standard
    even-odd rule with edges counted on [y_min, y_max); deterministic and
    bit-exact across platforms.
    """
    mask = np.zeros((height, width), dtype=np.uint8)
    if len(uv) < 3:
        return mask
    vs = [p[1] for p in uv]
    r0 = max(0, int(math.ceil(min(vs))))
    r1 = min(height - 1, int(math.floor(max(vs))))
    n = len(uv)
    for r in range(r0, r1 + 1):
        xs = []
        for i in range(n):
            (x0, y0), (x1, y1) = uv[i], uv[(i + 1) % n]
            if y0 == y1:
                continue
            if min(y0, y1) <= r < max(y0, y1):
                xs.append(x0 + (r - y0) * (x1 - x0) / (y1 - y0))
        xs.sort()
        for k in range(0, len(xs) - 1, 2):
            c0 = max(0, int(math.ceil(xs[k])))
            c1 = min(width - 1, int(math.ceil(xs[k + 1])) - 1)
            if c1 >= c0:
                mask[r, c0:c1 + 1] = SemanticRaster.MASK_ON
    return mask


# Navigable-region rectangle, approx the footprint of a car: 3 m across the
# heading, 4 m along it.
NAV_RECT_LATERAL = 3.0
NAV_RECT_LONGITUDINAL = 4.0


def nav_rect_corners(center: GroundPoint, heading: float) -> np.ndarray:
    """World-frame corners of the 3 m x 4 m navigable rectangle."""
    ch, sh = math.cos(heading), math.sin(heading)
    lon = np.array([ch, sh]) * (NAV_RECT_LONGITUDINAL / 2.0)
    lat = np.array([-sh, ch]) * (NAV_RECT_LATERAL / 2.0)
    c = np.array([center.x, center.y])
    return np.array([c + lon + lat, c + lon - lat, c - lon - lat, c - lon + lat])


def _cross_section(uv: list, row_y: float):
    """x-intersections of the polygon edges with the horizontal line y=row_y."""
    xs = []
    n = len(uv)
    for i in range(n):
        (x0, y0), (x1, y1) = uv[i], uv[(i + 1) % n]
        if y0 == y1:
            continue
        if min(y0, y1) <= row_y < max(y0, y1):
            xs.append(x0 + (row_y - y0) * (x1 - x0) / (y1 - y0))
    xs.sort()
    return xs


def rasterize_nav_rect(center: GroundPoint, heading: float, ego: Pose2D,
                       cam: CameraModel) -> SemanticRaster:
    """Project the top-view 3 m x 4 m rectangle into the image and fill it.

    Distant rectangles can be thinner than a pixel row; when the scanline fill
    covers no pixel center, the quad's midline cross-section is stamped
    instead so every in-image rectangle yields a usable mask.
    Raises EmptyMaskError when no pixel of the quad lands inside the image.
    """
    corners = nav_rect_corners(center, heading)
    x_cam, y_cam, z_cam = _world_to_cam(corners[:, 0], corners[:, 1], ego, cam)
    poly = _clip_near(list(zip(x_cam, y_cam, z_cam)))
    if len(poly) < 3:
        raise EmptyMaskError("navigable rectangle is behind the camera")
    uv = [(cam.cx + cam.fx * x / z, cam.cy + cam.fy * y / z) for x, y, z in poly]
    mask = fill_polygon(uv, cam.width, cam.height)
    if not mask.any():
        vs = [p[1] for p in uv]
        v_mid = (min(vs) + max(vs)) / 2.0
        r = int(round(v_mid))
        if 0 <= r < cam.height:
            xs = _cross_section(uv, v_mid)
            for k in range(0, len(xs) - 1, 2):
                c0 = max(0, int(math.ceil(xs[k])))
                c1 = min(cam.width - 1, int(math.ceil(xs[k + 1])) - 1)
                if c1 >= c0:
                    mask[r, c0:c1 + 1] = SemanticRaster.MASK_ON
            if not mask.any() and len(xs) >= 2:
                c = int(round((xs[0] + xs[-1]) / 2.0))
                if 0 <= c < cam.width:
                    mask[r, c] = SemanticRaster.MASK_ON
    if not mask.any():
        raise EmptyMaskError("navigable rectangle projects outside the image")
    return SemanticRaster(mask)


def _stamp(mask: np.ndarray, u: int, v: int, lo: int, hi: int):
    h, w = mask.shape
    r0, r1 = max(0, v + lo), min(h - 1, v + hi)
    c0, c1 = max(0, u + lo), min(w - 1, u + hi)
    if r1 >= r0 and c1 >= c0:
        mask[r0:r1 + 1, c0:c1 + 1] = SemanticRaster.MASK_ON


def _bresenham(u0: int, v0: int, u1: int, v1: int):
    du, dv = abs(u1 - u0), -abs(v1 - v0)
    su = 1 if u0 < u1 else -1
    sv = 1 if v0 < v1 else -1
    err = du + dv
    while True:
        yield u0, v0
        if u0 == u1 and v0 == v1:
            return
        e2 = 2 * err
        if e2 >= dv:
            err += dv
            u0 += su
        if e2 <= du:
            err += du
            v0 += sv


def rasterize_polyline(points, ego: Pose2D, cam: CameraModel,
                       thickness: int = 3) -> SemanticRaster:
    """Project a world polyline and draw it with the given pixel thickness.

    Unprojectable points (behind the camera or out of frame) break the
    polyline; an all-unprojectable input yields an all-zero mask.
    """
    mask = np.zeros((cam.height, cam.width), dtype=np.uint8)
    lo, hi = -(thickness // 2), (thickness - 1) // 2
    prev = None
    for p in points:
        uv = project(p, ego, cam)
        if uv is None:
            prev = None
            continue
        cur = (int(round(uv[0])), int(round(uv[1])))
        if prev is None:
            _stamp(mask, cur[0], cur[1], lo, hi)
        else:
            for u, v in _bresenham(prev[0], prev[1], cur[0], cur[1]):
                _stamp(mask, u, v, lo, hi)
        prev = cur
    return SemanticRaster(mask)
