"""3D box geometry in the camera frame: corners, BEV overlap, IoU, projection.

Coordinate conventions follow the KITTI camera frame: x right, y down,
z forward. A box's location is the center of its bottom face, dimensions are
(h, w, l), and rotation_y is the yaw about the camera y-axis. The box spans
[location.y - h, location.y] vertically; before rotation the footprint spans
+-l/2 along x and +-w/2 along z.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera

CAR = "Car"
PEDESTRIAN = "Pedestrian"
CYCLIST = "Cyclist"
DONT_CARE = "DontCare"

# Vertices closer than this are collapsed when cleaning clipped polygons.
_VERTEX_EPS = 1e-9

Rect = tuple[float, float, float, float]
Point2 = tuple[float, float]


@dataclass(frozen=True)
class Box3D:
    """One 3D label or detection.

    score is None for human annotations. Values parsed from files are kept
    verbatim (DontCare rows carry -1 dimensions), so geometric validity is a
    property to query, not a construction guarantee.
    """

    category: str
    location: tuple[float, float, float]
    dimensions: tuple[float, float, float]
    rotation_y: float
    bbox2d: Rect | None = None
    score: float | None = None
    truncated: float = 0.0
    occluded: int = 0
    alpha: float = 0.0

    def volume(self) -> float:
        h, w, length = self.dimensions
        return h * w * length

    def is_valid(self) -> bool:
        h, w, length = self.dimensions
        if not (h > 0.0 and w > 0.0 and length > 0.0):
            return False
        if not all(math.isfinite(v) for v in self.location):
            return False
        if not math.isfinite(self.rotation_y):
            return False
        if self.bbox2d is not None:
            left, top, right, bottom = self.bbox2d
            if not (left < right and top < bottom):
                return False
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            return False
        return True


@dataclass(frozen=True)
class CameraProjection:
    """A 3x4 projection matrix (KITTI P2), stored row-major as 12 floats."""

    entries: tuple[float, ...]

    def __post_init__(self):
        if len(self.entries) != 12:
            raise ValueError(f"expected 12 entries, got {len(self.entries)}")

    @property
    def matrix(self) -> np.ndarray:
        return np.asarray(self.entries, dtype=np.float64).reshape(3, 4)

    def approx_equal(self, other: "CameraProjection", tol: float = 1e-6) -> bool:
        return all(
            abs(a - b) <= tol for a, b in zip(self.entries, other.entries)
        )


def box_corners(box: Box3D) -> np.ndarray:
    """Return the 8 box corners, shape (8, 3): bottom face first, then top."""
    h, w, length = box.dimensions
    c, s = math.cos(box.rotation_y), math.sin(box.rotation_y)
    x_loc = np.array([length / 2, length / 2, -length / 2, -length / 2])
    z_loc = np.array([w / 2, -w / 2, -w / 2, w / 2])
    x = c * x_loc + s * z_loc + box.location[0]
    z = -s * x_loc + c * z_loc + box.location[2]
    bottom = box.location[1]
    corners = np.empty((8, 3), dtype=np.float64)
    corners[:4, 0] = x
    corners[:4, 1] = bottom
    corners[:4, 2] = z
    corners[4:, 0] = x
    corners[4:, 1] = bottom - h
    corners[4:, 2] = z
    return corners


def bev_polygon(box: Box3D) -> tuple[Point2, ...]:
    """Box footprint in the (x, z) plane as 4 counter-clockwise vertices."""
    corners = box_corners(box)
    pts = [(float(x), float(z)) for x, z in zip(corners[:4, 0], corners[:4, 2])]
    if _signed_area(pts) < 0.0:
        pts.reverse()
    return tuple(pts)


def _signed_area(poly) -> float:
    area = 0.0
    n = len(poly)
    for i in range(n):
        x0, z0 = poly[i]
        x1, z1 = poly[(i + 1) % n]
        area += x0 * z1 - x1 * z0
    return 0.5 * area


def polygon_area(poly) -> float:
    """Shoelace area of a simple polygon (vertex order irrelevant)."""
    return abs(_signed_area(poly))


def _clip_halfplane(poly, a, b):
    # Keep the part of `poly` on or left of the directed line a->b. The
    # inside test is inclusive so clipping a polygon against itself is the
    # identity and never divides by zero (an on-line vertex produces no
    # crossing).
    ax, az = a
    bx, bz = b
    dx, dz = bx - ax, bz - az
    out = []
    n = len(poly)
    for i in range(n):
        px, pz = poly[i]
        qx, qz = poly[(i + 1) % n]
        p_in = dx * (pz - az) - dz * (px - ax) >= 0.0
        q_in = dx * (qz - az) - dz * (qx - ax) >= 0.0
        if p_in:
            out.append((px, pz))
            if not q_in:
                out.append(_line_cross(ax, az, bx, bz, px, pz, qx, qz))
        elif q_in:
            out.append(_line_cross(ax, az, bx, bz, px, pz, qx, qz))
    return out


def _line_cross(ax, az, bx, bz, px, pz, qx, qz):
    # Intersection of segment p->q with the infinite line a->b. Only called
    # when p and q sit on opposite sides, so the denominator is nonzero.
    dx, dz = bx - ax, bz - az
    ex, ez = qx - px, qz - pz
    denom = dx * ez - dz * ex
    t = (dx * (pz - az) - dz * (px - ax)) / denom
    return (px - ex * t, pz - ez * t)


def _dedup(poly):
    out = []
    for p in poly:
        if not out or abs(p[0] - out[-1][0]) > _VERTEX_EPS or abs(p[1] - out[-1][1]) > _VERTEX_EPS:
            out.append(p)
    while len(out) > 1 and abs(out[0][0] - out[-1][0]) <= _VERTEX_EPS and abs(out[0][1] - out[-1][1]) <= _VERTEX_EPS:
        out.pop()
    return out


def polygon_intersection_area(poly_a, poly_b) -> float:
    """Intersection area of two convex counter-clockwise polygons."""
    clipped = list(poly_a)
    n = len(poly_b)
    for i in range(n):
        if len(clipped) < 3:
            return 0.0
        clipped = _clip_halfplane(clipped, poly_b[i], poly_b[(i + 1) % n])
    clipped = _dedup(clipped)
    if len(clipped) < 3:
        return 0.0
    return abs(_signed_area(clipped))


def _vertical_overlap(a: Box3D, b: Box3D) -> float:
    top = max(a.location[1] - a.dimensions[0], b.location[1] - b.dimensions[0])
    bottom = min(a.location[1], b.location[1])
    return bottom - top


def iou3d(a: Box3D, b: Box3D) -> float:
    """Volumetric IoU of two y-aligned 3D boxes.

    Face or edge contact has zero measure and scores 0.
    """
    dy = _vertical_overlap(a, b)
    if dy <= 0.0:
        return 0.0
    inter_area = polygon_intersection_area(bev_polygon(a), bev_polygon(b))
    if inter_area <= 0.0:
        return 0.0
    inter = inter_area * dy
    union = a.volume() + b.volume() - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def iou_bev(a: Box3D, b: Box3D) -> float:
    """Bird's-eye-view IoU: footprint intersection over footprint union."""
    pa, pb = bev_polygon(a), bev_polygon(b)
    inter = polygon_intersection_area(pa, pb)
    if inter <= 0.0:
        return 0.0
    union = polygon_area(pa) + polygon_area(pb) - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def iou2d(a: Rect, b: Rect) -> float:
    """IoU of two axis-aligned (left, top, right, bottom) rectangles."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def project_to_image(box: Box3D, cam: CameraProjection) -> Rect:
    """Axis-aligned image-plane bounds of the projected box corners.

    Raises BehindCamera when any corner lands at non-positive depth.
    """
    corners = box_corners(box)
    hom = np.concatenate([corners, np.ones((8, 1))], axis=1)
    proj = hom @ cam.matrix.T
    depth = proj[:, 2]
    if np.any(depth <= 0.0):
        raise BehindCamera(
            f"box at {box.location} has corners at depth <= 0"
        )
    u = proj[:, 0] / depth
    v = proj[:, 1] / depth
    return (float(u.min()), float(v.min()), float(u.max()), float(v.max()))
