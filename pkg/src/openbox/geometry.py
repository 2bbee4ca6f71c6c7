"""Geometric primitives shared by the whole toolkit.

Conventions:
  * right-handed coordinates, z up, yaw measured counter-clockwise about +z
    from the +x axis;
  * camera frame is x right, y down, z forward (pixels come out of fx/fy);
  * oriented boxes are canonical: length >= width, yaw wrapped to [-pi, pi).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Degenerate-extent guard for boxes and polygon areas.
DIM_EPSILON = 1e-6


def wrap_angle(angle: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    return float((angle + math.pi) % (2.0 * math.pi) - math.pi)


def as_points(points: np.ndarray | list | tuple) -> np.ndarray:
    """Coerce input to an (N, 3) float64 array, validating shape and finiteness."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        if pts.shape != (3,):
            raise ValueError(f"expected a 3-vector, got shape {pts.shape}")
        pts = pts.reshape(1, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got shape {pts.shape}")
    if pts.size and not np.isfinite(pts).all():
        raise ValueError("points contain non-finite values")
    return pts


@dataclass(frozen=True)
class Pose:
    """Rigid transform: p_out = rotation @ p_in + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        tra = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.isfinite(rot).all() and np.isfinite(tra).all()):
            raise ValueError("pose contains non-finite values")
        ortho_err = float(np.abs(rot @ rot.T - np.eye(3)).max())
        if ortho_err > 1e-6 or abs(np.linalg.det(rot) - 1.0) > 1e-6:
            raise ValueError("rotation must be orthonormal with determinant +1")
        rot.setflags(write=False)
        tra.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tra)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_yaw(yaw: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        c, s = math.cos(yaw), math.sin(yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return Pose(rot, np.asarray(translation, dtype=np.float64))

    @staticmethod
    def from_matrix(matrix: np.ndarray) -> "Pose":
        mat = np.asarray(matrix, dtype=np.float64)
        if mat.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got shape {mat.shape}")
        if not np.allclose(mat[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
            raise ValueError("last row of a rigid transform must be [0, 0, 0, 1]")
        return Pose(mat[:3, :3], mat[:3, 3])

    def to_matrix(self) -> np.ndarray:
        mat = np.eye(4)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point or an (N, 3) batch; output shape mirrors input."""
        arr = np.asarray(points, dtype=np.float64)
        single = arr.ndim == 1
        pts = as_points(arr)
        out = pts @ self.rotation.T + self.translation
        return out[0] if single else out

    def compose(self, other: "Pose") -> "Pose":
        """Return self applied after other: (self.compose(other))(p) == self(other(p))."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rot_inv = self.rotation.T
        return Pose(rot_inv, -rot_inv @ self.translation)


def reorthonormalize(matrix: np.ndarray) -> np.ndarray:
    """Project a near-orthonormal 3x3 matrix onto SO(3) via SVD."""
    u, _, vt = np.linalg.svd(np.asarray(matrix, dtype=np.float64))
    rot = u @ vt
    if np.linalg.det(rot) < 0:
        u[:, -1] *= -1.0
        rot = u @ vt
    return rot


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: intrinsics plus sensor-to-camera extrinsics."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsics: Pose

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def project_points(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Project sensor-frame points.

        Returns (uv (N,2), depth (N,), in_image (N,) bool). Pixels are computed
        for every point with positive depth; in_image additionally requires
        0 <= u < width and 0 <= v < height.
        """
        pts = as_points(points)
        cam = self.extrinsics.apply(pts).reshape(-1, 3)
        depth = cam[:, 2].copy()
        uv = np.full((len(cam), 2), np.nan)
        front = depth > 0
        uv[front, 0] = self.fx * cam[front, 0] / depth[front] + self.cx
        uv[front, 1] = self.fy * cam[front, 1] / depth[front] + self.cy
        in_image = front.copy()
        in_image[front] &= (
            (uv[front, 0] >= 0.0) & (uv[front, 0] < self.width)
            & (uv[front, 1] >= 0.0) & (uv[front, 1] < self.height)
        )
        return uv, depth, in_image


def project(point: np.ndarray, camera: CameraModel) -> tuple[float, float] | None:
    """Project a single sensor-frame point; None if behind camera or off-image."""
    uv, _, in_image = camera.project_points(np.asarray(point, dtype=np.float64).reshape(1, 3))
    if not in_image[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1])


def transform(points: np.ndarray, pose: Pose) -> np.ndarray:
    """Apply a rigid transform to one point or a batch."""
    return pose.apply(points)


@dataclass(frozen=True)
class AxisAlignedBox2:
    """Axis-aligned 2D box with x1 <= x2, y1 <= y2 (pixel or metric units)."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("box coordinates must be finite")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"box corners out of order: {vals}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def clipped(self, width: float, height: float) -> "AxisAlignedBox2 | None":
        """Intersect with [0, width) x [0, height); None if disjoint."""
        x1 = max(self.x1, 0.0)
        y1 = max(self.y1, 0.0)
        x2 = min(self.x2, float(width))
        y2 = min(self.y2, float(height))
        if x2 <= x1 or y2 <= y1:
            return None
        return AxisAlignedBox2(x1, y1, x2, y2)


def iou2d(a: AxisAlignedBox2, b: AxisAlignedBox2) -> float:
    """Intersection-over-union of two axis-aligned 2D boxes."""
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


@dataclass(frozen=True)
class OrientedBox3:
    """Gravity-aligned oriented 3D box.

    Canonical form is enforced on construction: length >= width (axes swapped
    and yaw rotated by pi/2 if needed) and yaw wrapped to [-pi, pi). Extents
    at or below DIM_EPSILON are rejected.
    """

    center: np.ndarray
    length: float
    width: float
    height: float
    yaw: float

    def __post_init__(self) -> None:
        center = np.array(self.center, dtype=np.float64).reshape(3)
        if not np.isfinite(center).all():
            raise ValueError("box center must be finite")
        length = float(self.length)
        width = float(self.width)
        height = float(self.height)
        yaw = float(self.yaw)
        for name, value in (("length", length), ("width", width), ("height", height)):
            if not math.isfinite(value) or value <= DIM_EPSILON:
                raise ValueError(f"box {name} must exceed {DIM_EPSILON}, got {value}")
        if not math.isfinite(yaw):
            raise ValueError("box yaw must be finite")
        if length < width:
            length, width = width, length
            yaw += math.pi / 2.0
        center.setflags(write=False)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "length", length)
        object.__setattr__(self, "width", width)
        object.__setattr__(self, "height", height)
        object.__setattr__(self, "yaw", wrap_angle(yaw))

    @property
    def volume(self) -> float:
        return self.length * self.width * self.height

    @property
    def bottom_z(self) -> float:
        return float(self.center[2]) - self.height / 2.0

    @property
    def top_z(self) -> float:
        return float(self.center[2]) + self.height / 2.0

    def bev_corners(self) -> np.ndarray:
        """Footprint corners (4, 2), counter-clockwise starting at (+l/2, +w/2)."""
        hl, hw = self.length / 2.0, self.width / 2.0
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center[:2]

    def corners(self) -> np.ndarray:
        """All 8 corners (8, 3): bottom face CCW first, then top face in the same order."""
        bev = self.bev_corners()
        out = np.empty((8, 3))
        out[:4, :2] = bev
        out[4:, :2] = bev
        out[:4, 2] = self.bottom_z
        out[4:, 2] = self.top_z
        return out

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit BEV axes (length direction, width direction)."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([c, s]), np.array([-s, c])

    def contains_points(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask of points inside the box (boundary inclusive)."""
        pts = as_points(points)
        rel = pts - self.center
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        u = rel[:, 0] * c + rel[:, 1] * s
        v = -rel[:, 0] * s + rel[:, 1] * c
        return (
            (np.abs(u) <= self.length / 2.0)
            & (np.abs(v) <= self.width / 2.0)
            & (np.abs(rel[:, 2]) <= self.height / 2.0)
        )

    def transformed(self, pose: Pose) -> "OrientedBox3":
        """Apply a rigid transform whose rotation preserves the +z axis."""
        rot = pose.rotation
        if abs(rot[2, 2] - 1.0) > 1e-9 or abs(rot[0, 2]) > 1e-9 or abs(rot[1, 2]) > 1e-9:
            raise ValueError("transform must be a rotation about +z to keep the box gravity-aligned")
        delta_yaw = math.atan2(rot[1, 0], rot[0, 0])
        return OrientedBox3(pose.apply(self.center), self.length, self.width,
                            self.height, self.yaw + delta_yaw)


def box_corners(box: OrientedBox3) -> np.ndarray:
    """All 8 corners of an oriented box in its world frame."""
    return box.corners()


def _polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area; positive for counter-clockwise vertex order."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def clip_convex_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex subject polygon by a convex CCW clip polygon."""
    output = [tuple(p) for p in np.asarray(subject, dtype=np.float64)]
    clip = np.asarray(clip, dtype=np.float64)
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        current = output
        output = []
        m = len(current)
        for j in range(m):
            px, py = current[j]
            qx, qy = current[(j + 1) % m]
            # "inside" = on the left of (or on) the directed clip edge a->b
            p_in = ex * (py - ay) - ey * (px - ax) >= -1e-12
            q_in = ex * (qy - ay) - ey * (qx - ax) >= -1e-12
            if q_in:
                if not p_in:
                    output.append(_edge_intersection(px, py, qx, qy, ax, ay, ex, ey))
                output.append((qx, qy))
            elif p_in:
                output.append(_edge_intersection(px, py, qx, qy, ax, ay, ex, ey))
    return np.asarray(output, dtype=np.float64).reshape(-1, 2)


def _edge_intersection(px, py, qx, qy, ax, ay, ex, ey):
    """Intersection of segment p->q with the infinite clip line through a
    along direction e; callers only invoke it when the segment straddles."""
    dx, dy = qx - px, qy - py
    denom = ex * dy - ey * dx
    if abs(denom) < 1e-15:
        return (qx, qy)
    t = (ex * (ay - py) - ey * (ax - px)) / denom
    t = min(max(t, 0.0), 1.0)
    return (px + t * dx, py + t * dy)


def bev_intersection_area(a: OrientedBox3, b: OrientedBox3) -> float:
    """Area of the footprint intersection of two oriented boxes."""
    # Cheap reject: footprints further apart than the sum of circumradii.
    ra = math.hypot(a.length, a.width) / 2.0
    rb = math.hypot(b.length, b.width) / 2.0
    if np.linalg.norm(a.center[:2] - b.center[:2]) > ra + rb:
        return 0.0
    inter = clip_convex_polygon(a.bev_corners(), b.bev_corners())
    return abs(_polygon_area(inter))


def iou_bev(a: OrientedBox3, b: OrientedBox3) -> float:
    """Bird's-eye-view IoU of two oriented boxes."""
    inter = bev_intersection_area(a, b)
    union = a.length * a.width + b.length * b.width - inter
    if union <= DIM_EPSILON:
        return 0.0
    return min(inter / union, 1.0)


def iou3d(a: OrientedBox3, b: OrientedBox3) -> float:
    """3D IoU: BEV footprint intersection times vertical overlap."""
    z_overlap = min(a.top_z, b.top_z) - max(a.bottom_z, b.bottom_z)
    if z_overlap <= 0.0:
        return 0.0
    inter = bev_intersection_area(a, b) * z_overlap
    union = a.volume + b.volume - inter
    if union <= DIM_EPSILON:
        return 0.0
    return min(inter / union, 1.0)
