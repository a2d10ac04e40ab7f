"""Rigid transforms, oriented BEV boxes, rotated IoU and NMS."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import kernels

TWO_PI = 2.0 * math.pi


def wrap_angle(a: float) -> float:
    """Map an angle to (-pi, pi]."""
    r = math.remainder(a, TWO_PI)
    return math.pi if r <= -math.pi else r


@dataclass(frozen=True)
class Pose:
    """Agent placement in the world frame (meters, radians)."""

    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        vals = (self.x, self.y, self.z, self.roll, self.pitch, self.yaw)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite pose {vals}")
        for name in ("roll", "pitch", "yaw"):
            object.__setattr__(self, name, wrap_angle(float(getattr(self, name))))

    @property
    def is_planar(self) -> bool:
        return self.z == 0.0 and self.roll == 0.0 and self.pitch == 0.0

    def rotation(self) -> np.ndarray:
        cr, sr = math.cos(self.roll), math.sin(self.roll)
        cp, sp = math.cos(self.pitch), math.sin(self.pitch)
        cy, sy = math.cos(self.yaw), math.sin(self.yaw)
        rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
        ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
        rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
        return rz @ ry @ rx

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous local-to-world transform."""
        m = np.eye(4)
        m[:3, :3] = self.rotation()
        m[:3, 3] = (self.x, self.y, self.z)
        return m

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        r = m[:3, :3]
        yaw = math.atan2(r[1, 0], r[0, 0])
        pitch = math.asin(max(-1.0, min(1.0, -r[2, 0])))
        roll = math.atan2(r[2, 1], r[2, 2])
        return cls(float(m[0, 3]), float(m[1, 3]), float(m[2, 3]), roll, pitch, yaw)

    def as_tuple(self) -> tuple:
        return (self.x, self.y, self.z, self.roll, self.pitch, self.yaw)


IDENTITY = Pose()


def pose_compose(a: Pose, b: Pose) -> Pose:
    """Pose of frame ``b`` expressed through ``a``: apply b, then a."""
    if a.is_planar and b.is_planar:
        c, s = math.cos(a.yaw), math.sin(a.yaw)
        return Pose(a.x + c * b.x - s * b.y, a.y + s * b.x + c * b.y, 0.0, 0.0, 0.0, a.yaw + b.yaw)
    return Pose.from_matrix(a.matrix() @ b.matrix())


def pose_inverse(p: Pose) -> Pose:
    if p.is_planar:
        c, s = math.cos(p.yaw), math.sin(p.yaw)
        return Pose(-(c * p.x + s * p.y), s * p.x - c * p.y, 0.0, 0.0, 0.0, -p.yaw)
    return Pose.from_matrix(np.linalg.inv(p.matrix()))


def relative_pose(src: Pose, dst: Pose) -> Pose:
    """Transform taking ``src``-frame coordinates to ``dst``-frame coordinates."""
    return pose_compose(pose_inverse(dst), src)


@dataclass(frozen=True)
class BoxBEV:
    """Oriented bird's-eye-view box; z_center/height ride along for rendering."""

    cx: float
    cy: float
    length: float
    width: float
    yaw: float
    score: float = 1.0
    z_center: float = 0.0
    height: float = 1.5

    def __post_init__(self):
        # zero-size boxes are allowed so that degenerate IoU inputs are representable
        if not (self.length >= 0.0 and self.width >= 0.0):
            raise ValueError(f"negative box size {self.length}x{self.width}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @property
    def area(self) -> float:
        return self.length * self.width

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.length, self.width, self.yaw])

    def corners(self) -> np.ndarray:
        """(4, 2) counter-clockwise corner coordinates."""
        return box_corners(self.as_array()[None])[0]

    def with_score(self, score: float) -> "BoxBEV":
        return replace(self, score=float(score))


def boxes_to_array(boxes: Sequence[BoxBEV]) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 5))
    return np.array([[b.cx, b.cy, b.length, b.width, b.yaw] for b in boxes], dtype=np.float64)


def box_corners(arr: np.ndarray) -> np.ndarray:
    """Corners of (N, 5) boxes as (N, 4, 2), counter-clockwise."""
    arr = np.asarray(arr, dtype=np.float64).reshape(-1, 5)
    c, s = np.cos(arr[:, 4]), np.sin(arr[:, 4])
    hl, hw = 0.5 * arr[:, 2], 0.5 * arr[:, 3]
    local = np.stack([np.stack([hl, hw], 1), np.stack([-hl, hw], 1),
                      np.stack([-hl, -hw], 1), np.stack([hl, -hw], 1)], 1)
    x = arr[:, None, 0] + c[:, None] * local[..., 0] - s[:, None] * local[..., 1]
    y = arr[:, None, 1] + s[:, None] * local[..., 0] + c[:, None] * local[..., 1]
    return np.stack([x, y], -1)


@dataclass
class PointCloud:
    """(N, 4) array of x, y, z, intensity."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud has non-finite coordinates")
        self.points = pts

    def __len__(self):
        return len(self.points)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 4)))


def transform_xy(src: Pose, dst: Pose, xy: np.ndarray) -> np.ndarray:
    """Planar fast path: re-express (N, 2) coordinates from ``src`` into ``dst``."""
    rel = relative_pose(src, dst)
    c, s = math.cos(rel.yaw), math.sin(rel.yaw)
    xy = np.asarray(xy, dtype=np.float64)
    out = np.empty_like(xy)
    out[..., 0] = c * xy[..., 0] - s * xy[..., 1] + rel.x
    out[..., 1] = s * xy[..., 0] + c * xy[..., 1] + rel.y
    return out


def transform_points(src: Pose, dst: Pose, pts: PointCloud) -> PointCloud:
    """Re-express points given in the ``src`` frame in the ``dst`` frame."""
    if src == dst:
        return PointCloud(pts.points.copy())
    p = pts.points
    if src.is_planar and dst.is_planar:
        out = p.copy()
        out[:, :2] = transform_xy(src, dst, p[:, :2])
        return PointCloud(out)
    m = relative_pose(src, dst).matrix()
    out = p.copy()
    out[:, :3] = p[:, :3] @ m[:3, :3].T + m[:3, 3]
    return PointCloud(out)


def transform_box(src: Pose, dst: Pose, box: BoxBEV) -> BoxBEV:
    """Move a box from the ``src`` frame to the ``dst`` frame; size and score kept."""
    if src == dst:
        return box
    rel = relative_pose(src, dst)
    if rel.is_planar:
        c, s = math.cos(rel.yaw), math.sin(rel.yaw)
        return replace(box, cx=c * box.cx - s * box.cy + rel.x, cy=s * box.cx + c * box.cy + rel.y,
                       yaw=box.yaw + rel.yaw)
    m = rel.matrix()
    center = m[:3, :3] @ np.array([box.cx, box.cy, box.z_center]) + m[:3, 3]
    heading = m[:3, :3] @ np.array([math.cos(box.yaw), math.sin(box.yaw), 0.0])
    return replace(box, cx=float(center[0]), cy=float(center[1]), z_center=float(center[2]),
                   yaw=math.atan2(heading[1], heading[0]))


def transform_boxes(src: Pose, dst: Pose, boxes: Sequence[BoxBEV]) -> list[BoxBEV]:
    return [transform_box(src, dst, b) for b in boxes]


def rotated_iou(a: BoxBEV, b: BoxBEV) -> float:
    """BEV intersection-over-union by convex polygon clipping."""
    return float(kernels.iou_matrix(a.as_array()[None], b.as_array()[None])[0, 0])


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU of two box lists (or (N, 5) arrays)."""
    a = boxes_to_array(a) if not isinstance(a, np.ndarray) else a
    b = boxes_to_array(b) if not isinstance(b, np.ndarray) else b
    a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 5)
    b = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 5)
    return kernels.iou_matrix(a, b)


def nms_indices(arr: np.ndarray, scores: np.ndarray, iou_thr: float) -> np.ndarray:
    if len(arr) == 0:
        return np.zeros(0, dtype=np.int64)
    arr = np.ascontiguousarray(arr, dtype=np.float64).reshape(-1, 5)
    return kernels.nms(arr, np.asarray(scores, dtype=np.float64), float(iou_thr))


def nms(dets: Sequence[BoxBEV], iou_thr: float) -> list[BoxBEV]:
    """Greedy NMS, highest score first; equal scores keep input order."""
    if not dets:
        return []
    keep = nms_indices(boxes_to_array(dets), np.array([d.score for d in dets]), iou_thr)
    return [dets[i] for i in keep]
