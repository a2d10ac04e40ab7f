"""Bird's-eye-view rasteriser writing binary portable pixmaps."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .geom import BoxBEV, Pose, box_corners, boxes_to_array, transform_boxes, transform_xy

BACKGROUND = (0, 0, 0)
POINT = (128, 128, 128)
GT = (0, 255, 0)
DET = (255, 0, 0)


class Canvas:
    """RGB raster over a metric extent; row 0 is the top (largest y)."""

    def __init__(self, extent: tuple[float, float, float, float], size: tuple[int, int] = (640, 640),
                 background=BACKGROUND):
        x0, x1, y0, y1 = extent
        if x1 <= x0 or y1 <= y0:
            raise ValueError(f"empty extent {extent}")
        w, h = size
        if w <= 0 or h <= 0:
            raise ValueError(f"bad image size {size}")
        self.extent = extent
        self.pixels = np.empty((h, w, 3), dtype=np.uint8)
        self.pixels[:] = background

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.shape[1], self.pixels.shape[0]

    def to_pixel(self, xy: np.ndarray) -> np.ndarray:
        """Metric (x, y) to integer (col, row); values may fall outside the image."""
        x0, x1, y0, y1 = self.extent
        w, h = self.size
        col = np.floor((xy[:, 0] - x0) / (x1 - x0) * w)
        row = np.floor((y1 - xy[:, 1]) / (y1 - y0) * h)
        return np.column_stack([col, row]).astype(np.int64)

    def _blend(self, px: np.ndarray, color, alpha: float) -> None:
        w, h = self.size
        keep = (px[:, 0] >= 0) & (px[:, 0] < w) & (px[:, 1] >= 0) & (px[:, 1] < h)
        px = np.unique(px[keep], axis=0)
        if not len(px):
            return
        old = self.pixels[px[:, 1], px[:, 0]].astype(np.float64)
        new = (1.0 - alpha) * old + alpha * np.asarray(color, dtype=np.float64)
        self.pixels[px[:, 1], px[:, 0]] = np.round(new).astype(np.uint8)

    def points(self, xy: np.ndarray, color=POINT) -> None:
        if len(xy):
            self._blend(self.to_pixel(np.asarray(xy)[:, :2]), color, 1.0)

    def polygon(self, corners: np.ndarray, color, alpha: float = 1.0) -> None:
        """Closed outline through metric ``corners``."""
        px = self.to_pixel(corners)
        segs = []
        for a, b in zip(px, np.roll(px, -1, axis=0)):
            n = int(np.max(np.abs(b - a))) + 1
            t = np.linspace(0.0, 1.0, n)[:, None]
            segs.append(np.round(a + t * (b - a)).astype(np.int64))
        self._blend(np.concatenate(segs), color, alpha)

    def boxes(self, boxes: Sequence[BoxBEV], color, score_alpha: bool = False) -> None:
        if not boxes:
            return
        for b, corners in zip(boxes, box_corners(boxes_to_array(boxes))):
            self.polygon(corners, color, float(b.score) if score_alpha else 1.0)

    def ppm(self) -> bytes:
        w, h = self.size
        return f"P6\n{w} {h}\n255\n".encode("ascii") + self.pixels.tobytes()

    def save(self, path) -> None:
        Path(path).write_bytes(self.ppm())


def render_bev(extent, points=np.zeros((0, 2)), gts: Sequence[BoxBEV] = (), dets: Sequence[BoxBEV] = (),
               size=(640, 640)) -> Canvas:
    """Points grey, ground truth green, detections red with opacity equal to the score."""
    c = Canvas(extent, size)
    c.points(np.asarray(points))
    c.boxes(list(gts), GT)
    c.boxes(sorted(dets, key=lambda b: b.score), DET, score_alpha=True)
    return c


def render_scene(scene, ego_id: int, extent, dets: Sequence[BoxBEV] = (), gts: Sequence[BoxBEV] | None = None,
                 size=(640, 640)) -> Canvas:
    """All agents' returns and the scene's objects drawn in the ego frame."""
    ego = scene.agent(ego_id).pose
    pts = [transform_xy(a.pose, ego, scene.cloud(a.id).points[:, :2]) for a in scene.agents]
    pts = np.concatenate(pts) if pts else np.zeros((0, 2))
    if gts is None:
        gts = transform_boxes(Pose(), ego, [scene.objects[o] for o in scene.object_ids()])
    return render_bev(extent, pts, gts, dets, size)


def read_ppm(data: bytes) -> np.ndarray:
    """Inverse of ``Canvas.ppm`` for the exact header it writes."""
    head, rest = data.split(b"\n", 1)
    if head != b"P6":
        raise ValueError("not a binary PPM")
    dims, rest = rest.split(b"\n", 1)
    maxval, rest = rest.split(b"\n", 1)
    if maxval != b"255":
        raise ValueError("only 8-bit PPM is supported")
    w, h = map(int, dims.split())
    return np.frombuffer(rest, dtype=np.uint8).reshape(h, w, 3)
