"""Pillarization, occupancy targets, random pillar masking and pseudo images."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geom import PointCloud

NUM_FEATURES = 8
FEATURE_NAMES = ("log_count", "mean_dx", "mean_dy", "mean_z", "max_z", "mean_intensity", "bearing_x", "bearing_y")


@dataclass(frozen=True)
class GridConfig:
    x_min: float = -32.0
    x_max: float = 32.0
    y_min: float = -32.0
    y_max: float = 32.0
    v_w: float = 0.4
    v_h: float = 0.4
    z_min: float = -1.0
    z_max: float = 4.0

    def __post_init__(self):
        for span, v, axis in ((self.x_max - self.x_min, self.v_w, "x"), (self.y_max - self.y_min, self.v_h, "y")):
            if v <= 0 or span <= 0:
                raise ValueError(f"{axis}: empty range or non-positive pillar size")
            n = span / v
            if abs(n - round(n)) > 1e-9 * max(1.0, n):
                raise ValueError(f"{axis} range {span} is not a multiple of pillar size {v}")
        if self.z_max <= self.z_min:
            raise ValueError("z_max must exceed z_min")

    @property
    def nx(self) -> int:
        return int(round((self.x_max - self.x_min) / self.v_w))

    @property
    def ny(self) -> int:
        return int(round((self.y_max - self.y_min) / self.v_h))

    @property
    def dims(self) -> tuple[int, int]:
        """(nx, ny); arrays are laid out (ny, nx), rows along y."""
        return self.nx, self.ny

    def scaled(self, stride: int) -> "GridConfig":
        """The same extent at ``stride`` times coarser cells (encoder output grid)."""
        return GridConfig(self.x_min, self.x_max, self.y_min, self.y_max,
                          self.v_w * stride, self.v_h * stride, self.z_min, self.z_max)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        xs = self.x_min + (np.arange(self.nx) + 0.5) * self.v_w
        ys = self.y_min + (np.arange(self.ny) + 0.5) * self.v_h
        return xs, ys

    def cell_of(self, x, y):
        """Half-open cell indices (ix, iy); -1 where outside the grid."""
        ix = _half_open_index(np.asarray(x, dtype=np.float64), self.x_min, self.v_w, self.nx)
        iy = _half_open_index(np.asarray(y, dtype=np.float64), self.y_min, self.v_h, self.ny)
        bad = (ix < 0) | (iy < 0)
        return np.where(bad, -1, ix), np.where(bad, -1, iy)


def _half_open_index(v, lo, step, n):
    # cell i covers [lo + i*step, lo + (i+1)*step), edges evaluated exactly as written
    i = np.floor((v - lo) / step).astype(np.int64)
    i = np.where(v >= lo + (i + 1) * step, i + 1, i)
    i = np.where(v < lo + i * step, i - 1, i)
    return np.where((i >= 0) & (i < n), i, -1)


@dataclass
class PillarGrid:
    """Points bucketed into pillars.

    ``points`` holds the in-range points sorted by (cell, x, y, z, intensity) and
    ``cell`` their flat cell index ``iy * nx + ix``; ``occupied`` lists the
    non-empty cells in ascending order.
    """

    cfg: GridConfig
    points: np.ndarray
    cell: np.ndarray
    dropped: int = 0
    _features: np.ndarray | None = field(default=None, repr=False)

    @property
    def occupied(self) -> np.ndarray:
        return np.unique(self.cell)

    @property
    def n_v(self) -> int:
        return int(len(self.occupied))

    def cell_points(self, ix: int, iy: int) -> np.ndarray:
        flat = iy * self.cfg.nx + ix
        lo, hi = np.searchsorted(self.cell, [flat, flat + 1])
        return self.points[lo:hi]

    def features(self) -> np.ndarray:
        """(n_v, NUM_FEATURES) aggregate features of the occupied cells, in ``occupied`` order."""
        if self._features is None:
            self._features = _aggregate(self)
        return self._features

    def without_cells(self, cells: np.ndarray) -> "PillarGrid":
        keep = ~np.isin(self.cell, cells)
        return PillarGrid(self.cfg, self.points[keep], self.cell[keep], self.dropped)


def pillarize(pc: PointCloud, cfg: GridConfig) -> PillarGrid:
    """Bucket points into half-open pillars; out-of-range points are dropped and counted."""
    pts = pc.points
    ix, iy = cfg.cell_of(pts[:, 0], pts[:, 1])
    ok = (ix >= 0) & (pts[:, 2] >= cfg.z_min) & (pts[:, 2] < cfg.z_max)
    pts = pts[ok]
    flat = iy[ok] * cfg.nx + ix[ok]
    # canonical order makes every per-cell reduction independent of input order
    order = np.lexsort((pts[:, 3], pts[:, 2], pts[:, 1], pts[:, 0], flat))
    return PillarGrid(cfg, pts[order], flat[order], int(np.count_nonzero(~ok)))


def _aggregate(grid: PillarGrid) -> np.ndarray:
    cfg = grid.cfg
    occ, inv, counts = np.unique(grid.cell, return_inverse=True, return_counts=True)
    if len(occ) == 0:
        return np.zeros((0, NUM_FEATURES))
    pts = grid.points
    cx = cfg.x_min + (occ % cfg.nx + 0.5) * cfg.v_w
    cy = cfg.y_min + (occ // cfg.nx + 0.5) * cfg.v_h
    # unit vector from the sensor (frame origin) to each point; a face of returns
    # looks the same from either side, the bearing says which side was observed
    r = np.hypot(pts[:, 0], pts[:, 1])
    safe = np.where(r > 0.0, r, 1.0)
    cols = [pts[:, 0], pts[:, 1], pts[:, 2], pts[:, 3], np.where(r > 0.0, pts[:, 0] / safe, 0.0),
            np.where(r > 0.0, pts[:, 1] / safe, 0.0)]
    sums = np.stack([np.bincount(inv, weights=c, minlength=len(occ)) for c in cols], 1)
    mean = sums / counts[:, None]
    zmax = np.full(len(occ), -np.inf)
    np.maximum.at(zmax, inv, pts[:, 2])
    feats = np.empty((len(occ), NUM_FEATURES))
    feats[:, 0] = np.log1p(counts)
    feats[:, 1] = (mean[:, 0] - cx) / cfg.v_w
    feats[:, 2] = (mean[:, 1] - cy) / cfg.v_h
    feats[:, 3] = mean[:, 2]
    feats[:, 4] = zmax
    feats[:, 5] = mean[:, 3]
    feats[:, 6:8] = mean[:, 4:6]
    return feats


@dataclass(frozen=True)
class OccupancyGrid:
    values: np.ndarray  # (ny, nx) uint8

    @property
    def n_occupied(self) -> int:
        return int(self.values.sum())


def occupancy_label(grid: PillarGrid) -> OccupancyGrid:
    cfg = grid.cfg
    vals = np.zeros(cfg.ny * cfg.nx, dtype=np.uint8)
    vals[grid.occupied] = 1
    return OccupancyGrid(vals.reshape(cfg.ny, cfg.nx))


@dataclass(frozen=True)
class MaskSpec:
    r_m: float
    masked_indices: np.ndarray  # flat cell indices, ascending


def mask_count(r_m: float, n_v: int) -> int:
    """Round-half-up of r_m * n_v (with a 1e-9 guard so 0.7 * 15 counts as 10.5)."""
    return min(n_v, int(math.floor(r_m * n_v + 0.5 + 1e-9)))


def mask_pillars(grid: PillarGrid, r_m: float, seed) -> tuple[PillarGrid, MaskSpec]:
    """Hide round(r_m * n_v) randomly chosen non-empty pillars."""
    if not 0.0 <= r_m <= 1.0:
        raise ValueError(f"mask ratio {r_m} outside [0, 1]")
    occ = grid.occupied
    k = mask_count(r_m, len(occ))
    rng = np.random.default_rng(seed)
    chosen = np.sort(occ[rng.choice(len(occ), size=k, replace=False)]) if k else np.zeros(0, dtype=np.int64)
    visible = grid.without_cells(chosen) if k else grid
    return visible, MaskSpec(float(r_m), chosen)


def pseudo_image_hwc(grid: PillarGrid) -> np.ndarray:
    """Dense (ny, nx, NUM_FEATURES) pseudo image; empty pillars are all-zero."""
    cfg = grid.cfg
    img = np.zeros((cfg.ny * cfg.nx, NUM_FEATURES))
    if len(grid.cell):
        img[grid.occupied] = grid.features()
    return img.reshape(cfg.ny, cfg.nx, NUM_FEATURES)


def to_pseudo_image(grid: PillarGrid) -> np.ndarray:
    """Dense (6, ny, nx) pseudo image (channel-first)."""
    return np.ascontiguousarray(pseudo_image_hwc(grid).transpose(2, 0, 1))
