"""Greedy rotated-IoU matching, all-point average precision and reports."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geom import BoxBEV, boxes_to_array, iou_matrix, transform_box
from .pillars import GridConfig, pillarize

IOU_THRESHOLDS = (0.3, 0.5, 0.7)
REGIMES = ("full", "sparse_scratch", "ssc3od")
REPORT_COLUMNS = ("regime", "fusion", "ap30", "ap50", "ap70", "tp", "fp", "fn")


def match_detections(dets: Sequence[BoxBEV], gts: Sequence[BoxBEV], iou_thr: float):
    """Greedy matching in descending score order.

    Returns (tp flags aligned with the score-sorted detections, fn count, sort order).
    Each ground truth is claimed at most once; a detection is a true positive when
    its best still-unmatched ground truth reaches ``iou_thr``.
    """
    scores = np.array([d.score for d in dets], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    tp = np.zeros(len(dets), dtype=bool)
    if not len(dets) or not len(gts):
        return tp, len(gts), order
    m = iou_matrix(boxes_to_array([dets[i] for i in order]), boxes_to_array(gts))
    taken = np.zeros(len(gts), dtype=bool)
    for k in range(len(order)):
        row = np.where(taken, -1.0, m[k])
        j = int(np.argmax(row))
        if row[j] >= iou_thr:
            tp[k] = True
            taken[j] = True
    return tp, int(np.count_nonzero(~taken)), order


def ap_from_ranked(scores: np.ndarray, tp: np.ndarray, n_gt: int) -> tuple[float, np.ndarray, np.ndarray]:
    """All-point interpolated AP (percent) plus the raw precision/recall curve."""
    if n_gt == 0:
        return (100.0 if len(scores) == 0 else 0.0), np.zeros(0), np.zeros(0)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    hits = np.asarray(tp, dtype=np.float64)[order]
    ctp = np.cumsum(hits)
    prec = ctp / np.arange(1, len(hits) + 1)
    rec = ctp / n_gt
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[1.0], prec, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    ap = float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))
    return 100.0 * ap, prec, rec


@dataclass
class ThresholdResult:
    ap: float
    tp: int
    fp: int
    fn: int
    precision: np.ndarray = field(repr=False)
    recall: np.ndarray = field(repr=False)


def average_precision(dets_per_frame: Sequence[Sequence[BoxBEV]], gts_per_frame: Sequence[Sequence[BoxBEV]],
                      iou_thr: float) -> ThresholdResult:
    """AP over a split: matching is per frame, ranking is global."""
    if len(dets_per_frame) != len(gts_per_frame):
        raise ValueError("detections and ground truth cover different numbers of frames")
    all_scores, all_tp = [], []
    n_gt = fn = 0
    for dets, gts in zip(dets_per_frame, gts_per_frame):
        tp, f, order = match_detections(dets, gts, iou_thr)
        all_scores.append(np.array([dets[i].score for i in order], dtype=np.float64))
        all_tp.append(tp)
        n_gt += len(gts)
        fn += f
    scores = np.concatenate(all_scores) if all_scores else np.zeros(0)
    tps = np.concatenate(all_tp) if all_tp else np.zeros(0, dtype=bool)
    ap, prec, rec = ap_from_ranked(scores, tps, n_gt)
    ntp = int(tps.sum())
    return ThresholdResult(ap, ntp, int(len(tps) - ntp), fn, prec, rec)


@dataclass
class EvalReport:
    regime: str
    fusion: str
    results: dict  # iou threshold -> ThresholdResult

    def ap(self, thr: float) -> float:
        return self.results[thr].ap

    def row(self) -> dict:
        r50 = self.results[0.5]
        return {
            "regime": self.regime,
            "fusion": self.fusion,
            "ap30": round(self.ap(0.3), 4),
            "ap50": round(self.ap(0.5), 4),
            "ap70": round(self.ap(0.7), 4),
            "tp": r50.tp,
            "fp": r50.fp,
            "fn": r50.fn,
        }


def evaluate_boxes(dets_per_frame, gts_per_frame, regime: str = "", fusion: str = "") -> EvalReport:
    return EvalReport(regime, fusion, {t: average_precision(dets_per_frame, gts_per_frame, t)
                                       for t in IOU_THRESHOLDS})


def observable_objects(scene, grid: GridConfig, min_points: int = 1) -> list[int]:
    """Objects with at least ``min_points`` in-grid returns from any agent."""
    seen = set()
    for a in scene.agents:
        pg = pillarize(scene.cloud(a.id), grid)
        pts = pg.points
        p = a.pose
        c, s = math.cos(p.yaw), math.sin(p.yaw)
        wx = p.x + c * pts[:, 0] - s * pts[:, 1]
        wy = p.y + s * pts[:, 0] + c * pts[:, 1]
        margin = 0.1 + 3.0 * a.sensor.noise_sigma
        for oid, b in scene.objects.items():
            if oid in seen:
                continue
            cb, sb = math.cos(b.yaw), math.sin(b.yaw)
            dx, dy = wx - b.cx, wy - b.cy
            inside = (np.abs(cb * dx + sb * dy) <= 0.5 * b.length + margin) & \
                     (np.abs(-sb * dx + cb * dy) <= 0.5 * b.width + margin)
            if np.count_nonzero(inside) >= min_points:
                seen.add(oid)
    return sorted(seen)


def ground_truth(scene, ego_id: int, grid: GridConfig) -> list[BoxBEV]:
    """Observable objects in the ego frame, cropped to the detection range."""
    from .geom import Pose
    ego = scene.agent(ego_id).pose
    out = []
    for oid in observable_objects(scene, grid):
        b = transform_box(Pose(), ego, scene.objects[oid])
        if grid.x_min <= b.cx < grid.x_max and grid.y_min <= b.cy < grid.y_max:
            out.append(b)
    return out


def evaluate_detector(model, dataset, regime: str = "", grid: GridConfig | None = None,
                      image_cache: dict | None = None) -> EvalReport:
    """Run ``model`` with agent 0 as ego on every scene of ``dataset``."""
    from .collab import build_sample
    grid = grid or model.grid
    dets, gts = [], []
    for sc in dataset.scenes:
        ego = sc.agent_ids[0]
        sample = build_sample(sc, ego, grid, image_cache)
        dets.append(model.detect(sample).boxes)
        gts.append(ground_truth(sc, ego, grid))
    return evaluate_boxes(dets, gts, regime, model.kind.value)


def report_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()
