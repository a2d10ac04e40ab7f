"""Instance bank, online instance mining and the teacher/student training pipeline."""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from . import nn
from .collab import (POS_WEIGHT, CollabDetector, DetectionSet, FusionKind, Sample, build_sample, crop_to_grid,
                     det_loss, union_labels)
from .geom import BoxBEV, Pose, boxes_to_array, iou_matrix, nms_indices, transform_boxes
from .pillars import GridConfig
from .scene import AgentKind, Dataset

log = logging.getLogger(__name__)

MATCH_IOU = 0.5  # mined box counts as correct when it overlaps a withheld label this much


class Provenance(str, Enum):
    SPARSE_GT = "sparse_gt"
    MINED = "mined"


@dataclass(frozen=True)
class BankEntry:
    box: BoxBEV
    provenance: Provenance
    mined_score: float = 1.0


@dataclass
class InstanceBank:
    """World-frame supervision boxes keyed by (scene_id, agent_id)."""

    entries: dict = field(default_factory=dict)
    dedup_iou: float = 0.15

    def keys(self):
        return sorted(self.entries)

    def size(self) -> int:
        return sum(len(v) for v in self.entries.values())

    def count(self, provenance: Provenance) -> int:
        return sum(e.provenance is provenance for v in self.entries.values() for e in v)

    def scene_entries(self, scene_id: int) -> list[BankEntry]:
        return [e for k in self.keys() if k[0] == scene_id for e in self.entries[k]]

    def scene_boxes(self, scene_id: int) -> dict[int, list[BoxBEV]]:
        return {k[1]: [e.box for e in self.entries[k]] for k in self.keys() if k[0] == scene_id}

    def copy(self) -> "InstanceBank":
        return InstanceBank({k: list(v) for k, v in self.entries.items()}, self.dedup_iou)


def init_bank(labels: dict, dedup_iou: float = 0.15) -> InstanceBank:
    """Bank holding the given world-frame labels verbatim, all tagged sparse_gt.

    ``labels`` maps scene_id -> agent_id -> list of boxes, or is a Dataset
    (its sparse labels are used).
    """
    if isinstance(labels, Dataset):
        labels = {sc.scene_id: labels.label_boxes(sc.scene_id, "sparse") for sc in labels.scenes}
    entries = {}
    for sid in sorted(labels):
        for aid in sorted(labels[sid]):
            entries[(sid, aid)] = [BankEntry(b, Provenance.SPARSE_GT, 1.0) for b in labels[sid][aid]]
    return InstanceBank(entries, dedup_iou)


@dataclass(frozen=True)
class MiningConfig:
    tau_cls: float = 0.3
    tau_iou: float = 0.15
    epochs: int = 10
    bank_dedup_iou: float = 0.15

    def __post_init__(self):
        if not 0.0 < self.tau_cls <= 1.0:
            # 1.0 is allowed: it switches mining off, since scores never exceed it
            raise ValueError(f"tau_cls {self.tau_cls} outside (0, 1]")
        if not 0.0 < self.tau_iou < 1.0:
            raise ValueError(f"tau_iou {self.tau_iou} outside (0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


def mine_instances(teacher_out: DetectionSet | Sequence[BoxBEV], cfg: MiningConfig = MiningConfig()) -> list[BoxBEV]:
    """Score filter (strictly above tau_cls) followed by NMS at tau_iou."""
    boxes = teacher_out.boxes if isinstance(teacher_out, DetectionSet) else list(teacher_out)
    kept = [b for b in boxes if b.score > cfg.tau_cls]
    if len(kept) < 2:
        return kept
    arr = boxes_to_array(kept)
    order = nms_indices(arr, np.array([b.score for b in kept]), cfg.tau_iou)
    return [kept[i] for i in order]


def update_bank(bank: InstanceBank, key: tuple, mined: Sequence[BoxBEV]) -> InstanceBank:
    """Append world-frame mined boxes that do not overlap the scene's entries.

    A mined box is dropped when its IoU with any entry of the same scene (any
    agent key) or with a box accepted earlier in this call exceeds the bank's
    dedup threshold. Updates happen in place; the bank is returned.
    """
    existing = [e.box for e in bank.scene_entries(key[0])]
    arr = boxes_to_array(existing) if existing else np.zeros((0, 5))
    added = bank.entries.setdefault(key, [])
    for b in mined:
        a = b.as_array()[None]
        if len(arr) and iou_matrix(a, arr).max() > bank.dedup_iou:
            continue
        added.append(BankEntry(b, Provenance.MINED, float(b.score)))
        arr = np.vstack([arr, a])
    return bank


# ------------------------------------------------------------------ training --

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    lr: float = 1e-3
    lr_floor: float = 0.1        # cosine decay ends at lr * lr_floor
    batch: int = 2
    pos_weight: float = POS_WEIGHT
    dtype: str = "float32"
    grid: GridConfig = field(default_factory=GridConfig)
    encoder_std: float | None = 0.1  # per-channel output scale for loaded encoders; None keeps them as is


def vehicle_ids(scene) -> list[int]:
    ids = [a.id for a in scene.agents if a.kind == AgentKind.VEHICLE]
    return ids or scene.agent_ids


def _lr_at(cfg: TrainConfig, epoch: int) -> float:
    if cfg.epochs <= 1:
        return cfg.lr
    c = 0.5 * (1.0 + math.cos(math.pi * epoch / (cfg.epochs - 1)))
    return cfg.lr * (cfg.lr_floor + (1.0 - cfg.lr_floor) * c)


CALIBRATION_SCENES = 16


def calibrate_encoder(model: CollabDetector, dataset: Dataset, target_std: float,
                      scenes: int = CALIBRATION_SCENES) -> None:
    """Layer-sequential rescaling of the encoder convolutions, in place.

    Pretrained encoders come out with activations an order of magnitude larger
    than a fresh He initialisation, which starves the randomly initialised head.
    Walking the layers in order, each convolution's weights and bias are scaled
    per output channel so that, on the ego pseudo images of the first
    ``scenes`` scenes, that channel's response has standard deviation
    ``target_std``. Leaky ReLU commutes with positive scaling, so every channel
    keeps its spatial pattern.
    """
    picked = dataset.scenes[:scenes]
    if not picked:
        raise ValueError("calibration needs at least one scene")
    h = np.stack([build_sample(sc, sc.agent_ids[0], model.grid).ego.image for sc in picked]).astype(model.dtype)
    for layer in model.encoder.layers:
        h = layer.forward(h)
        if isinstance(layer, nn.Conv2d):
            f = target_std / (h.reshape(-1, h.shape[-1]).std(axis=0) + 1e-6)
            layer.weight.data *= f[:, None, None, None].astype(model.dtype)
            layer.bias.data *= f.astype(model.dtype)
            h = h * f.astype(model.dtype)


def new_detector(kind, seed: int, cfg: TrainConfig, encoder: dict | None = None,
                 dataset: Dataset | None = None) -> CollabDetector:
    """Fresh detector, optionally warm-started from ``encoder.*`` weights.

    A loaded encoder is calibrated on ``dataset`` when both it and
    ``cfg.encoder_std`` are given.
    """
    model = CollabDetector(kind, seed=seed, grid=cfg.grid, dtype=cfg.dtype)
    if encoder is not None:
        model.load_encoder(encoder)
        if cfg.encoder_std is not None and dataset is not None:
            calibrate_encoder(model, dataset, cfg.encoder_std)
    return model


def train_detector(model: CollabDetector, dataset: Dataset, bank: InstanceBank, cfg: TrainConfig, seed: int,
                   before_step: Callable | None = None, after_epoch: Callable | None = None,
                   image_cache: dict | None = None) -> list[float]:
    """Supervised training against the (possibly evolving) bank.

    Each epoch visits the scenes in a seeded random order with a random vehicle
    as ego. ``before_step(scene, ego_id, sample)`` runs before the targets are
    read, which is where online mining updates the bank.
    """
    if not dataset.scenes:
        raise ValueError("training needs at least one scene")
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 29])
    opt = nn.Adam(model.params(), lr=cfg.lr)
    cache = image_cache if image_cache is not None else {}
    losses = []
    for epoch in range(cfg.epochs):
        opt.lr = _lr_at(cfg, epoch)
        order = rng.permutation(len(dataset.scenes))
        total = 0.0
        for k, i in enumerate(order):
            sc = dataset.scenes[i]
            egos = vehicle_ids(sc)
            ego = egos[int(rng.integers(len(egos)))]
            sample = build_sample(sc, ego, cfg.grid, cache)
            if before_step is not None:
                before_step(sc, ego, sample)
            targets = union_labels(bank.scene_boxes(sc.scene_id), sc.agent(ego).pose, cfg.grid)
            if k % cfg.batch == 0:
                opt.zero_grad()
            raw = model.forward(sample)
            loss, grad = det_loss(raw, targets, model.feat_grid, pos_weight=cfg.pos_weight)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite detection loss at epoch {epoch}")
            model.backward(grad / cfg.batch)
            if k % cfg.batch == cfg.batch - 1 or k == len(order) - 1:
                opt.step()
            total += loss
        losses.append(total / len(order))
        log.info("detector epoch %d loss %.5f", epoch, losses[-1])
        if after_epoch is not None:
            after_epoch(epoch, losses[-1])
    return losses


def weights_digest(model) -> str:
    h = hashlib.sha256()
    for name, arr in model.state().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


class OracleTeacher:
    """Stand-in teacher that emits every ground-truth object in range with a fixed score."""

    def __init__(self, dataset: Dataset, grid: GridConfig, score: float = 0.99):
        self.dataset = dataset
        self.grid = grid
        self.score = score

    def detect(self, sample: Sample) -> DetectionSet:
        sc = self.dataset.scene(sample.scene_id)
        ego = sample.ego.pose
        boxes = [b.with_score(self.score) for b in transform_boxes(Pose(), ego, [sc.objects[o] for o in sc.object_ids()])]
        return DetectionSet(crop_to_grid(boxes, self.grid), ego)


def mined_quality(bank: InstanceBank, dataset: Dataset, iou_thr: float = MATCH_IOU) -> tuple[float, float]:
    """(precision of mined entries, recall of all bank entries) against the full labels."""
    correct = mined = covered = total = 0
    for sc in dataset.scenes:
        gts = [sc.objects[o] for o in sc.object_ids()]
        entries = bank.scene_entries(sc.scene_id)
        total += len(gts)
        if not entries or not gts:
            mined += sum(e.provenance is Provenance.MINED for e in entries)
            continue
        m = iou_matrix(boxes_to_array([e.box for e in entries]), boxes_to_array(gts))
        for row, e in zip(m, entries):
            if e.provenance is Provenance.MINED:
                mined += 1
                correct += bool(row.max() >= iou_thr)
        covered += int(np.count_nonzero(m.max(axis=0) >= iou_thr))
    precision = correct / mined if mined else 1.0
    recall = covered / total if total else 1.0
    return precision, recall


@dataclass
class MiningReport:
    rows: list = field(default_factory=list)  # (epoch, bank_size, precision, recall)
    stage1_loss: list = field(default_factory=list)
    stage2_loss: list = field(default_factory=list)
    teacher_digest_before: str = ""
    teacher_digest_after: str = ""

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "bank_size", "precision", "recall"])
        for e, n, p, r in self.rows:
            w.writerow([e, n, f"{p:.6f}", f"{r:.6f}"])
        return buf.getvalue()


@dataclass
class SSC3ODResult:
    teacher: object
    student: CollabDetector
    bank: InstanceBank
    report: MiningReport


def train_ssc3od(dataset: Dataset, mae_encoder: dict | None, kind="maxout", seed: int = 0,
                 train_cfg: TrainConfig = TrainConfig(), mining_cfg: MiningConfig = MiningConfig(),
                 teacher=None, allow_scratch: bool = False, image_cache: dict | None = None) -> SSC3ODResult:
    """Two-stage training: sparse-bank teacher, then a student trained with online mining.

    ``mae_encoder`` holds pretrained ``encoder.*`` weights. Passing None
    requires ``allow_scratch``. A ready ``teacher`` (a trained detector or any
    object with ``detect(sample)``) skips stage 1.
    """
    if mae_encoder is None and not allow_scratch:
        raise FileNotFoundError("a pretrained encoder is required (pass allow_scratch=True to train from scratch)")
    kind = FusionKind(kind)
    cache = image_cache if image_cache is not None else {}
    stage_cfg = TrainConfig(**{**train_cfg.__dict__, "epochs": mining_cfg.epochs})
    bank = init_bank(dataset, mining_cfg.bank_dedup_iou)
    report = MiningReport()

    if teacher is None:
        teacher = new_detector(kind, seed, stage_cfg, mae_encoder, dataset)
        report.stage1_loss = train_detector(teacher, dataset, bank, stage_cfg, seed, image_cache=cache)
    digest = weights_digest(teacher) if hasattr(teacher, "state") else ""
    report.teacher_digest_before = digest
    p, r = mined_quality(bank, dataset)
    report.rows.append((0, bank.size(), p, r))

    def mine(scene, ego, sample):
        out = teacher.detect(sample)
        world = transform_boxes(sample.ego.pose, Pose(), mine_instances(out, mining_cfg))
        update_bank(bank, (scene.scene_id, ego), world)

    def record(epoch, loss):
        pr, rc = mined_quality(bank, dataset)
        report.rows.append((epoch + 1, bank.size(), pr, rc))
        log.info("mining epoch %d bank %d precision %.3f recall %.3f", epoch, bank.size(), pr, rc)

    student = new_detector(kind, seed + 1_000_003, stage_cfg, mae_encoder, dataset)
    report.stage2_loss = train_detector(student, dataset, bank, stage_cfg, seed + 1, before_step=mine,
                                        after_epoch=record, image_cache=cache)
    report.teacher_digest_after = weights_digest(teacher) if hasattr(teacher, "state") else ""
    return SSC3ODResult(teacher, student, bank, report)


# ------------------------------------------------------------- persistence --

def format_bank(bank: InstanceBank) -> str:
    """Bank as text records in the scene-file dialect (one box per line)."""
    from .scene import SCHEMA_VERSION, _box_fields, _fmt
    lines = [f"bank schema_version={SCHEMA_VERSION} dedup_iou={_fmt(bank.dedup_iou)}"]
    for sid, aid in bank.keys():
        for e in bank.entries[(sid, aid)]:
            lines.append(f"entry scene_id={sid} agent={aid} provenance={e.provenance.value} "
                         f"mined_score={_fmt(e.mined_score)} {_box_fields(e.box)}")
    lines.append("end")
    return "\n".join(lines) + "\n"


def parse_bank(text: str) -> InstanceBank:
    from .scene import SCHEMA_VERSION, _box_from, _parse_kv
    lines = [ln.split() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0][0] != "bank":
        raise ValueError("not an instance bank file")
    head = _parse_kv(lines[0][1:])
    if int(head.get("schema_version", -1)) != SCHEMA_VERSION:
        raise ValueError(f"unsupported bank schema {head.get('schema_version')}")
    bank = InstanceBank({}, float(head["dedup_iou"]))
    for tok in lines[1:]:
        if tok[0] == "end":
            break
        if tok[0] != "entry":
            raise ValueError(f"unexpected record {tok[0]!r}")
        kv = _parse_kv(tok[1:])
        key = (int(kv["scene_id"]), int(kv["agent"]))
        bank.entries.setdefault(key, []).append(
            BankEntry(_box_from(kv), Provenance(kv["provenance"]), float(kv["mined_score"])))
    return bank
