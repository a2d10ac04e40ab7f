"""Masked-pillar autoencoder pretraining on occupancy reconstruction."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .pillars import GridConfig, OccupancyGrid, PillarGrid, mask_pillars, occupancy_label, pillarize, pseudo_image_hwc
from .scene import Dataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MaeConfig:
    r_m: float = 0.7
    epochs: int = 25
    batch: int = 4
    lr: float = 1e-3
    grid: GridConfig = field(default_factory=GridConfig)
    prior_init: bool = True        # start the decoder bias at the corpus occupancy rate
    dtype: str = "float64"


class MaeModel:
    """Shared pillar encoder plus a single stride-2 deconvolution decoder."""

    def __init__(self, seed: int = 0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.encoder = nn.build_encoder(rng, dtype=self.dtype)
        self.decoder = nn.Deconv2d("decoder.deconv", nn.ENCODER_CHANNELS, 1, 4, stride=2, padding=1,
                                   rng=rng, dtype=self.dtype)
        self.net = nn.Sequential([self.encoder, self.decoder])

    def params(self):
        return self.net.params()

    def encoder_params(self):
        return self.encoder.params()

    def logits(self, images: np.ndarray) -> np.ndarray:
        """(N, ny, nx, C) pseudo images -> (N, ny, nx) occupancy logits."""
        return self.net.forward(np.asarray(images, dtype=self.dtype))[..., 0]

    def state(self):
        return nn.state_dict(self.params())

    def load(self, arrays, strict=True):
        return nn.load_state(self.params(), arrays, strict=strict)


def occ_loss(P, T, b: int | None = None) -> float:
    """Occupancy BCE: per-sample mean over all grid cells, averaged over the batch.

    ``P`` and ``T`` are (b, ny, nx) or (ny, nx) arrays (``T`` may be an
    OccupancyGrid or a list of them).
    """
    if isinstance(T, OccupancyGrid):
        T = T.values
    elif isinstance(T, (list, tuple)):
        T = np.stack([t.values if isinstance(t, OccupancyGrid) else t for t in T])
    P = np.asarray(P, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    if P.shape != T.shape:
        raise ValueError(f"occ_loss: prediction shape {P.shape} != target shape {T.shape}")
    if P.ndim == 2:
        P, T = P[None], T[None]
    if b is not None and b != P.shape[0]:
        raise ValueError(f"occ_loss: batch size {b} != {P.shape[0]} samples")
    per_sample = nn.bce_loss(P, T, reduction="none").reshape(P.shape[0], -1).mean(1)
    return float(per_sample.mean())


def occ_loss_logits(z: np.ndarray, T: np.ndarray) -> tuple[float, np.ndarray]:
    """Same value as ``occ_loss(sigmoid(z), T)`` plus its gradient w.r.t. the logits."""
    n = z.shape[0]
    cells = z[0].size
    loss, grad = nn.bce_with_logits(z.astype(np.float64), T.astype(np.float64))
    scale = 1.0 / (n * cells)
    return loss * scale, grad * scale


def reconstruct(model: MaeModel, visible: PillarGrid) -> np.ndarray:
    """Occupancy probabilities (ny, nx) predicted from the visible pillars."""
    return nn.sigmoid(model.logits(pseudo_image_hwc(visible)[None])[0].astype(np.float64))


def constant_baseline(targets) -> tuple[float, float]:
    """(p*, BCE) of the best constant predictor p* = mean occupancy."""
    T = np.stack([t.values if isinstance(t, OccupancyGrid) else t for t in targets]).astype(np.float64)
    p = float(T.mean())
    return p, occ_loss(np.full(T.shape, p), T)


@dataclass
class _Frame:
    grid: PillarGrid
    target: np.ndarray


def collect_frames(dataset: Dataset, grid_cfg: GridConfig) -> list[_Frame]:
    frames = []
    for sc in dataset.scenes:
        for a in sc.agents:
            g = pillarize(sc.cloud(a.id), grid_cfg)
            frames.append(_Frame(g, occupancy_label(g).values))
    return frames


@dataclass
class PretrainResult:
    model: MaeModel
    epoch_loss: list[float]
    step_loss: list[float]
    baseline_p: float
    baseline_loss: float


def pretrain(dataset: Dataset, cfg: MaeConfig = MaeConfig(), seed: int = 0, frames=None,
             max_steps: int | None = None, progress=None) -> PretrainResult:
    """Self-supervised occupancy reconstruction; labels in ``dataset`` are ignored."""
    if not dataset.scenes and frames is None:
        raise ValueError("pretraining needs at least one scene")
    frames = frames if frames is not None else collect_frames(dataset, cfg.grid)
    model = MaeModel(seed, dtype=np.dtype(cfg.dtype))
    p_star, base = constant_baseline([f.target for f in frames])
    if cfg.prior_init:
        p = min(max(p_star, 1e-6), 1 - 1e-6)
        model.decoder.bias.data[:] = math.log(p / (1.0 - p))
    opt = nn.Adam(model.params(), lr=cfg.lr)
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 17])
    epoch_loss, step_loss = [], []
    steps = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(frames))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch):
            idx = order[start:start + cfg.batch]
            imgs, targets = [], []
            for i in idx:
                visible, _ = mask_pillars(frames[i].grid, cfg.r_m, rng.integers(2**31))
                imgs.append(pseudo_image_hwc(visible))
                targets.append(frames[i].target)
            x = np.stack(imgs)
            T = np.stack(targets)
            opt.zero_grad()
            z = model.logits(x)
            loss, g = occ_loss_logits(z, T)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite occupancy loss at epoch {epoch}, step {steps}")
            model.net.backward(g[..., None].astype(model.dtype))
            opt.step()
            step_loss.append(loss)
            total += loss * len(idx)
            count += len(idx)
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        epoch_loss.append(total / max(count, 1))
        log.info("mae epoch %d loss %.6f (constant baseline %.6f)", epoch, epoch_loss[-1], base)
        if progress:
            progress(epoch, epoch_loss[-1])
        if max_steps is not None and steps >= max_steps:
            break
    return PretrainResult(model, epoch_loss, step_loss, p_star, base)


def evaluate_occupancy(model: MaeModel, frames, r_m: float, seed: int = 0) -> dict:
    """Mean BCE over all cells plus masked-cell L1 error vs the constant prior."""
    rng = np.random.default_rng(seed)
    p_star = float(np.mean([f.target.mean() for f in frames]))
    losses, l1_model, l1_prior = [], [], []
    for f in frames:
        visible, spec = mask_pillars(f.grid, r_m, rng.integers(2**31))
        P = reconstruct(model, visible)
        losses.append(occ_loss(P, f.target))
        if len(spec.masked_indices):
            T = f.target.ravel()[spec.masked_indices]
            l1_model.append(np.abs(P.ravel()[spec.masked_indices] - T).mean())
            l1_prior.append(np.abs(p_star - T).mean())
    return {
        "loss": float(np.mean(losses)),
        "masked_l1": float(np.mean(l1_model)) if l1_model else float("nan"),
        "masked_l1_prior": float(np.mean(l1_prior)) if l1_prior else float("nan"),
    }
