"""Intermediate-fusion collaborative detector with hand-written backward pass.

Pipeline per sample: pillarize each agent's sweep -> shared encoder ->
warp every non-ego feature map into the ego frame -> fuse -> 1x1 head ->
decode boxes. Feature maps are channels-last (H, W, C) arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from . import nn
from .geom import BoxBEV, Pose, boxes_to_array, iou_matrix, nms_indices, relative_pose, transform_box
from .pillars import GridConfig, pillarize, pseudo_image_hwc

HEAD_CHANNELS = 7  # score logit, dx, dy, log length ratio, log width ratio, sin 2yaw, cos 2yaw
ANCHOR_LENGTH = 4.5
ANCHOR_WIDTH = 1.9
DECODE_THRESHOLD = 0.1
INFER_NMS_IOU = 0.15
UNION_DEDUP_IOU = 0.7
REG_WEIGHT = 2.0
POS_WEIGHT = 10.0  # positive cells are ~1 in 1000
CLS_PRIOR = 0.01


class FusionKind(str, Enum):
    MAXOUT = "maxout"
    ATTENTION = "attention"
    GRAPH = "graph"


@dataclass
class FeatureMap:
    """(H, W, C) features expressed in the frame ``frame`` on grid ``grid``."""

    data: np.ndarray
    frame: Pose
    grid: GridConfig

    def chw(self) -> np.ndarray:
        return np.ascontiguousarray(self.data.transpose(2, 0, 1))


@dataclass
class DetectionSet:
    boxes: list[BoxBEV]
    frame: Pose

    def __len__(self):
        return len(self.boxes)


# ---------------------------------------------------------------- warping --

def warp_index(src: Pose, dst: Pose, grid: GridConfig) -> np.ndarray:
    """For every destination cell, the flat source cell its center maps to (-1 if out of view)."""
    xs, ys = grid.cell_centers()
    gx, gy = np.meshgrid(xs, ys)
    rel = relative_pose(dst, src)  # dst-frame coordinates -> src frame
    c, s = math.cos(rel.yaw), math.sin(rel.yaw)
    sx = c * gx - s * gy + rel.x
    sy = s * gx + c * gy + rel.y
    ix, iy = grid.cell_of(sx.ravel(), sy.ravel())
    return np.where(ix >= 0, iy * grid.nx + ix, -1)


def warp_array(data: np.ndarray, idx: np.ndarray) -> np.ndarray:
    h, w, c = data.shape
    flat = data.reshape(h * w, c)
    out = np.zeros_like(flat)
    valid = idx >= 0
    out[valid] = flat[idx[valid]]
    return out.reshape(h, w, c)


def warp_array_backward(dout: np.ndarray, idx: np.ndarray) -> np.ndarray:
    h, w, c = dout.shape
    grad = np.zeros((h * w, c), dtype=dout.dtype)
    valid = idx >= 0
    np.add.at(grad, idx[valid], dout.reshape(h * w, c)[valid])
    return grad.reshape(h, w, c)


def warp_feature(f: FeatureMap, dst: Pose) -> FeatureMap:
    """Nearest-neighbour inverse-mapping resample of ``f`` into frame ``dst``."""
    if dst == f.frame:
        return FeatureMap(f.data.copy(), dst, f.grid)
    return FeatureMap(warp_array(f.data, warp_index(f.frame, dst, f.grid)), dst, f.grid)


# ----------------------------------------------------------------- fusion --

def _softmax(s, axis=0):
    m = s.max(axis=axis, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=axis, keepdims=True)


class MaxoutFusion:
    kind = FusionKind.MAXOUT

    def params(self):
        return []

    def forward(self, stack):
        """stack: (N, H, W, C) with the ego first."""
        self._arg = np.argmax(stack, axis=0)
        self._n = stack.shape[0]
        return stack.max(axis=0)

    def backward(self, dout):
        grads = np.zeros((self._n,) + dout.shape, dtype=dout.dtype)
        for a in range(self._n):
            grads[a] = np.where(self._arg == a, dout, 0.0)
        return grads

    def weights(self, stack):
        return None


class AttentionFusion:
    """Per-location single-head scaled dot-product attention across agents.

    The ego's query attends to every agent's key; value and output maps
    start as the identity so that a lone agent passes through unchanged.
    """

    kind = FusionKind.ATTENTION

    def __init__(self, channels, rng, dtype=nn.DTYPE):
        std = 1.0 / math.sqrt(channels)
        self.wq = nn.Tensor("fusion.attention.wq", rng.normal(0, std, (channels, channels)), dtype)
        self.wk = nn.Tensor("fusion.attention.wk", rng.normal(0, std, (channels, channels)), dtype)
        self.wv = nn.Tensor("fusion.attention.wv", np.eye(channels), dtype)
        self.wo = nn.Tensor("fusion.attention.wo", np.eye(channels), dtype)
        self.bv = nn.Tensor("fusion.attention.bv", np.zeros(channels), dtype)
        self.bo = nn.Tensor("fusion.attention.bo", np.zeros(channels), dtype)
        self.scale = 1.0 / math.sqrt(channels)

    def params(self):
        return [self.wq, self.wk, self.wv, self.bv, self.wo, self.bo]

    def weights(self, stack):
        n, h, w, c = stack.shape
        x = stack.reshape(n, h * w, c)
        q = x[0] @ self.wq.data
        k = x @ self.wk.data
        return _softmax(np.einsum("lc,nlc->nl", q, k) * self.scale, 0).reshape(n, h, w)

    def forward(self, stack):
        n, h, w, c = stack.shape
        x = stack.reshape(n, h * w, c)
        q = x[0] @ self.wq.data
        k = x @ self.wk.data
        v = x @ self.wv.data + self.bv.data
        alpha = _softmax(np.einsum("lc,nlc->nl", q, k) * self.scale, 0)
        a = np.einsum("nl,nlc->lc", alpha, v)
        out = a @ self.wo.data + self.bo.data
        self._cache = (x, q, k, v, alpha, a, (n, h, w, c))
        return out.reshape(h, w, c)

    def backward(self, dout):
        x, q, k, v, alpha, a, (n, h, w, c) = self._cache
        d = dout.reshape(h * w, c)
        self.wo.grad += a.T @ d
        self.bo.grad += d.sum(0)
        da = d @ self.wo.data.T
        dalpha = np.einsum("lc,nlc->nl", da, v)
        dv = alpha[..., None] * da[None]
        ds = alpha * (dalpha - np.sum(alpha * dalpha, axis=0, keepdims=True)) * self.scale
        dq = np.einsum("nl,nlc->lc", ds, k)
        dk = ds[..., None] * q[None]
        self.wv.grad += np.einsum("nlc,nld->cd", x, dv)
        self.bv.grad += dv.sum(axis=(0, 1))
        self.wk.grad += np.einsum("nlc,nld->cd", x, dk)
        self.wq.grad += x[0].T @ dq
        dx = dv @ self.wv.data.T + dk @ self.wk.data.T
        dx[0] += dq @ self.wq.data.T
        return dx.reshape(n, h, w, c)


class GraphFusion:
    """Per-location edge weights from 1x1 convs on [ego, agent] features, softmax over agents.

    The edge field is conv(2C -> H) -> leaky ReLU -> conv(H -> 1); the last
    layer starts at zero so the initial weights are uniform. A single linear
    layer would not do: the ego half of it is shared by every edge and cancels
    in the softmax.
    """

    kind = FusionKind.GRAPH
    HIDDEN = 16

    def __init__(self, channels, rng, dtype=nn.DTYPE, hidden=HIDDEN):
        std = math.sqrt(2.0 / (2 * channels))
        self.w_ego = nn.Tensor("fusion.graph.w_ego", rng.normal(0, std, (channels, hidden)), dtype)
        self.w_other = nn.Tensor("fusion.graph.w_other", rng.normal(0, std, (channels, hidden)), dtype)
        self.b_hidden = nn.Tensor("fusion.graph.b_hidden", np.zeros(hidden), dtype)
        self.v = nn.Tensor("fusion.graph.v", np.zeros(hidden), dtype)
        self.slope = nn.LEAKY_SLOPE

    def params(self):
        return [self.w_ego, self.w_other, self.b_hidden, self.v]

    def _edges(self, stack):
        pre = (stack[0] @ self.w_ego.data)[None] + stack @ self.w_other.data + self.b_hidden.data
        act = np.where(pre > 0, pre, self.slope * pre)
        return pre, act, act @ self.v.data

    def weights(self, stack):
        return _softmax(self._edges(stack)[2], 0)

    def forward(self, stack):
        pre, act, logits = self._edges(stack)
        wts = _softmax(logits, 0)  # (N, H, W)
        self._cache = (stack, pre, act, wts)
        return np.einsum("nhw,nhwc->hwc", wts, stack)

    def backward(self, dout):
        stack, pre, act, wts = self._cache
        dw = np.einsum("hwc,nhwc->nhw", dout, stack)
        de = wts * (dw - np.sum(wts * dw, axis=0, keepdims=True))
        dstack = wts[..., None] * dout[None]
        self.v.grad += np.einsum("nhw,nhwk->k", de, act)
        dpre = de[..., None] * self.v.data * np.where(pre > 0, 1.0, self.slope)
        self.b_hidden.grad += dpre.sum(axis=(0, 1, 2))
        self.w_other.grad += np.einsum("nhwc,nhwk->ck", stack, dpre)
        dsum = dpre.sum(0)
        self.w_ego.grad += np.einsum("hwc,hwk->ck", stack[0], dsum)
        dstack += dpre @ self.w_other.data.T
        dstack[0] += dsum @ self.w_ego.data.T
        return dstack


def make_fusion(kind, channels=nn.ENCODER_CHANNELS, rng=None, dtype=nn.DTYPE):
    kind = FusionKind(kind)
    rng = rng if rng is not None else np.random.default_rng(0)
    if kind is FusionKind.MAXOUT:
        return MaxoutFusion()
    if kind is FusionKind.ATTENTION:
        return AttentionFusion(channels, rng, dtype)
    return GraphFusion(channels, rng, dtype)


def fuse(ego: FeatureMap, others: Sequence[FeatureMap], kind, fusion=None) -> FeatureMap:
    """Fuse feature maps already expressed in the ego frame."""
    for o in others:
        if o.data.shape != ego.data.shape:
            raise ValueError(f"fuse: shape {o.data.shape} != ego shape {ego.data.shape}")
    fusion = fusion if fusion is not None else make_fusion(kind, ego.data.shape[-1], dtype=ego.data.dtype)
    stack = np.stack([ego.data] + [o.data for o in others])
    return FeatureMap(fusion.forward(stack), ego.frame, ego.grid)


# ------------------------------------------------------------ box coding --

def encode_targets(boxes: Sequence[BoxBEV], grid: GridConfig):
    """Positive cells and their regression targets.

    Returns (mask (H, W) bool, targets (H, W, 6), assigned box index per positive
    cell). A cell holding several centers keeps the first box.
    """
    mask = np.zeros((grid.ny, grid.nx), dtype=bool)
    reg = np.zeros((grid.ny, grid.nx, HEAD_CHANNELS - 1))
    owner = {}
    if not boxes:
        return mask, reg, owner
    arr = boxes_to_array(boxes)
    ix, iy = grid.cell_of(arr[:, 0], arr[:, 1])
    for k in range(len(arr)):
        if ix[k] < 0 or mask[iy[k], ix[k]]:
            continue
        cx = grid.x_min + (ix[k] + 0.5) * grid.v_w
        cy = grid.y_min + (iy[k] + 0.5) * grid.v_h
        mask[iy[k], ix[k]] = True
        reg[iy[k], ix[k]] = [
            (arr[k, 0] - cx) / grid.v_w,
            (arr[k, 1] - cy) / grid.v_h,
            math.log(arr[k, 2] / ANCHOR_LENGTH),
            math.log(arr[k, 3] / ANCHOR_WIDTH),
            math.sin(2.0 * arr[k, 4]),
            math.cos(2.0 * arr[k, 4]),
        ]
        owner[(int(iy[k]), int(ix[k]))] = k
    return mask, reg, owner


def decode_boxes(raw: np.ndarray, grid: GridConfig, threshold: float = DECODE_THRESHOLD,
                 nms_iou: float | None = INFER_NMS_IOU) -> list[BoxBEV]:
    """Head output (H, W, 7) -> boxes with score >= threshold, optionally NMS-filtered."""
    raw = np.asarray(raw, dtype=np.float64)
    scores = nn.sigmoid(raw[..., 0])
    iy, ix = np.nonzero(scores >= threshold)
    if len(iy) == 0:
        return []
    r = raw[iy, ix]
    cx = grid.x_min + (ix + 0.5) * grid.v_w + np.clip(r[:, 1], -1.0, 1.0) * grid.v_w
    cy = grid.y_min + (iy + 0.5) * grid.v_h + np.clip(r[:, 2], -1.0, 1.0) * grid.v_h
    length = ANCHOR_LENGTH * np.exp(np.clip(r[:, 3], -2.0, 2.0))
    width = ANCHOR_WIDTH * np.exp(np.clip(r[:, 4], -2.0, 2.0))
    yaw = 0.5 * np.arctan2(r[:, 5], r[:, 6])
    sc = scores[iy, ix]
    arr = np.column_stack([cx, cy, length, width, yaw])
    order = np.arange(len(arr))
    if nms_iou is not None:
        order = nms_indices(arr, sc, nms_iou)
    else:
        order = np.argsort(-sc, kind="stable")
    return [BoxBEV(float(arr[i, 0]), float(arr[i, 1]), float(arr[i, 2]), float(arr[i, 3]),
                   float(arr[i, 4]), float(sc[i])) for i in order]


# ------------------------------------------------------------------ labels --

def crop_to_grid(boxes: Sequence[BoxBEV], grid: GridConfig) -> list[BoxBEV]:
    return [b for b in boxes if grid.x_min <= b.cx < grid.x_max and grid.y_min <= b.cy < grid.y_max]


def union_labels(per_agent: dict, ego: Pose, grid: GridConfig | None = None,
                 dedup_iou: float = UNION_DEDUP_IOU) -> list[BoxBEV]:
    """Merge world-frame labels of all agents into the ego frame.

    ``per_agent`` maps an agent key to a list of world-frame boxes (the agents'
    poses are not needed once labels are in the world frame). Boxes whose IoU
    with an already kept box exceeds ``dedup_iou`` are treated as the same
    object; the result is cropped to ``grid`` when given.
    """
    world = Pose()
    merged: list[BoxBEV] = []
    for key in sorted(per_agent):
        for b in per_agent[key]:
            merged.append(transform_box(world, ego, b))
    if grid is not None:
        merged = crop_to_grid(merged, grid)
    if len(merged) < 2:
        return merged
    m = iou_matrix(merged, merged)
    kept = []
    for i in range(len(merged)):
        if all(m[i, j] <= dedup_iou for j in kept):
            kept.append(i)
    return [merged[i] for i in kept]


# -------------------------------------------------------------------- loss --

def det_loss(raw: np.ndarray, targets: Sequence[BoxBEV], grid: GridConfig, with_grad: bool = True,
             pos_weight: float | None = None):
    """Classification BCE over all cells plus smooth-L1 at positive cells, weighted 1:2.

    Positive cells carry ``pos_weight`` in the BCE sum. Both terms are
    normalized by max(1, number of positive cells). Returns (loss, grad) or
    just loss.
    """
    pos_weight = POS_WEIGHT if pos_weight is None else pos_weight
    raw64 = np.asarray(raw, dtype=np.float64)
    mask, reg, _ = encode_targets(targets, grid)
    npos = max(1, int(mask.sum()))
    cls, gcls = nn.bce_with_logits(raw64[..., 0], mask.astype(np.float64), np.where(mask, pos_weight, 1.0))
    if mask.any():
        rl, greg = nn.smooth_l1(raw64[mask][:, 1:], reg[mask], beta=1.0, reduction="sum", with_grad=True)
    else:
        rl, greg = 0.0, None
    loss = (cls + REG_WEIGHT * rl) / npos
    if not with_grad:
        return loss
    grad = np.zeros_like(raw64)
    grad[..., 0] = gcls / npos
    if greg is not None:
        grad[mask, 1:] = REG_WEIGHT * greg / npos
    return loss, grad.astype(raw.dtype, copy=False)


# ------------------------------------------------------------------- model --

@dataclass
class AgentFrame:
    agent_id: int
    pose: Pose
    image: np.ndarray  # (ny, nx, C) pseudo image in the agent's frame


@dataclass
class Sample:
    """One collaborative observation with the ego first."""

    frames: list[AgentFrame]
    scene_id: int = -1
    _warp: dict = field(default_factory=dict, repr=False)

    @property
    def ego(self) -> AgentFrame:
        return self.frames[0]

    def warp_indices(self, grid: GridConfig):
        key = (grid.v_w, grid.v_h)
        if key not in self._warp:
            ego = self.ego.pose
            self._warp[key] = [None] + [warp_index(f.pose, ego, grid) for f in self.frames[1:]]
        return self._warp[key]


def build_sample(scene, ego_id: int, grid: GridConfig, image_cache: dict | None = None) -> Sample:
    """Pseudo images of all agents of ``scene``; the ego first, others by id."""
    order = [ego_id] + [a.id for a in scene.agents if a.id != ego_id]
    frames = []
    for aid in order:
        key = (scene.scene_id, aid)
        if image_cache is not None and key in image_cache:
            img = image_cache[key]
        else:
            img = pseudo_image_hwc(pillarize(scene.cloud(aid), grid))
            if image_cache is not None:
                image_cache[key] = img
        frames.append(AgentFrame(aid, scene.agent(aid).pose, img))
    return Sample(frames, scene.scene_id)


class CollabDetector:
    """Shared encoder, fusion and a small convolutional box head."""

    def __init__(self, kind="maxout", seed: int = 0, grid: GridConfig | None = None, dtype=nn.DTYPE):
        rng = np.random.default_rng(seed)
        self.kind = FusionKind(kind)
        self.dtype = np.dtype(dtype)
        self.grid = grid or GridConfig()
        self.feat_grid = self.grid.scaled(nn.ENCODER_STRIDE)
        self.encoder = nn.build_encoder(rng, dtype=self.dtype)
        self.fusion = make_fusion(self.kind, nn.ENCODER_CHANNELS, rng, self.dtype)
        out = nn.Conv2d("head.out", nn.ENCODER_CHANNELS, HEAD_CHANNELS, 1, rng=rng, dtype=self.dtype)
        out.weight.data *= 0.1
        out.bias.data[0] = math.log(CLS_PRIOR / (1.0 - CLS_PRIOR))
        self.head = nn.Sequential([
            nn.Conv2d("head.conv", nn.ENCODER_CHANNELS, nn.ENCODER_CHANNELS, 3, rng=rng, dtype=self.dtype),
            nn.LeakyReLU(),
            out,
        ])
        self._cache = None

    def params(self):
        return self.encoder.params() + self.fusion.params() + self.head.params()

    def state(self):
        return nn.state_dict(self.params())

    def load(self, arrays, strict=True):
        return nn.load_state(self.params(), arrays, strict=strict)

    def load_encoder(self, arrays):
        """Copy ``encoder.*`` weights (e.g. from a pretraining checkpoint)."""
        names = nn.load_state(self.encoder.params(), arrays, strict=True)
        if not names:
            raise KeyError("checkpoint holds no encoder weights")
        return names

    def encode(self, images: np.ndarray) -> np.ndarray:
        return self.encoder.forward(np.asarray(images, dtype=self.dtype))

    def forward(self, sample: Sample) -> np.ndarray:
        """Raw head output (h, w, 7) in the ego frame; caches for ``backward``."""
        images = np.stack([f.image for f in sample.frames])
        feats = self.encode(images)
        idx = sample.warp_indices(self.feat_grid)
        stack = np.empty_like(feats)
        stack[0] = feats[0]
        for a in range(1, len(feats)):
            stack[a] = warp_array(feats[a], idx[a])
        fused = self.fusion.forward(stack)
        raw = self.head.forward(fused[None])[0]
        self._cache = idx
        return raw

    def backward(self, draw: np.ndarray) -> None:
        idx = self._cache
        dfused = self.head.backward(np.asarray(draw, dtype=self.dtype)[None])[0]
        dstack = self.fusion.backward(dfused)
        dfeats = np.empty_like(dstack)
        dfeats[0] = dstack[0]
        for a in range(1, len(dstack)):
            dfeats[a] = warp_array_backward(dstack[a], idx[a])
        self.encoder.backward(dfeats)

    def detect(self, sample: Sample, threshold: float = DECODE_THRESHOLD,
               nms_iou: float | None = INFER_NMS_IOU) -> DetectionSet:
        raw = self.forward(sample)
        return DetectionSet(decode_boxes(raw, self.feat_grid, threshold, nms_iou), sample.ego.pose)


def encode(pc, cfg: GridConfig, encoder: nn.Sequential, frame: Pose | None = None) -> FeatureMap:
    """F = encoder(pseudo_image(pillarize(pc)))."""
    img = pseudo_image_hwc(pillarize(pc, cfg))
    dtype = encoder.params()[0].data.dtype
    out = encoder.forward(img[None].astype(dtype))[0]
    return FeatureMap(out, frame or Pose(), cfg.scaled(nn.ENCODER_STRIDE))


def collab_forward(sample: Sample, model: CollabDetector, **kw) -> DetectionSet:
    return model.detect(sample, **kw)
