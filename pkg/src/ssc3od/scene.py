"""Synthetic multi-agent LiDAR scenes, label sparsification and dataset files."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable

import numpy as np

from . import kernels
from .geom import BoxBEV, PointCloud, Pose, boxes_to_array, iou_matrix

SCHEMA_VERSION = 1
VISIBLE_MIN_POINTS = 5


class PlacementError(RuntimeError):
    """Raised when a scene layout cannot satisfy the corpus constraints."""


class AgentKind(str, Enum):
    VEHICLE = "vehicle"
    INFRASTRUCTURE = "infrastructure"


@dataclass(frozen=True)
class LidarConfig:
    num_beams: int = 8            # vertical channels, spread over the hit object's height
    points_per_beam: int = 720    # azimuth samples per revolution
    max_range: float = 45.0
    dropout_prob: float = 0.0
    noise_sigma: float = 0.02
    ground_beams: int = 0         # lowest beams that return ground points on a miss

    def __post_init__(self):
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ValueError("dropout_prob must lie in [0, 1)")
        if self.num_beams < 1 or self.points_per_beam < 1:
            raise ValueError("need at least one beam and one azimuth sample")


@dataclass(frozen=True)
class Agent:
    id: int
    kind: AgentKind
    pose: Pose
    sensor: LidarConfig = LidarConfig()


@dataclass
class Scene:
    scene_id: int
    agents: list[Agent]
    objects: dict[int, BoxBEV]
    range_spec: tuple[float, float, float, float] = (-32.0, 32.0, -32.0, 32.0)
    lidar_seed: int = 0
    _clouds: dict = field(default_factory=dict, repr=False, compare=False)

    def agent(self, agent_id: int) -> Agent:
        for a in self.agents:
            if a.id == agent_id:
                return a
        raise KeyError(f"scene {self.scene_id} has no agent {agent_id}")

    @property
    def agent_ids(self) -> list[int]:
        return [a.id for a in self.agents]

    def object_ids(self) -> list[int]:
        return sorted(self.objects)

    def cloud(self, agent_id: int) -> PointCloud:
        """Cached LiDAR sweep of one agent (its local frame)."""
        if agent_id not in self._clouds:
            self._clouds[agent_id] = sample_lidar(self, self.agent(agent_id), self.lidar_seed)
        return self._clouds[agent_id]

    def visible_objects(self, agent_id: int, min_points: int = VISIBLE_MIN_POINTS) -> list[int]:
        counts = points_per_object(self, agent_id)
        return [oid for oid, c in counts.items() if c >= min_points]


@dataclass
class Dataset:
    split: str
    scenes: list[Scene]
    full: dict[int, dict[int, list[int]]]
    sparse: dict[int, dict[int, list[int]]] | None = None

    def scene(self, scene_id: int) -> Scene:
        for s in self.scenes:
            if s.scene_id == scene_id:
                return s
        raise KeyError(scene_id)

    def labels(self, kind: str = "full") -> dict[int, dict[int, list[int]]]:
        if kind == "full":
            return self.full
        if kind == "sparse":
            if self.sparse is None:
                raise ValueError(f"{self.split} split has no sparse labels")
            return self.sparse
        raise ValueError(f"unknown label kind {kind!r}")

    def label_boxes(self, scene_id: int, kind: str = "full") -> dict[int, list[BoxBEV]]:
        """World-frame label boxes per agent."""
        sc = self.scene(scene_id)
        return {aid: [sc.objects[o] for o in oids] for aid, oids in self.labels(kind)[scene_id].items()}

    def num_labels(self, kind: str = "full") -> int:
        return sum(len(v) for per_agent in self.labels(kind).values() for v in per_agent.values())


@dataclass(frozen=True)
class CorpusConfig:
    num_scenes: int = 64
    agents_min: int = 1
    agents_max: int = 3
    num_objects: int = 12
    range_spec: tuple[float, float, float, float] = (-32.0, 32.0, -32.0, 32.0)
    lidar: LidarConfig = LidarConfig()
    infra_prob: float = 0.3
    length_range: tuple[float, float] = (3.5, 5.5)
    width_range: tuple[float, float] = (1.6, 2.2)
    height_range: tuple[float, float] = (1.4, 1.8)
    agent_clearance: float = 3.0
    object_gap: float = 0.3
    agent_spread: float = 0.6      # agents live in the central fraction of the range
    max_retries: int = 50

    def __post_init__(self):
        if not 1 <= self.agents_min <= self.agents_max <= 5:
            raise ValueError("agents per scene must satisfy 1 <= min <= max <= 5")
        if self.num_scenes < 0:
            raise ValueError("num_scenes must be non-negative")


def _q(v: float) -> float:
    """Quantize to the 9 significant digits written to disk."""
    return float(f"{float(v):.9g}")


def _quantize_box(b: BoxBEV) -> BoxBEV:
    return BoxBEV(_q(b.cx), _q(b.cy), _q(b.length), _q(b.width), _q(b.yaw), _q(b.score), _q(b.z_center), _q(b.height))


def _quantize_pose(p: Pose) -> Pose:
    return Pose(*(_q(v) for v in p.as_tuple()))


# -------------------------------------------------------------------- lidar --

def sample_lidar(scene: Scene, agent: Agent, seed) -> PointCloud:
    """Planar ray cast from the agent against the scene's boxes (first hit wins).

    Every azimuth ray that hits a box emits one point per beam, spread evenly
    over the box height; points are returned in the agent's local frame.
    """
    cfg = agent.sensor
    ids = sorted(scene.objects)
    boxes = [scene.objects[i] for i in ids]
    arr = np.ascontiguousarray(boxes_to_array(boxes))
    pose = agent.pose
    az = np.arange(cfg.points_per_beam) * (2.0 * math.pi / cfg.points_per_beam) - math.pi
    world_az = az + pose.yaw
    dist, hit = kernels.raycast(pose.x, pose.y, np.ascontiguousarray(world_az), arr, cfg.max_range)
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, agent.id])
    rows = []
    hits = np.flatnonzero(hit >= 0)
    if len(hits):
        d = dist[hits]
        lx, ly = d * np.cos(az[hits]), d * np.sin(az[hits])
        zb = np.array([boxes[k].z_center - 0.5 * boxes[k].height for k in hit[hits]])
        hh = np.array([boxes[k].height for k in hit[hits]])
        frac = (np.arange(cfg.num_beams) + 0.5) / cfg.num_beams
        z = zb[:, None] + frac[None, :] * hh[:, None]
        inten = np.clip(1.0 - d / cfg.max_range, 0.0, 1.0)
        nb = cfg.num_beams
        rows.append(np.column_stack([np.repeat(lx, nb), np.repeat(ly, nb), z.ravel(), np.repeat(inten, nb)]))
    if cfg.ground_beams > 0:
        for b in range(cfg.ground_beams):
            r_b = cfg.max_range * (b + 1) / (cfg.ground_beams + 1)
            g = np.flatnonzero(dist > r_b)
            rows.append(np.column_stack([r_b * np.cos(az[g]), r_b * np.sin(az[g]), np.zeros(len(g)),
                                         np.full(len(g), 1.0 - r_b / cfg.max_range)]))
    pts = np.concatenate(rows) if rows else np.zeros((0, 4))
    if cfg.noise_sigma > 0 and len(pts):
        pts[:, :3] += rng.normal(0.0, cfg.noise_sigma, size=(len(pts), 3))
    if cfg.dropout_prob > 0 and len(pts):
        pts = pts[rng.random(len(pts)) >= cfg.dropout_prob]
    if len(pts):
        pts = pts[np.hypot(pts[:, 0], pts[:, 1]) <= cfg.max_range]
    return PointCloud(pts)


def points_per_object(scene: Scene, agent_id: int, margin: float | None = None) -> dict[int, int]:
    """Number of the agent's points falling inside each (slightly inflated) object box."""
    agent = scene.agent(agent_id)
    pts = scene.cloud(agent_id).points
    if margin is None:
        # returns sit on the box surface; allow for range noise
        margin = 0.1 + 3.0 * agent.sensor.noise_sigma
    p = agent.pose
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    wx = p.x + c * pts[:, 0] - s * pts[:, 1]
    wy = p.y + s * pts[:, 0] + c * pts[:, 1]
    out = {}
    for oid in sorted(scene.objects):
        b = scene.objects[oid]
        cb, sb = math.cos(b.yaw), math.sin(b.yaw)
        dx, dy = wx - b.cx, wy - b.cy
        lx = cb * dx + sb * dy
        ly = -sb * dx + cb * dy
        inside = (np.abs(lx) <= 0.5 * b.length + margin) & (np.abs(ly) <= 0.5 * b.width + margin)
        out[oid] = int(np.count_nonzero(inside))
    return out


# ------------------------------------------------------------------- corpus --

def _place_scene(cfg: CorpusConfig, rng: np.random.Generator, scene_id: int, lidar_seed: int) -> Scene:
    if cfg.num_objects <= 0:
        raise PlacementError("a scene needs at least one object")
    x0, x1, y0, y1 = cfg.range_spec
    cxm, cym = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    n_agents = int(rng.integers(cfg.agents_min, cfg.agents_max + 1))
    agents = []
    for i in range(n_agents):
        kind = AgentKind.VEHICLE if i == 0 or rng.random() >= cfg.infra_prob else AgentKind.INFRASTRUCTURE
        pose = Pose(cxm + rng.uniform(-0.5, 0.5) * cfg.agent_spread * (x1 - x0),
                    cym + rng.uniform(-0.5, 0.5) * cfg.agent_spread * (y1 - y0),
                    0.0, 0.0, 0.0, rng.uniform(-math.pi, math.pi))
        agents.append(Agent(i, kind, _quantize_pose(pose), cfg.lidar))
    agent_xy = np.array([[a.pose.x, a.pose.y] for a in agents])
    objects: dict[int, BoxBEV] = {}
    placed = np.zeros((0, 5))
    for oid in range(cfg.num_objects):
        for _ in range(200):
            length = rng.uniform(*cfg.length_range)
            width = rng.uniform(*cfg.width_range)
            height = rng.uniform(*cfg.height_range)
            box = BoxBEV(rng.uniform(x0, x1), rng.uniform(y0, y1), length, width,
                         rng.uniform(-math.pi, math.pi), 1.0, 0.5 * height, height)
            box = _quantize_box(box)
            if np.min(np.hypot(agent_xy[:, 0] - box.cx, agent_xy[:, 1] - box.cy)) < cfg.agent_clearance + 0.5 * length:
                continue
            grown = box.as_array()[None] + [0, 0, cfg.object_gap, cfg.object_gap, 0]
            if len(placed) and iou_matrix(grown, placed + [0, 0, cfg.object_gap, cfg.object_gap, 0]).max() > 0.0:
                continue
            objects[oid] = box
            placed = np.vstack([placed, box.as_array()])
            break
        else:
            raise PlacementError(f"could not place object {oid} of {cfg.num_objects} without overlap")
    return Scene(scene_id, agents, objects, tuple(cfg.range_spec), lidar_seed)


def generate_scene(cfg: CorpusConfig, seed: int, scene_index: int, scene_id: int | None = None) -> Scene:
    """One scene; depends only on (seed, scene_index)."""
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, scene_index])
    sid = scene_index if scene_id is None else scene_id
    last = None
    for _ in range(cfg.max_retries):
        lidar_seed = int(rng.integers(0, 2**31 - 1))
        scene = _place_scene(cfg, rng, sid, lidar_seed)
        if all(scene.visible_objects(a.id) for a in scene.agents):
            return scene
        last = scene
    raise PlacementError(f"scene {sid}: some agent sees no object after {cfg.max_retries} layouts"
                         f" (last layout had {len(last.objects) if last else 0} objects)")


def generate_corpus(cfg: CorpusConfig, seed: int, split: str = "train", first_id: int = 0) -> Dataset:
    """Deterministic synthetic dataset with full per-agent labels (every object)."""
    if cfg.num_objects <= 0:
        raise PlacementError("num_objects must be at least 1")
    scenes = [generate_scene(cfg, seed, i, first_id + i) for i in range(cfg.num_scenes)]
    full = {s.scene_id: {a.id: s.object_ids() for a in s.agents} for s in scenes}
    return Dataset(split, scenes, full)


# ------------------------------------------------------------------- labels --

def sparsify_labels(full: dict[int, list[int]], visible: dict[int, Iterable[int]] | None,
                    rng: np.random.Generator) -> dict[int, list[int]]:
    """Keep one label per agent, drawn uniformly from its visible labeled objects."""
    out = {}
    for aid in sorted(full):
        pool = sorted(full[aid]) if visible is None else sorted(set(full[aid]) & set(visible[aid]))
        if not pool:
            raise ValueError(f"agent {aid} has no visible labeled object to keep")
        out[aid] = [pool[int(rng.integers(len(pool)))]]
    return out


def sparsify(dataset: Dataset, seed: int, min_points: int = VISIBLE_MIN_POINTS) -> Dataset:
    """Attach sparse labels (one object per agent per scene) to a copy of ``dataset``."""
    sparse = {}
    for sc in dataset.scenes:
        rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, sc.scene_id])
        visible = {a.id: sc.visible_objects(a.id, min_points) for a in sc.agents}
        sparse[sc.scene_id] = sparsify_labels(dataset.full[sc.scene_id], visible, rng)
    return replace(dataset, sparse=sparse)


def sparse_ratio(full, sparse=None) -> float:
    """Percentage of labels kept: 100 * sparse / full.

    Accepts two label counts, or a dataset carrying both label sets, or two datasets.
    """
    if isinstance(full, Dataset):
        if sparse is None:
            n_full, n_sparse = full.num_labels("full"), full.num_labels("sparse")
        else:
            n_full = full.num_labels("full")
            n_sparse = sparse.num_labels("sparse" if sparse.sparse is not None else "full")
    else:
        n_full, n_sparse = int(full), int(sparse)
    if n_full <= 0:
        raise ValueError("no full labels")
    return 100.0 * n_sparse / n_full


# ---------------------------------------------------------------------- I/O --

def _fmt(v: float) -> str:
    return f"{float(v):.9g}"


def _box_fields(b: BoxBEV) -> str:
    return (f"cx={_fmt(b.cx)} cy={_fmt(b.cy)} length={_fmt(b.length)} width={_fmt(b.width)} "
            f"yaw={_fmt(b.yaw)} score={_fmt(b.score)} z={_fmt(b.z_center)} height={_fmt(b.height)}")


def _parse_kv(tokens: list[str]) -> dict[str, str]:
    out = {}
    for tok in tokens:
        k, _, v = tok.partition("=")
        out[k] = v
    return out


def _box_from(kv: dict[str, str]) -> BoxBEV:
    return BoxBEV(float(kv["cx"]), float(kv["cy"]), float(kv["length"]), float(kv["width"]),
                  float(kv["yaw"]), float(kv.get("score", 1.0)), float(kv.get("z", 0.0)),
                  float(kv.get("height", 1.5)))


def format_scene(scene: Scene, full: dict[int, list[int]] | None, sparse: dict[int, list[int]] | None) -> str:
    r = scene.range_spec
    lines = [f"scene schema_version={SCHEMA_VERSION} scene_id={scene.scene_id} lidar_seed={scene.lidar_seed} "
             f"range={','.join(_fmt(v) for v in r)}"]
    for a in scene.agents:
        p, c = a.pose, a.sensor
        lines.append(f"agent id={a.id} kind={a.kind.value} x={_fmt(p.x)} y={_fmt(p.y)} z={_fmt(p.z)} "
                     f"roll={_fmt(p.roll)} pitch={_fmt(p.pitch)} yaw={_fmt(p.yaw)} beams={c.num_beams} "
                     f"points_per_beam={c.points_per_beam} max_range={_fmt(c.max_range)} "
                     f"dropout={_fmt(c.dropout_prob)} noise={_fmt(c.noise_sigma)} ground_beams={c.ground_beams}")
    for oid in sorted(scene.objects):
        lines.append(f"object id={oid} {_box_fields(scene.objects[oid])}")
    for kind, labels in (("full", full), ("sparse", sparse)):
        if labels is None:
            continue
        for aid in sorted(labels):
            lines.append(f"labels kind={kind} agent={aid} objects={','.join(str(o) for o in labels[aid])}")
    lines.append("end")
    return "\n".join(lines) + "\n"


def parse_scenes(text: str):
    """Yield (scene, full, sparse) triples from scene-file text."""
    scene = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        head, *rest = line.split()
        kv = _parse_kv(rest)
        if head == "scene":
            version = int(kv.get("schema_version", -1))
            if version != SCHEMA_VERSION:
                raise ValueError(f"line {lineno}: unsupported schema_version {version}")
            rng_spec = tuple(float(v) for v in kv["range"].split(","))
            scene = (Scene(int(kv["scene_id"]), [], {}, rng_spec, int(kv["lidar_seed"])), {}, {})
        elif scene is None:
            raise ValueError(f"line {lineno}: {head!r} outside a scene block")
        elif head == "agent":
            pose = Pose(*(float(kv[k]) for k in ("x", "y", "z", "roll", "pitch", "yaw")))
            sensor = LidarConfig(int(kv["beams"]), int(kv["points_per_beam"]), float(kv["max_range"]),
                                 float(kv["dropout"]), float(kv["noise"]), int(kv.get("ground_beams", 0)))
            scene[0].agents.append(Agent(int(kv["id"]), AgentKind(kv["kind"]), pose, sensor))
        elif head == "object":
            scene[0].objects[int(kv["id"])] = _box_from(kv)
        elif head == "labels":
            target = scene[1] if kv["kind"] == "full" else scene[2]
            target[int(kv["agent"])] = [int(o) for o in kv["objects"].split(",") if o]
        elif head == "end":
            yield scene[0], scene[1], (scene[2] or None)
            scene = None
        else:
            raise ValueError(f"line {lineno}: unknown record {head!r}")
    if scene is not None:
        raise ValueError("truncated scene file (missing 'end')")


def save_dataset(dataset: Dataset, path) -> None:
    with open(path, "w") as fh:
        for sc in dataset.scenes:
            sparse = dataset.sparse.get(sc.scene_id) if dataset.sparse else None
            fh.write(format_scene(sc, dataset.full.get(sc.scene_id), sparse))


def load_dataset(path, split: str | None = None) -> Dataset:
    with open(path) as fh:
        text = fh.read()
    scenes, full, sparse = [], {}, {}
    for sc, f, s in parse_scenes(text):
        scenes.append(sc)
        full[sc.scene_id] = f
        if s is not None:
            sparse[sc.scene_id] = s
    if split is None:
        split = os.path.splitext(os.path.basename(str(path)))[0]
    return Dataset(split, scenes, full, sparse or None)


def dataset_paths(directory) -> dict[str, str]:
    return {split: os.path.join(directory, f"{split}.scenes") for split in ("train", "test")}


def load_split(directory, split: str) -> Dataset:
    return load_dataset(dataset_paths(directory)[split], split)
