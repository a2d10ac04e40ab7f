"""Experiment specification and its sectioned key=value file format."""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, fields, replace

from .collab import FusionKind
from .mae import MaeConfig
from .mining import MiningConfig, TrainConfig
from .pillars import GridConfig
from .scene import CorpusConfig

SCHEMA_VERSION = 1
ALL_REGIMES = ("full", "sparse_scratch", "ssc3od", "ssc3od_scratch")
TEST_SEED_OFFSET = 10_000
TEST_FIRST_ID = 100_000


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _words(text: str) -> tuple[str, ...]:
    return tuple(t for t in text.replace(",", " ").split())


def _opt_float(text: str) -> float | None:
    return None if text.strip().lower() in ("none", "") else float(text)


@dataclass(frozen=True)
class ExperimentSpec:
    fusions: tuple[str, ...] = ("maxout",)
    regimes: tuple[str, ...] = ("full", "sparse_scratch", "ssc3od")
    seeds: tuple[int, ...] = (1, 2, 3)
    train_scenes: int = 64
    test_scenes: int = 48
    num_objects: int = 12
    agents_min: int = 1
    agents_max: int = 3
    scene_half_range: float = 32.0
    grid_half_range: float = 32.0
    voxel: float = 0.4
    epochs: int = 10
    lr: float = 1e-3
    batch: int = 2
    dtype: str = "float32"
    encoder_std: float | None = 0.1
    mae_epochs: int = 25
    r_m: float = 0.7
    tau_cls: float = 0.3
    tau_iou: float = 0.15

    def __post_init__(self):
        for f in self.fusions:
            try:
                FusionKind(f)
            except ValueError:
                raise ConfigError(f"unknown fusion {f!r}") from None
        for r in self.regimes:
            if r not in ALL_REGIMES:
                raise ConfigError(f"unknown regime {r!r} (choose from {', '.join(ALL_REGIMES)})")
        if not self.fusions or not self.regimes or not self.seeds:
            raise ConfigError("fusions, regimes and seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("duplicate seeds")
        if self.train_scenes < 1 or self.test_scenes < 1:
            raise ConfigError("both splits need at least one scene")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, not {self.dtype!r}")
        if not 0.0 <= self.r_m <= 1.0:
            raise ConfigError(f"r_m {self.r_m} outside [0, 1]")
        try:
            self.grid()
            self.corpus()
            self.mining()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    # -- derived configurations -------------------------------------------
    def grid(self) -> GridConfig:
        h = self.grid_half_range
        return GridConfig(-h, h, -h, h, self.voxel, self.voxel)

    def corpus(self, test: bool = False) -> CorpusConfig:
        h = self.scene_half_range
        return CorpusConfig(num_scenes=self.test_scenes if test else self.train_scenes, agents_min=self.agents_min,
                            agents_max=self.agents_max, num_objects=self.num_objects, range_spec=(-h, h, -h, h))

    def train(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, lr=self.lr, batch=self.batch, dtype=self.dtype, grid=self.grid(),
                           encoder_std=self.encoder_std)

    def mining(self) -> MiningConfig:
        return MiningConfig(tau_cls=self.tau_cls, tau_iou=self.tau_iou, epochs=self.epochs)

    def mae(self) -> MaeConfig:
        return MaeConfig(r_m=self.r_m, epochs=self.mae_epochs, grid=self.grid(), dtype=self.dtype)

    def needs_mae(self) -> bool:
        return "ssc3od" in self.regimes

    def with_overrides(self, **kw) -> "ExperimentSpec":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


# section -> [(key, parser)]; keys are ExperimentSpec field names
_LAYOUT = {
    "experiment": [("fusions", _words), ("regimes", _words), ("seeds", _ints)],
    "corpus": [("train_scenes", int), ("test_scenes", int), ("num_objects", int), ("agents_min", int),
               ("agents_max", int), ("scene_half_range", float)],
    "grid": [("grid_half_range", float), ("voxel", float)],
    "train": [("epochs", int), ("lr", float), ("batch", int), ("dtype", str), ("encoder_std", _opt_float)],
    "mae": [("mae_epochs", int), ("r_m", float)],
    "mining": [("tau_cls", float), ("tau_iou", float)],
}


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    if v is None:
        return "none"
    return repr(v) if isinstance(v, float) else str(v)


def format_spec(spec: ExperimentSpec) -> str:
    out = io.StringIO()
    out.write(f"[experiment]\nschema_version = {SCHEMA_VERSION}\n")
    for section, keys in _LAYOUT.items():
        if section != "experiment":
            out.write(f"\n[{section}]\n")
        for key, _ in keys:
            out.write(f"{key} = {_fmt(getattr(spec, key))}\n")
    return out.getvalue()


def parse_spec(text: str) -> ExperimentSpec:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    if not cp.has_section("experiment"):
        raise ConfigError("missing [experiment] section")
    version = cp.get("experiment", "schema_version", fallback=None)
    if version is None or version.strip() != str(SCHEMA_VERSION):
        raise ConfigError(f"unsupported schema_version {version!r}")
    known = {f.name for f in fields(ExperimentSpec)}
    values = {}
    for section in cp.sections():
        if section not in _LAYOUT:
            raise ConfigError(f"unknown section [{section}]")
        parsers = dict(_LAYOUT[section])
        for key, raw in cp.items(section):
            if section == "experiment" and key == "schema_version":
                continue
            if key not in parsers or key not in known:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            try:
                values[key] = parsers[key](raw)
            except ValueError:
                raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return ExperimentSpec(**values)


def load_spec(path) -> ExperimentSpec:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_spec(fh.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
