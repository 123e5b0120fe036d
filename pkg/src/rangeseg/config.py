"""Run configuration: one YAML file plus ``--set key=value`` overrides.

Unknown keys are errors at every level of the tree.
"""
from __future__ import annotations

import math
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .adaptation import TrainConfig
from .losses import LossConfig
from .network import segmenter_spec
from .range_image import GridConfig
from .synthgen import DomainConfig, SceneStats


class ConfigError(Exception):
    """Malformed or invalid configuration."""


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class GridSection(Strict):
    height: int = Field(32, ge=1)
    width: int = Field(128, ge=4)
    elevation_deg: tuple[float, float] = (-25.0, 3.0)
    azimuth_deg: tuple[float, float] = (-45.0, 45.0)

    def build(self) -> GridConfig:
        return GridConfig(self.height, self.width,
                          tuple(math.radians(v) for v in self.elevation_deg),
                          tuple(math.radians(v) for v in self.azimuth_deg))


class SceneSection(Strict):
    cars: tuple[int, int] = (2, 5)
    pedestrians: tuple[int, int] = (1, 3)
    cyclists: tuple[int, int] = (0, 2)
    clutter: tuple[int, int] = (2, 5)
    distance: tuple[float, float] = (5.0, 30.0)

    def build(self) -> SceneStats:
        return SceneStats(**self.model_dump())


class SensorSection(Strict):
    p_drop: float = Field(0.0, ge=0.0, le=1.0)
    intensity: Literal["none", "analytic", "bimodal"] = "none"
    jitter_deg: float = Field(0.0, ge=0.0)


class DataSection(Strict):
    train_count: int = Field(512, ge=1)
    test_count: int = Field(128, ge=1)
    test_start: int = Field(1_000_000, ge=0)
    workers: int = Field(1, ge=1)
    scene: SceneSection = SceneSection()
    source: SensorSection = SensorSection()
    target: SensorSection = SensorSection(p_drop=0.25, intensity="bimodal", jitter_deg=0.05)


class ModelSection(Strict):
    base: int = Field(16, ge=4)
    cam: bool = True
    cam_reduction: int = Field(4, ge=1)
    cam_pool: int = Field(7, ge=1)
    feature_layer: Optional[str] = None

    @field_validator("cam_pool")
    @classmethod
    def _odd(cls, v):
        if v % 2 == 0:
            raise ValueError("cam_pool must be odd")
        return v


class LossSection(Strict):
    gamma: float = Field(2.0, ge=0.0)
    lam: float = Field(10.0, ge=0.0)
    n_bins: int = Field(10, ge=2)
    epsilon_cov: float = Field(1e-5, gt=0.0)
    feature_rows: int = Field(1024, ge=2)
    regression_bin: Literal["true", "predicted"] = "true"

    def build(self) -> LossConfig:
        return LossConfig(**self.model_dump())


class TrainSection(Strict):
    lr: float = Field(0.02, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    batch_size: int = Field(8, ge=2)
    steps: int = Field(300, ge=0)
    grad_clip: Optional[float] = Field(5.0, gt=0.0)
    weight_decay: float = Field(0.0, ge=0.0)


class RendererSection(Strict):
    head: Literal["hybrid", "l2"] = "hybrid"
    base: int = Field(16, ge=4)
    train: TrainSection = TrainSection()


class CalibrationSection(Strict):
    enabled: bool = True
    count: int = Field(256, ge=1)
    batch_size: int = Field(16, ge=1)


class PathsSection(Strict):
    """Inputs consumed by the pipeline subcommands; relative paths resolve
    against the config file's directory."""

    source: Optional[str] = None
    target: Optional[str] = None
    test: Optional[str] = None
    model: Optional[str] = None
    renderer: Optional[str] = None
    predictions: Optional[str] = None


class NoiseSection(Strict):
    p_list: list[float] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
    trials: int = Field(100, ge=30)
    input_shape: tuple[int, int, int, int] = (1, 16, 32, 64)
    out_channels: int = Field(16, ge=1)

    @field_validator("p_list")
    @classmethod
    def _probs(cls, v):
        if any(not 0.0 <= p < 1.0 for p in v):
            raise ValueError("dropout probabilities must lie in [0, 1)")
        return v


class RunConfig(Strict):
    seed: int = 0
    run_name: Optional[str] = None
    grid: GridSection = GridSection()
    data: DataSection = DataSection()
    model: ModelSection = ModelSection()
    loss: LossSection = LossSection()
    train: TrainSection = TrainSection()
    renderer: RendererSection = RendererSection()
    calibration: CalibrationSection = CalibrationSection()
    paths: PathsSection = PathsSection()
    noise: NoiseSection = NoiseSection()

    # -- builders -----------------------------------------------------------
    def domain(self, which: str) -> DomainConfig:
        s: SensorSection = getattr(self.data, which)
        return DomainConfig(seed=self.seed, grid=self.grid.build(), scene=self.data.scene.build(),
                            p_drop=s.p_drop, intensity=s.intensity, jitter=math.radians(s.jitter_deg))

    def segmenter_spec(self):
        spec = segmenter_spec(self.grid.height, self.grid.width, self.model.base, self.model.cam,
                              cam_reduction=self.model.cam_reduction, cam_pool=self.model.cam_pool)
        if self.model.feature_layer:
            if self.model.feature_layer not in [layer["name"] for layer in spec.layers]:
                raise ConfigError(f"model.feature_layer {self.model.feature_layer!r} is not a layer of the segmenter")
            spec.feature_layer = self.model.feature_layer
        return spec

    def train_config(self, section: TrainSection | None = None, lam: float | None = None) -> TrainConfig:
        t = section or self.train
        loss = self.loss.build()
        if lam is not None:
            loss.lam = lam
        return TrainConfig(lr=t.lr, momentum=t.momentum, batch_size=t.batch_size, steps=t.steps, seed=self.seed,
                           grad_clip=t.grad_clip, weight_decay=t.weight_decay, loss=loss,
                           feature_layer=self.model.feature_layer)


def _set_path(tree: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        nxt = node.setdefault(k, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"--set {dotted}: {k!r} is not a section")
        node = nxt
    node[keys[-1]] = value


def parse_overrides(items: list[str]) -> list[tuple[str, object]]:
    out = []
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, raw = item.split("=", 1)
        if not key:
            raise ConfigError(f"override {item!r} has an empty key")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(f"override {item!r}: cannot parse value ({e.__class__.__name__})") from None
        out.append((key, value))
    return out


def load_config(path: str | Path | None, overrides: list[str] = ()) -> tuple[RunConfig, Path]:
    """Parse ``path`` (or defaults when None), apply overrides, validate.

    Returns the config and the directory relative paths resolve against.
    """
    tree: dict = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file {path} not found")
        try:
            loaded = yaml.safe_load(path.read_text())
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: invalid YAML: {e}") from None
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        tree = loaded
        base = path.resolve().parent
    for key, value in parse_overrides(list(overrides)):
        _set_path(tree, key, value)
    try:
        return RunConfig.model_validate(tree), base
    except ValidationError as e:
        first = e.errors()[0]
        loc = ".".join(str(p) for p in first["loc"])
        more = f" (+{e.error_count() - 1} more)" if e.error_count() > 1 else ""
        raise ConfigError(f"config key {loc}: {first['msg']}{more}") from None


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=True)
