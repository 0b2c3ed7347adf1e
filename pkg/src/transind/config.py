"""Layered run configuration: defaults < config file < ``section.key=value`` overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any


@dataclass
class DataConfig:
    patch_size: int = 256
    overlap: int = 128


@dataclass
class ModelConfig:
    backbone_widths: tuple[int, int, int] = (32, 64, 256)
    mask_dim: int = 16  # channels per mask-encoding head
    mask_widths: tuple[int, int, int] = (16, 32, 64)
    n_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ff_mult: int = 2
    tau: float = 1.0 / 30.0  # multiplies attention logits
    positional: bool = True
    kernel_size: int = 3
    lam: float = 1e-2
    learn_lambda: bool = False
    detach_inner_targets: bool = True
    train_steps: int = 5
    infer_steps: int = 10
    apply_to: str = "target"
    decoder_widths: tuple[int, int, int] = (64, 32, 16)
    use_transduction: bool = True
    use_induction: bool = True


@dataclass
class TrainConfig:
    n_templates: int = 5
    n_targets: int = 5
    lr: float = 1e-4
    weight_decay: float = 1e-4
    epochs: int = 10
    episodes_per_epoch: int | None = None  # None: ceil(train patches / n_targets)
    loss_weight_inner: float = 1.0
    seed: int = 0
    val_fraction: float = 0.1
    precision: str = "single"
    augmentation: bool = True
    episode_grouping: str | None = None  # None | "parent"
    val_templates_seed: int = 0

    def __post_init__(self):
        if not 0 < self.val_fraction <= 0.5:
            raise ValueError("val_fraction must lie in (0, 0.5]")
        if self.precision not in ("single", "double"):
            raise ValueError("precision must be 'single' or 'double'")
        for name in ("n_templates", "n_targets", "lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class StageConfig:
    stage: int = 1
    n_templates: int = 5
    k_candidates: int = 20
    exclude_self: bool = True
    template_seed: int = 0
    binarize_threshold: float = 0.5

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.stage == 2 and self.n_templates > self.k_candidates:
            raise ValueError("n_templates must not exceed k_candidates")


@dataclass
class MetricConfig:
    iou_thresh: float = 0.5
    f1_mode: str = "object"  # or "pixel"


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    stage: StageConfig = field(default_factory=StageConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    seed: int = 0
    deterministic: bool = False
    output_dir: str = "runs"

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def _build(cls, data: dict[str, Any]):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise KeyError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name) if name in known else None
        if is_dataclass(default) and isinstance(value, dict):
            value = _build(type(default), value)
        elif isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict[str, Any], cls=RunConfig):
    return _build(cls, data)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    data: dict[str, Any] = RunConfig().to_dict()
    if path is not None:
        _merge(data, json.loads(Path(path).read_text()))
    for item in overrides or []:
        if "=" not in item:
            raise KeyError(f"override {item!r} is not of the form section.key=value")
        key, text = item.split("=", 1)
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise KeyError(f"unknown config section {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise KeyError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(text)
    return from_dict(data)


def _merge(base: dict, update: dict) -> None:
    for k, v in update.items():
        if k not in base:
            raise KeyError(f"unknown config key {k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v)
        else:
            base[k] = v
