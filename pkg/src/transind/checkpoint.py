"""Checkpoint container and model construction from a run configuration."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from ._io import file_sha256, read_container, write_container
from .config import RunConfig, from_dict
from .model import JointModel

DTYPES = {"single": torch.float32, "double": torch.float64}


def set_deterministic(enabled: bool = True) -> None:
    """Single-threaded, deterministic kernels for bit-reproducible runs."""
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def build_model(cfg: RunConfig, seed: int | None = None) -> JointModel:
    if seed is not None:
        torch.manual_seed(seed)
    model = JointModel(cfg.model)
    return model.to(DTYPES[cfg.train.precision])


@dataclass
class Checkpoint:
    state: dict[str, np.ndarray]
    config: dict[str, Any]
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    rng_state: np.ndarray | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: torch.nn.Module, cfg: RunConfig, **kwargs) -> "Checkpoint":
        state = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
        return cls(state, cfg.to_dict(), rng_state=torch.get_rng_state().numpy().copy(),
                   **kwargs)

    @property
    def run_config(self) -> RunConfig:
        return from_dict(self.config)

    def build(self) -> JointModel:
        """Fresh model in eval mode carrying these weights."""
        model = build_model(self.run_config)
        model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in self.state.items()})
        return model.eval()

    def save(self, path: str | Path) -> Path:
        arrays = {f"state/{k}": v for k, v in self.state.items()}
        if self.rng_state is not None:
            arrays["rng_state"] = self.rng_state
        meta = {"config": self.config, "epoch": self.epoch, "history": self.history,
                "meta": self.meta, "state_keys": list(self.state)}
        return write_container(path, arrays, meta, kind="checkpoint")

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        arrays, meta = read_container(path, kind="checkpoint")
        state = {k: arrays[f"state/{k}"] for k in meta["state_keys"]}
        return cls(state, meta["config"], meta["epoch"], meta["history"],
                   arrays.get("rng_state"), meta["meta"])

    @staticmethod
    def digest(path: str | Path) -> str:
        return file_sha256(path)
