"""Pipeline configuration and per-stage config hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigurationError

CACHE_ENV = "VIDLATTICE_CACHE"

DEFAULT_SCALES: tuple[tuple[int, int], ...] = ((3, 2), (4, 3), (7, 1))

OPERATOR_KINDS = ("vanilla_gcn", "cluster_gcn", "sgcn")
AGGREGATORS = ("mean", "max")
LOSS_KINDS = ("triplet", "contrastive")

# Fields that determine each artifact.  A stage hash covers its own fields
# plus everything upstream of it.
_FEATURE_FIELDS = (
    "backbone",
    "backbone_channels",
    "backbone_seed",
    "backbone_weights",
    "rate_hz",
    "max_frames",
)
_GRAPH_FIELDS = ("scales", "weighted")
_MODEL_FIELDS = (
    "operator_kind",
    "num_layers",
    "sgcn_power",
    "aggregator",
    "embed_dim",
    "loss_kind",
    "margin",
    "batch_size",
    "lr",
    "seed",
    "train_ratio",
    "val_fraction",
    "max_epochs",
    "patience",
)


@dataclass
class PipelineConfig:
    backbone: str = "vgg16"
    backbone_channels: int = 512
    backbone_seed: int = 0
    backbone_weights: str | None = None
    scales: list[tuple[int, int]] = field(default_factory=lambda: list(DEFAULT_SCALES))
    rate_hz: float = 1.0
    max_frames: int = 64
    weighted: bool = True
    dense_threshold: int = 2048
    operator_kind: str = "sgcn"
    num_layers: int = 1
    sgcn_power: int = 1
    aggregator: str = "mean"
    embed_dim: int = 512
    loss_kind: str = "triplet"
    margin: float = 0.5
    batch_size: int = 128
    lr: float = 1e-4
    seed: int = 0
    train_ratio: float = 1.0
    val_fraction: float = 0.1
    max_epochs: int = 100
    patience: int = 5
    cache_dir: str | None = None
    work_dir: str = "work"
    colormap: str = "jet"
    overlay_alpha: float = 0.5

    def __post_init__(self) -> None:
        self.scales = [tuple(int(v) for v in s) for s in self.scales]
        self.validate()

    def validate(self) -> None:
        if self.operator_kind not in OPERATOR_KINDS:
            raise ConfigurationError(f"operator_kind must be one of {OPERATOR_KINDS}, got {self.operator_kind!r}")
        if self.aggregator not in AGGREGATORS:
            raise ConfigurationError(f"aggregator must be one of {AGGREGATORS}, got {self.aggregator!r}")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigurationError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.rate_hz <= 0 or self.max_frames < 1:
            raise ConfigurationError("rate_hz must be > 0 and max_frames >= 1")
        if self.margin < 0:
            raise ConfigurationError("margin must be nonnegative")
        if self.num_layers < 1 or self.sgcn_power < 1 or self.embed_dim < 1 or self.batch_size < 1:
            raise ConfigurationError("num_layers, sgcn_power, embed_dim and batch_size must be positive")
        if not 0 < self.train_ratio <= 1:
            raise ConfigurationError("train_ratio must lie in (0, 1]")
        if not self.scales:
            raise ConfigurationError("at least one region scale is required")
        for window, stride in self.scales:
            if window < 1 or stride < 1:
                raise ConfigurationError(f"invalid scale (window={window}, stride={stride})")

    # -- (de)serialization -------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["scales"] = [list(s) for s in self.scales]
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path | None, overrides: dict[str, Any] | None = None) -> "PipelineConfig":
        """Defaults, then the JSON file, then ``overrides`` (CLI flags) win."""
        data: dict[str, Any] = {}
        if path is not None:
            try:
                data = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
            if not isinstance(data, dict):
                raise ConfigurationError(f"config {path} must hold a JSON object")
        data.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_dict(data)

    def replace(self, **changes: Any) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    # -- hashing -----------------------------------------------------------

    def _hash(self, names: tuple[str, ...]) -> str:
        d = self.to_dict()
        payload = json.dumps({k: d[k] for k in names}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()

    def feature_hash(self) -> str:
        return self._hash(_FEATURE_FIELDS)

    def graph_hash(self) -> str:
        return self._hash(_FEATURE_FIELDS + _GRAPH_FIELDS)

    def model_hash(self) -> str:
        return self._hash(_FEATURE_FIELDS + _GRAPH_FIELDS + _MODEL_FIELDS)

    def cache_root(self) -> Path:
        if self.cache_dir:
            return Path(self.cache_dir)
        env = os.environ.get(CACHE_ENV)
        if env:
            return Path(env)
        return Path(self.work_dir) / "cache"


def hash_bytes(hexdigest: str) -> bytes:
    """32-byte binary form of a config hash, as embedded in artifact files."""
    return bytes.fromhex(hexdigest)
