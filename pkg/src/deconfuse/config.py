"""Run configuration: YAML file, ``DECONFUSE_*`` environment overrides, CLI flags.

Precedence is defaults < file < environment < flags.  Nested keys in the
environment use a double underscore, e.g. ``DECONFUSE_TRAIN__EPOCHS=50``.
Unknown keys are rejected at every level.
"""
from __future__ import annotations

import hashlib
import os
from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ConfigError
from .model import DEFAULT_LAYERS, LayerSpec
from .optimizer import TrainConfig

ENV_PREFIX = "DECONFUSE_"
SCHEMA_VERSION = 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LayerConfig(_Strict):
    out_channels: int = Field(ge=1)
    kernel_size: int = Field(ge=1)
    stride: int = Field(1, ge=1)
    padding: int = Field(0, ge=0)
    pool: Optional[tuple[int, int]] = None
    activation: Literal["selu", "relu", "identity"] = "identity"

    def spec(self) -> LayerSpec:
        return LayerSpec(self.out_channels, self.kernel_size, self.stride, self.padding, self.pool, self.activation)


def _default_layers() -> list[LayerConfig]:
    return [
        LayerConfig(
            out_channels=s.out_channels,
            kernel_size=s.kernel_size,
            stride=s.stride,
            padding=s.padding,
            pool=s.pool,
            activation=s.activation,
        )
        for s in DEFAULT_LAYERS
    ]


class ArchitectureConfig(_Strict):
    layers: list[LayerConfig] = Field(default_factory=_default_layers, min_length=1)
    alpha: float = Field(0.5, gt=0, le=1)


class TrainSection(_Strict):
    learning_rate: float = Field(0.001, gt=0)
    betas: tuple[float, float] = (0.9, 0.999)
    adam_epsilon: float = Field(1e-8, gt=0)
    weight_decay: float = Field(5e-5, ge=0)
    mu: float = Field(0.01, ge=0)
    lam: float = Field(0.01, ge=0)
    epochs: int = Field(500, ge=1)
    batch_size: Optional[int] = Field(None, ge=1)
    lr_overrides: dict[Literal["T", "X", "F", "Z"], float] = Field(default_factory=dict)
    feature_init: Literal["zeros", "inferred"] = "zeros"
    checkpoint_every: Optional[int] = Field(None, ge=1)

    def to_train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            betas=tuple(self.betas),
            adam_epsilon=self.adam_epsilon,
            weight_decay=self.weight_decay,
            mu=self.mu,
            lam=self.lam,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=seed,
            lr_overrides=dict(self.lr_overrides),
            feature_init=self.feature_init,
        )


class HeadsConfig(_Strict):
    ridge_alpha: float = Field(1.0, ge=0)
    ridge_cv: bool = False
    forest_trees: int = Field(5, ge=1)
    forest_depth: int = Field(3, ge=1)


class EvalConfig(_Strict):
    split_fraction: float = Field(0.9, gt=0, lt=1)
    capital0: float = Field(100_000.0, gt=0)
    charge: float = Field(10.0, ge=0)
    trading_days_per_year: int = Field(252, ge=1)


class RunConfig(_Strict):
    schema_version: Literal[1] = SCHEMA_VERSION
    data_dir: Optional[str] = None
    symbols: Optional[list[str]] = None
    window: int = Field(20, ge=2)
    architecture: ArchitectureConfig = Field(default_factory=ArchitectureConfig)
    train: TrainSection = Field(default_factory=TrainSection)
    heads: HeadsConfig = Field(default_factory=HeadsConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    seed: int = 0
    output_dir: str = "runs"
    workers: int = Field(1, ge=1)

    def layer_specs(self) -> list[LayerSpec]:
        return [l.spec() for l in self.architecture.layers]

    def symbol_seed(self, symbol: str) -> int:
        """Per-symbol seed from the master seed; independent of worker scheduling."""
        digest = hashlib.sha256(f"{self.seed}:{symbol}".encode()).digest()
        return int.from_bytes(digest[:4], "little")

    def dump(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=True)


def json_schema() -> dict:
    return RunConfig.model_json_schema()


def _set_path(d: dict, path: list[str], value: Any) -> None:
    for key in path[:-1]:
        d = d.setdefault(key, {})
        if not isinstance(d, dict):
            raise ConfigError(f"cannot override nested key under non-mapping {key!r}")
    d[path[-1]] = value


def env_overrides(environ: dict[str, str] | None = None) -> dict:
    environ = os.environ if environ is None else environ
    out: dict = {}
    for key, raw in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        path = [p.lower() for p in key[len(ENV_PREFIX) :].split("__")]
        _set_path(out, path, yaml.safe_load(raw))
    return out


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(
    path: str | Path | None = None,
    overrides: dict | None = None,
    environ: dict[str, str] | None = None,
) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from None
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError("config file must contain a mapping")
        data = loaded or {}
    data = _merge(data, env_overrides(environ))
    data = _merge(data, {k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None
