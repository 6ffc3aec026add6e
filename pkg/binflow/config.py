"""
Run configuration.

Every section is a pydantic model with the invariants checked on construction;
``RunConfig`` layers them as built-in defaults < key=value config file <
``BINFLOW_*`` environment variables < explicit overrides.
"""

import hashlib
import json
import os
from contextvars import ContextVar
from typing import Any, Dict, Iterable, List, Literal, Mapping, Optional, Tuple

from dotenv import dotenv_values
from pydantic import BaseModel, Field, field_validator, model_validator
from pydantic.fields import FieldInfo
from pydantic_settings import BaseSettings, PydanticBaseSettingsSource, SettingsConfigDict

from binflow.utils.normalizer import parse_rules


def _split_ints(value):
    if isinstance(value, str):
        return [int(part) for part in value.replace(" ", "").split(",") if part]
    return value


class ModelConfig(BaseModel):
    dim: int = Field(64, gt=0)
    layers: int = Field(4, gt=0)
    heads: int = Field(4, gt=0)
    ffn_mult: int = Field(4, gt=0)
    dropout: float = Field(0.1, ge=0.0, lt=1.0)
    max_positions: int = Field(512, gt=1)
    tie_output: bool = False

    @model_validator(mode="after")
    def check_heads(self):
        if self.dim % self.heads:
            raise ValueError(f"model.dim={self.dim} is not divisible by model.heads={self.heads}")
        return self


class FlowConfig(BaseModel):
    variant: Literal["scf", "glow", "none"] = "scf"
    count: int = Field(3, gt=0)
    hidden: Optional[int] = Field(None, gt=0)
    scale_bound: float = Field(4.0, gt=0.0)

    @property
    def label(self) -> str:
        return "none" if self.variant == "none" else f"{self.count}-{self.variant}"


class BpeConfig(BaseModel):
    merge_count: int = Field(10000, ge=0)
    candidates: List[int] = Field(default_factory=lambda: [1000, 2000, 5000, 10000, 20000])
    mode: Literal["joint", "separate"] = "joint"
    min_frequency: int = Field(2, ge=1)
    max_discrepancy: float = Field(0.15, gt=0.0, le=1.0)
    max_size: int = Field(12000, gt=0)
    max_length: int = Field(512, gt=2)

    @field_validator("candidates", mode="before")
    @classmethod
    def split_candidates(cls, value):
        return _split_ints(value)


class MaskConfig(BaseModel):
    rate: float = Field(0.15, ge=0.0, le=1.0)
    mask_split: float = Field(0.8, ge=0.0, le=1.0)
    random_split: float = Field(0.1, ge=0.0, le=1.0)
    keep_split: float = Field(0.1, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def check_splits(self):
        total = self.mask_split + self.random_split + self.keep_split
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"mask splits must sum to 1, got {total}")
        return self


class NoiseConfig(BaseModel):
    swap_fraction: float = Field(0.1, ge=0.0, le=1.0)


class TrainingConfig(BaseModel):
    batch_size: int = Field(256, gt=0)
    accumulate: int = Field(8, gt=0)
    max_steps: int = Field(100000, ge=0)
    pretrain_steps: int = Field(5000, ge=0)
    loss_stop: float = Field(0.3, gt=0.0)
    ema_decay: float = Field(0.99, ge=0.0, lt=1.0)
    lambda_dae: float = Field(1.0, ge=0.0)
    lambda_bt: float = Field(1.0, ge=0.0)
    lambda_mle: float = Field(1.0, ge=0.0)
    lr: float = Field(1e-4, gt=0.0)
    warmup: int = Field(4000, ge=0)
    max_grad_norm: float = Field(5.0, gt=0.0)
    checkpoint_every: int = Field(1000, gt=0)
    dae_cross_encoder: bool = False
    decode_mode: Literal["greedy", "beam"] = "greedy"
    beam_width: int = Field(4, gt=0)
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    mask: MaskConfig = Field(default_factory=MaskConfig)


class DetectorConfig(BaseModel):
    hidden: int = Field(16, gt=0)
    layers: int = Field(2, gt=0)
    batch_size: int = Field(36, gt=0)
    epochs: int = Field(20, gt=0)
    lr: float = Field(1e-3, gt=0.0)
    window: int = Field(4096, gt=0)
    aggregate: Literal["max", "mean"] = "max"
    test_mode: Literal["split", "all"] = "split"
    test_fraction: float = Field(0.2, gt=0.0, lt=1.0)


class ToyConfig(BaseModel):
    count: int = Field(20000, gt=0)
    heldout: int = Field(500, ge=0)
    min_ops: int = Field(3, gt=0)
    max_ops: int = Field(20, gt=0)
    malicious_fraction: float = Field(0.5, ge=0.0, le=1.0)
    pattern_rate: float = Field(0.1, ge=0.0, le=1.0)
    binaries: int = Field(400, gt=0)
    max_blocks: int = Field(4, gt=0)

    @model_validator(mode="after")
    def check_ops(self):
        if self.min_ops > self.max_ops:
            raise ValueError(f"toy.min_ops={self.min_ops} exceeds toy.max_ops={self.max_ops}")
        return self


_config_file: ContextVar[Optional[str]] = ContextVar("binflow_config_file", default=None)


def nest_dotted(flat: Mapping[str, Any]) -> Dict[str, Any]:
    """Turn ``{"train.batch_size": "32"}`` into ``{"train": {"batch_size": "32"}}``."""
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        if value is None:
            continue
        parts = key.strip().split(".")
        node = nested
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValueError(f"Config key '{key}' conflicts with a scalar value")
        node[parts[-1]] = value
    return nested


class KeyValueFileSource(PydanticBaseSettingsSource):
    """Line-oriented ``key=value`` file with ``#`` comments and dotted section keys."""

    def get_field_value(self, field: FieldInfo, field_name: str) -> Tuple[Any, str, bool]:
        return None, field_name, False

    def __call__(self) -> Dict[str, Any]:
        path = _config_file.get()
        if not path:
            return {}
        return nest_dotted(dotenv_values(path, encoding="utf-8"))


class RunConfig(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="BINFLOW_", env_nested_delimiter="__", extra="forbid")

    seed: int = 0
    src_isa: str = "toy-a"
    tgt_isa: str = "toy-b"
    rules: str = "C1"
    manifest: str = "run.manifest"
    model: ModelConfig = Field(default_factory=ModelConfig)
    flow: FlowConfig = Field(default_factory=FlowConfig)
    bpe: BpeConfig = Field(default_factory=BpeConfig)
    train: TrainingConfig = Field(default_factory=TrainingConfig)
    detector: DetectorConfig = Field(default_factory=DetectorConfig)
    toy: ToyConfig = Field(default_factory=ToyConfig)

    @field_validator("rules")
    @classmethod
    def check_rules(cls, value: str) -> str:
        parse_rules(value)
        return value

    @classmethod
    def settings_customise_sources(cls, settings_cls, init_settings, env_settings, dotenv_settings, file_secret_settings):
        return init_settings, env_settings, KeyValueFileSource(settings_cls)

    @property
    def isas(self) -> Tuple[str, str]:
        return self.src_isa, self.tgt_isa


def parse_overrides(items: Optional[Iterable[str]]) -> Dict[str, Any]:
    flat = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"Override '{item}' is not of the form key=value")
        flat[key.strip()] = value.strip()
    return nest_dotted(flat)


def load_run_config(config_file: Optional[str] = None, overrides: Optional[Iterable[str]] = None, **explicit) -> RunConfig:
    """
    Resolve the layered configuration.

    :param config_file: optional key=value file
    :param overrides: ``key=value`` strings (``--set``), dotted keys address sections
    :param explicit: top-level values from dedicated command-line flags
    """
    if config_file and not os.path.exists(config_file):
        raise FileNotFoundError(f"Config file not found: {config_file}")
    values = parse_overrides(overrides)
    values.update({k: v for k, v in explicit.items() if v is not None})
    token = _config_file.set(config_file)
    try:
        return RunConfig(**values)
    finally:
        _config_file.reset(token)


def config_hash(config: BaseModel) -> str:
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
