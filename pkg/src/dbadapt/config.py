"""Experiment configuration: one JSON document, validated before any run."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .data import DataConfig
from .he import EncryptionParams
from .kernels import KernelConfig
from .transformer import DistillConfig, ModelConfig

SBS_MODES = ("off", "plain", "constrained")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int = 3
    rounds: int = 50
    batch_size: int = 16
    dirichlet_alpha: float = 1.0
    permutation: bool = True
    sbs: str = "plain"
    noise_multiplier: float = 30.0
    lr: float = 0.02
    lr_schedule: bool = True
    local_steps: int = 10
    adapter_rank: Optional[int] = None

    def __post_init__(self):
        if self.num_clients < 1 or self.rounds < 0 or self.batch_size < 1 or self.local_steps < 1:
            raise ValueError("num_clients, batch_size, local_steps must be >= 1 and rounds >= 0")
        if not self.dirichlet_alpha > 0:
            raise ValueError("dirichlet_alpha must be positive")
        if self.sbs not in SBS_MODES:
            raise ValueError(f"sbs must be one of {SBS_MODES}")
        if not self.lr > 0 or not self.noise_multiplier > 0:
            raise ValueError("lr and noise_multiplier must be positive")

    def defenses_off(self) -> "FederationConfig":
        return replace(self, permutation=False, sbs="off")


@dataclass(frozen=True)
class AttackConfig:
    batch_size: int = 8
    seeds: int = 10
    use_sbs: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.seeds < 1:
            raise ValueError("attack batch_size and seeds must be >= 1")


@dataclass(frozen=True)
class BenchConfig:
    ir_shape: tuple = (577, 768)
    dtype: str = "float32"
    # reference sizes in MB (10^6 bytes) to compare against
    reference_plain_mb: float = 6.21
    reference_cipher_mb: float = 17.33

    def __post_init__(self):
        object.__setattr__(self, "ir_shape", tuple(int(v) for v in self.ir_shape))
        if not self.ir_shape or min(self.ir_shape) < 1:
            raise ValueError("ir_shape must be non-empty and positive")
        if self.dtype not in ("float16", "float32", "float64"):
            raise ValueError("dtype must be float16, float32 or float64")


_SECTIONS = {
    "model": ModelConfig,
    "kernels": KernelConfig,
    "distill": DistillConfig,
    "data": DataConfig,
    "federation": FederationConfig,
    "he": EncryptionParams,
    "attack": AttackConfig,
    "bench": BenchConfig,
}


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    kernels: KernelConfig = field(default_factory=KernelConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    data: DataConfig = field(default_factory=DataConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    he: EncryptionParams = field(default_factory=EncryptionParams)
    attack: AttackConfig = field(default_factory=AttackConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    seed: int = 0
    output_dir: str = "runs"

    def to_dict(self) -> dict:
        out = {}
        for name in _SECTIONS:
            d = asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        out["seed"] = self.seed
        out["output_dir"] = self.output_dir
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = set(_SECTIONS) | {"seed", "output_dir"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for name, typ in _SECTIONS.items():
            section = d.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"section {name!r} must be an object")
            allowed = {f.name for f in fields(typ)}
            bad = set(section) - allowed
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
            section = {k: tuple(v) if isinstance(v, list) else v for k, v in section.items()}
            try:
                kwargs[name] = typ(**section)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid {name!r} section: {exc}") from None
        seed = d.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        cfg = cls(**kwargs, seed=seed, output_dir=str(d.get("output_dir", "runs")))
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())

    def validate(self) -> None:
        """Cross-section checks; per-section invariants run at construction."""
        r = self.federation.adapter_rank
        if r is not None and not 1 <= r < self.model.model_dim:
            raise ConfigError("adapter_rank must satisfy 1 <= r < model_dim")
        if self.federation.num_clients > self.data.num_train:
            raise ConfigError("more clients than training samples")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed)
