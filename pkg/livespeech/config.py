"""
Configuration management for livespeech package.
Handles loading configuration from files, environment variables, and defaults,
and builds the typed run configuration stored inside checkpoints.
"""

import copy
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional, Tuple

from .codec import CodecConfig
from .dataset import DatasetSpec
from .exceptions import ConfigError
from .loss import LossConfig
from .model import ModelConfig
from .sampler import SamplerConfig


@dataclass(frozen=True)
class OptimConfig:
    """Adam with linear warmup and cosine decay."""
    lr: float = 3e-3
    min_lr: float = 3e-4
    warmup_steps: int = 1000
    total_steps: int = 20000
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    batch_size: int = 4
    log_every: int = 50
    eval_every: int = 1000
    eval_utterances: int = 8

    def __post_init__(self):
        if self.lr <= 0 or self.min_lr < 0 or self.min_lr > self.lr:
            raise ConfigError(f"OptimConfig: need 0 <= min_lr <= lr and lr > 0, got lr={self.lr} min_lr={self.min_lr}")
        if self.total_steps < 1 or self.warmup_steps < 0 or self.batch_size < 1:
            raise ConfigError("OptimConfig: total_steps and batch_size must be positive, warmup_steps >= 0")
        if self.log_every < 1 or self.eval_every < 1:
            raise ConfigError("OptimConfig: log_every and eval_every must be positive")


@dataclass(frozen=True)
class PathsConfig:
    data_dir: str = "./data"
    codec_path: str = "./runs/codec.rvq"
    tokens_dir: str = "./runs/tokens"
    run_dir: str = "./runs/lm"


@dataclass(frozen=True)
class EvalConfig:
    enrollment_frames: Tuple[int, ...] = (225, 375)
    max_utterances: int = 16
    stream_frames: int = 150
    plots: bool = False

    def __post_init__(self):
        object.__setattr__(self, "enrollment_frames", tuple(int(v) for v in self.enrollment_frames))
        if not self.enrollment_frames or min(self.enrollment_frames) < 1:
            raise ConfigError("EvalConfig: enrollment_frames must be a non-empty list of positive lengths")


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines a run, given the dataset."""
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    codec: CodecConfig = field(default_factory=CodecConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "model": self.model.to_dict(),
            "loss": self.loss.to_dict(),
            "sampler": self.sampler.to_dict(),
            "optim": asdict(self.optim),
            "dataset": self.dataset.to_dict(),
            "codec": asdict(self.codec),
            "eval": {**asdict(self.eval), "enrollment_frames": list(self.eval.enrollment_frames)},
            "paths": asdict(self.paths),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        try:
            return cls(
                model=ModelConfig.from_dict(data["model"]),
                loss=LossConfig.from_dict(data["loss"]),
                sampler=SamplerConfig.from_dict(data["sampler"]),
                optim=OptimConfig(**data["optim"]),
                dataset=DatasetSpec.from_dict(data["dataset"]),
                codec=CodecConfig(**data["codec"]),
                eval=EvalConfig(**data["eval"]),
                paths=PathsConfig(**data["paths"]),
                seed=int(data["seed"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"RunConfig: invalid run configuration: {e}")


def _section_defaults() -> Dict[str, Dict[str, Any]]:
    run = RunConfig()
    sections = run.to_dict()
    del sections["seed"]
    # an empty group_of is recomputed from n_groups
    sections["model"]["group_of"] = []
    # the static-priority schedule follows the optimizer's step count
    del sections["loss"]["total_steps"]
    return sections


class Config:
    """Configuration manager for livespeech."""

    # Default configuration values
    DEFAULT_CONFIG: Dict[str, Any] = {
        **_section_defaults(),
        "seed": 0,
        "log_level": "INFO",
    }

    # Environment variable prefix
    ENV_PREFIX = "LIVESPEECH_"

    def __init__(self, config_file: Optional[str] = None, **kwargs):
        """
        Initialize configuration with defaults, file, environment, and overrides.

        Args:
            config_file: Optional path to configuration file
            **kwargs: Configuration overrides; a dict value updates a section
        """
        self.config = copy.deepcopy(self.DEFAULT_CONFIG)

        # Load from config file if provided or found
        config_path = config_file or self._find_config_file()
        if config_file and not os.path.exists(config_file):
            raise ConfigError(f"Config file not found: {config_file}")
        if config_path and os.path.exists(config_path):
            self._load_config_file(config_path)

        # Override with environment variables
        self._load_env_vars()

        # Override with provided kwargs
        self.update(kwargs)

    def _find_config_file(self) -> Optional[str]:
        """Find configuration file in standard locations."""
        possible_paths = [
            "livespeech_config.json",
            os.path.expanduser("~/.livespeech/config.json"),
            os.path.expanduser("~/.config/livespeech/config.json")
        ]

        for path in possible_paths:
            if os.path.exists(path):
                return path
        return None

    def _load_config_file(self, config_path: str):
        """Load configuration from JSON file."""
        try:
            with open(config_path, 'r', encoding='utf-8') as f:
                file_config = json.load(f)
        except (json.JSONDecodeError, IOError) as e:
            raise ConfigError(f"Could not load config file {config_path}: {e}")
        if not isinstance(file_config, dict):
            raise ConfigError(f"Config file {config_path} must contain a JSON object")
        self.update(file_config, source=config_path)

    def _coerce(self, default: Any, value: str, env_key: str) -> Any:
        try:
            if isinstance(default, bool):
                return value.lower() in ('true', '1', 'yes', 'on')
            if isinstance(default, int):
                return int(value)
            if isinstance(default, float):
                return float(value)
            if isinstance(default, list):
                # empty list defaults (group_of) hold integers
                cast = type(default[0]) if default else int
                return [cast(item) for item in value.split(',') if item.strip()]
            if default is None:
                return None if value.lower() in ('', 'none', 'null') else float(value)
        except ValueError:
            raise ConfigError(f"Invalid value for {env_key}: {value}")
        return value

    def _load_env_vars(self):
        """Load configuration from environment variables (LIVESPEECH_<SECTION>_<KEY>)."""
        for key, default in self.DEFAULT_CONFIG.items():
            if isinstance(default, dict):
                for sub_key, sub_default in default.items():
                    env_key = f"{self.ENV_PREFIX}{key.upper()}_{sub_key.upper()}"
                    env_value = os.getenv(env_key)
                    if env_value is not None:
                        self.config[key][sub_key] = self._coerce(sub_default, env_value, env_key)
            else:
                env_key = f"{self.ENV_PREFIX}{key.upper()}"
                env_value = os.getenv(env_key)
                if env_value is not None:
                    self.config[key] = self._coerce(default, env_value, env_key)

    def get(self, key: str, default: Any = None) -> Any:
        """Get configuration value; "section.key" reaches into a section."""
        if "." in key:
            section, sub_key = key.split(".", 1)
            return self.config.get(section, {}).get(sub_key, default)
        return self.config.get(key, default)

    def set(self, key: str, value: Any):
        """Set configuration value; "section.key" reaches into a section."""
        if "." in key:
            section, sub_key = key.split(".", 1)
            self.update({section: {sub_key: value}})
        else:
            self.update({key: value})

    def update(self, updates: Dict[str, Any], source: str = "overrides"):
        """Update multiple configuration values, rejecting unknown keys."""
        for key, value in updates.items():
            if key.startswith("_"):
                continue
            if key not in self.DEFAULT_CONFIG:
                raise ConfigError(f"Unknown configuration key {key!r} in {source}")
            if isinstance(self.DEFAULT_CONFIG[key], dict):
                if not isinstance(value, dict):
                    raise ConfigError(f"Configuration section {key!r} in {source} must be an object")
                unknown = sorted(set(value) - set(self.DEFAULT_CONFIG[key]))
                if unknown:
                    raise ConfigError(f"Unknown keys {unknown} in section {key!r} of {source}")
                self.config[key].update(value)
            else:
                self.config[key] = value

    def to_dict(self) -> Dict[str, Any]:
        """Return configuration as dictionary."""
        return copy.deepcopy(self.config)

    def save(self, config_path: str):
        """Save current configuration to file."""
        directory = os.path.dirname(config_path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(config_path, 'w', encoding='utf-8') as f:
            json.dump(self.config, f, indent=2)

    def run_config(self) -> RunConfig:
        """Typed view of the configuration."""
        cfg = self.config
        optim = OptimConfig(**cfg["optim"])
        return RunConfig.from_dict({
            "model": cfg["model"],
            "loss": {**cfg["loss"], "total_steps": optim.total_steps},
            "sampler": cfg["sampler"],
            "optim": cfg["optim"],
            "dataset": cfg["dataset"],
            "codec": cfg["codec"],
            "eval": cfg["eval"],
            "paths": cfg["paths"],
            "seed": cfg["seed"],
        })
