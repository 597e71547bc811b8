"""
Experiment configuration for flexprompt.

ExperimentConfig bundles everything a run needs: the model
hyperparameters, the protocol draw per split, the dataset source, the
optimizer, seeds and variant flags. Configs round-trip through canonical
JSON, and the SHA-256 of that JSON keys checkpoints and the sweep cache.
"""

import difflib
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Union

from data_manager import canonical_json
from data_structures import ModelConfig, ProtocolSetting, ProtocolSpec
from validation import ConfigValidator, ConfigurationError, ValidationResult

logger = logging.getLogger(__name__)

CACHE_ENV_VAR = "FLEXPROMPT_CACHE"
DEFAULT_CACHE_DIR = ".flexprompt_cache"
SPLITS = ("train", "dev", "test")
# Runtime locations, excluded from the config hash
HASH_EXCLUDED = ("output_dir", "cache_dir")


@dataclass
class DatasetConfig:
    source: str = "synthetic"           # "synthetic" or "directory"
    root: Optional[str] = None
    manifest: Optional[str] = None
    n_train: int = 64
    n_dev: int = 32
    n_test: int = 32
    seed: int = 0
    domain_shift: float = 0.0
    target_domain_shift: float = 0.5    # target domain for cross-testing
    ir_mode: str = "passthrough"


@dataclass
class OptimizerConfig:
    method: str = "adam"
    lr: float = 2e-4
    weight_decay: float = 5e-3
    batch_size: int = 16


@dataclass
class ExperimentConfig:
    """Resolved configuration of one training/evaluation run."""
    model: ModelConfig = field(default_factory=ModelConfig)
    protocol: ProtocolSpec = field(default_factory=lambda: ProtocolSpec(ProtocolSetting.RGBDIR_OVERLAP, 0.0, 0))
    split_protocols: Dict[str, ProtocolSpec] = field(default_factory=dict)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 40
    seed: int = 0
    variant: str = "full"
    use_mmr: bool = True
    mmr_stop_gradient: bool = True
    finetune_last_block: bool = False
    threshold_rule: str = "eer"
    bpcer_target: float = 0.01
    eval_mode: str = "intra"
    select: str = "best"
    pretrained: Optional[str] = None
    dtype: str = "float32"
    output_dir: str = "runs/default"
    cache_dir: Optional[str] = None

    def protocol_for(self, split: str) -> ProtocolSpec:
        """Explicit per-split spec, or the shared spec (seeds are derived per split downstream)."""
        return self.split_protocols.get(split, self.protocol)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["protocol"] = self.protocol.to_dict()
        data["split_protocols"] = {k: v.to_dict() for k, v in sorted(self.split_protocols.items())}
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ExperimentConfig':
        """
        Build a config from a (possibly partial) dictionary.

        Raises:
            ConfigurationError: Unknown keys at any level, with close-match suggestions
        """
        _reject_unknown(data, cls, "")
        kwargs = {k: v for k, v in data.items() if k not in ("model", "protocol", "split_protocols", "dataset", "optimizer")}
        if "model" in data:
            _reject_unknown(data["model"], ModelConfig, "model.")
            kwargs["model"] = ModelConfig.from_dict(data["model"])
        if "protocol" in data:
            kwargs["protocol"] = _protocol(data["protocol"])
        if "split_protocols" in data:
            unknown = set(data["split_protocols"]) - set(SPLITS)
            if unknown:
                raise ConfigurationError(f"Unknown split(s) in split_protocols: {', '.join(sorted(unknown))}")
            kwargs["split_protocols"] = {k: _protocol(v) for k, v in data["split_protocols"].items()}
        if "dataset" in data:
            _reject_unknown(data["dataset"], DatasetConfig, "dataset.")
            kwargs["dataset"] = DatasetConfig(**data["dataset"])
        if "optimizer" in data:
            _reject_unknown(data["optimizer"], OptimizerConfig, "optimizer.")
            kwargs["optimizer"] = OptimizerConfig(**data["optimizer"])
        return cls(**kwargs)

    def validate(self) -> ValidationResult:
        result = ConfigValidator.validate_model_config(self.model)
        if not result.is_valid:
            return result
        for split in SPLITS:
            result = ConfigValidator.validate_protocol_spec(self.protocol_for(split))
            if not result.is_valid:
                return result
        checks = [
            (self.dataset.source in ("synthetic", "directory"),
             f"dataset.source must be 'synthetic' or 'directory', got '{self.dataset.source}'"),
            (self.dataset.source != "directory" or bool(self.dataset.root and self.dataset.manifest),
             "dataset.root and dataset.manifest are required for directory datasets"),
            (self.optimizer.method == "adam", f"Only the 'adam' optimizer is supported, got '{self.optimizer.method}'"),
            (self.optimizer.lr > 0, f"optimizer.lr must be positive, got {self.optimizer.lr}"),
            (self.optimizer.weight_decay >= 0, "optimizer.weight_decay must be >= 0"),
            (self.optimizer.batch_size >= 1, "optimizer.batch_size must be >= 1"),
            (self.epochs >= 1, f"epochs must be >= 1, got {self.epochs}"),
            (self.threshold_rule in ("eer", "bpcer"), f"threshold_rule must be 'eer' or 'bpcer', got '{self.threshold_rule}'"),
            (0.0 < self.bpcer_target < 1.0, f"bpcer_target must lie in (0, 1), got {self.bpcer_target}"),
            (self.eval_mode in ("intra", "cross"), f"eval_mode must be 'intra' or 'cross', got '{self.eval_mode}'"),
            (self.select in ("best", "last"), f"select must be 'best' or 'last', got '{self.select}'"),
            (self.dtype in ("float32", "float64"), f"dtype must be 'float32' or 'float64', got '{self.dtype}'"),
        ]
        for ok, message in checks:
            if not ok:
                return ValidationResult(is_valid=False, error_message=message)
        return ValidationResult(is_valid=True, value=self)


def _protocol(data: Union[dict, ProtocolSpec]) -> ProtocolSpec:
    if isinstance(data, ProtocolSpec):
        return data
    try:
        return ProtocolSpec.from_dict(data)
    except (KeyError, ValueError) as e:
        valid = ", ".join(s.value for s in ProtocolSetting)
        raise ConfigurationError(f"Invalid protocol {data}: {e}. Valid settings: {valid}")


def _reject_unknown(data: Dict[str, Any], cls, prefix: str) -> None:
    known = [f.name for f in fields(cls)]
    for key in data:
        if key not in known:
            close = difflib.get_close_matches(key, known, n=1)
            hint = f" Did you mean '{prefix}{close[0]}'?" if close else ""
            raise ConfigurationError(f"Unknown config key '{prefix}{key}'.{hint}")


def _with_model(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    return replace(cfg, model=replace(cfg.model, **changes))


# Component ablation lattice, from the plain backbone up to the full method
PRESETS = {
    "vit": lambda c: replace(_with_model(c, prompt_length=0), use_mmr=False),
    "prompt": lambda c: replace(_with_model(c, use_contextual_prompts=False), use_mmr=False),
    "contextual": lambda c: replace(_with_model(c, use_vanilla_prompts=False, residual_context=False), use_mmr=False),
    "residual_contextual": lambda c: replace(_with_model(c, use_vanilla_prompts=False), use_mmr=False),
    "no_mmr": lambda c: replace(c, use_mmr=False),
    "no_stop_gradient": lambda c: replace(c, mmr_stop_gradient=False),
    "full": lambda c: c,
    "finetune_last_block": lambda c: replace(_with_model(c, prompt_length=0), use_mmr=False, finetune_last_block=True),
}


def apply_preset(cfg: ExperimentConfig, name: str) -> ExperimentConfig:
    """Return a copy of ``cfg`` configured as variant ``name``."""
    if name not in PRESETS:
        raise ConfigurationError(f"Unknown variant '{name}'. Valid variants: {', '.join(PRESETS)}")
    return replace(PRESETS[name](cfg), variant=name)


def config_hash(cfg: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON, runtime locations excluded."""
    data = {k: v for k, v in cfg.to_dict().items() if k not in HASH_EXCLUDED}
    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()


class ConfigManager:
    """
    Loads, validates and saves experiment configs and resolves the cache root.

    Cache root priority:
    1. Environment variable FLEXPROMPT_CACHE
    2. ``cache_dir`` in the config
    3. ./.flexprompt_cache
    """

    def __init__(self, config_dir: Union[str, Path] = "."):
        self.config_dir = Path(config_dir)

    def load(self, path: Union[str, Path, None] = None, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
        """
        Load and validate a config JSON; a missing path gives the defaults.

        Args:
            path: Config file
            overrides: Top-level keys applied after loading

        Raises:
            ConfigurationError: Unreadable JSON, unknown keys or invalid values
        """
        data: Dict[str, Any] = {}
        if path is not None:
            config_path = Path(path)
            if not config_path.is_absolute() and not config_path.exists():
                config_path = self.config_dir / config_path
            try:
                with open(config_path, "r", encoding="utf-8") as f:
                    data = json.load(f)
            except FileNotFoundError:
                raise ConfigurationError(f"Config file not found: {config_path}")
            except json.JSONDecodeError as e:
                raise ConfigurationError(f"Config file {config_path} is not valid JSON: {e}")
        if overrides:
            data.update(overrides)
        cfg = ExperimentConfig.from_dict(data)
        return cfg.validate().raise_if_invalid()

    def save(self, cfg: ExperimentConfig, path: Union[str, Path]) -> Path:
        """Write the resolved config as canonical JSON."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(canonical_json(cfg.to_dict()) + "\n", encoding="utf-8")
        return path

    def cache_root(self, cfg: Optional[ExperimentConfig] = None) -> Path:
        env = os.getenv(CACHE_ENV_VAR)
        if env and env.strip():
            return Path(env.strip())
        if cfg is not None and cfg.cache_dir:
            return Path(cfg.cache_dir)
        return self.config_dir / DEFAULT_CACHE_DIR

    def check_configuration(self, cfg: ExperimentConfig) -> Dict[str, Any]:
        """Summarize a resolved config for display."""
        env = os.getenv(CACHE_ENV_VAR)
        if env and env.strip():
            source = f"{CACHE_ENV_VAR} environment variable"
        elif cfg.cache_dir:
            source = "config cache_dir"
        else:
            source = "default"
        return {
            "config_hash": config_hash(cfg),
            "variant": cfg.variant,
            "protocol": cfg.protocol.to_dict(),
            "cache_root": str(self.cache_root(cfg)),
            "cache_source": source,
            "pretrained": cfg.pretrained,
            "pretrained_exists": bool(cfg.pretrained) and Path(cfg.pretrained).exists(),
            "valid": cfg.validate().is_valid,
        }

    def print_configuration_status(self, cfg: ExperimentConfig) -> None:
        status = self.check_configuration(cfg)
        print("🔧 Configuration Status:")
        print(f"   Valid: {'✅' if status['valid'] else '❌'}")
        print(f"   Config hash: {status['config_hash'][:16]}")
        print(f"   Variant: {status['variant']}")
        p = status["protocol"]
        print(f"   Protocol: {p['setting']} alpha={p['alpha']} seed={p['seed']}")
        print(f"   Cache root: {status['cache_root']} ({status['cache_source']})")
        if status["pretrained"]:
            print(f"   Pretrained: {'✅' if status['pretrained_exists'] else '❌'} ({status['pretrained']})")
        else:
            print("   Pretrained: ⚠️  none, a seeded random backbone is used")
