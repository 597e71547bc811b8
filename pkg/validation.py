"""
Validation and error handling for flexprompt.

This module provides:
- The exception hierarchy raised by every library module
- ValidationResult, returned by validators instead of raising directly
- ConfigValidator for model, protocol, masking and experiment settings
- ErrorHandler, which turns exceptions into short messages with suggestions
"""

from dataclasses import dataclass
from typing import Any, List, Optional, Tuple, Type

from data_structures import ModelConfig, ProtocolSpec


class FlexPromptError(Exception):
    """Base class for all flexprompt errors."""
    pass


class ConfigurationError(FlexPromptError):
    """Invalid configuration, shapes or parameter ranges."""
    pass


class ProtocolError(FlexPromptError):
    """Protocol assignment does not match the dataset it is applied to."""
    pass


class DatasetError(FlexPromptError):
    """Unreadable manifest rows or image files."""

    def __init__(self, message: str, sample_id: Optional[str] = None):
        super().__init__(f"[{sample_id}] {message}" if sample_id else message)
        self.sample_id = sample_id


class CheckpointError(FlexPromptError):
    """Shape or fingerprint mismatches while loading weights."""
    pass


class MetricError(FlexPromptError):
    """A rate is undefined because a class is empty."""
    pass


class DivergenceError(FlexPromptError):
    """Training produced a non-finite loss."""
    pass


class WeightsFetchError(FlexPromptError):
    """Downloading a pretrained export failed."""
    pass


@dataclass
class ValidationResult:
    """Result of a validation operation."""
    is_valid: bool
    value: Any = None
    error_message: str = ""
    suggestions: Optional[List[str]] = None

    def __post_init__(self):
        if self.suggestions is None:
            self.suggestions = []

    def raise_if_invalid(self, error_type: Type[FlexPromptError] = ConfigurationError) -> Any:
        """Return the validated value or raise ``error_type``."""
        if not self.is_valid:
            raise error_type(self.error_message)
        return self.value


def _fail(message: str, *suggestions: str) -> ValidationResult:
    return ValidationResult(is_valid=False, error_message=message, suggestions=list(suggestions))


class ConfigValidator:
    """
    Range and consistency checks for flexprompt settings.

    Each method returns a ValidationResult; callers decide whether to
    raise (library code) or print suggestions (CLI).
    """

    MAX_ALPHA_STEPS = 10

    @classmethod
    def validate_model_config(cls, cfg: ModelConfig) -> ValidationResult:
        if cfg.prompt_length < 0 or cfg.prompt_length % 2 != 0:
            return _fail(
                f"prompt_length must be a non-negative even number, got {cfg.prompt_length}",
                "Prompts are split p//2 vanilla + p//2 residual contextual",
            )
        if cfg.image_size % cfg.patch_size != 0:
            return _fail(
                f"image_size {cfg.image_size} is not divisible by patch_size {cfg.patch_size}",
                "Use 224/16 for ViT-B/16 or 32/16 for toy runs",
            )
        if cfg.embed_dim % cfg.num_heads != 0:
            return _fail(f"embed_dim {cfg.embed_dim} is not divisible by num_heads {cfg.num_heads}")
        if not 0.0 <= cfg.cd_intensity <= 1.0:
            return _fail(f"cd_intensity must lie in [0, 1], got {cfg.cd_intensity}")
        gamma = cls.validate_mask_ratio(cfg.mask_ratio)
        if not gamma.is_valid:
            return gamma
        if cfg.mmr_weight < 0:
            return _fail(f"mmr_weight must be >= 0, got {cfg.mmr_weight}")
        if cfg.num_layers < 1 or cfg.hidden_dim < 1 or cfg.num_modalities < 1:
            return _fail("num_layers, hidden_dim and num_modalities must be positive")
        if cfg.expand_mode not in ("replicate", "learned"):
            return _fail(
                f"Unknown expand_mode '{cfg.expand_mode}'",
                "Valid modes: replicate, learned",
            )
        return ValidationResult(is_valid=True, value=cfg)

    @classmethod
    def validate_mask_ratio(cls, gamma: float) -> ValidationResult:
        if not 0.0 <= gamma or 3.0 * gamma > 1.0:
            return _fail(
                f"mask_ratio must satisfy 0 <= 3*gamma <= 1, got {gamma}",
                "The default is 0.15",
            )
        return ValidationResult(is_valid=True, value=gamma)

    @classmethod
    def validate_alpha(cls, alpha: float) -> ValidationResult:
        if not 0.0 <= alpha <= 1.0:
            return _fail(f"alpha must lie in [0, 1], got {alpha}", "Use values such as 0.0, 0.1, ..., 1.0")
        return ValidationResult(is_valid=True, value=float(alpha))

    @classmethod
    def validate_protocol_spec(cls, spec: ProtocolSpec) -> ValidationResult:
        result = cls.validate_alpha(spec.alpha)
        if not result.is_valid:
            return result
        return ValidationResult(is_valid=True, value=spec)

    @classmethod
    def parse_alpha_range(cls, text: str) -> ValidationResult:
        """
        Parse ``start:stop:step`` or a comma list into alpha values.

        Args:
            text: e.g. "0:1:0.1" or "0,0.5,1"

        Returns:
            ValidationResult whose value is the list of alphas
        """
        try:
            if ":" in text:
                start, stop, step = (float(t) for t in text.split(":"))
                if step <= 0:
                    return _fail("alpha step must be positive")
                count = int(round((stop - start) / step)) + 1
                values = [round(start + i * step, 10) for i in range(count)]
            else:
                values = [float(t) for t in text.split(",") if t.strip()]
        except ValueError:
            return _fail(f"Could not parse alpha list '{text}'", "Examples: 0:1:0.1 or 0,0.5,1")
        for alpha in values:
            if not cls.validate_alpha(alpha).is_valid:
                return cls.validate_alpha(alpha)
        return ValidationResult(is_valid=True, value=values)

    @classmethod
    def parse_int_list(cls, text: str) -> ValidationResult:
        try:
            return ValidationResult(is_valid=True, value=[int(t) for t in text.split(",") if t.strip()])
        except ValueError:
            return _fail(f"Could not parse integer list '{text}'", "Example: 0,1,2")


class ErrorHandler:
    """Centralized error handling with short messages for the CLI."""

    ERROR_MESSAGES = {
        ConfigurationError: "Configuration error.",
        ProtocolError: "Protocol does not match the dataset.",
        DatasetError: "Dataset could not be read.",
        CheckpointError: "Checkpoint could not be loaded.",
        MetricError: "Metric is undefined for this score set.",
        DivergenceError: "Training diverged.",
        WeightsFetchError: "Pretrained weights could not be downloaded.",
    }

    SUGGESTIONS = {
        ConfigurationError: ["Check the config JSON against ModelConfig fields"],
        ProtocolError: ["Regenerate the protocol for this manifest with `flexprompt protocol gen`"],
        DatasetError: ["Check manifest paths are relative to the dataset root"],
        CheckpointError: ["Pass --allow-backbone-mismatch to load against a different backbone"],
        MetricError: ["Both live and spoof samples are required in every evaluated split"],
        DivergenceError: ["Lower the learning rate", "Check inputs are scaled to [0, 1]"],
        WeightsFetchError: ["Check the URL and your network connection"],
    }

    @classmethod
    def describe(cls, error: Exception) -> Tuple[str, List[str]]:
        """
        Describe an exception for display.

        Args:
            error: Exception that occurred

        Returns:
            Tuple of (message, suggestions)
        """
        for error_type, message in cls.ERROR_MESSAGES.items():
            if isinstance(error, error_type):
                return f"{message} {error}", list(cls.SUGGESTIONS.get(error_type, []))
        return f"An unexpected error occurred: {error}", ["Re-run with --log-level DEBUG for details"]
