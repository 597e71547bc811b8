"""
Core data structures for flexprompt.

This module defines the value types that flow between the model, data,
regularization, metrics and harness layers:
- ModelConfig: architecture and prompt hyperparameters
- ModalityAvailability / MultimodalSample: the unit of all data flow
- ProtocolSpec / ProtocolAssignment: flexible-modal protocol draws
- MaskEvent: one partial-modality masking decision during training
- ScoreSet / EvalReport: evaluation inputs and outputs
- EpochRecord / RunRecord: append-only training history

Every type serializes to plain dictionaries so it can be written as JSON
beside the artifacts it describes.
"""

from dataclasses import dataclass, field, asdict
from enum import Enum
from types import MappingProxyType
from typing import Dict, List, Mapping, Optional, Any

import numpy as np


MODALITIES = ("rgb", "depth", "ir")

LIVE = 1
SPOOF = 0


class ProtocolSetting(str, Enum):
    """The four flexible-modal settings."""
    RGBD_MISS_D = "RGBD_MISS_D"
    RGBIR_MISS_IR = "RGBIR_MISS_IR"
    RGBDIR_OVERLAP = "RGBDIR_OVERLAP"
    RGBDIR_LIMITED = "RGBDIR_LIMITED"


class MaskKind(str, Enum):
    """Partial-modality masks. RGB is never masked."""
    NONE = "NONE"
    MASK_D = "MASK_D"
    MASK_IR = "MASK_IR"
    MASK_D_IR = "MASK_D_IR"

    @property
    def masked_modalities(self) -> tuple:
        return {
            MaskKind.NONE: (),
            MaskKind.MASK_D: ("depth",),
            MaskKind.MASK_IR: ("ir",),
            MaskKind.MASK_D_IR: ("depth", "ir"),
        }[self]


@dataclass
class ModelConfig:
    """Architecture, prompt and regularization hyperparameters."""
    image_size: int = 224
    patch_size: int = 16
    num_layers: int = 12
    embed_dim: int = 768
    num_heads: int = 12
    mlp_ratio: float = 4.0
    num_modalities: int = 3
    prompt_length: int = 40
    hidden_dim: int = 64
    cd_intensity: float = 0.5
    mask_ratio: float = 0.15
    mmr_weight: float = 1.0
    in_channels: int = 3
    layer_norm_eps: float = 1e-6
    share_patch_embed: bool = True
    expand_mode: str = "replicate"  # "replicate" or "learned"
    use_vanilla_prompts: bool = True
    use_contextual_prompts: bool = True
    residual_context: bool = True

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def patches_per_modality(self) -> int:
        return self.grid_size ** 2

    @property
    def num_content_tokens(self) -> int:
        """CLS plus every modality's patch tokens."""
        return 1 + self.num_modalities * self.patches_per_modality

    @property
    def half_prompt(self) -> int:
        return self.prompt_length // 2

    @property
    def vanilla_count(self) -> int:
        return self.half_prompt if self.use_vanilla_prompts else 0

    @property
    def contextual_count(self) -> int:
        return self.half_prompt if self.use_contextual_prompts else 0

    @property
    def num_prompted_tokens(self) -> int:
        return self.num_content_tokens + self.vanilla_count + self.contextual_count

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> 'ModelConfig':
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass(frozen=True)
class ModalityAvailability:
    """Which modalities a sample carries. RGB is always present."""
    has_rgb: bool = True
    has_depth: bool = True
    has_ir: bool = True

    @property
    def subset_name(self) -> str:
        parts = ["RGB"]
        if self.has_depth:
            parts.append("D")
        if self.has_ir:
            parts.append("IR")
        return "-".join(parts)

    def has(self, modality: str) -> bool:
        return {"rgb": self.has_rgb, "depth": self.has_depth, "ir": self.has_ir}[modality]

    def to_dict(self) -> dict:
        return {"rgb": self.has_rgb, "depth": self.has_depth, "ir": self.has_ir}

    @classmethod
    def from_dict(cls, data: dict) -> 'ModalityAvailability':
        return cls(has_rgb=bool(data["rgb"]), has_depth=bool(data["depth"]), has_ir=bool(data["ir"]))


COMPLETE = ModalityAvailability(True, True, True)
RGB_D = ModalityAvailability(True, True, False)
RGB_IR = ModalityAvailability(True, False, True)
RGB_ONLY = ModalityAvailability(True, False, False)


@dataclass
class MultimodalSample:
    """One face sample: per-modality planes in [0, 1] plus the live/spoof label."""
    sample_id: str
    rgb: np.ndarray                  # H x W x 3
    depth: Optional[np.ndarray]      # H x W x 1, None when absent
    ir: Optional[np.ndarray]         # H x W x 1, None when absent
    label: int                       # LIVE=1, SPOOF=0
    split: str = "train"

    @property
    def availability(self) -> ModalityAvailability:
        return ModalityAvailability(True, self.depth is not None, self.ir is not None)

    def plane(self, modality: str) -> Optional[np.ndarray]:
        return getattr(self, modality)


@dataclass(frozen=True)
class ProtocolSpec:
    """A (setting, alpha, seed) triple."""
    setting: ProtocolSetting
    alpha: float
    seed: int = 0

    def to_dict(self) -> dict:
        return {"setting": self.setting.value, "alpha": self.alpha, "seed": self.seed}

    @classmethod
    def from_dict(cls, data: dict) -> 'ProtocolSpec':
        return cls(
            setting=ProtocolSetting(data["setting"]),
            alpha=float(data["alpha"]),
            seed=int(data.get("seed", 0)),
        )


@dataclass(frozen=True)
class ProtocolAssignment:
    """Per-sample modality availability for one protocol draw."""
    spec: ProtocolSpec
    availability: Mapping[str, ModalityAvailability]
    counts: Mapping[str, int]

    def __post_init__(self):
        object.__setattr__(self, "availability", MappingProxyType(dict(self.availability)))
        object.__setattr__(self, "counts", MappingProxyType(dict(self.counts)))

    def __getitem__(self, sample_id: str) -> ModalityAvailability:
        return self.availability[sample_id]

    def __len__(self) -> int:
        return len(self.availability)

    def fractions(self) -> Dict[str, float]:
        n = max(len(self.availability), 1)
        return {name: count / n for name, count in self.counts.items()}

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "counts": dict(self.counts),
            "assignment": {sid: avail.to_dict() for sid, avail in self.availability.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'ProtocolAssignment':
        return cls(
            spec=ProtocolSpec.from_dict(data["spec"]),
            availability={sid: ModalityAvailability.from_dict(a) for sid, a in data["assignment"].items()},
            counts=data.get("counts", {}),
        )


@dataclass(frozen=True)
class MaskEvent:
    kind: MaskKind = MaskKind.NONE
    applicable: bool = True


@dataclass
class ScoreSet:
    """Live-probability scores with labels for one split."""
    scores: List[float]
    labels: List[int]
    split: str = "test"
    ids: Optional[List[str]] = None

    @property
    def num_live(self) -> int:
        return sum(1 for y in self.labels if y == LIVE)

    @property
    def num_spoof(self) -> int:
        return sum(1 for y in self.labels if y == SPOOF)

    def live_scores(self) -> np.ndarray:
        return np.asarray([s for s, y in zip(self.scores, self.labels) if y == LIVE], dtype=np.float64)

    def spoof_scores(self) -> np.ndarray:
        return np.asarray([s for s, y in zip(self.scores, self.labels) if y == SPOOF], dtype=np.float64)


@dataclass
class EvalReport:
    """Threshold and error rates for one evaluated split."""
    threshold: float
    mode: str = "intra"
    apcer: Optional[float] = None
    bpcer: Optional[float] = None
    acer: Optional[float] = None
    far: Optional[float] = None
    frr: Optional[float] = None
    hter: Optional[float] = None
    protocol: Optional[Dict[str, Any]] = None
    counts: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> 'EvalReport':
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})

    def headline(self) -> float:
        """ACER for intra-dataset reports, HTER for cross-dataset ones."""
        return self.acer if self.mode == "intra" else self.hter


@dataclass
class EpochRecord:
    epoch: int
    bce: float
    mmr: float
    total: float
    dev_acer: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunRecord:
    """Training history. Epochs are only ever appended."""
    config_hash: str
    epochs: List[EpochRecord] = field(default_factory=list)
    test_report: Optional[EvalReport] = None
    best_epoch: Optional[int] = None
    wall_clock_seconds: float = 0.0
    git_revision: Optional[str] = None

    def append(self, record: EpochRecord) -> None:
        self.epochs.append(record)

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "epochs": [e.to_dict() for e in self.epochs],
            "test_report": self.test_report.to_dict() if self.test_report else None,
            "best_epoch": self.best_epoch,
            "wall_clock_seconds": self.wall_clock_seconds,
            "git_revision": self.git_revision,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'RunRecord':
        record = cls(
            config_hash=data["config_hash"],
            best_epoch=data.get("best_epoch"),
            wall_clock_seconds=data.get("wall_clock_seconds", 0.0),
            git_revision=data.get("git_revision"),
        )
        for e in data.get("epochs", []):
            record.append(EpochRecord(**e))
        if data.get("test_report"):
            record.test_report = EvalReport.from_dict(data["test_report"])
        return record
