"""
Partial-modality masking and missing-modality regularization.

During training each sample draws at most one mask event from three
gamma-wide bands (depth, IR, depth+IR). RGB is never masked. Samples whose
mask fired contribute a negative cosine between the masked-branch class
embedding and the complete-branch one, with the complete branch treated
as a constant.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from data_structures import MODALITIES, MaskEvent, MaskKind, ModalityAvailability
from flexdata import DenseInput
from validation import ConfigValidator, ConfigurationError

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12
BANDS = (MaskKind.MASK_D, MaskKind.MASK_IR, MaskKind.MASK_D_IR)


def _event_for(u: float, avail: ModalityAvailability, gamma: float) -> MaskEvent:
    band = int(u // gamma) if gamma > 0 else len(BANDS)
    if band >= len(BANDS):
        return MaskEvent(MaskKind.NONE, applicable=True)
    kind = BANDS[band]
    if all(avail.has(m) for m in kind.masked_modalities):
        return MaskEvent(kind, applicable=True)
    return MaskEvent(MaskKind.NONE, applicable=False)


def sample_mask(avail: ModalityAvailability, gamma: float, rng: np.random.Generator) -> MaskEvent:
    """
    Draw one mask event.

    u < gamma masks depth, gamma <= u < 2 gamma masks IR, 2 gamma <= u < 3 gamma
    masks both; otherwise nothing. A draw that would mask an unavailable
    modality degrades to NONE with ``applicable=False``.
    """
    ConfigValidator.validate_mask_ratio(gamma).raise_if_invalid()
    return _event_for(float(rng.random()), avail, gamma)


def sample_masks(avails: Sequence[ModalityAvailability], gamma: float,
                 rng: np.random.Generator) -> List[MaskEvent]:
    """One event per sample, drawn in order from a single vector of uniforms."""
    ConfigValidator.validate_mask_ratio(gamma).raise_if_invalid()
    draws = rng.random(len(avails))
    return [_event_for(float(u), avail, gamma) for u, avail in zip(draws, avails)]


def mask_frequencies(gamma: float, draws: int, seed: int = 0) -> dict:
    """Empirical frequency of each mask kind on complete samples."""
    ConfigValidator.validate_mask_ratio(gamma).raise_if_invalid()
    u = np.random.Generator(np.random.PCG64(seed)).random(draws)
    band = np.floor(u / gamma).astype(np.int64) if gamma > 0 else np.full(draws, len(BANDS))
    freqs = {kind.value: float(np.mean(band == i)) for i, kind in enumerate(BANDS)}
    freqs[MaskKind.NONE.value] = float(np.mean(band >= len(BANDS)))
    return freqs


def apply_mask(dense_input: Union[DenseInput, torch.Tensor], event: MaskEvent) -> Union[DenseInput, torch.Tensor]:
    """
    Zero the planes ``event`` masks.

    Args:
        dense_input: DenseInput, or an M x C x H x W tensor in RGB, D, IR order
        event: Mask event; NONE returns the input unchanged
    """
    masked = event.kind.masked_modalities
    if not masked:
        return dense_input
    if isinstance(dense_input, DenseInput):
        planes = {m: np.zeros_like(dense_input.plane(m)) for m in masked}
        return DenseInput(
            rgb=dense_input.rgb,
            depth=planes.get("depth", dense_input.depth),
            ir=planes.get("ir", dense_input.ir),
            label=dense_input.label,
            sample_id=dense_input.sample_id,
        )
    out = dense_input.clone()
    for modality in masked:
        out[MODALITIES.index(modality)] = 0
    return out


def apply_masks(batch: torch.Tensor, events: Sequence[MaskEvent]) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Mask a B x M x C x H x W batch sample by sample.

    Returns:
        Tuple of (masked batch, B boolean tensor of samples whose mask fired)
    """
    if batch.shape[0] != len(events):
        raise ConfigurationError(f"{len(events)} mask events for a batch of {batch.shape[0]}")
    fired = torch.tensor([e.kind is not MaskKind.NONE for e in events], dtype=torch.bool)
    if not fired.any():
        return batch, fired
    return torch.stack([apply_mask(x, e) for x, e in zip(batch, events)]), fired


def mmr_values(masked_cls: torch.Tensor, complete_cls: torch.Tensor,
               stop_gradient: bool = True, eps: float = NORM_EPS) -> torch.Tensor:
    """
    Per-sample negative cosine between masked and complete class embeddings.

    Rows where either embedding has norm below ``eps`` are dropped with a warning.

    Args:
        masked_cls: k x d
        complete_cls: k x d
        stop_gradient: Detach the complete branch

    Returns:
        Tensor of the valid rows' losses, each in [-1, 1]
    """
    if masked_cls.shape != complete_cls.shape:
        raise ConfigurationError(f"MMR embeddings differ in shape: {tuple(masked_cls.shape)} vs {tuple(complete_cls.shape)}")
    target = complete_cls.detach() if stop_gradient else complete_cls
    norm_a = masked_cls.norm(dim=-1)
    norm_b = target.norm(dim=-1)
    valid = (norm_a >= eps) & (norm_b >= eps)
    if not bool(valid.all()):
        logger.warning("Skipping %d MMR term(s) with a near-zero class embedding", int((~valid).sum()))
    a = masked_cls[valid] / norm_a[valid].unsqueeze(-1)
    b = target[valid] / norm_b[valid].unsqueeze(-1)
    return -(a * b).sum(dim=-1)


def mmr_loss(masked_cls: torch.Tensor, complete_cls: torch.Tensor,
             stop_gradient: bool = True, eps: float = NORM_EPS) -> Optional[torch.Tensor]:
    """Negative cosine for a single pair of d-vectors; None when undefined."""
    values = mmr_values(masked_cls.unsqueeze(0), complete_cls.unsqueeze(0), stop_gradient, eps)
    return values[0] if values.numel() else None


@dataclass
class LossBreakdown:
    total: torch.Tensor
    bce: torch.Tensor
    mmr: Optional[torch.Tensor] = None


def combine_losses(bce: torch.Tensor, mmr: Optional[torch.Tensor], weight: float) -> LossBreakdown:
    """BCE plus weight times the mean MMR value; an empty or absent MMR term leaves BCE alone."""
    if weight < 0:
        raise ConfigurationError(f"mmr_weight must be >= 0, got {weight}")
    if mmr is None or mmr.numel() == 0:
        return LossBreakdown(total=bce, bce=bce)
    mean = mmr.mean()
    return LossBreakdown(total=bce + weight * mean, bce=bce, mmr=mean)


def total_loss(logits: torch.Tensor, labels: torch.Tensor, mmr: Optional[torch.Tensor],
               weight: float = 1.0) -> LossBreakdown:
    """
    Binary cross-entropy (2-way softmax, live is class 1) plus weighted MMR.

    Args:
        logits: B x 2
        labels: B long tensor
        mmr: Per-sample MMR values of masked samples, or None
        weight: lambda
    """
    return combine_losses(F.cross_entropy(logits, labels), mmr, weight)
