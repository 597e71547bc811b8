"""
Vanilla and residual contextual prompts for the frozen multimodal ViT.

Each encoder layer i receives [CLS, visual tokens, p/2 vanilla prompts,
p/2 residual contextual prompts]. Layer outputs at prompt positions are
dropped and fresh prompts are injected before the next layer.

A residual contextual prompt is built from a learnable base block, the
expanded multimodal central-difference context of the layer's incoming
visual tokens, and the previous layer's residual contextual prompt.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from core_model import BackboneWeights, MultimodalViT, TokenBatch, apply_backbone, freeze_backbone, random_backbone
from data_structures import ModelConfig
from validation import ConfigurationError

logger = logging.getLogger(__name__)


def cdc2d(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor], theta: float) -> torch.Tensor:
    """
    Central difference convolution with same zero padding.

    y(p0) = sum_n w(pn) x(p0 + pn) - theta * x(p0) * sum_n w(pn) + b

    The difference term uses the unpadded center value, so it is a 1x1
    convolution with the spatially summed kernel.

    Args:
        x: B x C_in x H x W
        weight: C_out x C_in x k x k
        bias: C_out or None
        theta: Central difference intensity in [0, 1]
    """
    if x.shape[1] != weight.shape[1]:
        raise ConfigurationError(f"cdc2d expects {weight.shape[1]} input channels, got {x.shape[1]}")
    if not 0.0 <= theta <= 1.0:
        raise ConfigurationError(f"theta must lie in [0, 1], got {theta}")
    out = F.conv2d(x, weight, bias, padding=weight.shape[-1] // 2)
    if theta == 0.0:
        return out
    kernel_diff = weight.sum(dim=(2, 3), keepdim=True)
    out_diff = F.conv2d(x, kernel_diff, None)
    return out - theta * out_diff


class CentralDifferenceConv2d(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, theta: float, kernel_size: int = 3):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size, padding=kernel_size // 2)
        self.theta = theta

    def forward(self, x):
        return cdc2d(x, self.conv.weight, self.conv.bias, self.theta)


class ContextPipeline(nn.Module):
    """Per-layer squeeze (1x1 + GELU), multimodal CDC, GAP, expand (1x1 + GELU)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.down = nn.Conv2d(cfg.embed_dim, cfg.hidden_dim, kernel_size=1)
        self.cdc = CentralDifferenceConv2d(cfg.hidden_dim * cfg.num_modalities, cfg.hidden_dim, cfg.cd_intensity)
        self.up = nn.Conv2d(cfg.hidden_dim, cfg.embed_dim, kernel_size=1)


@dataclass
class ResidualContextCarry:
    """Residual contextual prompt produced at ``layer`` (1-based)."""
    prompts: torch.Tensor   # B x p/2 x d
    layer: int


def token_grid(block: torch.Tensor) -> torch.Tensor:
    """Reshape B x n x d row-major tokens into a B x d x sqrt(n) x sqrt(n) grid."""
    batch, n, dim = block.shape
    side = math.isqrt(n)
    if side * side != n:
        raise ConfigurationError(f"Token count {n} per modality is not a square grid")
    return block.transpose(1, 2).reshape(batch, dim, side, side)


def compute_cd_context(visual_blocks: Sequence[torch.Tensor], pipeline: ContextPipeline,
                       cfg: ModelConfig) -> torch.Tensor:
    """
    Multimodal central difference context of one layer.

    Args:
        visual_blocks: One B x n x d block per modality, in RGB, D, IR order
        pipeline: The layer's context weights
        cfg: Model configuration

    Returns:
        B x d context vectors
    """
    if len(visual_blocks) != cfg.num_modalities:
        raise ConfigurationError(f"Expected {cfg.num_modalities} modality blocks, got {len(visual_blocks)}")
    squeezed = [F.gelu(pipeline.down(token_grid(block))) for block in visual_blocks]
    x = pipeline.cdc(torch.cat(squeezed, dim=1))
    x = x.mean(dim=(2, 3), keepdim=True)
    return F.gelu(pipeline.up(x)).flatten(1)


def expand(context: torch.Tensor, count: int, gain: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Replicate a context vector into ``count`` prompt rows.

    Args:
        context: d or B x d
        count: Number of rows (p/2)
        gain: Optional count x d learned per-row gain

    Returns:
        count x d, or B x count x d for batched input
    """
    if count < 1:
        raise ConfigurationError(f"expand count must be >= 1, got {count}")
    rows = context.unsqueeze(-2).expand(*context.shape[:-1], count, context.shape[-1])
    return rows * gain if gain is not None else rows


def compose_residual_prompt(base: torch.Tensor, context: torch.Tensor,
                            carry: Optional[ResidualContextCarry], layer: int,
                            gain: Optional[torch.Tensor] = None) -> ResidualContextCarry:
    """
    Residual contextual prompt for ``layer``.

    layer 1:  base + Expand(context)
    layer i:  base + Expand(context) + previous prompt

    Raises:
        ConfigurationError: carry given at layer 1, or missing afterwards
    """
    if layer == 1 and carry is not None:
        raise ConfigurationError("Layer 1 takes no residual carry")
    if layer > 1 and carry is None:
        raise ConfigurationError(f"Layer {layer} requires the carry from layer {layer - 1}")
    if carry is not None and carry.layer != layer - 1:
        raise ConfigurationError(f"Carry from layer {carry.layer} cannot feed layer {layer}")
    prompts = base + expand(context, base.shape[-2], gain)
    if carry is not None:
        prompts = prompts + carry.prompts
    return ResidualContextCarry(prompts=prompts, layer=layer)


class PromptState(nn.Module):
    """All trainable prompt-side state: vanilla prompts, base prompts, context weights."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        n, d = cfg.num_layers, cfg.embed_dim
        self.vanilla_prompts = nn.Parameter(torch.zeros(n, cfg.vanilla_count, d)) if cfg.vanilla_count else None
        if cfg.contextual_count:
            self.base_prompts = nn.Parameter(torch.zeros(n, cfg.contextual_count, d))
            self.context = nn.ModuleList([ContextPipeline(cfg) for _ in range(n)])
            self.expand_gain = (nn.Parameter(torch.ones(n, cfg.contextual_count, d))
                                if cfg.expand_mode == "learned" else None)
        else:
            self.base_prompts = None
            self.context = nn.ModuleList()
            self.expand_gain = None

    def init_prompts(self, seed: int) -> 'PromptState':
        """Prompts ~ U(-1, 1)/sqrt(d); context convs ~ N(0, 1/fan_in), zero biases."""
        generator = torch.Generator().manual_seed(seed)
        scale = 1.0 / math.sqrt(self.cfg.embed_dim)
        with torch.no_grad():
            for name, param in sorted(self.named_parameters()):
                if name in ("vanilla_prompts", "base_prompts"):
                    noise = torch.rand(param.shape, generator=generator, dtype=param.dtype)
                    param.copy_((noise * 2.0 - 1.0) * scale)
                elif name == "expand_gain":
                    param.fill_(1.0)
                elif name.endswith("bias"):
                    param.zero_()
                else:
                    fan_in = param[0].numel()
                    param.copy_(torch.randn(param.shape, generator=generator, dtype=param.dtype) / math.sqrt(fan_in))
        return self

    def layer_gain(self, layer: int) -> Optional[torch.Tensor]:
        return self.expand_gain[layer - 1] if self.expand_gain is not None else None


def prompted_forward(inputs: torch.Tensor, model: MultimodalViT, prompts: PromptState,
                     cfg: ModelConfig) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Deep-prompted forward pass.

    Args:
        inputs: B x M x C x H x W zero-filled modality planes
        model: Frozen backbone
        prompts: Prompt state
        cfg: Model configuration

    Returns:
        Tuple of (B x 2 logits, B x d final class embedding)
    """
    batch = model.patch_embed(inputs)
    x = batch.tokens
    n_content = x.shape[1]
    size = x.shape[0]
    carry: Optional[ResidualContextCarry] = None

    for layer in range(1, cfg.num_layers + 1):
        parts = [x]
        if cfg.vanilla_count:
            parts.append(prompts.vanilla_prompts[layer - 1].unsqueeze(0).expand(size, -1, -1))
        if cfg.contextual_count:
            blocks = TokenBatch(x, batch.modality_token_counts).visual_blocks()
            context = compute_cd_context(blocks, prompts.context[layer - 1], cfg)
            base = prompts.base_prompts[layer - 1]
            if cfg.residual_context:
                carry = compose_residual_prompt(base, context, carry, layer, prompts.layer_gain(layer))
            else:
                carry = compose_residual_prompt(base, context, None, 1, prompts.layer_gain(layer))
            parts.append(carry.prompts)
        out = model.encoder_layer_forward(torch.cat(parts, dim=1) if len(parts) > 1 else x, layer)
        x = out[:, :n_content]

    cls = model.encoder_norm(x)[:, 0]
    return model.classify(cls), cls


class FlexPromptModel(nn.Module):
    """Frozen backbone plus prompt state."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = MultimodalViT(cfg)
        self.prompts = PromptState(cfg)

    def forward(self, inputs: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        return prompted_forward(inputs, self.backbone, self.prompts, self.cfg)


def build_model(cfg: ModelConfig, backbone: Optional[BackboneWeights] = None, seed: int = 0,
                unfreeze_last_block: bool = False) -> FlexPromptModel:
    """
    Construct, initialize and freeze a model.

    Args:
        cfg: Model configuration
        backbone: Pretrained weights; a seeded random backbone when None
        seed: Seed for the random backbone and prompt initialization
        unfreeze_last_block: Train the last encoder block too (direct finetuning baseline)
    """
    model = FlexPromptModel(cfg)
    weights = backbone if backbone is not None else random_backbone(cfg, seed)
    apply_backbone(model.backbone, weights)
    with torch.no_grad():
        model.backbone.head.weight.zero_()
        model.backbone.head.bias.zero_()
    model.prompts.init_prompts(seed + 1)
    freeze_backbone(model, unfreeze_last_block=unfreeze_last_block)
    return model
