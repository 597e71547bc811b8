"""
Multimodal ViT backbone for flexprompt.

The backbone is a standard pre-norm ViT (patch embedding, N encoder
blocks, final norm, 2-way head). Each modality plane is embedded with the
same patch embedder and the same positional table, and the token blocks
are concatenated as [CLS | RGB | D | IR].

Also here: freezing policy, trainable-parameter accounting, backbone
fingerprints, pretrained-weight loading and prompt/head checkpoints.
"""

import hashlib
import logging
import math
from dataclasses import dataclass, field
from os.path import join as pjoin
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from data_structures import ModelConfig
from data_manager import read_tensor_archive, write_tensor_archive
from validation import CheckpointError, ConfigValidator, ConfigurationError

logger = logging.getLogger(__name__)

ATTENTION_Q = "MultiHeadDotProductAttention_1/query"
ATTENTION_K = "MultiHeadDotProductAttention_1/key"
ATTENTION_V = "MultiHeadDotProductAttention_1/value"
ATTENTION_OUT = "MultiHeadDotProductAttention_1/out"
FC_0 = "MlpBlock_3/Dense_0"
FC_1 = "MlpBlock_3/Dense_1"
ATTENTION_NORM = "LayerNorm_0"
MLP_NORM = "LayerNorm_2"


def np2th(weights, conv=False):
    """Possibly convert HWIO to OIHW."""
    if conv:
        weights = weights.transpose([3, 2, 0, 1])
    return torch.from_numpy(np.ascontiguousarray(weights))


@dataclass
class TokenBatch:
    """Embedded tokens laid out as [CLS | modality_1 | ... | modality_M]."""
    tokens: torch.Tensor                 # B x T x d
    modality_token_counts: Tuple[int, ...]

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[1]

    def visual_blocks(self) -> List[torch.Tensor]:
        """Per-modality token blocks, CLS excluded."""
        blocks, start = [], 1
        for count in self.modality_token_counts:
            blocks.append(self.tokens[:, start:start + count])
            start += count
        return blocks


class Attention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.num_attention_heads = cfg.num_heads
        self.attention_head_size = cfg.embed_dim // cfg.num_heads
        self.all_head_size = self.num_attention_heads * self.attention_head_size
        self.query = nn.Linear(cfg.embed_dim, self.all_head_size)
        self.key = nn.Linear(cfg.embed_dim, self.all_head_size)
        self.value = nn.Linear(cfg.embed_dim, self.all_head_size)
        self.out = nn.Linear(cfg.embed_dim, cfg.embed_dim)

    def transpose_for_scores(self, x):
        new_x_shape = x.size()[:-1] + (self.num_attention_heads, self.attention_head_size)
        return x.view(*new_x_shape).permute(0, 2, 1, 3)

    def forward(self, hidden_states):
        query_layer = self.transpose_for_scores(self.query(hidden_states))
        key_layer = self.transpose_for_scores(self.key(hidden_states))
        value_layer = self.transpose_for_scores(self.value(hidden_states))

        attention_scores = torch.matmul(query_layer, key_layer.transpose(-1, -2))
        attention_scores = attention_scores / math.sqrt(self.attention_head_size)
        attention_probs = torch.softmax(attention_scores, dim=-1)

        context_layer = torch.matmul(attention_probs, value_layer)
        context_layer = context_layer.permute(0, 2, 1, 3).contiguous()
        context_layer = context_layer.view(context_layer.size()[:-2] + (self.all_head_size,))
        return self.out(context_layer)


class Mlp(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        hidden = int(cfg.embed_dim * cfg.mlp_ratio)
        self.fc1 = nn.Linear(cfg.embed_dim, hidden)
        self.fc2 = nn.Linear(hidden, cfg.embed_dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer encoder block."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attention_norm = nn.LayerNorm(cfg.embed_dim, eps=cfg.layer_norm_eps)
        self.ffn_norm = nn.LayerNorm(cfg.embed_dim, eps=cfg.layer_norm_eps)
        self.attn = Attention(cfg)
        self.ffn = Mlp(cfg)

    def forward(self, x):
        x = x + self.attn(self.attention_norm(x))
        x = x + self.ffn(self.ffn_norm(x))
        return x


class Embeddings(nn.Module):
    """Patch embedders, class token and the positional table shared by all modalities."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        n_embedders = 1 if cfg.share_patch_embed else cfg.num_modalities
        self.patch_embeddings = nn.ModuleList([
            nn.Conv2d(cfg.in_channels, cfg.embed_dim, kernel_size=cfg.patch_size, stride=cfg.patch_size)
            for _ in range(n_embedders)
        ])
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.embed_dim))
        self.position_embeddings = nn.Parameter(torch.zeros(1, 1 + cfg.patches_per_modality, cfg.embed_dim))

    def embedder_for(self, modality_index: int) -> nn.Conv2d:
        return self.patch_embeddings[min(modality_index, len(self.patch_embeddings) - 1)]


class MultimodalViT(nn.Module):
    """Frozen-backbone ViT over M zero-filled modality planes."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ConfigValidator.validate_model_config(cfg).raise_if_invalid()
        self.cfg = cfg
        self.embeddings = Embeddings(cfg)
        self.encoder = nn.ModuleList([Block(cfg) for _ in range(cfg.num_layers)])
        self.encoder_norm = nn.LayerNorm(cfg.embed_dim, eps=cfg.layer_norm_eps)
        self.head = nn.Linear(cfg.embed_dim, 2)

    def patch_embed(self, images: torch.Tensor) -> TokenBatch:
        """
        Embed every modality plane and prepend the class token.

        Args:
            images: B x M x C x H x W, missing modalities already zero-filled

        Returns:
            TokenBatch with positional embeddings added
        """
        cfg = self.cfg
        expected = (cfg.num_modalities, cfg.in_channels, cfg.image_size, cfg.image_size)
        if images.dim() != 5 or tuple(images.shape[1:]) != expected:
            raise ConfigurationError(
                f"Expected images of shape B x {' x '.join(map(str, expected))}, got {tuple(images.shape)}"
            )
        pos = self.embeddings.position_embeddings
        blocks = []
        for m in range(cfg.num_modalities):
            patches = self.embeddings.embedder_for(m)(images[:, m])
            patches = patches.flatten(2).transpose(1, 2)
            blocks.append(patches + pos[:, 1:])
        cls = self.embeddings.cls_token.expand(images.shape[0], -1, -1) + pos[:, :1]
        tokens = torch.cat([cls] + blocks, dim=1)
        return TokenBatch(tokens, tuple(cfg.patches_per_modality for _ in range(cfg.num_modalities)))

    def encoder_layer_forward(self, tokens: torch.Tensor, layer: int) -> torch.Tensor:
        """Run encoder block ``layer`` (1-based) over a token sequence."""
        if not 1 <= layer <= self.cfg.num_layers:
            raise ConfigurationError(f"layer must lie in [1, {self.cfg.num_layers}], got {layer}")
        if tokens.shape[-1] != self.cfg.embed_dim:
            raise ConfigurationError(f"token dim {tokens.shape[-1]} != embed_dim {self.cfg.embed_dim}")
        return self.encoder[layer - 1](tokens)

    def classify(self, cls_embedding: torch.Tensor) -> torch.Tensor:
        return self.head(cls_embedding)

    def forward(self, images: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Unprompted forward; returns (logits, final class embedding)."""
        x = self.patch_embed(images).tokens
        for layer in range(1, self.cfg.num_layers + 1):
            x = self.encoder_layer_forward(x, layer)
        cls = self.encoder_norm(x)[:, 0]
        return self.classify(cls), cls

    def backbone_names(self) -> List[str]:
        return [name for name, _ in self.named_parameters() if not name.startswith("head.")]


def live_score(logits: torch.Tensor) -> torch.Tensor:
    """Softmax probability of the live class (index 1)."""
    return torch.softmax(logits, dim=-1)[..., 1]


@dataclass
class BackboneWeights:
    """Named backbone tensors plus per-group frozen flags."""
    tensors: Dict[str, torch.Tensor]
    frozen: Dict[str, bool] = field(default_factory=dict)
    source: str = "random"
    unmatched: List[str] = field(default_factory=list)

    def fingerprint(self) -> str:
        return tensor_fingerprint({k: v for k, v in self.tensors.items() if not k.startswith("head.")})


def parameter_group(name: str) -> str:
    """Group a backbone parameter name: patch_embed, position, cls, encoder.<i>, encoder_norm, head."""
    if name.startswith("embeddings.patch_embeddings"):
        return "patch_embed"
    if name == "embeddings.position_embeddings":
        return "position"
    if name == "embeddings.cls_token":
        return "cls"
    if name.startswith("encoder_norm"):
        return "encoder_norm"
    if name.startswith("encoder."):
        return "encoder." + name.split(".")[1]
    return "head"


def tensor_fingerprint(tensors: Dict[str, torch.Tensor]) -> str:
    digest = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        digest.update(name.encode("utf-8"))
        digest.update(str(t.dtype).encode("utf-8"))
        digest.update(str(tuple(t.shape)).encode("utf-8"))
        digest.update(t.numpy().tobytes())
    return digest.hexdigest()


def init_backbone(vit: MultimodalViT, seed: int) -> MultimodalViT:
    """Deterministic random initialization; the head starts at zero."""
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, param in sorted(vit.named_parameters()):
            if name.startswith("head."):
                param.zero_()
            elif "norm" in name:
                param.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                param.zero_()
            else:
                param.copy_(torch.randn(param.shape, generator=generator, dtype=param.dtype) * 0.02)
    return vit


def random_backbone(cfg: ModelConfig, seed: int = 0) -> BackboneWeights:
    """Seeded fallback used when no pretrained export is available."""
    vit = init_backbone(MultimodalViT(cfg), seed)
    tensors = {k: v.detach().clone() for k, v in vit.state_dict().items()}
    return BackboneWeights(tensors=tensors, source=f"random:{seed}")


def apply_backbone(vit: MultimodalViT, weights: BackboneWeights) -> MultimodalViT:
    """Copy backbone tensors into a model, reporting offending shapes by name."""
    own = vit.state_dict()
    with torch.no_grad():
        for name, tensor in weights.tensors.items():
            if name not in own:
                continue
            if tuple(own[name].shape) != tuple(tensor.shape):
                raise CheckpointError(
                    f"Shape mismatch for '{name}': checkpoint {tuple(tensor.shape)} vs model {tuple(own[name].shape)}"
                )
            own[name].copy_(tensor.to(own[name].dtype))
    return vit


def save_backbone(weights: BackboneWeights, path: Union[str, Path], cfg: ModelConfig) -> None:
    write_tensor_archive(path, {"model": cfg.to_dict(), "source": weights.source}, weights.tensors, weights.fingerprint())


def _resize_positional(posemb: torch.Tensor, cfg: ModelConfig) -> torch.Tensor:
    """Bicubic resize of a 1 x (1+g*g) x d table to the configured grid."""
    cls_part, grid_part = posemb[:, :1], posemb[:, 1:]
    old = int(round(math.sqrt(grid_part.shape[1])))
    new = cfg.grid_size
    if old == new:
        return posemb
    logger.info("Resizing positional table from %dx%d to %dx%d", old, old, new, new)
    grid = grid_part.reshape(1, old, old, -1).permute(0, 3, 1, 2)
    grid = F.interpolate(grid, size=(new, new), mode="bicubic", align_corners=False)
    grid = grid.permute(0, 2, 3, 1).reshape(1, new * new, -1)
    return torch.cat([cls_part, grid], dim=1)


def _map_timm_state(state: Dict[str, torch.Tensor], cfg: ModelConfig) -> Dict[str, torch.Tensor]:
    """Rename a timm-style ViT state dict into this model's parameter names."""
    d = cfg.embed_dim
    n_embedders = 1 if cfg.share_patch_embed else cfg.num_modalities
    mapped = {}
    if "patch_embed.proj.weight" in state:
        for k in range(n_embedders):
            mapped[f"embeddings.patch_embeddings.{k}.weight"] = state["patch_embed.proj.weight"]
            mapped[f"embeddings.patch_embeddings.{k}.bias"] = state["patch_embed.proj.bias"]
    if "cls_token" in state:
        mapped["embeddings.cls_token"] = state["cls_token"]
    if "pos_embed" in state:
        mapped["embeddings.position_embeddings"] = _resize_positional(state["pos_embed"], cfg)
    if "norm.weight" in state:
        mapped["encoder_norm.weight"] = state["norm.weight"]
        mapped["encoder_norm.bias"] = state["norm.bias"]
    for i in range(cfg.num_layers):
        src, dst = f"blocks.{i}.", f"encoder.{i}."
        if src + "attn.qkv.weight" not in state:
            continue
        qkv_w = state[src + "attn.qkv.weight"]
        qkv_b = state[src + "attn.qkv.bias"]
        for j, part in enumerate(("query", "key", "value")):
            mapped[dst + f"attn.{part}.weight"] = qkv_w[j * d:(j + 1) * d]
            mapped[dst + f"attn.{part}.bias"] = qkv_b[j * d:(j + 1) * d]
        pairs = {
            "attn.proj": "attn.out", "norm1": "attention_norm", "norm2": "ffn_norm",
            "mlp.fc1": "ffn.fc1", "mlp.fc2": "ffn.fc2",
        }
        for theirs, ours in pairs.items():
            mapped[dst + ours + ".weight"] = state[src + theirs + ".weight"]
            mapped[dst + ours + ".bias"] = state[src + theirs + ".bias"]
    return mapped


def _map_jax_npz(weights, cfg: ModelConfig) -> Dict[str, torch.Tensor]:
    """Rename the original JAX ViT .npz export into this model's parameter names."""
    d = cfg.embed_dim
    n_embedders = 1 if cfg.share_patch_embed else cfg.num_modalities
    mapped = {}
    kernel = np2th(weights["embedding/kernel"], conv=True)
    for k in range(n_embedders):
        mapped[f"embeddings.patch_embeddings.{k}.weight"] = kernel
        mapped[f"embeddings.patch_embeddings.{k}.bias"] = np2th(weights["embedding/bias"])
    mapped["embeddings.cls_token"] = np2th(weights["cls"])
    mapped["embeddings.position_embeddings"] = _resize_positional(
        np2th(weights["Transformer/posembed_input/pos_embedding"]), cfg)
    mapped["encoder_norm.weight"] = np2th(weights["Transformer/encoder_norm/scale"])
    mapped["encoder_norm.bias"] = np2th(weights["Transformer/encoder_norm/bias"])
    files = set(weights.files) if hasattr(weights, "files") else set(weights.keys())
    for i in range(cfg.num_layers):
        root = f"Transformer/encoderblock_{i}"
        if pjoin(root, ATTENTION_Q, "kernel") not in files:
            continue
        dst = f"encoder.{i}."
        for part, key in (("query", ATTENTION_Q), ("key", ATTENTION_K), ("value", ATTENTION_V), ("out", ATTENTION_OUT)):
            mapped[dst + f"attn.{part}.weight"] = np2th(weights[pjoin(root, key, "kernel")]).reshape(d, d).t()
            mapped[dst + f"attn.{part}.bias"] = np2th(weights[pjoin(root, key, "bias")]).reshape(-1)
        mapped[dst + "ffn.fc1.weight"] = np2th(weights[pjoin(root, FC_0, "kernel")]).t()
        mapped[dst + "ffn.fc1.bias"] = np2th(weights[pjoin(root, FC_0, "bias")])
        mapped[dst + "ffn.fc2.weight"] = np2th(weights[pjoin(root, FC_1, "kernel")]).t()
        mapped[dst + "ffn.fc2.bias"] = np2th(weights[pjoin(root, FC_1, "bias")])
        mapped[dst + "attention_norm.weight"] = np2th(weights[pjoin(root, ATTENTION_NORM, "scale")])
        mapped[dst + "attention_norm.bias"] = np2th(weights[pjoin(root, ATTENTION_NORM, "bias")])
        mapped[dst + "ffn_norm.weight"] = np2th(weights[pjoin(root, MLP_NORM, "scale")])
        mapped[dst + "ffn_norm.bias"] = np2th(weights[pjoin(root, MLP_NORM, "bias")])
    return mapped


def load_pretrained(source: Union[str, Path], cfg: ModelConfig, seed: int = 0) -> BackboneWeights:
    """
    Load backbone weights from a file.

    Recognized formats: this repository's backbone archive (.fpk/.zip), a
    timm-style PyTorch state dict (.pth/.pt/.bin) and the JAX ViT .npz export.
    Entries the file lacks are filled from a seeded random init; the head is
    always initialized fresh.

    Args:
        source: Path to the weight file
        cfg: Target model configuration
        seed: Seed for entries the file does not provide

    Returns:
        BackboneWeights mapped to this model's parameter names

    Raises:
        CheckpointError: File missing or a tensor has the wrong shape
    """
    path = Path(source)
    if not path.exists():
        raise CheckpointError(f"Weight file not found: {path}")

    suffix = path.suffix.lower()
    if suffix == ".npz":
        mapped = _map_jax_npz(np.load(path), cfg)
    elif suffix in (".pth", ".pt", ".bin"):
        state = torch.load(path, map_location="cpu")
        if isinstance(state, dict) and "model" in state and isinstance(state["model"], dict):
            state = state["model"]
        mapped = _map_timm_state(state, cfg)
    else:
        _, tensors, _ = read_tensor_archive(path)
        mapped = tensors

    fallback = random_backbone(cfg, seed)
    tensors = dict(fallback.tensors)
    unmatched = []
    for name, template in fallback.tensors.items():
        if name.startswith("head."):
            continue
        if name not in mapped:
            unmatched.append(name)
            continue
        tensor = mapped[name]
        if tuple(tensor.shape) != tuple(template.shape):
            raise CheckpointError(
                f"Shape mismatch for '{name}': file {tuple(tensor.shape)} vs model {tuple(template.shape)}"
            )
        tensors[name] = tensor.detach().to(template.dtype).clone()
    if unmatched:
        logger.warning("%d backbone entries not found in %s; kept seeded init", len(unmatched), path.name)
    return BackboneWeights(tensors=tensors, source=str(path), unmatched=unmatched)


def freeze_backbone(model: nn.Module, unfreeze_last_block: bool = False) -> nn.Module:
    """
    Disable gradients for every backbone group except the head.

    Works on a bare MultimodalViT or on any module exposing it as
    ``.backbone``; all other parameters of ``model`` (prompts) stay trainable.
    """
    vit = model if isinstance(model, MultimodalViT) else model.backbone
    for param in model.parameters():
        param.requires_grad_(True)
    last = f"encoder.{vit.cfg.num_layers - 1}."
    for name, param in vit.named_parameters():
        trainable = name.startswith("head.") or (unfreeze_last_block and name.startswith(last))
        param.requires_grad_(trainable)
    return model


def frozen_state(model: nn.Module) -> Dict[str, torch.Tensor]:
    return {name: p for name, p in model.named_parameters() if not p.requires_grad}


def trainable_state(model: nn.Module) -> Dict[str, torch.Tensor]:
    return {name: p for name, p in model.named_parameters() if p.requires_grad}


def param_breakdown(model: nn.Module) -> Dict[str, Dict[str, int]]:
    """Scalar counts per top-level group, split into trainable and frozen."""
    groups: Dict[str, Dict[str, int]] = {}
    for name, param in model.named_parameters():
        key = name.split(".")[0] if not name.startswith("backbone.") else "backbone." + parameter_group(name[9:])
        entry = groups.setdefault(key, {"trainable": 0, "frozen": 0})
        entry["trainable" if param.requires_grad else "frozen"] += param.numel()
    return groups


def trainable_param_ratio(model: nn.Module) -> float:
    """Trainable scalars over all scalars."""
    total = sum(p.numel() for p in model.parameters())
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    return trainable / total if total else 0.0


def save_checkpoint(model: nn.Module, path: Union[str, Path], config: dict) -> str:
    """
    Store trainable tensors, config and the frozen-backbone fingerprint.

    Returns:
        The fingerprint written into the archive
    """
    tensors = {name: p.detach() for name, p in trainable_state(model).items()}
    fingerprint = tensor_fingerprint(frozen_state(model))
    write_tensor_archive(path, config, tensors, fingerprint)
    return fingerprint


def load_checkpoint(model: nn.Module, path: Union[str, Path],
                    allow_backbone_mismatch: bool = False) -> dict:
    """
    Restore trainable tensors into an already frozen model.

    Raises:
        CheckpointError: Fingerprint mismatch (unless allowed) or shape mismatch

    Returns:
        The config dictionary stored in the archive
    """
    config, tensors, fingerprint = read_tensor_archive(path)
    current = tensor_fingerprint(frozen_state(model))
    if fingerprint != current:
        if not allow_backbone_mismatch:
            raise CheckpointError(
                f"Backbone fingerprint mismatch: checkpoint {fingerprint[:12]} vs model {current[:12]}"
            )
        logger.warning("Loading %s against a different backbone (%s != %s)", path, fingerprint[:12], current[:12])
    own = trainable_state(model)
    missing = sorted(set(own) - set(tensors))
    if missing:
        raise CheckpointError(f"Checkpoint lacks trainable tensors: {', '.join(missing[:5])}")
    with torch.no_grad():
        for name, tensor in tensors.items():
            if name not in own:
                raise CheckpointError(f"Unexpected tensor '{name}' in checkpoint")
            if tuple(own[name].shape) != tuple(tensor.shape):
                raise CheckpointError(
                    f"Shape mismatch for '{name}': checkpoint {tuple(tensor.shape)} vs model {tuple(own[name].shape)}"
                )
            own[name].copy_(tensor.to(own[name].dtype))
    return config
