"""
Multimodal samples, flexible-modal protocols and datasets.

This module handles:
- Zero-filling of unavailable modalities
- The four flexible-modal protocol generators
- A seeded synthetic RGB/Depth/IR face generator for desk-scale runs
- A manifest-driven directory loader (and writer) with an IR preprocessing hook
- Batching samples into B x M x C x H x W tensors
"""

import csv
import hashlib
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image

from data_structures import (
    COMPLETE, LIVE, MODALITIES, RGB_D, RGB_IR, RGB_ONLY, SPOOF,
    ModalityAvailability, ModelConfig, MultimodalSample, ProtocolAssignment, ProtocolSetting, ProtocolSpec,
)
from validation import ConfigValidator, ConfigurationError, DatasetError, ProtocolError

logger = logging.getLogger(__name__)

MANIFEST_HEADER = ["id", "rgb", "depth", "ir", "label", "split"]
LABEL_NAMES = {"1": LIVE, "live": LIVE, "0": SPOOF, "spoof": SPOOF}


@dataclass(frozen=True)
class DenseInput:
    """All three planes present; unavailable ones are zeros."""
    rgb: np.ndarray
    depth: np.ndarray
    ir: np.ndarray
    label: int = SPOOF
    sample_id: str = ""

    def plane(self, modality: str) -> np.ndarray:
        return getattr(self, modality)


def zero_fill(sample: Union[MultimodalSample, DenseInput], avail: ModalityAvailability) -> DenseInput:
    """
    Replace unavailable modality planes with zeros.

    Raises:
        ProtocolError: A modality marked available is absent from the sample
    """
    height, width = sample.rgb.shape[:2]
    planes = {}
    for modality in ("depth", "ir"):
        plane = sample.plane(modality)
        if avail.has(modality):
            if plane is None:
                raise ProtocolError(f"Sample '{sample.sample_id}' has no {modality} plane but the protocol expects one")
            planes[modality] = plane
        else:
            planes[modality] = np.zeros((height, width, 1), dtype=sample.rgb.dtype)
    return DenseInput(rgb=sample.rgb, depth=planes["depth"], ir=planes["ir"],
                      label=sample.label, sample_id=sample.sample_id)


def derive_seed(seed: int, split: str) -> int:
    """Split-specific seed: seed XOR a hash of the split tag."""
    tag = int.from_bytes(hashlib.sha256(split.encode("utf-8")).digest()[:4], "little")
    return (seed ^ tag) & 0x7FFFFFFF


def protocol_counts(n: int, spec: ProtocolSpec) -> Dict[str, int]:
    """
    Subset sizes for ``n`` samples, rounded half-to-even.

    The remainder goes to the complete subset, or to RGB-only for the
    limited-overlap setting with alpha >= 0.5 (which has no complete subset).
    """
    alpha, setting = spec.alpha, spec.setting
    counts = {"RGB": 0, "RGB-D": 0, "RGB-IR": 0, "RGB-D-IR": 0}
    if setting in (ProtocolSetting.RGBD_MISS_D, ProtocolSetting.RGBIR_MISS_IR, ProtocolSetting.RGBDIR_OVERLAP):
        rest = {
            ProtocolSetting.RGBD_MISS_D: "RGB-D",
            ProtocolSetting.RGBIR_MISS_IR: "RGB-IR",
            ProtocolSetting.RGBDIR_OVERLAP: "RGB-D-IR",
        }[setting]
        counts["RGB"] = round(alpha * n)
        counts[rest] = n - counts["RGB"]
    elif alpha < 0.5:
        pair = min(round(alpha * n), n // 2)
        counts["RGB-D"] = counts["RGB-IR"] = pair
        counts["RGB-D-IR"] = n - 2 * pair
    else:
        pair = min(round((1.0 - alpha) * n), n // 2)
        counts["RGB-D"] = counts["RGB-IR"] = pair
        counts["RGB"] = n - 2 * pair
    return counts


SUBSET_AVAILABILITY = {"RGB": RGB_ONLY, "RGB-D": RGB_D, "RGB-IR": RGB_IR, "RGB-D-IR": COMPLETE}


def generate_protocol(ids: Sequence[str], spec: ProtocolSpec) -> ProtocolAssignment:
    """
    Assign modality availability to every sample id.

    The ids are shuffled with a generator seeded by ``spec.seed`` and then
    sliced contiguously into RGB-only, RGB-D, RGB-IR and complete subsets.

    Args:
        ids: Ordered sample ids
        spec: Setting, missing ratio alpha and seed

    Returns:
        Immutable ProtocolAssignment
    """
    ConfigValidator.validate_protocol_spec(spec).raise_if_invalid()
    if not ids:
        raise ProtocolError("Cannot generate a protocol for an empty id list")
    if len(set(ids)) != len(ids):
        raise ProtocolError("Sample ids must be unique")

    counts = protocol_counts(len(ids), spec)
    order = np.random.Generator(np.random.PCG64(spec.seed)).permutation(len(ids))
    availability: Dict[str, ModalityAvailability] = {}
    start = 0
    for subset in ("RGB", "RGB-D", "RGB-IR", "RGB-D-IR"):
        for index in order[start:start + counts[subset]]:
            availability[ids[int(index)]] = SUBSET_AVAILABILITY[subset]
        start += counts[subset]
    ordered = {sid: availability[sid] for sid in ids}
    return ProtocolAssignment(spec=spec, availability=ordered, counts=counts)


def generate_split_protocols(ids_by_split: Dict[str, Sequence[str]], spec: ProtocolSpec) -> Dict[str, ProtocolAssignment]:
    """Apply one setting and alpha independently to every split with derived seeds."""
    return {
        split: generate_protocol(ids, replace(spec, seed=derive_seed(spec.seed, split)))
        for split, ids in ids_by_split.items()
    }


def check_assignment(samples: Sequence[MultimodalSample], assignment: ProtocolAssignment) -> None:
    """Every sample must be covered and every promised modality present."""
    for sample in samples:
        if sample.sample_id not in assignment.availability:
            raise ProtocolError(f"Sample '{sample.sample_id}' is not covered by the protocol")
        avail = assignment[sample.sample_id]
        for modality in ("depth", "ir"):
            if avail.has(modality) and sample.plane(modality) is None:
                raise ProtocolError(f"Protocol expects {modality} for '{sample.sample_id}' but the sample lacks it")


def _grid(size: int) -> Tuple[np.ndarray, np.ndarray]:
    coords = (np.arange(size, dtype=np.float64) + 0.5) / size - 0.5
    return np.meshgrid(coords, coords, indexing="ij")


def synth_sample(index: int, label: int, image_size: int, rng: np.random.Generator,
                 domain_shift: float = 0.0, split: str = "train") -> MultimodalSample:
    """
    One synthetic face.

    All samples share an RGB ellipse of random contrast on a random
    background. Live samples add a smooth radial depth bump and a warm IR
    blob at the ellipse center; spoof samples get a near-flat tilted depth
    plane, an attenuated IR blob and extra high-frequency RGB noise.
    """
    yy, xx = _grid(image_size)
    cy, cx = rng.uniform(-0.08, 0.08, size=2)
    ry, rx = rng.uniform(0.28, 0.36), rng.uniform(0.20, 0.28)
    inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    radial = (yy - cy) ** 2 + (xx - cx) ** 2

    background = rng.uniform(0.2, 0.6)
    contrast = rng.uniform(0.1, 0.5)
    skin = np.array([0.95, 0.75, 0.65]) * rng.uniform(0.8, 1.0)
    rgb = np.full((image_size, image_size, 3), background)
    rgb[inside] = np.clip(background + contrast * skin, 0.0, 1.0)
    rgb += rng.normal(0.0, rng.uniform(0.005, 0.015), size=rgb.shape)
    if label == SPOOF:
        rgb += rng.normal(0.0, 0.04, size=rgb.shape)

    if label == LIVE:
        sigma = 0.25
        depth = rng.uniform(0.05, 0.15) + rng.uniform(0.5, 0.8) * np.exp(-radial / (2 * sigma ** 2))
        ir = 0.1 + rng.uniform(0.6, 0.85) * np.exp(-radial / (2 * 0.18 ** 2))
    else:
        tilt = rng.uniform(-0.05, 0.05, size=2)
        depth = rng.uniform(0.2, 0.6) + tilt[0] * yy + tilt[1] * xx
        ir = 0.1 + 0.3 * rng.uniform(0.6, 0.85) * np.exp(-radial / (2 * 0.18 ** 2))
    depth = depth + rng.normal(0.0, 0.02, size=depth.shape)
    ir = ir + rng.normal(0.0, 0.02, size=ir.shape)

    if domain_shift:
        rgb = rgb + domain_shift * 0.3
        ir = ir * (1.0 - 0.5 * domain_shift)
        depth = depth + rng.normal(0.0, 0.05 * domain_shift, size=depth.shape)

    return MultimodalSample(
        sample_id=f"{split}-{index:06d}",
        rgb=np.clip(rgb, 0.0, 1.0).astype(np.float32),
        depth=np.clip(depth, 0.0, 1.0)[..., None].astype(np.float32),
        ir=np.clip(ir, 0.0, 1.0)[..., None].astype(np.float32),
        label=label,
        split=split,
    )


def synth_dataset(n: int, image_size: int, seed: int, domain_shift: float = 0.0,
                  split: str = "train") -> List[MultimodalSample]:
    """
    Balanced, seeded synthetic dataset (even indices live, odd spoof).

    Args:
        n: Number of samples, at least 2
        image_size: Pixels per side
        seed: Generator seed
        domain_shift: 0 for the source domain; > 0 shifts brightness, IR gain and depth noise
        split: Split tag used in sample ids
    """
    if n < 2:
        raise ConfigurationError(f"synth_dataset needs n >= 2, got {n}")
    rng = np.random.Generator(np.random.PCG64(seed))
    return [
        synth_sample(i, LIVE if i % 2 == 0 else SPOOF, image_size, rng, domain_shift, split)
        for i in range(n)
    ]


def strip_modalities(samples: Sequence[MultimodalSample], avail: ModalityAvailability) -> List[MultimodalSample]:
    """Drop the planes ``avail`` marks unavailable."""
    return [
        replace(s, depth=s.depth if avail.has_depth else None, ir=s.ir if avail.has_ir else None)
        for s in samples
    ]


IrHook = Callable[[np.ndarray], np.ndarray]
IR_HOOKS: Dict[str, IrHook] = {"passthrough": lambda plane: plane}


def register_ir_hook(name: str, hook: IrHook) -> None:
    """Register a custom IR composition (e.g. a gray/HOG/PLGF stack reduced to one plane)."""
    IR_HOOKS[name] = hook


def ir_preprocess(ir_plane: np.ndarray, mode: str = "passthrough") -> np.ndarray:
    """
    Apply the IR preprocessing hook ``mode``.

    Returns:
        Plane of the same spatial size, clipped to [0, 1]
    """
    if mode not in IR_HOOKS:
        raise ConfigurationError(f"Unknown IR preprocessing mode '{mode}'. Known: {', '.join(sorted(IR_HOOKS))}")
    out = IR_HOOKS[mode](ir_plane)
    if out.shape[:2] != ir_plane.shape[:2]:
        raise ConfigurationError(f"IR hook '{mode}' changed the plane size {ir_plane.shape[:2]} -> {out.shape[:2]}")
    if mode == "passthrough":
        return out
    return np.clip(out, 0.0, 1.0).astype(ir_plane.dtype)


def _read_plane(path: Path, channels: int, image_size: int, sample_id: str) -> np.ndarray:
    try:
        with Image.open(path) as image:
            image = image.convert("RGB" if channels == 3 else "L")
            if image.size != (image_size, image_size):
                image = image.resize((image_size, image_size), Image.BILINEAR)
            array = np.asarray(image, dtype=np.float32) / 255.0
    except (OSError, ValueError) as e:
        raise DatasetError(f"Could not read {path}: {e}", sample_id=sample_id)
    return array if channels == 3 else array[..., None]


def load_directory_dataset(root: Union[str, Path], manifest: Union[str, Path], image_size: int,
                           ir_mode: str = "passthrough", split: Optional[str] = None) -> List[MultimodalSample]:
    """
    Load samples listed in a manifest CSV (`id,rgb,depth,ir,label,split`).

    Empty depth/ir cells mark the modality absent. Paths are relative to ``root``.

    Raises:
        DatasetError: Bad header or label (whole manifest rejected), unreadable file (names the id)
    """
    root = Path(root)
    manifest_path = Path(manifest)
    if not manifest_path.is_absolute() and not manifest_path.exists():
        manifest_path = root / manifest_path
    with open(manifest_path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        rows = list(reader)
    if not header:
        logger.warning("Manifest %s is empty", manifest_path)
        return []
    if set(MANIFEST_HEADER) - set(header):
        raise DatasetError(f"Manifest {manifest_path} must have header {','.join(MANIFEST_HEADER)}")
    if not rows:
        logger.warning("Manifest %s lists no samples", manifest_path)
        return []
    for row in rows:
        if row["label"].strip().lower() not in LABEL_NAMES:
            raise DatasetError(f"Invalid label '{row['label']}' in manifest {manifest_path}", sample_id=row["id"])

    samples = []
    for row in rows:
        if split is not None and row["split"] != split:
            continue
        sid = row["id"]
        rgb = _read_plane(root / row["rgb"], 3, image_size, sid)
        depth = _read_plane(root / row["depth"], 1, image_size, sid) if row["depth"].strip() else None
        ir = _read_plane(root / row["ir"], 1, image_size, sid) if row["ir"].strip() else None
        if ir is not None:
            ir = ir_preprocess(ir, ir_mode)
        samples.append(MultimodalSample(sid, rgb, depth, ir, LABEL_NAMES[row["label"].strip().lower()], row["split"]))
    return samples


def _to_image(plane: np.ndarray) -> Image.Image:
    data = np.round(np.clip(plane, 0.0, 1.0) * 255.0).astype(np.uint8)
    return Image.fromarray(data if data.shape[-1] == 3 else data[..., 0], mode="RGB" if data.shape[-1] == 3 else "L")


def write_directory_dataset(samples: Sequence[MultimodalSample], root: Union[str, Path],
                            manifest_name: str = "manifest.csv") -> Path:
    """Write samples as 8-bit PNGs plus a manifest; absent modalities get empty cells."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    manifest_path = root / manifest_name
    with open(manifest_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_HEADER)
        for s in samples:
            cells = []
            for modality in MODALITIES:
                plane = s.plane(modality)
                if plane is None:
                    cells.append("")
                    continue
                rel = f"images/{s.sample_id}_{modality}.png"
                _to_image(plane).save(root / rel)
                cells.append(rel)
            writer.writerow([s.sample_id, *cells, s.label, s.split])
    return manifest_path


def dense_to_tensor(dense: DenseInput, in_channels: int = 3, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """M x C x H x W tensor; single-channel planes are replicated to ``in_channels``."""
    planes = []
    for modality in MODALITIES:
        plane = torch.from_numpy(np.ascontiguousarray(dense.plane(modality))).permute(2, 0, 1).to(dtype)
        if plane.shape[0] != in_channels:
            plane = plane[:1].expand(in_channels, -1, -1)
        planes.append(plane)
    return torch.stack(planes)


def make_batch(samples: Sequence[MultimodalSample], assignment: Optional[ProtocolAssignment],
               cfg: ModelConfig, dtype: torch.dtype = torch.float32
               ) -> Tuple[torch.Tensor, torch.Tensor, List[ModalityAvailability]]:
    """
    Zero-fill and stack samples.

    Returns:
        Tuple of (B x M x C x H x W inputs, B labels, per-sample availability)
    """
    inputs, labels, avails = [], [], []
    for sample in samples:
        avail = assignment[sample.sample_id] if assignment is not None else sample.availability
        if sample.rgb.shape[:2] != (cfg.image_size, cfg.image_size):
            raise ConfigurationError(
                f"Sample '{sample.sample_id}' is {sample.rgb.shape[:2]}, model expects {cfg.image_size}x{cfg.image_size}"
            )
        inputs.append(dense_to_tensor(zero_fill(sample, avail), cfg.in_channels, dtype))
        labels.append(sample.label)
        avails.append(avail)
    return torch.stack(inputs), torch.tensor(labels, dtype=torch.long), avails
