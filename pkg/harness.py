"""
Training, evaluation and experiment drivers for flexprompt.

This module handles:
- Dataset and protocol resolution from an ExperimentConfig
- Prompt tuning with partial-modality masking and MMR (Trainer)
- Intra-dataset (ACER) and cross-dataset (HTER) evaluation
- The alpha sweep with a config-hash keyed cache, and hyperparameter ablations
- Desk-scale acceptance checks (masking, flexibility, determinism, MMR direction)
"""

import logging
import math
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from statistics import median
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from config_manager import (
    HASH_EXCLUDED, ConfigManager, DatasetConfig, ExperimentConfig, OptimizerConfig, apply_preset, config_hash,
)
from core_model import BackboneWeights, frozen_state, live_score, load_checkpoint, load_pretrained, save_checkpoint
from data_manager import DataManager, read_tensor_archive
from data_structures import (
    EpochRecord, EvalReport, ModelConfig, MultimodalSample, ProtocolAssignment, ProtocolSetting, ProtocolSpec,
    RunRecord, ScoreSet,
)
from flexdata import (
    check_assignment, derive_seed, generate_protocol, load_directory_dataset, make_batch, synth_dataset,
)
from metrics import cross_report, intra_report, report_metrics
from mmr import apply_masks, mask_frequencies, mmr_values, sample_masks, total_loss
from prompt_engine import FlexPromptModel, build_model
from reporting import SweepRow, plot_ablation, plot_sweep, write_long_csv
from sweep_cache import SweepCache
from validation import CheckpointError, ConfigurationError, DivergenceError

logger = logging.getLogger(__name__)

TARGET_SPLIT = "target_test"
DTYPES = {"float32": torch.float32, "float64": torch.float64}
ABLATION_PARAMS = {"theta": "cd_intensity", "hidden_dim": "hidden_dim", "prompt_length": "prompt_length"}


def toy_experiment(**overrides) -> ExperimentConfig:
    """Small config for desk-scale checks: 4 layers, d=128, 32x32 images."""
    cfg = ExperimentConfig(
        model=ModelConfig(image_size=32, patch_size=8, num_layers=4, embed_dim=128, num_heads=4,
                          prompt_length=8, hidden_dim=16),
        protocol=ProtocolSpec(ProtocolSetting.RGBD_MISS_D, 0.7, 0),
        dataset=DatasetConfig(n_train=128, n_dev=64, n_test=64),
        optimizer=OptimizerConfig(lr=1e-3, weight_decay=0.0, batch_size=16),
        epochs=10,
    )
    return replace(cfg, **overrides)


def experiment_dict(cfg: ExperimentConfig) -> dict:
    """Config as stored in checkpoints: runtime locations left out."""
    return {k: v for k, v in cfg.to_dict().items() if k not in HASH_EXCLUDED}


def git_revision() -> Optional[str]:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
    except (OSError, subprocess.SubprocessError):
        return None
    if out.returncode != 0:
        return None
    return out.stdout.strip() or None


def resolve_datasets(cfg: ExperimentConfig) -> Dict[str, List[MultimodalSample]]:
    """
    Samples per split. Synthetic splits use derived seeds; cross mode adds a
    domain-shifted target test split.
    """
    ds = cfg.dataset
    size = cfg.model.image_size
    if ds.source == "synthetic":
        sizes = {"train": ds.n_train, "dev": ds.n_dev, "test": ds.n_test}
        out = {
            split: synth_dataset(n, size, derive_seed(ds.seed, split), ds.domain_shift, split)
            for split, n in sizes.items()
        }
        if cfg.eval_mode == "cross":
            out[TARGET_SPLIT] = synth_dataset(ds.n_test, size, derive_seed(ds.seed, TARGET_SPLIT),
                                              ds.target_domain_shift, TARGET_SPLIT)
        return out
    splits = ["train", "dev", "test"] + ([TARGET_SPLIT] if cfg.eval_mode == "cross" else [])
    out = {s: load_directory_dataset(ds.root, ds.manifest, size, ds.ir_mode, split=s) for s in splits}
    for split, samples in out.items():
        if not samples:
            raise ConfigurationError(f"Dataset split '{split}' is empty in {ds.manifest}")
    return out


def build_protocols(cfg: ExperimentConfig, datasets: Dict[str, List[MultimodalSample]]) -> Dict[str, ProtocolAssignment]:
    """One assignment per split; seeds are derived per split unless given explicitly."""
    assignments = {}
    for split, samples in datasets.items():
        if split in cfg.split_protocols:
            spec = cfg.split_protocols[split]
        else:
            spec = replace(cfg.protocol, seed=derive_seed(cfg.protocol.seed, split))
        assignment = generate_protocol([s.sample_id for s in samples], spec)
        check_assignment(samples, assignment)
        assignments[split] = assignment
    return assignments


def resolve_backbone(cfg: ExperimentConfig) -> Optional[BackboneWeights]:
    if cfg.pretrained:
        return load_pretrained(cfg.pretrained, cfg.model, seed=cfg.seed)
    return None


def score_samples(model: FlexPromptModel, samples: Sequence[MultimodalSample],
                  assignment: Optional[ProtocolAssignment], split: str,
                  batch_size: int = 64, dtype: torch.dtype = torch.float32) -> ScoreSet:
    """Live-probability scores under a protocol, no masking."""
    scores: List[float] = []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            inputs, _, _ = make_batch(chunk, assignment, model.cfg, dtype)
            logits, _ = model(inputs)
            scores.extend(float(s) for s in live_score(logits))
    return ScoreSet(scores=scores, labels=[s.label for s in samples], split=split,
                    ids=[s.sample_id for s in samples])


@dataclass
class StepLosses:
    bce: float
    mmr: Optional[float]
    total: float
    masked: int


@dataclass
class TrainResult:
    model: FlexPromptModel
    record: RunRecord
    assignments: Dict[str, ProtocolAssignment]
    scores: Dict[str, ScoreSet] = field(default_factory=dict)
    checkpoint_path: Optional[Path] = None
    step_losses: List[StepLosses] = field(default_factory=list)


class Trainer:
    """
    Prompt-tunes a frozen backbone under a flexible-modal protocol.

    Per step: zero-filled batch, mask draw per sample, forward on the masked
    batch, no-grad forward of the complete batch for samples whose mask
    fired, BCE plus weighted MMR, Adam step on trainable tensors only.
    """

    def __init__(self, cfg: ExperimentConfig,
                 datasets: Optional[Dict[str, List[MultimodalSample]]] = None,
                 backbone: Optional[BackboneWeights] = None,
                 write_artifacts: bool = True):
        cfg.validate().raise_if_invalid()
        self.cfg = cfg
        self.dtype = DTYPES[cfg.dtype]
        self.datasets = datasets if datasets is not None else resolve_datasets(cfg)
        self.assignments = build_protocols(cfg, self.datasets)
        self.backbone = backbone if backbone is not None else resolve_backbone(cfg)
        self.write_artifacts = write_artifacts
        self.data_manager = DataManager(cfg.output_dir) if write_artifacts else None

    def _build(self) -> FlexPromptModel:
        torch.manual_seed(self.cfg.seed)
        model = build_model(self.cfg.model, self.backbone, seed=self.cfg.seed,
                            unfreeze_last_block=self.cfg.finetune_last_block)
        return model.to(self.dtype)

    def _step(self, model: FlexPromptModel, optimizer: torch.optim.Optimizer, batch: List[MultimodalSample],
              mask_rng: np.random.Generator, epoch: int, step: int) -> StepLosses:
        cfg = self.cfg
        inputs, labels, avails = make_batch(batch, self.assignments["train"], cfg.model, self.dtype)
        mmr = None
        masked_count = 0
        if cfg.use_mmr:
            events = sample_masks(avails, cfg.model.mask_ratio, mask_rng)
            masked_inputs, fired = apply_masks(inputs, events)
            logits, cls = model(masked_inputs)
            masked_count = int(fired.sum())
            if masked_count:
                if cfg.mmr_stop_gradient:
                    with torch.no_grad():
                        _, complete_cls = model(inputs[fired])
                else:
                    _, complete_cls = model(inputs[fired])
                mmr = mmr_values(cls[fired], complete_cls, stop_gradient=cfg.mmr_stop_gradient)
        else:
            logits, cls = model(inputs)

        loss = total_loss(logits, labels, mmr, cfg.model.mmr_weight)
        if not torch.isfinite(loss.total):
            mmr_text = f"{loss.mmr.item():.4g}" if loss.mmr is not None else "n/a"
            raise DivergenceError(
                f"Non-finite loss at epoch {epoch} step {step}: bce={loss.bce.item():.4g} mmr={mmr_text}"
            )
        optimizer.zero_grad()
        loss.total.backward()
        optimizer.step()
        return StepLosses(
            bce=loss.bce.item(),
            mmr=loss.mmr.item() if loss.mmr is not None else None,
            total=loss.total.item(),
            masked=masked_count,
        )

    def fit(self) -> TrainResult:
        """
        Train, select a checkpoint, audit the frozen backbone and evaluate on test.

        Raises:
            DivergenceError: Non-finite loss
            CheckpointError: A frozen tensor changed during training
        """
        cfg = self.cfg
        torch.use_deterministic_algorithms(True, warn_only=True)
        started = time.perf_counter()
        model = self._build()
        snapshot = {name: p.detach().clone() for name, p in frozen_state(model).items()}
        params = [p for p in model.parameters() if p.requires_grad]
        optimizer = torch.optim.Adam(params, lr=cfg.optimizer.lr, weight_decay=cfg.optimizer.weight_decay)

        data_rng = np.random.Generator(np.random.PCG64(cfg.seed))
        mask_rng = np.random.Generator(np.random.PCG64(derive_seed(cfg.seed, "mask")))
        train = self.datasets["train"]
        record = RunRecord(config_hash=config_hash(cfg), git_revision=git_revision())
        step_losses: List[StepLosses] = []
        best_acer, best_state = math.inf, None
        batch_size = cfg.optimizer.batch_size

        for epoch in range(1, cfg.epochs + 1):
            order = data_rng.permutation(len(train))
            epoch_losses = []
            for step, start in enumerate(range(0, len(train), batch_size), 1):
                batch = [train[int(i)] for i in order[start:start + batch_size]]
                epoch_losses.append(self._step(model, optimizer, batch, mask_rng, epoch, step))
            step_losses.extend(epoch_losses)

            dev_scores = score_samples(model, self.datasets["dev"], self.assignments["dev"], "dev", dtype=self.dtype)
            dev_report = intra_report(dev_scores, dev_scores, cfg.threshold_rule, cfg.bpcer_target)
            mmr_terms = [s.mmr for s in epoch_losses if s.mmr is not None]
            record.append(EpochRecord(
                epoch=epoch,
                bce=float(np.mean([s.bce for s in epoch_losses])),
                mmr=float(np.mean(mmr_terms)) if mmr_terms else 0.0,
                total=float(np.mean([s.total for s in epoch_losses])),
                dev_acer=dev_report.acer,
            ))
            logger.info("epoch %d/%d bce=%.4f mmr=%.4f dev_acer=%.4f", epoch, cfg.epochs,
                        record.epochs[-1].bce, record.epochs[-1].mmr, dev_report.acer)
            if cfg.select == "best" and dev_report.acer < best_acer:
                best_acer, record.best_epoch = dev_report.acer, epoch
                best_state = {n: p.detach().clone() for n, p in model.named_parameters() if p.requires_grad}

        if cfg.select == "last":
            record.best_epoch = cfg.epochs
        elif best_state is not None:
            with torch.no_grad():
                for name, param in model.named_parameters():
                    if name in best_state:
                        param.copy_(best_state[name])

        audit_frozen(model, snapshot)
        scores, report = self._evaluate(model)
        record.test_report = report
        record.wall_clock_seconds = time.perf_counter() - started
        result = TrainResult(model=model, record=record, assignments=self.assignments,
                             scores=scores, step_losses=step_losses)
        if self.write_artifacts:
            result.checkpoint_path = self._write_artifacts(result)
        return result

    def _evaluate(self, model: FlexPromptModel) -> Tuple[Dict[str, ScoreSet], EvalReport]:
        cfg = self.cfg
        test_split = TARGET_SPLIT if cfg.eval_mode == "cross" else "test"
        scores = {
            split: score_samples(model, self.datasets[split], self.assignments[split], split, dtype=self.dtype)
            for split in ("dev", test_split)
        }
        protocol = self.assignments[test_split].spec.to_dict()
        if cfg.eval_mode == "cross":
            report = cross_report(scores["dev"], scores[test_split], cfg.threshold_rule, cfg.bpcer_target, protocol)
        else:
            report = intra_report(scores["dev"], scores[test_split], cfg.threshold_rule, cfg.bpcer_target, protocol)
        return scores, report

    def _write_artifacts(self, result: TrainResult) -> Path:
        dm = self.data_manager
        dm.safe_json_save("config.json", self.cfg.to_dict())
        for split, assignment in result.assignments.items():
            dm.save_protocol(assignment, f"protocol_{split}.json")
        checkpoint = dm.path("checkpoint.fpk")
        save_checkpoint(result.model, checkpoint, {"experiment": experiment_dict(self.cfg),
                                                   "config_hash": result.record.config_hash})
        for split, scores in result.scores.items():
            dm.write_scores(scores, f"scores_{split}.csv")
        dm.save_report(result.record.test_report, "report.json")
        dm.save_run_record(result.record)
        logger.info("Artifacts written to %s", dm.data_dir)
        return checkpoint


def audit_frozen(model: FlexPromptModel, snapshot: Dict[str, torch.Tensor]) -> None:
    """Assert every frozen tensor is bitwise unchanged."""
    current = frozen_state(model)
    for name, before in snapshot.items():
        if name not in current or not torch.equal(current[name].detach(), before):
            raise CheckpointError(f"Frozen tensor '{name}' changed during training")


def train(cfg: ExperimentConfig, datasets: Optional[Dict[str, List[MultimodalSample]]] = None,
          write_artifacts: bool = True) -> TrainResult:
    return Trainer(cfg, datasets=datasets, write_artifacts=write_artifacts).fit()


def load_trained_model(checkpoint: Union[str, Path],
                       allow_backbone_mismatch: bool = False) -> Tuple[FlexPromptModel, ExperimentConfig]:
    """Rebuild the model a checkpoint was trained with and restore its trainable tensors."""
    config, _, _ = read_tensor_archive(checkpoint)
    if "experiment" not in config:
        raise CheckpointError(f"{checkpoint} carries no experiment config")
    cfg = ExperimentConfig.from_dict(config["experiment"])
    model = build_model(cfg.model, resolve_backbone(cfg), seed=cfg.seed,
                        unfreeze_last_block=cfg.finetune_last_block).to(DTYPES[cfg.dtype])
    load_checkpoint(model, checkpoint, allow_backbone_mismatch=allow_backbone_mismatch)
    return model, cfg


@dataclass
class EvalSplit:
    """Samples plus the protocol they are evaluated under."""
    samples: List[MultimodalSample]
    assignment: ProtocolAssignment
    name: str = "test"


def evaluate(checkpoint: Optional[Union[str, Path]], dev: Union[EvalSplit, ScoreSet],
             test: Union[EvalSplit, ScoreSet], mode: str = "intra", tau: Optional[float] = None,
             rule: Optional[str] = None, bpcer_target: Optional[float] = None,
             allow_backbone_mismatch: bool = False) -> EvalReport:
    """
    Evaluate a checkpoint (or precomputed score sets).

    intra: tau from the dev set, ACER on test. cross: tau from the
    source-domain dev set, HTER on the target-domain test set.

    Args:
        checkpoint: Checkpoint archive; may be None when both inputs are ScoreSets
        dev: Dev split or dev scores
        test: Test split or test scores
        mode: "intra" or "cross"
        tau: Force a threshold instead of selecting one on dev
    """
    if mode not in ("intra", "cross"):
        raise ConfigurationError(f"mode must be 'intra' or 'cross', got '{mode}'")
    cfg = None
    if isinstance(dev, ScoreSet) and isinstance(test, ScoreSet):
        dev_scores, test_scores, protocol = dev, test, None
    else:
        if checkpoint is None:
            raise ConfigurationError("A checkpoint is required to score samples")
        model, cfg = load_trained_model(checkpoint, allow_backbone_mismatch)
        dtype = DTYPES[cfg.dtype]
        dev_scores = dev if isinstance(dev, ScoreSet) else \
            score_samples(model, dev.samples, dev.assignment, dev.name, dtype=dtype)
        test_scores = test if isinstance(test, ScoreSet) else \
            score_samples(model, test.samples, test.assignment, test.name, dtype=dtype)
        protocol = test.assignment.spec.to_dict() if isinstance(test, EvalSplit) else None
    rule = rule or (cfg.threshold_rule if cfg else "eer")
    target = bpcer_target or (cfg.bpcer_target if cfg else 0.01)
    builder = intra_report if mode == "intra" else cross_report
    return builder(dev_scores, test_scores, rule, target, protocol, tau)


def cell_metrics(report: EvalReport) -> Dict[str, float]:
    return {k: v for k, v in report_metrics(report).items() if k != "threshold"}


def run_cell(cfg_data: dict) -> Dict[str, Any]:
    """Train and evaluate one cell; importable by worker processes."""
    cfg = ExperimentConfig.from_dict(cfg_data)
    result = Trainer(cfg, write_artifacts=True).fit()
    return {"metrics": cell_metrics(result.record.test_report), "best_epoch": result.record.best_epoch}


@dataclass
class SweepResult:
    rows: List[SweepRow]
    csv_path: Optional[Path] = None
    plot_paths: List[Path] = field(default_factory=list)
    computed: int = 0
    cached: int = 0
    failed: int = 0


def _metric_names(cfg: ExperimentConfig) -> Tuple[str, ...]:
    return ("apcer", "bpcer", "acer") if cfg.eval_mode == "intra" else ("far", "frr", "hter")


def cell_split_protocols(cfg: ExperimentConfig, seed: int, setting: Optional[ProtocolSetting] = None,
                         alpha: Optional[float] = None) -> Dict[str, ProtocolSpec]:
    """
    Per-split protocol overrides for one sweep or ablation cell.

    A swept setting and alpha replace the override's own; the seed is
    always derived from the cell seed and the split name.
    """
    return {
        split: ProtocolSpec(
            setting if setting is not None else spec.setting,
            spec.alpha if alpha is None else alpha,
            derive_seed(seed, split),
        )
        for split, spec in cfg.split_protocols.items()
    }


def _run_cells(cells: List[Tuple[dict, ExperimentConfig]], cache: SweepCache, resume: bool,
               workers: int) -> Tuple[List[Optional[Dict[str, Any]]], int, int]:
    """Results per cell in order; None marks a failed cell."""
    results: List[Optional[Dict[str, Any]]] = [None] * len(cells)
    pending = []
    cached = 0
    for i, (label, cell_cfg) in enumerate(cells):
        key = config_hash(cell_cfg)
        hit = cache.get(key) if resume else None
        if hit is not None:
            results[i] = hit
            cached += 1
        else:
            pending.append(i)

    def record(i: int, outcome: Optional[Dict[str, Any]], error: Optional[str]) -> None:
        label, cell_cfg = cells[i]
        key = config_hash(cell_cfg)
        if error is None:
            entry = {"status": "ok", "cell": label, **outcome}
            results[i] = entry
        else:
            logger.warning("Sweep cell %s failed: %s", label, error)
            entry = {"status": "failed", "cell": label, "error": error}
        cache.put(key, entry)

    if workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {i: pool.submit(run_cell, cells[i][1].to_dict()) for i in pending}
            for i, future in futures.items():
                try:
                    record(i, future.result(), None)
                except Exception as e:
                    record(i, None, f"{type(e).__name__}: {e}")
    else:
        for i in pending:
            logger.info("Running cell %s", cells[i][0])
            try:
                record(i, run_cell(cells[i][1].to_dict()), None)
            except Exception as e:
                record(i, None, f"{type(e).__name__}: {e}")
    return results, cached, len(pending)


def _rows_for(cells: List[Tuple[dict, ExperimentConfig]], results: List[Optional[Dict[str, Any]]],
              metrics: Tuple[str, ...]) -> List[SweepRow]:
    rows = []
    for (label, _), result in zip(cells, results):
        for metric in metrics:
            value = result["metrics"].get(metric) if result else None
            rows.append(SweepRow(label["setting"], label["alpha"], label["seed"], label["variant"], metric,
                                 value, "ok" if result else "failed"))
    return rows


def sweep_alpha(cfg: ExperimentConfig, alphas: Sequence[float], settings: Sequence[ProtocolSetting],
                seeds: Sequence[int], variants: Sequence[str] = ("full",), resume: bool = False,
                out_dir: Optional[Union[str, Path]] = None, workers: int = 1,
                cache_root: Optional[Union[str, Path]] = None) -> SweepResult:
    """
    Train and evaluate every (setting, alpha, seed, variant) cell.

    Writes ``sweep.csv`` (long format) and one plot per setting and headline
    metric under ``out_dir``. Failed cells are kept with status ``failed``.
    """
    out_dir = Path(out_dir or cfg.output_dir)
    cache = SweepCache(DataManager(cache_root or ConfigManager().cache_root(cfg)))
    cells = []
    for setting in settings:
        for alpha in alphas:
            for seed in seeds:
                for variant in variants:
                    label = {"setting": ProtocolSetting(setting).value, "alpha": float(alpha),
                             "seed": int(seed), "variant": variant}
                    cell_cfg = apply_preset(replace(
                        cfg,
                        protocol=ProtocolSpec(ProtocolSetting(setting), float(alpha), int(seed)),
                        split_protocols=cell_split_protocols(cfg, int(seed), ProtocolSetting(setting), float(alpha)),
                        seed=int(seed),
                        output_dir=str(out_dir / "cells" / f"{label['setting']}_a{alpha:g}_s{seed}_{variant}"),
                    ), variant)
                    cell_cfg.validate().raise_if_invalid()
                    cells.append((label, cell_cfg))

    results, cached, computed = _run_cells(cells, cache, resume, workers)
    metrics = _metric_names(cfg)
    rows = _rows_for(cells, results, metrics)
    csv_path = write_long_csv(rows, out_dir / "sweep.csv")
    plots = plot_sweep(rows, metrics[-1], out_dir / "plots")
    failed = sum(1 for r in results if r is None)
    logger.info("Sweep finished: %d computed, %d cached, %d failed", computed, cached, failed)
    return SweepResult(rows=rows, csv_path=csv_path, plot_paths=plots,
                       computed=computed, cached=cached, failed=failed)


def ablate(cfg: ExperimentConfig, param: str, values: Sequence[float], seeds: Sequence[int] = (0,),
           resume: bool = False, out_dir: Optional[Union[str, Path]] = None, workers: int = 1,
           cache_root: Optional[Union[str, Path]] = None) -> SweepResult:
    """One cell per value of ``param`` (theta, hidden_dim or prompt_length) at the configured protocol."""
    if param not in ABLATION_PARAMS:
        raise ConfigurationError(f"Unknown ablation parameter '{param}'. Valid: {', '.join(ABLATION_PARAMS)}")
    out_dir = Path(out_dir or cfg.output_dir)
    cache = SweepCache(DataManager(cache_root or ConfigManager().cache_root(cfg)))
    field_name = ABLATION_PARAMS[param]
    cells = []
    for value in values:
        typed = float(value) if field_name == "cd_intensity" else int(value)
        for seed in seeds:
            label = {"setting": cfg.protocol.setting.value, "alpha": cfg.protocol.alpha,
                     "seed": int(seed), "variant": f"{param}={typed:g}"}
            cell_cfg = replace(
                cfg,
                model=replace(cfg.model, **{field_name: typed}),
                protocol=replace(cfg.protocol, seed=int(seed)),
                split_protocols=cell_split_protocols(cfg, int(seed)),
                seed=int(seed),
                output_dir=str(out_dir / "cells" / f"{param}_{typed:g}_s{seed}"),
            )
            cell_cfg.validate().raise_if_invalid()
            cells.append((label, cell_cfg))

    results, cached, computed = _run_cells(cells, cache, resume, workers)
    metrics = _metric_names(cfg)
    rows = _rows_for(cells, results, metrics)
    csv_path = write_long_csv(rows, out_dir / f"ablation_{param}.csv")
    plot = plot_ablation(rows, param, metrics[-1], out_dir / "plots" / f"ablation_{param}.png")
    return SweepResult(rows=rows, csv_path=csv_path, plot_paths=[plot] if plot else [],
                       computed=computed, cached=cached, failed=sum(1 for r in results if r is None))


FLEXIBILITY_PROTOCOLS = {
    "complete": ProtocolSpec(ProtocolSetting.RGBDIR_OVERLAP, 0.0),
    "missing_depth": ProtocolSpec(ProtocolSetting.RGBIR_MISS_IR, 0.0),
    "missing_ir": ProtocolSpec(ProtocolSetting.RGBD_MISS_D, 0.0),
    "rgb_only": ProtocolSpec(ProtocolSetting.RGBDIR_OVERLAP, 1.0),
}


def check_masking(gamma: float = 0.15, draws: int = 1_000_000, seed: int = 0,
                  tolerance: float = 0.003) -> Tuple[bool, Dict[str, float]]:
    freqs = mask_frequencies(gamma, draws, seed)
    ok = all(abs(freqs[k] - gamma) <= tolerance for k in ("MASK_D", "MASK_IR", "MASK_D_IR"))
    return ok, freqs


def check_flexibility(result: TrainResult, datasets: Dict[str, List[MultimodalSample]]) -> Dict[str, EvalReport]:
    """Evaluate one trained model under complete, missing-D, missing-IR and RGB-only protocols."""
    model = result.model
    dtype = next(model.parameters()).dtype
    reports = {}
    for name, spec in FLEXIBILITY_PROTOCOLS.items():
        scored = {}
        for split in ("dev", "test"):
            samples = datasets[split]
            assignment = generate_protocol([s.sample_id for s in samples], replace(spec, seed=derive_seed(0, split)))
            scored[split] = score_samples(model, samples, assignment, split, dtype=dtype)
        reports[name] = intra_report(scored["dev"], scored["test"], protocol=spec.to_dict())
    return reports


def check_determinism(cfg: ExperimentConfig, work_dir: Union[str, Path]) -> bool:
    """Two identical runs must give byte-identical checkpoints and reports."""
    work_dir = Path(work_dir)
    outputs = []
    for run in ("run_a", "run_b"):
        result = train(replace(cfg, output_dir=str(work_dir / run)))
        report = (work_dir / run / "report.json").read_bytes()
        outputs.append((result.checkpoint_path.read_bytes(), report))
    return outputs[0] == outputs[1]


def check_mmr_direction(cfg: ExperimentConfig, seeds: Sequence[int] = (0, 1, 2, 3, 4),
                        variants: Sequence[str] = ("full", "no_mmr", "no_stop_gradient")) -> Dict[str, float]:
    """Median test ACER per variant across seeds (no artifacts written)."""
    medians = {}
    for variant in variants:
        acers = []
        for seed in seeds:
            cell = apply_preset(replace(cfg, seed=seed, protocol=replace(cfg.protocol, seed=seed)), variant)
            acers.append(train(cell, write_artifacts=False).record.test_report.acer)
        medians[variant] = float(median(acers))
        logger.info("variant %s median ACER %.4f", variant, medians[variant])
    return medians
