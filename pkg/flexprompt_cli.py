"""
Command line interface for flexprompt.

One handler per subcommand. Handlers print short status lines and return
an exit code; library errors propagate to main.py, which turns them into
a message with suggestions.
"""

import csv
import logging
import math
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional

import torch

from config_manager import ConfigManager, ExperimentConfig, apply_preset
from core_model import freeze_backbone, param_breakdown, trainable_param_ratio
from data_manager import DataManager, read_scores
from data_structures import ModelConfig, MultimodalSample, ProtocolSetting, ProtocolSpec
from flexdata import derive_seed, generate_protocol, synth_dataset, write_directory_dataset
from harness import (
    EvalSplit, ablate, check_determinism, check_flexibility, check_masking, check_mmr_direction, evaluate,
    load_trained_model, resolve_datasets, sweep_alpha, toy_experiment, train,
)
from prompt_engine import FlexPromptModel
from reporting import ExperimentReport, ReportExporter, sweep_table
from sweep_cache import SweepCache
from validation import ConfigValidator, ConfigurationError, DatasetError, ProtocolError
from weights_fetcher import WeightsFetcher

logger = logging.getLogger(__name__)


class FlexPromptCLI:
    """
    Subcommand handlers.

    Features:
    - Protocol generation and synthetic dataset export
    - Training, evaluation, alpha sweeps and ablations
    - Parameter report, pretrained weight download, acceptance checks
    """

    def __init__(self, config_manager: Optional[ConfigManager] = None):
        self.config_manager = config_manager or ConfigManager()

    def _load_config(self, args) -> ExperimentConfig:
        cfg = self.config_manager.load(getattr(args, "config", None))
        if getattr(args, "variant", None):
            cfg = apply_preset(cfg, args.variant)
        if getattr(args, "output_dir", None):
            cfg = replace(cfg, output_dir=args.output_dir)
        if getattr(args, "pretrained", None):
            cfg = replace(cfg, pretrained=args.pretrained)
        if getattr(args, "select", None):
            cfg = replace(cfg, select=args.select)
        if getattr(args, "no_mmr", False):
            cfg = replace(cfg, use_mmr=False)
        if getattr(args, "mmr_no_stop_gradient", False):
            cfg = replace(cfg, mmr_stop_gradient=False)
        if getattr(args, "vanilla_prompt_only", False):
            cfg = replace(cfg, model=replace(cfg.model, use_contextual_prompts=False))
        if getattr(args, "contextual_only", False):
            cfg = replace(cfg, model=replace(cfg.model, use_vanilla_prompts=False))
        if getattr(args, "non_residual_context", False):
            cfg = replace(cfg, model=replace(cfg.model, residual_context=False))
        return cfg.validate().raise_if_invalid()

    # protocol / data

    def protocol_gen(self, args) -> int:
        spec = ProtocolSpec(ProtocolSetting(args.setting), args.alpha, args.seed)
        if args.manifest:
            ids = _manifest_ids(Path(args.manifest), args.split)
            if not ids:
                raise DatasetError(f"No rows for split '{args.split}' in {args.manifest}")
        else:
            ids = [f"{args.split}-{i:06d}" for i in range(args.synthetic)]
        assignment = generate_protocol(ids, spec)
        out = Path(args.out)
        DataManager(out.parent).save_protocol(assignment, out.name)
        counts = ", ".join(f"{k}={v}" for k, v in assignment.counts.items())
        print(f"✅ Protocol {spec.setting.value} alpha={spec.alpha:g} over {len(assignment)} samples: {counts}")
        print(f"   Saved to {out}")
        return 0

    def data_synth(self, args) -> int:
        written = []
        for split, n in (("train", args.n_train), ("dev", args.n_dev), ("test", args.n_test)):
            if n:
                written.extend(synth_dataset(n, args.image_size, derive_seed(args.seed, split), args.domain_shift, split))
        manifest = write_directory_dataset(written, args.out)
        print(f"✅ Wrote {len(written)} synthetic samples to {args.out}")
        print(f"   Manifest: {manifest}")
        return 0

    # training / evaluation

    def train(self, args) -> int:
        cfg = self._load_config(args)
        print(f"🚀 Training variant '{cfg.variant}' under {cfg.protocol.setting.value} alpha={cfg.protocol.alpha:g}")
        result = train(cfg)
        report = result.record.test_report
        headline = "ACER" if report.mode == "intra" else "HTER"
        print(f"✅ Done in {result.record.wall_clock_seconds:.1f}s, best epoch {result.record.best_epoch}")
        print(f"   Test {headline}: {report.headline() * 100:.2f}% (threshold {report.threshold:.4f})")
        print(f"   Checkpoint: {result.checkpoint_path}")
        return 0

    def eval(self, args) -> int:
        dev_path, test_path = Path(args.dev), Path(args.test)
        if dev_path.suffix == ".csv" and test_path.suffix == ".csv":
            dev, test = read_scores(dev_path), read_scores(test_path)
        else:
            dev, test = self._eval_splits(args.ckpt, dev_path, test_path, args.allow_backbone_mismatch)
        report = evaluate(args.ckpt, dev, test, mode=args.mode, tau=args.tau,
                          allow_backbone_mismatch=args.allow_backbone_mismatch)
        for name, value in report.to_dict().items():
            if isinstance(value, float):
                print(f"   {name:>9}: {value:.4f}")
        if args.out:
            out = Path(args.out)
            DataManager(out.parent).save_report(report, out.name)
            print(f"✅ Report saved to {out}")
        return 0

    def _eval_splits(self, ckpt: str, dev_path: Path, test_path: Path, allow_mismatch: bool):
        _, cfg = load_trained_model(ckpt, allow_mismatch)
        # cross mode also resolves the target-domain split
        cfg = replace(cfg, eval_mode="cross")
        pool: Dict[str, MultimodalSample] = {
            s.sample_id: s for samples in resolve_datasets(cfg).values() for s in samples
        }
        splits = []
        for path, name in ((dev_path, "dev"), (test_path, "test")):
            assignment = DataManager(path.parent).load_protocol(path.name)
            missing = [sid for sid in assignment.availability if sid not in pool]
            if missing:
                raise ProtocolError(f"{len(missing)} protocol ids in {path} are not in the dataset, e.g. {missing[0]}")
            splits.append(EvalSplit([pool[sid] for sid in assignment.availability], assignment, name))
        return splits[0], splits[1]

    def sweep(self, args) -> int:
        cfg = self._load_config(args)
        alphas = ConfigValidator.parse_alpha_range(args.alphas).raise_if_invalid()
        seeds = ConfigValidator.parse_int_list(args.seeds).raise_if_invalid()
        settings = _parse_settings(args.settings) if args.settings else [cfg.protocol.setting]
        variants = args.variants.split(",") if args.variants else [cfg.variant]
        total = len(alphas) * len(seeds) * len(settings) * len(variants)
        print(f"🔬 Sweeping {total} cells ({len(settings)} settings x {len(alphas)} alphas x "
              f"{len(seeds)} seeds x {len(variants)} variants)")
        result = sweep_alpha(cfg, alphas, settings, seeds, variants, resume=args.resume,
                             out_dir=args.out, workers=args.workers)
        metric = "acer" if cfg.eval_mode == "intra" else "hter"
        table = sweep_table(result.rows, metric)
        print(table.to_table_string())
        ReportExporter.export_to_file(table, result.csv_path.with_name(f"{metric}_table.txt"))
        status = "✅" if not result.failed else "⚠️ "
        print(f"{status} {result.computed} computed, {result.cached} cached, {result.failed} failed")
        print(f"   CSV: {result.csv_path}")
        for path in result.plot_paths:
            print(f"   Plot: {path}")
        return 0 if not result.failed else 1

    def ablate(self, args) -> int:
        cfg = self._load_config(args)
        values = [float(v) for v in args.values.split(",") if v.strip()]
        seeds = ConfigValidator.parse_int_list(args.seeds).raise_if_invalid()
        result = ablate(cfg, args.param, values, seeds, resume=args.resume, out_dir=args.out, workers=args.workers)
        metric = "acer" if cfg.eval_mode == "intra" else "hter"
        for row in result.rows:
            if row.metric == metric:
                shown = f"{row.value * 100:.2f}%" if row.value is not None else row.status
                print(f"   {row.variant:<20} seed {row.seed}: {metric.upper()} {shown}")
        print(f"✅ CSV: {result.csv_path}")
        return 0 if not result.failed else 1

    # inspection / utilities

    def params(self, args) -> int:
        cfg = self._load_config(args)
        model = _count_only_model(cfg.model, cfg.finetune_last_block)
        breakdown = param_breakdown(model)
        rows = [[group, f"{c['trainable']:,}", f"{c['frozen']:,}"] for group, c in sorted(breakdown.items())]
        trainable = sum(c["trainable"] for c in breakdown.values())
        total = trainable + sum(c["frozen"] for c in breakdown.values())
        ratio = trainable_param_ratio(model)
        table = ExperimentReport(
            title="Parameter breakdown",
            headers=["group", "trainable", "frozen"],
            rows=rows,
            summary=f"Trainable {trainable:,} / {total:,} = {ratio * 100:.2f}%",
        )
        print(table.to_table_string())
        return 0

    def weights_fetch(self, args) -> int:
        fetcher = WeightsFetcher(self.config_manager.cache_root(), timeout=args.timeout)
        path = fetcher.fetch(args.url, filename=args.filename, sha256=args.sha256, force=args.force)
        print(f"✅ Weights available at {path}")
        return 0

    def config_status(self, args) -> int:
        cfg = self._load_config(args)
        self.config_manager.print_configuration_status(cfg)
        if args.save:
            print(f"   Saved resolved config to {self.config_manager.save(cfg, args.save)}")
        return 0

    def cache(self, args) -> int:
        cache = SweepCache(DataManager(self.config_manager.cache_root()))
        if args.action == "clear":
            print(f"🗑️  Removed {cache.clear()} cached cells")
        else:
            stats = cache.statistics()
            print(f"📦 Sweep cache at {self.config_manager.cache_root()}")
            for key, value in stats.items():
                print(f"   {key}: {value}")
        return 0

    def check(self, args) -> int:
        cfg = self._load_config(args) if args.config else toy_experiment()
        if args.name == "masking":
            ok, freqs = check_masking(args.gamma, args.draws)
            for kind, freq in freqs.items():
                print(f"   {kind:<10} {freq:.5f}")
        elif args.name == "flexibility":
            result = train(replace(cfg, output_dir=str(Path(args.work_dir) / "flexibility")))
            reports = check_flexibility(result, resolve_datasets(cfg))
            ok = True
            for name, report in reports.items():
                finite = all(math.isfinite(v) for v in (report.apcer, report.bpcer, report.acer))
                ok = ok and finite
                print(f"   {name:<14} ACER {report.acer * 100:.2f}% {'✅' if finite else '❌'}")
        elif args.name == "determinism":
            ok = check_determinism(cfg, Path(args.work_dir) / "determinism")
        else:
            seeds = ConfigValidator.parse_int_list(args.seeds).raise_if_invalid()
            medians = check_mmr_direction(cfg, seeds)
            for variant, value in medians.items():
                print(f"   {variant:<14} median ACER {value * 100:.2f}%")
            ok = (medians["full"] <= medians["no_mmr"]
                  and max(medians["full"], medians["no_mmr"]) <= 0.20
                  and medians["no_stop_gradient"] >= medians["full"])
        print(f"{'✅' if ok else '❌'} check {args.name} {'passed' if ok else 'failed'}")
        return 0 if ok else 1


def _parse_settings(text: str) -> List[ProtocolSetting]:
    valid = {s.value: s for s in ProtocolSetting}
    settings = []
    for name in (t.strip() for t in text.split(",") if t.strip()):
        if name not in valid:
            raise ConfigurationError(f"Unknown protocol setting '{name}'. Valid settings: {', '.join(valid)}")
        settings.append(valid[name])
    return settings


def _manifest_ids(manifest: Path, split: str) -> List[str]:
    with open(manifest, "r", encoding="utf-8", newline="") as f:
        return [row["id"] for row in csv.DictReader(f) if row.get("split") == split]


def _count_only_model(cfg: ModelConfig, unfreeze_last_block: bool) -> FlexPromptModel:
    """Structure-only model on the meta device; enough for parameter counting."""
    with torch.device("meta"):
        model = FlexPromptModel(cfg)
    return freeze_backbone(model, unfreeze_last_block=unfreeze_last_block)

