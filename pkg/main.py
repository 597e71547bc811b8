"""
Main entry point for flexprompt.

Flexible-modal face anti-spoofing with prompt tuning on a frozen
multimodal ViT:
- Protocol generation for missing-modality train/test settings
- Synthetic and on-disk RGB / depth / IR datasets
- Training with vanilla and residual contextual prompts plus MMR
- Intra- and cross-dataset evaluation (APCER, BPCER, ACER, HTER, EER)
- Alpha sweeps, ablations and acceptance checks

Quick Start:
1. Run: python main.py data synth --out data/synth
2. Run: python main.py train --output-dir runs/first
3. Inspect runs/first/report.json

Requirements:
- Python 3.9+
- torch, numpy, Pillow, matplotlib, requests
"""

import argparse
import logging
import sys
from typing import List, Optional

from config_manager import PRESETS
from data_structures import ProtocolSetting
from flexprompt_cli import FlexPromptCLI
from harness import ABLATION_PARAMS
from validation import ErrorHandler, FlexPromptError

__version__ = "1.0.0"

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

SETTINGS = [s.value for s in ProtocolSetting]


def _add_variant_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="Experiment config JSON")
    parser.add_argument("--variant", choices=sorted(PRESETS), help="Apply a named variant preset")
    parser.add_argument("--no-mmr", action="store_true", help="Disable the modality-missing regularizer")
    parser.add_argument("--mmr-no-stop-gradient", action="store_true",
                        help="Let MMR gradients flow into the complete-input branch")
    parser.add_argument("--vanilla-prompt-only", action="store_true", help="Use vanilla prompts only")
    parser.add_argument("--contextual-only", action="store_true", help="Use contextual prompts only")
    parser.add_argument("--non-residual-context", action="store_true",
                        help="Drop the residual carry between contextual prompts")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flexprompt",
        description="Flexible-modal face anti-spoofing with prompt tuning",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  flexprompt protocol gen --setting RGBD_MISS_D --alpha 0.3 --seed 0 --manifest data/manifest.csv --out p.json
  flexprompt data synth --out data/synth
  flexprompt train --config exp.json
  flexprompt eval --ckpt runs/x/checkpoint.fpk --dev runs/x/scores_dev.csv --test runs/x/scores_test.csv
  flexprompt sweep --config exp.json --alphas 0:1:0.1 --seeds 0,1,2
  flexprompt check masking --gamma 0.15

Set FLEXPROMPT_CACHE to choose where sweep cells and downloaded weights are cached.
        """
    )
    parser.add_argument("--version", action="version", version=f"flexprompt v{__version__}")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="Logging level (default: INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    # protocol gen
    protocol = sub.add_parser("protocol", help="Missing-modality protocols")
    protocol_sub = protocol.add_subparsers(dest="protocol_command", required=True)
    gen = protocol_sub.add_parser("gen", help="Assign a modality subset to every sample of a split")
    gen.add_argument("--setting", required=True, choices=SETTINGS)
    gen.add_argument("--alpha", type=float, required=True, help="Missing ratio in [0, 1]")
    gen.add_argument("--seed", type=int, default=0)
    source = gen.add_mutually_exclusive_group(required=True)
    source.add_argument("--manifest", help="Dataset manifest CSV")
    source.add_argument("--synthetic", type=int, help="Number of synthetic sample ids")
    gen.add_argument("--split", default="train", help="Manifest split to assign (default: train)")
    gen.add_argument("--out", required=True, help="Output protocol JSON")
    gen.set_defaults(handler="protocol_gen")

    # data synth
    data = sub.add_parser("data", help="Datasets")
    data_sub = data.add_subparsers(dest="data_command", required=True)
    synth = data_sub.add_parser("synth", help="Write a synthetic RGB/depth/IR dataset to disk")
    synth.add_argument("--n-train", type=int, default=64)
    synth.add_argument("--n-dev", type=int, default=32)
    synth.add_argument("--n-test", type=int, default=32)
    synth.add_argument("--image-size", type=int, default=224)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--domain-shift", type=float, default=0.0)
    synth.add_argument("--out", required=True, help="Dataset root directory")
    synth.set_defaults(handler="data_synth")

    train = sub.add_parser("train", help="Train one configuration")
    _add_variant_flags(train)
    train.add_argument("--output-dir", help="Override the run directory")
    train.add_argument("--pretrained", help="Backbone export (.npz/.pth/.bin)")
    train.add_argument("--select", choices=["best", "last"], help="Checkpoint selection")
    train.set_defaults(handler="train")

    evaluate = sub.add_parser("eval", help="Evaluate a checkpoint or score files")
    evaluate.add_argument("--ckpt", help="Checkpoint file (not needed for score CSVs with --tau)")
    evaluate.add_argument("--dev", required=True, help="Dev scores CSV or dev protocol JSON")
    evaluate.add_argument("--test", required=True, help="Test scores CSV or test protocol JSON")
    evaluate.add_argument("--mode", choices=["intra", "cross"], default="intra")
    evaluate.add_argument("--tau", type=float, help="Fixed threshold instead of the dev rule")
    evaluate.add_argument("--allow-backbone-mismatch", action="store_true")
    evaluate.add_argument("--out", help="Write the report JSON here")
    evaluate.set_defaults(handler="eval")

    sweep = sub.add_parser("sweep", help="Sweep the missing ratio alpha")
    _add_variant_flags(sweep)
    sweep.add_argument("--alphas", default="0:1:0.1", help="start:stop:step or a comma list")
    sweep.add_argument("--seeds", default="0", help="Comma separated seeds")
    sweep.add_argument("--settings", help=f"Comma separated subset of {','.join(SETTINGS)}")
    sweep.add_argument("--variants", help=f"Comma separated presets ({','.join(sorted(PRESETS))})")
    sweep.add_argument("--resume", action="store_true", help="Reuse cached cells")
    sweep.add_argument("--workers", type=int, default=1)
    sweep.add_argument("--out", default="sweep_out", help="Output directory")
    sweep.set_defaults(handler="sweep")

    ablation = sub.add_parser("ablate", help="Ablate one prompt hyperparameter")
    _add_variant_flags(ablation)
    ablation.add_argument("--param", required=True, choices=sorted(ABLATION_PARAMS))
    ablation.add_argument("--values", required=True, help="Comma separated values")
    ablation.add_argument("--seeds", default="0")
    ablation.add_argument("--resume", action="store_true")
    ablation.add_argument("--workers", type=int, default=1)
    ablation.add_argument("--out", default="ablation_out")
    ablation.set_defaults(handler="ablate")

    params = sub.add_parser("params", help="Trainable / frozen parameter breakdown")
    _add_variant_flags(params)
    params.set_defaults(handler="params")

    weights = sub.add_parser("weights", help="Pretrained backbone weights")
    weights_sub = weights.add_subparsers(dest="weights_command", required=True)
    fetch = weights_sub.add_parser("fetch", help="Download a backbone export into the cache")
    fetch.add_argument("--url", required=True)
    fetch.add_argument("--filename")
    fetch.add_argument("--sha256", help="Expected SHA-256 hex digest")
    fetch.add_argument("--force", action="store_true")
    fetch.add_argument("--timeout", type=float, default=30.0)
    fetch.set_defaults(handler="weights_fetch")

    config = sub.add_parser("config", help="Show the resolved configuration")
    _add_variant_flags(config)
    config.add_argument("--save", help="Write the resolved config JSON here")
    config.set_defaults(handler="config_status")

    cache = sub.add_parser("cache", help="Sweep cache")
    cache.add_argument("action", choices=["stats", "clear"])
    cache.set_defaults(handler="cache")

    check = sub.add_parser("check", help="Acceptance checks")
    check.add_argument("name", choices=["masking", "flexibility", "determinism", "mmr-direction"])
    check.add_argument("--config", help="Experiment config JSON (default: toy experiment)")
    check.add_argument("--gamma", type=float, default=0.15)
    check.add_argument("--draws", type=int, default=1_000_000)
    check.add_argument("--seeds", default="0,1,2,3,4")
    check.add_argument("--work-dir", default="check_out")
    check.set_defaults(handler="check")

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run one subcommand and return its exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)

    cli = FlexPromptCLI()
    try:
        return getattr(cli, args.handler)(args)
    except FlexPromptError as e:
        message, suggestions = ErrorHandler.describe(e)
        print(f"❌ {message}", file=sys.stderr)
        for suggestion in suggestions:
            print(f"   • {suggestion}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("\n\nInterrupted.", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
