"""
Main entry point for the lesion segmentation toolkit.
"""

import argparse
import logging
import os
import sys
from pathlib import Path

from lesionseg.ablation import run_ablation
from lesionseg.audit import run_audit
from lesionseg.autodiff import detect_anomaly
from lesionseg.checkpoint import restore_model
from lesionseg.config import CONFIG_FILE, RunConfig, load_config
from lesionseg.curriculum import Phase
from lesionseg.dataset import generate_dataset, load_split
from lesionseg.evaluation import evaluate_cases, export_heatmaps, sweep_gating, write_report
from lesionseg.logging_config import setup_logging
from lesionseg.training import train

ANOMALY_ENV = "LESIONSEG_DETECT_ANOMALY"


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg.apply_precision()
    return cfg


def _output_dir(args, cfg: RunConfig) -> Path:
    out_dir = Path(args.out or cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / CONFIG_FILE)
    return out_dir


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.replace(",", " ").split()]


def cmd_config(args):
    """Write a default run configuration."""
    path = RunConfig().save(args.out)
    print(f"Wrote default configuration to {path}")
    return 0


def cmd_gen_data(args):
    """Generate the synthetic train/val/test cases."""
    cfg = _resolve_config(args)
    out_dir = _output_dir(args, cfg)
    manifest = generate_dataset(cfg.data, out_dir, workers=args.workers)
    print(manifest.to_string(index=False))
    print(f"\n{len(manifest)} cases written to {out_dir}")
    return 0


def cmd_train(args):
    """Run the phase schedule and write checkpoints."""
    cfg = _resolve_config(args)
    out_dir = _output_dir(args, cfg)
    stop_after = Phase.SEG_ONLY if args.phases == "seg-only" else None
    _, summary = train(
        cfg,
        load_split(args.data, "train"),
        load_split(args.data, "val"),
        out_dir,
        stop_after=stop_after,
    )
    print(f"Trained {summary.epochs_run} epochs, final phase {summary.final_phase}")
    for transition in summary.transitions:
        print(f"  {transition}")
    print(f"Checkpoints: {', '.join(summary.checkpoints) or 'none'}")
    print(f"Training Dice: {summary.train_dice:.4f}")
    return 0


def cmd_eval(args):
    """Evaluate a checkpoint on one split."""
    cfg, model, _ = restore_model(args.checkpoint)
    out_dir = _output_dir(args, cfg)
    cases = load_split(args.data, args.split)
    metrics = evaluate_cases(model, cases, cfg.metrics)
    report = write_report(out_dir, metrics, args.split, structured=args.json)
    if args.export_heatmap:
        export_heatmaps(model, [volume for volume, _ in cases], out_dir / "heatmaps")
    print(report.format_table())
    return 0


def cmd_sweep(args):
    """Evaluate a refiner checkpoint over a grid of blend settings."""
    cfg, model, _ = restore_model(args.checkpoint)
    out_dir = _output_dir(args, cfg)
    table = sweep_gating(
        model,
        load_split(args.data, args.split),
        taus=_floats(args.taus),
        alphas=_floats(args.alphas),
        cfg=cfg.metrics,
    )
    table.to_csv(out_dir / f"sweep_{args.split}.csv", index=False)
    print(table.to_string(index=False))
    return 0


def cmd_ablate(args):
    """Train and test every ablation variant for every seed."""
    cfg = _resolve_config(args)
    if args.workers is not None:
        cfg = cfg.model_copy(
            update={"ablation": cfg.ablation.model_copy(update={"workers": args.workers})}
        )
    out_dir = _output_dir(args, cfg)
    table, results = run_ablation(cfg, args.data, out_dir)
    print(table.to_string())
    failed = [r for r in results if r.error is not None]
    for result in failed:
        print(f"FAILED {result.variant} (seed {result.seed}): {result.error}")
    return 1 if failed else 0


def cmd_audit(args):
    """Run gradient and/or invariant audits."""
    results = run_audit(args.what, trials=args.trials)
    for result in results:
        mark = "✓" if result.passed else "✗"
        print(f"{mark} {result.name}: {result.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"\n{len(failed)} audit(s) failed: {', '.join(failed)}")
        return 1
    print(f"\nAll {len(results)} audits passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Text-guided 3D lesion segmentation on synthetic phantoms",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s config --out run.cfg                       # Write default config
  %(prog)s gen-data --config run.cfg --out data       # Generate cases
  %(prog)s train --config run.cfg --data data --out runs/a
  %(prog)s eval --checkpoint runs/a/final.ckpt --data data --out runs/a/eval
  %(prog)s sweep --checkpoint runs/a/final.ckpt --data data --out runs/a/sweep
  %(prog)s ablate --config run.cfg --data data --out runs/ablation --workers 4
  %(prog)s audit --what all                           # Gradient + invariant audits
        """,
    )

    parser.add_argument(
        "--log-level",
        default=None,
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Logging level (default: $LESIONSEG_LOG_LEVEL or INFO)",
    )

    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    # Config command
    config_parser = subparsers.add_parser("config", help="Write a default run configuration")
    config_parser.add_argument(
        "--out", default="run_config.txt", help="Path of the config file (default: run_config.txt)"
    )
    config_parser.set_defaults(func=cmd_config)

    # Gen-data command
    gen_parser = subparsers.add_parser("gen-data", help="Generate synthetic cases")
    gen_parser.add_argument("--config", help="Run config file (default: built-in defaults)")
    gen_parser.add_argument("--out", help="Dataset directory (default: config output_dir)")
    gen_parser.add_argument(
        "--workers", type=int, default=1, help="Parallel generator processes (default: 1)"
    )
    gen_parser.set_defaults(func=cmd_gen_data)

    # Train command
    train_parser = subparsers.add_parser("train", help="Train with the phase schedule")
    train_parser.add_argument("--config", help="Run config file (default: built-in defaults)")
    train_parser.add_argument("--data", required=True, help="Dataset directory")
    train_parser.add_argument("--out", help="Run directory (default: config output_dir)")
    train_parser.add_argument(
        "--phases",
        default="all",
        choices=["seg-only", "all"],
        help="Stop after the segmentation-only phase or run every phase (default: all)",
    )
    train_parser.set_defaults(func=cmd_train)

    # Eval command
    eval_parser = subparsers.add_parser("eval", help="Evaluate a checkpoint")
    eval_parser.add_argument("--checkpoint", required=True, help="Checkpoint file")
    eval_parser.add_argument("--data", required=True, help="Dataset directory")
    eval_parser.add_argument(
        "--split", default="test", choices=["train", "val", "test"], help="Split (default: test)"
    )
    eval_parser.add_argument("--out", help="Report directory (default: config output_dir)")
    eval_parser.add_argument("--json", action="store_true", help="Also write a JSON report")
    eval_parser.add_argument(
        "--export-heatmap", action="store_true", help="Write upsampled heatmaps as case directories"
    )
    eval_parser.set_defaults(func=cmd_eval)

    # Sweep command
    sweep_parser = subparsers.add_parser("sweep", help="Sweep the confidence blend settings")
    sweep_parser.add_argument("--checkpoint", required=True, help="Checkpoint with a refiner")
    sweep_parser.add_argument("--data", required=True, help="Dataset directory")
    sweep_parser.add_argument(
        "--split", default="val", choices=["train", "val", "test"], help="Split (default: val)"
    )
    sweep_parser.add_argument("--taus", default="0.25 0.35 0.5", help="Confidence thresholds")
    sweep_parser.add_argument("--alphas", default="0 0.25 0.5", help="Blend weights")
    sweep_parser.add_argument("--out", help="Output directory (default: config output_dir)")
    sweep_parser.set_defaults(func=cmd_sweep)

    # Ablate command
    ablate_parser = subparsers.add_parser("ablate", help="Run the ablation variants")
    ablate_parser.add_argument("--config", help="Run config file (default: built-in defaults)")
    ablate_parser.add_argument("--data", required=True, help="Dataset directory")
    ablate_parser.add_argument("--out", help="Output directory (default: config output_dir)")
    ablate_parser.add_argument(
        "--workers", type=int, default=None, help="Parallel runs (default: ablation.workers)"
    )
    ablate_parser.set_defaults(func=cmd_ablate)

    # Audit command
    audit_parser = subparsers.add_parser("audit", help="Run gradient and invariant audits")
    audit_parser.add_argument(
        "--what",
        default="all",
        choices=["gradients", "invariants", "all"],
        help="Which audits to run (default: all)",
    )
    audit_parser.add_argument(
        "--trials", type=int, default=100, help="Random trials per gradient audit (default: 100)"
    )
    audit_parser.set_defaults(func=cmd_audit)

    return parser


def main(argv: list[str] | None = None):
    """Main entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)

    # Load environment variables if .env file exists
    env_file = Path(".env")
    if env_file.exists():
        from dotenv import load_dotenv

        load_dotenv()

    setup_logging(args.log_level)
    if os.getenv(ANOMALY_ENV) == "1":
        detect_anomaly(True)

    if not args.command:
        parser.print_help()
        return 1

    try:
        return args.func(args)
    except KeyboardInterrupt:
        print("\nInterrupted by user")
        return 1
    except Exception as e:
        logging.error(f"{args.command} failed: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
