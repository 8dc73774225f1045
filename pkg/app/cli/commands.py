"""BlindQE - CLI Subcommands"""
import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Callable, Dict

from app.config import Settings
from app.cli.dependencies import (
    CliParser,
    UsageError,
    add_settings_flags,
    require_file,
    resolve_dataset,
)
from app.models import ArchConfig, Split, Variant
from app.nets import load_checkpoint
from app.pipeline.enhancement_pipeline import EnhancementPipeline
from app.pipeline.training_pipeline import TrainingPipeline
from app.services.dataset_service import (
    MANIFEST_NAME,
    DatasetService,
    load_luma,
    manifest_digest,
    save_luma,
)
from app.services.evaluation_service import delta_psnr, evaluate, read_records, report, write_report

logger = logging.getLogger(__name__)

Handler = Callable[[argparse.Namespace, Settings], int]


def build_dataset(args: argparse.Namespace, settings: Settings) -> int:
    """Compress a corpus at every QP and write planes plus manifest."""
    manifest = DatasetService(settings).build_dataset(args.corpus, args.out, seed=settings.seed)
    manifest_path = Path(args.out) / MANIFEST_NAME
    print(f"{len(manifest.entries)} entries written to {manifest_path}")
    print(f"sha256 {manifest_digest(manifest_path)}")
    return 0


def _stage1_weights(args: argparse.Namespace, settings: Settings):
    if args.resume_from is not None:
        return None
    if args.stage1_weights is None:
        raise UsageError("--stage1-weights is required unless --resume-from is given")
    weights, _ = load_checkpoint(
        require_file(args.stage1_weights, "--stage1-weights"),
        expected_arch=ArchConfig.from_settings(settings),
    )
    return weights


def train(args: argparse.Namespace, settings: Settings) -> int:
    """Run stage 1 or stage 2."""
    manifest, root = resolve_dataset(args.data)
    pipeline = TrainingPipeline(settings, args.out)
    try:
        if args.stage == "stage1":
            result = pipeline.train_stage1(manifest, root, resume_from=args.resume_from)
        else:
            result = pipeline.train_stage2(
                manifest, root,
                stage1_weights=_stage1_weights(args, settings),
                resume_from=args.resume_from,
            )
    finally:
        pipeline.metrics.close()
    print(result.checkpoint)
    return 0


def ablate(args: argparse.Namespace, settings: Settings) -> int:
    """Train the NoEst or NoDiff variant."""
    kind = Variant.NOEST if args.kind == "noest" else Variant.NODIFF
    manifest, root = resolve_dataset(args.data)
    pipeline = TrainingPipeline(settings, args.out)
    try:
        stage1 = _stage1_weights(args, settings) if kind == Variant.NODIFF else None
        result = pipeline.train_ablation(kind, manifest, root, stage1, resume_from=args.resume_from)
    finally:
        pipeline.metrics.close()
    print(result.checkpoint)
    return 0


def enhance(args: argparse.Namespace, settings: Settings) -> int:
    """Enhance one image with the estimator and decoder only."""
    weights, _ = load_checkpoint(require_file(args.weights, "--weights"))
    plane = load_luma(require_file(args.in_path, "--in"))

    started = time.perf_counter()
    enhanced = EnhancementPipeline(weights).enhance(plane, settings.seed, pad=args.pad)
    elapsed = time.perf_counter() - started

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_luma(enhanced, out_path)
    print(f"enhanced {args.in_path} in {elapsed:.3f} s", file=sys.stderr)

    if args.gt is not None:
        gt = load_luma(require_file(args.gt, "--gt"))
        print(f"delta_psnr {delta_psnr(enhanced, plane, gt):.12f}")
    return 0


def evaluate_split(args: argparse.Namespace, settings: Settings) -> int:
    """Evaluate a checkpoint on the val or test split and write the report."""
    weights, _ = load_checkpoint(require_file(args.weights, "--weights"))
    manifest, root = resolve_dataset(args.data)
    records = evaluate(weights, manifest.select(Split(args.split)), root, seed=settings.seed)
    table_path, csv_path = write_report(records, args.out)
    sys.stdout.write(table_path.read_text(encoding="utf-8"))
    logger.info(f"Records written to {csv_path}")
    return 0


def report_records(args: argparse.Namespace, settings: Settings) -> int:
    """Merge record files (e.g. full, ablations, imported baseline) into one table."""
    records = []
    for path in args.records:
        records.extend(read_records(require_file(path, "--records")))
    if args.out is not None:
        write_report(records, args.out)
    sys.stdout.write(report(records))
    return 0


COMMANDS: Dict[str, Handler] = {
    "build-dataset": build_dataset,
    "train": train,
    "ablate": ablate,
    "enhance": enhance,
    "eval": evaluate_split,
    "report": report_records,
}


def _add_command(subparsers, name: str, help_text: str, parent: argparse.ArgumentParser) -> argparse.ArgumentParser:
    return subparsers.add_parser(name, help=help_text, description=help_text, parents=[parent])


def build_parser() -> CliParser:
    """Top-level parser with one subparser per entry in COMMANDS."""
    common = CliParser(add_help=False)
    common.add_argument("--config", default=None, help="flat key = value config file")
    add_settings_flags(common)

    parser = CliParser(
        prog="python -m app.main",
        description="Blind-QP quality enhancement for compressed frames.",
    )
    subparsers = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")

    sub = _add_command(subparsers, "build-dataset", "compress a corpus at every QP", common)
    sub.add_argument("--corpus", required=True, help="folder of images (sub-folders become groups)")
    sub.add_argument("--out", required=True, help="dataset directory")

    for name, help_text in (("train", "train stage 1 or stage 2"), ("ablate", "train the NoEst or NoDiff ablation")):
        sub = _add_command(subparsers, name, help_text, common)
        if name == "train":
            sub.add_argument("--stage", required=True, choices=["stage1", "stage2"])
        else:
            sub.add_argument("--kind", required=True, choices=["noest", "nodiff"])
        sub.add_argument("--data", required=True, help="dataset directory or manifest")
        sub.add_argument("--out", required=True, help="checkpoint and metrics directory")
        sub.add_argument("--stage1-weights", default=None, help="stage-1 checkpoint")
        sub.add_argument("--resume-from", default=None, help="checkpoint of this stage to resume")

    sub = _add_command(subparsers, "enhance", "enhance a single image", common)
    sub.add_argument("--in", dest="in_path", required=True, help="input image")
    sub.add_argument("--weights", required=True, help="checkpoint")
    sub.add_argument("--out", required=True, help="output image (8-bit luminance)")
    sub.add_argument("--gt", default=None, help="ground truth image; prints delta PSNR")
    sub.add_argument("--pad", action="store_true", help="edge-pad to the size multiple and crop back")

    sub = _add_command(subparsers, "eval", "evaluate a checkpoint on a held-out split", common)
    sub.add_argument("--weights", required=True, help="checkpoint")
    sub.add_argument("--data", required=True, help="dataset directory or manifest")
    sub.add_argument("--split", default="val", choices=["val", "test"])
    sub.add_argument("--out", required=True, help="report directory")

    sub = _add_command(subparsers, "report", "tabulate one or more record files", common)
    sub.add_argument("--records", required=True, nargs="+", help="record CSV files")
    sub.add_argument("--out", default=None, help="report directory")

    return parser
