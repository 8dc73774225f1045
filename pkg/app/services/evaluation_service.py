"""BlindQE - PSNR Evaluation and Reports"""
import csv
import logging
import math
from collections import defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
from skimage.metrics import peak_signal_noise_ratio

from app.errors import DatasetError, DegenerateSampleError, FormatError, ShapeMismatchError
from app.models import DatasetManifest, EvalRecord, Split, Variant
from app.nets import ModelWeights
from app.pipeline.enhancement_pipeline import EnhancementPipeline
from app.services.dataset_service import PlaneStore
from app.services.seeding import derive_seed

logger = logging.getLogger(__name__)

CSV_FIELDS = ["source_id", "qp", "variant", "psnr_hm", "psnr_en", "delta_psnr", "group"]
VARIANT_ORDER = [Variant.FULL, Variant.NODIFF, Variant.NOEST, Variant.BASELINE]
DELTA_TOLERANCE = 1e-3


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB of two [0, 1] planes (peak 1); math.inf when they are identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"PSNR of mismatched planes {a.shape} and {b.shape}")
    if np.array_equal(a, b):
        return math.inf
    return float(peak_signal_noise_ratio(b, a, data_range=1.0))


def delta_psnr(enhanced: np.ndarray, compressed: np.ndarray, gt: np.ndarray) -> float:
    """PSNR_EN - PSNR_HM against the ground truth."""
    psnr_hm = psnr(compressed, gt)
    if math.isinf(psnr_hm):
        raise DegenerateSampleError("Compressed plane equals ground truth; delta PSNR is undefined")
    return psnr(enhanced, gt) - psnr_hm


def evaluate(
    weights: ModelWeights,
    manifest: DatasetManifest,
    root: str | Path,
    seed: int = 0,
    variant: Optional[Variant] = None,
    store: Optional[PlaneStore] = None
) -> List[EvalRecord]:
    """
    Enhance every compressed plane of a val/test manifest and score it.

    Ground truth is loaded only after the plane has been enhanced, and only to
    compute the metrics.

    Args:
        weights: Trained networks
        manifest: Manifest restricted to the val or test split
        root: Directory the manifest paths are relative to
        seed: Base seed; each entry derives its own sampling seed
        variant: Label for the records (defaults to the weights' variant)
        store: Plane loader (defaults to a PlaneStore over ``root``)

    Returns:
        One EvalRecord per manifest entry, in manifest order
    """
    if manifest.split not in (Split.VAL, Split.TEST):
        raise DatasetError(f"Evaluation needs a val or test manifest, got '{manifest.split.value}'")
    variant = Variant(variant or weights.variant)
    if variant != weights.variant:
        raise DatasetError(f"Weights are for '{weights.variant.value}', not '{variant.value}'")

    if not manifest.entries:
        raise DatasetError(f"Manifest has no '{manifest.split.value}' entries to evaluate")
    store = store or PlaneStore(manifest, root)
    pipeline = EnhancementPipeline(weights)
    records = []
    for index, entry in enumerate(manifest.entries):
        compressed = store.load_compressed(entry)
        enhanced = pipeline.enhance(compressed, derive_seed(seed, index))
        gt = store.load_gt(entry)

        psnr_hm = psnr(compressed, gt)
        if math.isinf(psnr_hm):
            raise DegenerateSampleError(f"{entry.source_id} at qp={entry.qp} is lossless")
        psnr_en = psnr(enhanced, gt)
        records.append(EvalRecord(
            source_id=entry.source_id,
            qp=entry.qp,
            variant=variant,
            psnr_hm=psnr_hm,
            psnr_en=psnr_en,
            delta_psnr=psnr_en - psnr_hm,
            group=entry.group,
        ))
        logger.debug(f"{entry.source_id} qp={entry.qp}: dPSNR {psnr_en - psnr_hm:+.4f} dB")

    logger.info(f"Evaluated {len(records)} entries ({variant.value})")
    return records


def write_records(records: Iterable[EvalRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for record in records:
            writer.writerow(record.as_row())
    return path


def read_records(path: str | Path) -> List[EvalRecord]:
    """Read records written by ``write_records`` (or produced elsewhere in that layout)."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        missing = set(CSV_FIELDS[:6]) - set(reader.fieldnames or [])
        if missing:
            raise FormatError(f"{path} lacks columns {sorted(missing)}")
        records = []
        for line, row in enumerate(reader, start=2):
            try:
                psnr_hm = float(row["psnr_hm"])
                psnr_en = float(row["psnr_en"])
                stored_delta = float(row["delta_psnr"])
                # CSVs produced elsewhere may round; the stored delta only has to agree
                if not math.isclose(stored_delta, psnr_en - psnr_hm, rel_tol=0.0, abs_tol=DELTA_TOLERANCE):
                    raise ValueError(f"delta_psnr {stored_delta} disagrees with psnr_en - psnr_hm")
                records.append(EvalRecord(
                    source_id=row["source_id"],
                    qp=int(row["qp"]),
                    variant=Variant(row["variant"]),
                    psnr_hm=psnr_hm,
                    psnr_en=psnr_en,
                    delta_psnr=psnr_en - psnr_hm,
                    group=row.get("group") or None,
                ))
            except ValueError as e:
                raise FormatError(f"Malformed record at {path}:{line}: {e}") from e
    return records


def group_means(
    records: Iterable[EvalRecord],
    key=lambda record: record.qp
) -> Dict[Tuple[object, Variant], Tuple[float, int]]:
    """
    Mean delta PSNR per (key, variant), excluding infinite values.

    Returns:
        {(key, variant): (mean or math.inf when every value is infinite, inf count)}
    """
    totals: Dict[Tuple[object, Variant], List[float]] = defaultdict(list)
    infinite: Dict[Tuple[object, Variant], int] = defaultdict(int)
    for record in records:
        cell = (key(record), record.variant)
        if math.isinf(record.delta_psnr):
            infinite[cell] += 1
            totals.setdefault(cell, [])
        else:
            totals[cell].append(record.delta_psnr)

    means = {}
    for cell, values in totals.items():
        mean = sum(values) / len(values) if values else math.inf
        means[cell] = (mean, infinite[cell])
    return means


def _format_cell(cell: Optional[Tuple[float, int]]) -> str:
    if cell is None:
        return "-"
    mean, n_inf = cell
    if math.isinf(mean):
        return "inf"
    text = f"{mean:.3f}"
    if n_inf:
        text += f" (+{n_inf} inf)"
    return text


def _render_block(title: str, labels: List[str], rows: List[List[str]]) -> List[str]:
    widths = [max(len(labels[i]), *(len(row[i]) for row in rows)) for i in range(len(labels))]
    line = "  ".join(label.ljust(widths[i]) for i, label in enumerate(labels))
    lines = [title, line, "-" * len(line)]
    lines.extend("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)) for row in rows)
    return lines


def report(records: List[EvalRecord]) -> str:
    """
    Render the delta PSNR table.

    Columns are the variants present, in the order full, NoDiff, NoEst,
    baseline. A "By QP" block is always emitted; a "By sequence" block is added
    when records carry a group. Both end with an Average row; infinite values
    are excluded from means and counted.
    """
    if not records:
        raise DatasetError("Cannot report on an empty record set")

    variants = [v for v in VARIANT_ORDER if any(r.variant == v for r in records)]
    header = [f"dPSNR {v.value}" for v in variants]
    overall = group_means(records, key=lambda record: "Average")

    by_qp = group_means(records)
    rows = [
        [str(qp)] + [_format_cell(by_qp.get((qp, v))) for v in variants]
        for qp in sorted({r.qp for r in records})
    ]
    rows.append(["Average"] + [_format_cell(overall.get(("Average", v))) for v in variants])
    lines = _render_block("Delta PSNR (dB) by QP", ["QP"] + header, rows)

    if any(r.group for r in records):
        by_sequence = group_means(records, key=lambda record: (record.group or "", record.source_id))
        sequences = sorted({(r.group or "", r.source_id) for r in records})
        rows = []
        for group, source_id in sequences:
            rows.append(
                [group, source_id]
                + [_format_cell(by_sequence.get(((group, source_id), v))) for v in variants]
            )
        rows.append(["Average", ""] + [_format_cell(overall.get(("Average", v))) for v in variants])
        lines.append("")
        lines.extend(_render_block("Delta PSNR (dB) by sequence", ["Class", "Sequence"] + header, rows))

    return "\n".join(lines) + "\n"


def write_report(records: List[EvalRecord], out_dir: str | Path) -> Tuple[Path, Path]:
    """Write ``report.txt`` and ``records.csv`` into out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table_path = out_dir / "report.txt"
    table_path.write_text(report(records), encoding="utf-8")
    csv_path = write_records(records, out_dir / "records.csv")
    return table_path, csv_path
