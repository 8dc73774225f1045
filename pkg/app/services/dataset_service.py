"""BlindQE - Mixed-QP Dataset Construction and Patch Serving"""
import hashlib
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image

from app.config import Settings, get_settings
from app.errors import BlindQEError, CodecError, DatasetError, FormatError, ShapeMismatchError
from app.models import DatasetManifest, ManifestEntry, Split
from app.services.codec_service import CodecService, to_uint8
from app.services.seeding import derive_seed

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"

# BT.601 luma weights
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float64)


@dataclass
class FrameSample:
    """Ground truth and compressed luminance planes of one (source, qp) cell."""
    gt: np.ndarray
    compressed: np.ndarray
    qp: int
    source_id: str

    def __post_init__(self):
        if self.gt.shape != self.compressed.shape:
            raise ShapeMismatchError(
                f"{self.source_id}: gt {self.gt.shape} vs compressed {self.compressed.shape}"
            )


@dataclass(frozen=True)
class PatchPair:
    """Aligned gt/compressed patches cut at (y, x)."""
    gt: np.ndarray
    compressed: np.ndarray
    qp: int
    y: int
    x: int


def rgb_to_luma(rgb: np.ndarray) -> np.ndarray:
    """8-bit RGB (H x W x 3) to a BT.601 luminance plane in [0, 1]."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ShapeMismatchError(f"Expected H x W x 3 RGB, got shape {rgb.shape}")
    return rgb.astype(np.float64) @ LUMA_WEIGHTS / 255.0


def as_luma_plane(pixels: np.ndarray, min_size: int = 1) -> np.ndarray:
    """Validate a 2-D plane and clamp it to [0, 1]."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 2:
        raise ShapeMismatchError(f"Luminance plane must be 2-D, got shape {pixels.shape}")
    if min(pixels.shape) < min_size:
        raise ShapeMismatchError(f"Plane {pixels.shape} is smaller than the minimum {min_size}")
    return np.clip(pixels, 0.0, 1.0)


def load_luma(path: str | Path, min_size: int = 1) -> np.ndarray:
    """Read an image file and return its luminance plane."""
    with Image.open(path) as img:
        rgb = np.array(img.convert("RGB"))
    return as_luma_plane(rgb_to_luma(rgb), min_size)


def save_luma(plane: np.ndarray, path: str | Path) -> None:
    """Write a plane as an 8-bit grayscale image (format from the suffix)."""
    Image.fromarray(to_uint8(plane)).save(path)


def write_plane(plane: np.ndarray, path: Path) -> None:
    """Raw plane file: width x height bytes, row-major."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_uint8(plane).tobytes())


def read_plane(path: Path, width: int, height: int) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) != width * height:
        raise FormatError(f"{path} holds {len(data)} bytes, expected {width}x{height}")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width).astype(np.float64) / 255.0


def write_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    """Write the manifest atomically (temp file then rename)."""
    path = Path(path)
    tmp_path = path.with_name(path.name + ".tmp")
    tmp_path.write_text("\n".join(manifest.to_lines()) + "\n", encoding="utf-8")
    os.replace(tmp_path, path)
    return path


def read_manifest(path: str | Path, check_files: bool = True) -> DatasetManifest:
    """Read a manifest and, by default, verify every referenced plane exists."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise DatasetError(f"Manifest not found: {path}")

    try:
        manifest = DatasetManifest.from_lines(path.read_text(encoding="utf-8").splitlines())
    except ValueError as e:
        raise FormatError(f"Malformed manifest {path}: {e}") from e

    if check_files:
        for entry in manifest.entries:
            for relative in (entry.gt_path, entry.compressed_path):
                if not (path.parent / relative).is_file():
                    raise DatasetError(f"Manifest {path} references missing file {relative}")
    return manifest


def manifest_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def sample_patches(sample: FrameSample, size: int, n: int, seed: int) -> List[PatchPair]:
    """
    Cut n aligned gt/compressed patches at seeded uniform positions.

    Args:
        sample: Source frame pair
        size: Patch edge, a multiple of 8 no larger than the frame
        n: Number of patches
        seed: Position seed

    Returns:
        List of PatchPair with their top-left coordinates
    """
    height, width = sample.gt.shape
    if n < 1:
        raise DatasetError("Number of patches must be positive")
    if size % 8:
        raise DatasetError(f"Patch size {size} is not a multiple of 8")
    if size > min(height, width):
        raise DatasetError(f"Patch size {size} exceeds frame {height}x{width} of {sample.source_id}")

    rng = np.random.default_rng(seed)
    ys = rng.integers(0, height - size + 1, size=n)
    xs = rng.integers(0, width - size + 1, size=n)
    return [
        PatchPair(
            gt=sample.gt[y:y + size, x:x + size],
            compressed=sample.compressed[y:y + size, x:x + size],
            qp=sample.qp,
            y=int(y),
            x=int(x),
        )
        for y, x in zip(ys, xs)
    ]


class PlaneStore:
    """Loads the planes a manifest references; the one access point evaluation uses."""

    def __init__(self, manifest: DatasetManifest, root: str | Path):
        self.manifest = manifest
        self.root = Path(root)
        self._gt_cache: Dict[str, np.ndarray] = {}

    def load_compressed(self, entry: ManifestEntry) -> np.ndarray:
        return read_plane(self.root / entry.compressed_path, entry.width, entry.height)

    def load_gt(self, entry: ManifestEntry) -> np.ndarray:
        if entry.source_id not in self._gt_cache:
            self._gt_cache[entry.source_id] = read_plane(
                self.root / entry.gt_path, entry.width, entry.height
            )
        return self._gt_cache[entry.source_id]

    def load_sample(self, entry: ManifestEntry) -> FrameSample:
        return FrameSample(
            gt=self.load_gt(entry),
            compressed=self.load_compressed(entry),
            qp=entry.qp,
            source_id=entry.source_id,
        )

    def samples(self) -> List[FrameSample]:
        return [self.load_sample(entry) for entry in self.manifest.entries]


class MixedQPBatchStream:
    """
    Deterministic patch batches over every (source, qp) entry.

    The stream is a concatenation of epochs; each epoch is a seeded permutation
    of all entries, so every qp appears equally often per epoch. ``batch_at``
    depends only on (seed, step), which makes training resumable.
    """

    def __init__(self, samples: Sequence[FrameSample], patch: int, batch: int, seed: int):
        if not samples:
            raise DatasetError("Cannot serve batches from an empty dataset")
        for sample in samples:
            if min(sample.gt.shape) < patch:
                height, width = sample.gt.shape
                raise DatasetError(
                    f"Patch size {patch} exceeds frame {height}x{width} of "
                    f"{sample.source_id} at qp={sample.qp}; raise min_plane_size or lower patch_size"
                )
        self.samples = list(samples)
        self.patch = patch
        self.batch = batch
        self.seed = seed
        self._orders: Dict[int, np.ndarray] = {}

    def epoch_order(self, epoch: int) -> np.ndarray:
        if epoch not in self._orders:
            if len(self._orders) > 4:
                self._orders.clear()
            self._orders[epoch] = np.random.default_rng([self.seed, epoch]).permutation(len(self.samples))
        return self._orders[epoch]

    def positions(self, step: int) -> List[Tuple[int, int]]:
        """(epoch, sample index) pairs feeding batch ``step``."""
        n = len(self.samples)
        start = step * self.batch
        return [
            (p // n, int(self.epoch_order(p // n)[p % n]))
            for p in range(start, start + self.batch)
        ]

    def batch_at(self, step: int) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(gt, compressed, qps) with planes shaped (B, 1, P, P) in float32."""
        gts, compressed, qps = [], [], []
        for epoch, index in self.positions(step):
            pair = sample_patches(self.samples[index], self.patch, 1, derive_seed(self.seed, epoch, index))[0]
            gts.append(pair.gt)
            compressed.append(pair.compressed)
            qps.append(pair.qp)
        return (
            torch.from_numpy(np.stack(gts)[:, None]).float(),
            torch.from_numpy(np.stack(compressed)[:, None]).float(),
            torch.tensor(qps, dtype=torch.long),
        )


class DatasetService:
    """
    Builds the mixed-QP dataset.

    Every corpus image is converted to luminance, compressed once per qp, and
    both planes are stored as raw 8-bit files next to a line-oriented manifest.
    """

    def __init__(self, settings: Optional[Settings] = None, codec: Optional[CodecService] = None):
        self.settings = settings or get_settings()
        self.codec = codec or CodecService(self.settings)

    def scan_corpus(self, corpus_dir: Path) -> List[Tuple[str, Optional[str], Path]]:
        """(source_id, group, path) for every decodable image, sorted by source_id."""
        extensions = {f".{ext}" for ext in self.settings.allowed_extensions_list}
        found = {}
        for path in sorted(corpus_dir.rglob("*")):
            if not path.is_file() or path.suffix.lower() not in extensions:
                continue
            relative = path.relative_to(corpus_dir).with_suffix("")
            source_id = relative.as_posix()
            if source_id in found:
                raise DatasetError(f"Two corpus files map to source id '{source_id}'")
            group = relative.parts[0] if len(relative.parts) > 1 else None
            found[source_id] = (source_id, group, path)
        return [found[key] for key in sorted(found)]

    @staticmethod
    def corpus_digest(sources: List[Tuple[str, Optional[str], Path]]) -> str:
        digest = hashlib.sha256()
        for source_id, _, path in sources:
            digest.update(source_id.encode("utf-8"))
            digest.update(path.read_bytes())
        return digest.hexdigest()

    @staticmethod
    def assign_splits(source_ids: List[str], split_ratio: float, seed: int) -> Dict[str, Split]:
        """Seeded source-level split; at least one validation source when there are two or more."""
        n = len(source_ids)
        n_train = max(1, int(round(n * split_ratio)))
        if n > 1:
            n_train = min(n_train, n - 1)
        order = np.random.default_rng(seed).permutation(n)
        train = {source_ids[i] for i in order[:n_train]}
        return {sid: Split.TRAIN if sid in train else Split.VAL for sid in source_ids}

    def build_dataset(
        self,
        corpus_dir: str | Path,
        out_dir: str | Path,
        qp_set: Optional[List[int]] = None,
        split_ratio: Optional[float] = None,
        seed: Optional[int] = None
    ) -> DatasetManifest:
        """
        Compress every corpus image at every qp and write the manifest.

        Args:
            corpus_dir: Folder of images (sub-folders become groups)
            out_dir: Destination for planes and manifest
            qp_set: QPs to compress at (defaults to settings)
            split_ratio: Fraction of sources assigned to train
            seed: Split seed

        Returns:
            The manifest covering every split
        """
        corpus_dir, out_dir = Path(corpus_dir), Path(out_dir)
        qp_set = sorted(qp_set or self.settings.qp_list)
        split_ratio = self.settings.split_ratio if split_ratio is None else split_ratio
        seed = self.settings.seed if seed is None else seed

        if not 0.0 < split_ratio < 1.0:
            raise DatasetError(f"split_ratio must be in (0, 1), got {split_ratio}")
        if not corpus_dir.is_dir():
            raise DatasetError(f"Corpus directory not found: {corpus_dir}")
        sources = self.scan_corpus(corpus_dir)
        if not sources:
            raise DatasetError(f"No decodable images in {corpus_dir}")

        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            probe = out_dir / ".write_probe"
            probe.touch()
            probe.unlink()
        except OSError as e:
            raise DatasetError(f"Output directory {out_dir} is not writable: {e}") from e

        splits = self.assign_splits([sid for sid, _, _ in sources], split_ratio, seed)
        entries = []
        for source_id, group, path in sources:
            try:
                gt = load_luma(path, self.settings.min_plane_size)
            except (OSError, ShapeMismatchError) as e:
                raise DatasetError(f"Cannot ingest {source_id}: {e}") from e

            height, width = gt.shape
            stem = source_id.replace("/", "__")
            gt_path = f"gt/{stem}.y"
            write_plane(gt, out_dir / gt_path)

            for qp in qp_set:
                try:
                    compressed = self.codec.compress(gt, qp)
                except BlindQEError as e:
                    raise CodecError(f"Compression of {source_id} at qp={qp} failed: {e}") from e
                if np.array_equal(to_uint8(compressed), to_uint8(gt)):
                    raise DatasetError(
                        f"Compressed plane of {source_id} at qp={qp} is identical to its ground truth; "
                        f"a lossless cell has no defined delta PSNR"
                    )
                compressed_path = f"compressed/{stem}_qp{qp}.y"
                write_plane(compressed, out_dir / compressed_path)
                entries.append(ManifestEntry(
                    source_id=source_id,
                    qp=qp,
                    gt_path=gt_path,
                    compressed_path=compressed_path,
                    width=width,
                    height=height,
                    split=splits[source_id],
                    group=group,
                ))
            logger.info(f"Ingested {source_id} ({width}x{height}) at qp {qp_set}")

        manifest = DatasetManifest(
            qp_set=qp_set,
            split=Split.ALL,
            codec_mode=self.codec.mode,
            corpus_hash=self.corpus_digest(sources),
            seed=seed,
            entries=entries,
        )
        write_manifest(manifest, out_dir / MANIFEST_NAME)
        logger.info(f"Dataset written to {out_dir}: {len(entries)} entries from {len(sources)} sources")
        return manifest
