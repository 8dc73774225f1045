"""BlindQE - QP-Parameterised Codec Simulation"""
import logging
import os
import shlex
import subprocess
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.fft import dctn, idctn

from app.config import Settings, get_settings
from app.errors import CodecError, ConfigurationError, FormatError
from app.models import QP_MAX, CodecConfig, CodecMode

logger = logging.getLogger(__name__)

OUTPUT_TAIL_CHARS = 2000


def _check_qp(qp: int) -> None:
    if not 0 <= qp <= QP_MAX:
        raise ValueError(f"qp must be in [0, {QP_MAX}], got {qp}")


def qstep(qp: int) -> float:
    """HEVC quantisation step on the 0..255 sample scale."""
    return 2.0 ** ((qp - 4) / 6.0)


def make_qpmap(qp: int, height: int, width: int) -> np.ndarray:
    """Constant H x W map of qp/51."""
    _check_qp(qp)
    return np.full((height, width), qp / QP_MAX, dtype=np.float64)


def to_uint8(plane: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(plane * 255.0), 0, 255).astype(np.uint8)


def block_dct(blocks: np.ndarray) -> np.ndarray:
    """Orthonormal type-II DCT over the two trailing axes."""
    return dctn(blocks, type=2, axes=(-2, -1), norm="ortho")


def block_idct(coeffs: np.ndarray) -> np.ndarray:
    return idctn(coeffs, type=2, axes=(-2, -1), norm="ortho")


def _to_blocks(plane: np.ndarray, block_size: int) -> np.ndarray:
    rows, cols = plane.shape[0] // block_size, plane.shape[1] // block_size
    return plane.reshape(rows, block_size, cols, block_size).swapaxes(1, 2)


def _from_blocks(blocks: np.ndarray) -> np.ndarray:
    rows, cols, block_size, _ = blocks.shape
    return blocks.swapaxes(1, 2).reshape(rows * block_size, cols * block_size)


def compress_proxy(img: np.ndarray, qp: int, block_size: int = 8) -> np.ndarray:
    """
    Block-DCT quantisation stand-in for an intra HEVC encode.

    The plane is edge-padded to block multiples, each block is transformed,
    every coefficient is rounded (half away from zero) to a multiple of
    Qstep = 2^((qp-4)/6), the blocks are inverted and the result is cropped,
    clamped and rounded to 8-bit levels.

    Args:
        img: H x W plane in [0, 1]
        qp: Quantisation parameter in [0, 51]
        block_size: Transform block edge

    Returns:
        Degraded H x W plane in [0, 1]
    """
    _check_qp(qp)
    height, width = img.shape
    pad_h = (-height) % block_size
    pad_w = (-width) % block_size
    padded = np.pad(np.asarray(img, dtype=np.float64) * 255.0, ((0, pad_h), (0, pad_w)), mode="edge")

    coeffs = block_dct(_to_blocks(padded, block_size))
    step = qstep(qp)
    quantised = np.sign(coeffs) * np.floor(np.abs(coeffs) / step + 0.5) * step
    restored = _from_blocks(block_idct(quantised))[:height, :width]

    return to_uint8(restored / 255.0).astype(np.float64) / 255.0


class CodecService:
    """
    Produces compressed planes for the dataset builder.

    Dispatches to the block-DCT proxy or to an external encoder binary
    (e.g. the HEVC reference encoder in all-intra mode).
    """

    def __init__(self, settings: Optional[Settings] = None):
        settings = settings or get_settings()
        try:
            self.config = CodecConfig(
                mode=CodecMode(settings.codec_mode),
                block_size=settings.block_size,
                external_encoder_path=settings.hevc_encoder_path,
                external_args_template=settings.hevc_args_template,
                external_config_path=str(Path(settings.hevc_config_path).resolve()),
            )
        except ValueError as e:
            raise ConfigurationError(f"Invalid codec settings: {e}") from e

    @property
    def mode(self) -> CodecMode:
        return self.config.mode

    def compress(self, img: np.ndarray, qp: int) -> np.ndarray:
        if self.config.mode == CodecMode.EXTERNAL:
            return compress_external(img, qp, self.config)
        return compress_proxy(img, qp, self.config.block_size)


def render_args(
    template: str,
    in_path: Path,
    out_path: Path,
    qp: int,
    width: int,
    height: int,
    cfg: str = ""
) -> list:
    """Substitute {in} {out} {qp} {w} {h} {cfg} and split into argv."""
    rendered = template.format(**{
        "cfg": cfg,
        "in": str(in_path),
        "out": str(out_path),
        "qp": int(qp),
        "w": int(width),
        "h": int(height),
    })
    return shlex.split(rendered)


def compress_external(
    img: np.ndarray,
    qp: int,
    config: CodecConfig,
    workspace: Optional[str | Path] = None
) -> np.ndarray:
    """
    Round-trip a plane through an external encoder binary.

    The plane is written as raw 8-bit samples, the binary is invoked with the
    rendered args template and its raw reconstruction is read back. The binary
    runs inside a scratch directory, so the encoder and config paths are made
    absolute first. Concurrent calls must not share ``workspace``.
    """
    _check_qp(qp)
    encoder_path = Path(config.external_encoder_path or "")
    if not config.external_encoder_path or not encoder_path.is_file():
        raise ConfigurationError(f"encoder binary not found: {encoder_path}")
    if not os.access(encoder_path, os.X_OK):
        raise ConfigurationError(f"encoder binary is not executable: {encoder_path}")

    height, width = img.shape
    with tempfile.TemporaryDirectory(prefix="blindqe_codec_", dir=workspace) as tmp_dir:
        in_path = Path(tmp_dir) / "input.y"
        out_path = Path(tmp_dir) / "recon.y"
        in_path.write_bytes(to_uint8(np.asarray(img, dtype=np.float64)).tobytes())

        argv = [str(encoder_path.resolve())] + render_args(
            config.external_args_template, in_path, out_path, qp, width, height,
            cfg=str(Path(config.external_config_path).resolve()) if config.external_config_path else "",
        )
        logger.debug(f"Running external encoder: {' '.join(argv)}")
        result = subprocess.run(argv, capture_output=True, text=True, cwd=tmp_dir)
        if result.returncode != 0:
            tail = (result.stdout + result.stderr)[-OUTPUT_TAIL_CHARS:]
            raise CodecError(f"Encoder exited with code {result.returncode}:\n{tail}")

        if not out_path.is_file():
            raise FormatError(f"Encoder produced no reconstruction at {out_path.name}")
        data = out_path.read_bytes()
        if len(data) != width * height:
            raise FormatError(
                f"Reconstruction has {len(data)} bytes, expected {width * height} ({width}x{height})"
            )

    return np.frombuffer(data, dtype=np.uint8).reshape(height, width).astype(np.float64) / 255.0
