"""BlindQE - Two-Stage Training and Ablations"""
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, TextIO, Tuple

import structlog
import torch
import torch.nn as nn
import torch.nn.functional as F

from app.config import Settings, get_settings
from app.errors import ArchitectureMismatchError, BlindQEError, ConfigurationError, DatasetError, NonFiniteError
from app.models import ArchConfig, DatasetManifest, LossName, Split, Stage, TrainConfig, TrainLog, Variant
from app.nets import ModelWeights, load_checkpoint, parameter_digest, qp_planes, save_checkpoint
from app.services.dataset_service import MixedQPBatchStream, PlaneStore
from app.services.diffusion import NoisePredictor, noise_loss, q_sample, sample_feature, sample_timesteps
from app.services.seeding import derive_seed

logger = logging.getLogger(__name__)

METRICS_NAME = "metrics.jsonl"

Batch = Tuple[torch.Tensor, torch.Tensor, torch.Tensor]
LossFn = Callable[[int], Tuple[LossName, torch.Tensor]]


class MetricsWriter:
    """Writes TrainLog records as sorted-key JSON lines to a file and, optionally, stderr."""

    def __init__(self, path: Optional[str | Path] = None, echo: bool = True):
        self._file = None
        self._loggers = []
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self._file = open(path, "a", encoding="utf-8")
            self._loggers.append(self._json_logger(self._file))
        if echo:
            self._loggers.append(self._json_logger(sys.stderr))

    @staticmethod
    def _json_logger(stream: TextIO):
        return structlog.wrap_logger(
            structlog.PrintLogger(stream),
            processors=[structlog.processors.JSONRenderer(sort_keys=True)],
        )

    def write(self, log: TrainLog) -> None:
        for json_logger in self._loggers:
            json_logger.info("train_log", **log.model_dump(mode="json"))

    def close(self) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None


@dataclass
class TrainResult:
    """Networks after a training run plus every logged loss."""
    weights: ModelWeights
    logs: List[TrainLog] = field(default_factory=list)
    checkpoint: Optional[Path] = None


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for param in module.parameters():
        param.requires_grad_(False)
    return module


def copy_networks(source: ModelWeights, target: ModelWeights, names: Tuple[str, ...]) -> None:
    for name in names:
        target.networks[name].load_state_dict(source.networks[name].state_dict())


def encode_batch(weights: ModelWeights, batch: Batch) -> torch.Tensor:
    """Z_enc for a training batch (uses ground truth and the true QP)."""
    gt, img, qps = batch
    return weights.encoder.encode(gt, img, qp_planes(qps, img))


@torch.no_grad()
def validate_estimator(
    weights: ModelWeights,
    batch: Batch,
    seed: int,
    predictor: Optional[NoisePredictor] = None
) -> float:
    """
    Mean ||Z_est - Z_enc||^2 over a held-out batch using the full reverse chain.

    Args:
        weights: Networks with a trained (or training) estimator
        batch: (gt, compressed, qps) held-out batch
        seed: Sampling seed
        predictor: Replaces the estimator's noise predictor when given

    Returns:
        Validation L_est
    """
    z_enc = encode_batch(weights, batch)
    img = batch[1]
    schedule = weights.schedule()
    if predictor is None:
        z_est = weights.estimator.estimate(img, schedule, seed)
    else:
        c_vec = weights.estimator.encode_condition(img)
        z_est = sample_feature(c_vec, predictor, schedule, seed, latent_dim=weights.arch.latent_dim)
    return float(noise_loss(z_enc, z_est))


class TrainingPipeline:
    """
    Stage 1 (encoder + decoder), stage 2 (estimator) and the two ablations.

    Every step draws its batch and noise from (seed, step) alone, so a run
    resumed from a checkpoint logs exactly what the uninterrupted run would.
    """

    def __init__(
        self,
        settings: Optional[Settings] = None,
        out_dir: Optional[str | Path] = None,
        metrics: Optional[MetricsWriter] = None
    ):
        self.settings = settings or get_settings()
        self.arch = ArchConfig.from_settings(self.settings)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if metrics is None:
            metrics_path = self.out_dir / METRICS_NAME if self.out_dir is not None else None
            metrics = MetricsWriter(metrics_path)
        self.metrics = metrics
        if self.settings.deterministic:
            torch.use_deterministic_algorithms(True, warn_only=True)

    def _stream(self, manifest: DatasetManifest, root: str | Path, split: Split, config: TrainConfig) -> MixedQPBatchStream:
        view = manifest.select(split)
        if not view.entries:
            raise DatasetError(f"Manifest has no '{split.value}' entries")
        samples = PlaneStore(view, root).samples()
        return MixedQPBatchStream(samples, config.patch, config.batch, config.seed)

    def _heldout_batch(self, manifest: DatasetManifest, root: str | Path, config: TrainConfig) -> Optional[Batch]:
        if not manifest.select(Split.VAL).entries:
            logger.warning("No validation entries; L_est will not be tracked")
            return None
        return self._stream(manifest, root, Split.VAL, config).batch_at(0)

    def _check_arch(self, weights: ModelWeights) -> None:
        differing = self.arch.first_difference(weights.arch)
        if differing is not None:
            raise ArchitectureMismatchError(
                f"Stage-1 weights differ from the configured architecture at '{differing}'"
            )

    def _resume(self, resume_from: str | Path, stage: Stage) -> Tuple[ModelWeights, dict]:
        weights, state = load_checkpoint(resume_from, expected_arch=self.arch)
        if not state or state.get("stage") != stage.value:
            raise ConfigurationError(
                f"Checkpoint {resume_from} holds no {stage.value} training state to resume from"
            )
        logger.info(f"Resuming {stage.value} from step {state['step']} ({resume_from})")
        return weights, state

    def _run(
        self,
        config: TrainConfig,
        weights: ModelWeights,
        trainable: List[nn.Module],
        loss_fn: LossFn,
        resume_state: Optional[dict] = None,
        on_eval: Optional[Callable[[int], float]] = None
    ) -> TrainResult:
        """Shared optimisation loop: Adam, grad-norm clipping, logging, checkpoints."""
        params = [param for module in trainable for param in module.parameters()]
        optimizer = torch.optim.Adam(params, lr=config.lr)
        start = 0
        if resume_state is not None:
            optimizer.load_state_dict(resume_state["optimizer"])
            start = int(resume_state["step"])
        for module in trainable:
            module.train()

        logs: List[TrainLog] = []
        started = time.perf_counter()

        def record(step: int, loss_name: LossName, value: float) -> None:
            if not math.isfinite(value):
                raise NonFiniteError(f"{loss_name.value} became non-finite at step {step}")
            log = TrainLog(
                step=step,
                loss_name=loss_name,
                value=value,
                wall_ms=int((time.perf_counter() - started) * 1000),
            )
            logs.append(log)
            self.metrics.write(log)

        def state_at(step: int) -> dict:
            return {
                "stage": config.stage.value,
                "step": step,
                "seed": config.seed,
                "optimizer": optimizer.state_dict(),
                "config": config.model_dump(mode="json"),
            }

        for step in range(start, config.steps):
            optimizer.zero_grad()
            loss_name, loss = loss_fn(step)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise NonFiniteError(f"{loss_name.value} became non-finite at step {step}")
            loss.backward()
            nn.utils.clip_grad_norm_(params, config.grad_clip)
            optimizer.step()
            record(step, loss_name, value)

            done = step + 1
            if on_eval is not None and config.eval_every and done % config.eval_every == 0:
                for module in trainable:
                    module.eval()
                record(step, LossName.L_EST, on_eval(step))
                for module in trainable:
                    module.train()
            if self.out_dir is not None and config.checkpoint_every and done % config.checkpoint_every == 0:
                save_checkpoint(weights, self.out_dir / f"{config.stage.value}_step{done:06d}.pt", state_at(done))

        weights.eval()
        checkpoint = None
        if self.out_dir is not None:
            checkpoint = save_checkpoint(
                weights, self.out_dir / f"{config.stage.value}.pt", state_at(max(start, config.steps))
            )
        logger.info(f"{config.stage.value} finished after {config.steps} steps")
        return TrainResult(weights=weights, logs=logs, checkpoint=checkpoint)

    def train_stage1(
        self,
        manifest: DatasetManifest,
        root: str | Path,
        resume_from: Optional[str | Path] = None
    ) -> TrainResult:
        """
        Jointly train the prior encoder and the decoder on mixed-QP patches.

        Loss is the per-pixel MSE between decoder output and ground truth.
        """
        config = TrainConfig.from_settings(self.settings, Stage.STAGE1)
        state = None
        if resume_from is not None:
            weights, state = self._resume(resume_from, Stage.STAGE1)
        else:
            weights = ModelWeights.build(self.arch, Variant.FULL, seed=config.seed)
        stream = self._stream(manifest, root, Split.TRAIN, config)

        def loss_fn(step: int) -> Tuple[LossName, torch.Tensor]:
            batch = stream.batch_at(step)
            out = weights.decoder(batch[1], encode_batch(weights, batch))
            return LossName.L_REC, F.mse_loss(out, batch[0])

        return self._run(config, weights, [weights.encoder, weights.decoder], loss_fn, state)

    def train_stage2(
        self,
        manifest: DatasetManifest,
        root: str | Path,
        stage1_weights: Optional[ModelWeights] = None,
        resume_from: Optional[str | Path] = None
    ) -> TrainResult:
        """
        Train the estimator with the noise-matching loss on frozen stage-1 features.

        Every ``eval_every`` steps the full reverse chain is run on a held-out
        batch and L_est is logged.
        """
        config = TrainConfig.from_settings(self.settings, Stage.STAGE2)
        state = None
        if resume_from is not None:
            weights, state = self._resume(resume_from, Stage.STAGE2)
        elif stage1_weights is not None:
            self._check_arch(stage1_weights)
            weights = ModelWeights.build(self.arch, Variant.FULL, seed=config.seed)
            copy_networks(stage1_weights, weights, ("encoder", "decoder"))
        else:
            raise ConfigurationError("Stage 2 needs stage-1 weights or a stage-2 checkpoint")

        freeze(weights.encoder)
        freeze(weights.decoder)
        frozen_before = {name: parameter_digest(weights.networks[name]) for name in ("encoder", "decoder")}

        schedule = weights.schedule()
        stream = self._stream(manifest, root, Split.TRAIN, config)
        heldout = self._heldout_batch(manifest, root, config)

        def loss_fn(step: int) -> Tuple[LossName, torch.Tensor]:
            batch = stream.batch_at(step)
            with torch.no_grad():
                z_enc = encode_batch(weights, batch)
            generator = torch.Generator().manual_seed(derive_seed(config.seed, step))
            t = sample_timesteps(z_enc.shape[0], schedule.T, generator)
            eps = torch.randn(z_enc.shape, generator=generator, dtype=z_enc.dtype)
            z_t = q_sample(z_enc, t, eps, schedule)
            c_vec = weights.estimator.encode_condition(batch[1])
            return LossName.L_EPS, noise_loss(eps, weights.estimator.predict_noise(z_t, c_vec, t))

        on_eval = None
        if heldout is not None:
            def on_eval(step: int) -> float:
                return validate_estimator(weights, heldout, derive_seed(config.seed, step, 1))

        result = self._run(config, weights, [weights.estimator], loss_fn, state, on_eval)

        for name, digest in frozen_before.items():
            if parameter_digest(weights.networks[name]) != digest:
                raise BlindQEError(f"Frozen network '{name}' changed during stage 2")
        return result

    def train_ablation(
        self,
        kind: Variant,
        manifest: DatasetManifest,
        root: str | Path,
        stage1_weights: Optional[ModelWeights] = None,
        resume_from: Optional[str | Path] = None
    ) -> TrainResult:
        """
        Train an ablation variant.

        NoEst trains a decoder from scratch with the feature vector fixed to
        zero. NoDiff trains a direct regressor to predict the frozen stage-1
        Z_enc from the compressed plane, with loss ||Z - Z_enc||^2.
        """
        kind = Variant(kind)
        if kind == Variant.NOEST:
            return self._train_noest(manifest, root, resume_from)
        if kind == Variant.NODIFF:
            return self._train_nodiff(manifest, root, stage1_weights, resume_from)
        raise ConfigurationError(f"Unknown ablation '{kind.value}'; expected NoEst or NoDiff")

    def _train_noest(
        self,
        manifest: DatasetManifest,
        root: str | Path,
        resume_from: Optional[str | Path]
    ) -> TrainResult:
        config = TrainConfig.from_settings(self.settings, Stage.NOEST)
        state = None
        if resume_from is not None:
            weights, state = self._resume(resume_from, Stage.NOEST)
        else:
            weights = ModelWeights.build(self.arch, Variant.NOEST, seed=config.seed)
        stream = self._stream(manifest, root, Split.TRAIN, config)

        def loss_fn(step: int) -> Tuple[LossName, torch.Tensor]:
            gt, img, _ = stream.batch_at(step)
            z = img.new_zeros(img.shape[0], self.arch.latent_dim)
            return LossName.L_REC, F.mse_loss(weights.decoder(img, z), gt)

        return self._run(config, weights, [weights.decoder], loss_fn, state)

    def _train_nodiff(
        self,
        manifest: DatasetManifest,
        root: str | Path,
        stage1_weights: Optional[ModelWeights],
        resume_from: Optional[str | Path]
    ) -> TrainResult:
        config = TrainConfig.from_settings(self.settings, Stage.NODIFF)
        state = None
        if resume_from is not None:
            weights, state = self._resume(resume_from, Stage.NODIFF)
        elif stage1_weights is not None:
            self._check_arch(stage1_weights)
            weights = ModelWeights.build(self.arch, Variant.NODIFF, seed=config.seed)
            copy_networks(stage1_weights, weights, ("encoder", "decoder"))
        else:
            raise ConfigurationError("The NoDiff ablation needs stage-1 weights")

        freeze(weights.encoder)
        freeze(weights.decoder)
        stream = self._stream(manifest, root, Split.TRAIN, config)

        def loss_fn(step: int) -> Tuple[LossName, torch.Tensor]:
            batch = stream.batch_at(step)
            with torch.no_grad():
                z_enc = encode_batch(weights, batch)
            return LossName.L_EST, noise_loss(z_enc, weights.regressor(batch[1]))

        return self._run(config, weights, [weights.regressor], loss_fn, state)
