"""
Run configuration, model assembly, the training loop and evaluation.

A run reads its dataset from a directory written by ``save_dataset``, trains
on the train split, keeps the checkpoint with the best validation pairwise
accuracy and reports on the test split. Everything random inside a run is
derived from the run seed, so one config + seed reproduces the same
``metrics.jsonl`` in single-thread mode.
"""
import json
import logging
import math
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import torch
from torch import nn

from .autodiff import TRAINING_DTYPE, build_optimizer
from .episodes import augment_episode
from .exceptions import ArtifactMismatchError, ContractError, NumericDivergenceError
from .models import DatasetSplit, ModelKind, RunStatus, TrainingRun
from .pmoc import (
    DirectProbabilityHead,
    EncoderBackboneConfig,
    GaussianHead,
    HeadConfig,
    HeadVersion,
    ImageEncoder,
    LogProbCalibration,
    LossMode,
    accuracy,
    classify_test_images,
    pmoc_loss,
    score_episode,
)
from .pose import StackVariant
from .storage import load_checkpoint, load_dataset, save_checkpoint
from .transport import PointCloud, SinkhornConfig, sbsd_loss, sbsd_score
from .utils import code_version, configure_threads, derive_seed, seed_everything

logger = logging.getLogger(__name__)

DEFAULT_BATCH = 40
STRAW_BATCH = 20
WARM_START_PREFIX = 'encoder.convs.'


@dataclass(frozen=True)
class OptimizerConfig:
    step_size: float = 1e-3
    decay: float = 0.995
    weight_decay: float = 1e-4
    batch_size: int = DEFAULT_BATCH


@dataclass(frozen=True)
class RunConfig:
    """Validated run configuration; ``raw`` is the JSON object exactly as read"""

    name: str
    model: str
    seed: int
    epochs: int
    dataset: str
    encoder: EncoderBackboneConfig
    head: HeadConfig
    optimizer: OptimizerConfig
    sinkhorn: SinkhornConfig
    loss_mode: str = LossMode.SOFTMAX.value
    augment: bool = True
    warm_start: Optional[str] = None
    raw: Dict[str, Any] = field(default_factory=dict, compare=False, repr=False)

    @property
    def head_version(self):
        return HeadVersion.GAUSSIAN if self.model == ModelKind.PMOC_V1 else HeadVersion.DIRECT


def build_run_config(data) -> RunConfig:
    """Resolve defaults on validated serializer data"""
    encoder_data = dict(data.get('encoder') or {})
    encoder = EncoderBackboneConfig(**encoder_data)

    head_data = dict(data.get('head') or {})
    if 'variant' not in head_data:
        head_data['variant'] = StackVariant.STRAW if data['model'] == ModelKind.PMOC_V2_STRAW else StackVariant.VANILLA
    head = HeadConfig(d=encoder.d, m=encoder.m, **head_data)

    optimizer_data = dict(data.get('optimizer') or {})
    optimizer_data.setdefault('batch_size', STRAW_BATCH if head.variant == StackVariant.STRAW else DEFAULT_BATCH)
    optimizer = OptimizerConfig(**optimizer_data)

    defaults = SinkhornConfig.from_settings()
    sinkhorn_data = data.get('sinkhorn') or {}
    sinkhorn = SinkhornConfig(
        epsilon=sinkhorn_data.get('epsilon', defaults.epsilon),
        max_iters=sinkhorn_data.get('max_iters', defaults.max_iters),
        tol=sinkhorn_data.get('tol', defaults.tol),
    )

    raw = data.get('raw') or {key: value for key, value in data.items()}
    return RunConfig(
        name=data['name'],
        model=ModelKind(data['model']).value,
        seed=data['seed'],
        epochs=data['epochs'],
        dataset=data['dataset'],
        encoder=encoder,
        head=head,
        optimizer=optimizer,
        sinkhorn=sinkhorn,
        loss_mode=LossMode(data['loss_mode']).value,
        augment=data['augment'],
        warm_start=data.get('warm_start'),
        raw=raw,
    )


def episodes_to_tensor(episodes, dtype=TRAINING_DTYPE):
    """(B, 14, 1, side, side) image batch"""
    stacked = np.stack([episode.images for episode in episodes])
    return torch.from_numpy(stacked).unsqueeze(2).to(dtype)


class ReasoningModel(nn.Module, ABC):
    """Maps a batch of episodes to candidate scores and a training loss"""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = ImageEncoder(cfg.encoder)

    @abstractmethod
    def score(self, images):
        """(B, 14, 1, S, S) -> (B, 8) scores in [0, 1]"""
        pass

    @abstractmethod
    def training_step(self, images, step_seed):
        """
        Returns:
            tuple: (scalar loss, (B, 8) detached scores)
        """
        pass


class SBSDModel(ReasoningModel):
    """Encoder trained with the Sinkhorn contrastive loss; scores are sigmoid(margin)"""

    def latents(self, images):
        # one latent per image: the mean over perspectives
        return self.encoder(images).mean(dim=-2)

    def _scores_from_latents(self, latents):
        primary = latents[..., 0:6, :]
        auxiliary = latents[..., 7:13, :]
        candidates = latents[..., 6:14, :]
        count = candidates.shape[-2]
        margin = sbsd_score(
            candidates,
            PointCloud(primary.unsqueeze(-3).expand(*primary.shape[:-2], count, *primary.shape[-2:])),
            PointCloud(auxiliary.unsqueeze(-3).expand(*auxiliary.shape[:-2], count, *auxiliary.shape[-2:])),
            self.cfg.sinkhorn,
        )
        return torch.sigmoid(margin)

    def score(self, images):
        return self._scores_from_latents(self.latents(images))

    def training_step(self, images, step_seed):
        latents = self.latents(images)
        loss = sbsd_loss(
            PointCloud(latents[..., 0:7, :]),
            PointCloud(latents[..., 7:14, :]),
            split_seed=step_seed,
            cfg=self.cfg.sinkhorn,
        ).mean()
        with torch.no_grad():
            scores = self._scores_from_latents(latents.detach())
        return loss, scores


class PMoCModel(ReasoningModel):
    """Perspective encoder plus a Gaussian (v1) or direct-probability (v2) head"""

    def __init__(self, cfg: RunConfig):
        super().__init__(cfg)
        self.version = cfg.head_version
        if self.version == HeadVersion.GAUSSIAN:
            self.head = GaussianHead(cfg.head)
            self.calibration = LogProbCalibration()
        else:
            self.head = DirectProbabilityHead(cfg.head)
            self.calibration = None

    def score(self, images):
        return score_episode(self.encoder(images), self.head, self.version, self.calibration)

    def training_step(self, images, step_seed):
        scores = self.score(images)
        return pmoc_loss(scores, self.cfg.loss_mode), scores.detach()

    def warm_start_from(self, path):
        """Copy the conv layers of an SBSD checkpoint into this encoder"""
        state, metadata = load_checkpoint(path)
        if metadata.get('model') != ModelKind.SBSD:
            raise ArtifactMismatchError(f"{path}: warm start needs an sbsd checkpoint, got {metadata.get('model')}")
        convs = {key[len(WARM_START_PREFIX):]: value for key, value in state.items() if key.startswith(WARM_START_PREFIX)}
        try:
            self.encoder.convs.load_state_dict(convs, strict=True)
        except RuntimeError as e:
            raise ArtifactMismatchError(f"{path}: conv layers do not match this encoder ({e})") from e
        logger.info(f"Warm-started {len(convs)} conv tensors from {path}")


def build_model(cfg: RunConfig) -> ReasoningModel:
    """Factory function to get the model for a run config"""
    models = {
        ModelKind.SBSD.value: SBSDModel,
        ModelKind.PMOC_V1.value: PMoCModel,
        ModelKind.PMOC_V2.value: PMoCModel,
        ModelKind.PMOC_V2_STRAW.value: PMoCModel,
    }

    if cfg.model not in models:
        raise ContractError(f"Unknown model: {cfg.model}. Available: {list(models.keys())}")

    model = models[cfg.model](cfg)
    if cfg.warm_start:
        model.warm_start_from(cfg.warm_start)
    return model.to(TRAINING_DTYPE)


def evaluate(model: ReasoningModel, episodes, batch_size=DEFAULT_BATCH):
    """
    Accuracy report under both decision rules, overall and per concept family.

    Returns:
        dict: episodes, per_image, pairwise, per_family
    """
    was_training = model.training
    model.eval()
    decisions = []
    families = []
    with torch.no_grad():
        for start in range(0, len(episodes), batch_size):
            batch = episodes[start:start + batch_size]
            scores = model.score(episodes_to_tensor(batch))
            decisions.extend(classify_test_images(row) for row in scores)
            families.extend(episode.family for episode in batch)
    model.train(was_training)

    report = accuracy(decisions)
    report['per_family'] = {
        family: accuracy(d for d, f in zip(decisions, families) if f == family)
        for family in sorted(set(families))
    }
    return report


def restore_model(checkpoint_path):
    """
    Rebuild a model from a checkpoint's embedded config and load its weights.

    Returns:
        tuple: (ReasoningModel in eval mode, checkpoint metadata)
    """
    from .serializers import load_run_config

    state, metadata = load_checkpoint(checkpoint_path)
    if 'config' not in metadata:
        raise ArtifactMismatchError(f"{checkpoint_path}: checkpoint carries no run config")
    raw = dict(metadata['config'])
    # weights come from the checkpoint, not from the warm-start source
    raw['warm_start'] = None
    try:
        cfg = load_run_config(raw)
    except Exception as e:
        raise ArtifactMismatchError(f"{checkpoint_path}: embedded run config is invalid ({e})") from e
    model = build_model(cfg)
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise ArtifactMismatchError(f"{checkpoint_path}: weights do not match the model ({e})") from e
    model.eval()
    return model, metadata


def check_compatible(model: ReasoningModel, episodes, source):
    side = model.cfg.encoder.image_side
    for episode in episodes:
        if episode.image_side != side:
            raise ArtifactMismatchError(
                f"{source}: episode {episode.episode_id} has side {episode.image_side}, checkpoint expects {side}"
            )


class Trainer:
    """Trains one model for one run directory and records the run in the database"""

    def __init__(self, cfg: RunConfig, run_dir, config_text, threads=None):
        self.cfg = cfg
        self.run_dir = Path(run_dir)
        self.config_text = config_text
        self.threads = threads
        self.metrics_path = self.run_dir / 'metrics.jsonl'
        self.timing_path = self.run_dir / 'timing.jsonl'
        self.checkpoint_dir = self.run_dir / 'checkpoints'
        self.record = None
        self.version = None

    def _metadata(self, epoch):
        return {
            'model': self.cfg.model,
            'config': self.cfg.raw,
            'seed': self.cfg.seed,
            'epoch': epoch,
            'code_version': self.version,
        }

    def _append(self, path, payload):
        with open(path, 'a', encoding='utf-8') as handle:
            handle.write(json.dumps(payload, sort_keys=True) + '\n')

    def _prepare_run_dir(self):
        self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / 'config.json').write_text(self.config_text, encoding='utf-8')
        for path in (self.metrics_path, self.timing_path):
            path.write_text('', encoding='utf-8')

    def run(self):
        """
        Train, checkpoint and report.

        Returns:
            dict: the summary written to summary.json
        """
        cfg = self.cfg
        configure_threads(self.threads)
        seed_everything(cfg.seed)
        self.version = code_version()

        train = load_dataset(cfg.dataset, DatasetSplit.TRAIN)
        val = load_dataset(cfg.dataset, DatasetSplit.VAL)
        test = load_dataset(cfg.dataset, DatasetSplit.TEST)
        if cfg.epochs and not train:
            raise ContractError(f"{cfg.dataset} holds no train-split episodes")

        self._prepare_run_dir()
        self.record = TrainingRun.objects.create(
            name=cfg.name,
            model_kind=cfg.model,
            seed=cfg.seed,
            config=cfg.raw,
            run_dir=str(self.run_dir),
            dataset_path=str(cfg.dataset),
            code_version=self.version,
        )

        try:
            model = build_model(cfg)
            check_compatible(model, train + val + test, cfg.dataset)
            best_epoch, best_score = self._train(model, train, val)
            summary = self._finish(model, best_epoch, best_score, test or val)
        except NumericDivergenceError as e:
            self.record.status = RunStatus.DIVERGED
            self.record.error = str(e)
            self.record.save()
            raise
        except Exception as e:
            self.record.status = RunStatus.FAILED
            self.record.error = str(e)
            self.record.save()
            raise
        return summary

    def _train(self, model, train, val):
        cfg = self.cfg
        optimizer, scheduler = build_optimizer(
            model.parameters(),
            step_size=cfg.optimizer.step_size,
            weight_decay=cfg.optimizer.weight_decay,
            decay=cfg.optimizer.decay,
        )
        best_epoch, best_score = 0, -math.inf
        save_checkpoint(self.checkpoint_dir / 'best.ckpt', model.state_dict(), self._metadata(0))
        step = 0

        for epoch in range(1, cfg.epochs + 1):
            started = time.perf_counter()
            model.train()
            generator = torch.Generator().manual_seed(derive_seed(cfg.seed, 'order', epoch))
            order = torch.randperm(len(train), generator=generator).tolist()
            losses, decisions = [], []

            for start in range(0, len(order), cfg.optimizer.batch_size):
                batch = [train[i] for i in order[start:start + cfg.optimizer.batch_size]]
                if cfg.augment:
                    batch = [augment_episode(e, derive_seed(cfg.seed, 'augment', epoch, e.episode_id)) for e in batch]
                step += 1
                loss, scores = model.training_step(episodes_to_tensor(batch), derive_seed(cfg.seed, 'step', step))
                if not torch.isfinite(loss):
                    logger.error(f"Run {cfg.name}: non-finite loss at step {step} (epoch {epoch})")
                    raise NumericDivergenceError(step, loss.item())
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                losses.append(loss.item() * len(batch))
                decisions.extend(classify_test_images(row) for row in scores)

            scheduler.step()
            train_report = accuracy(decisions)
            metrics = {
                'epoch': epoch,
                'loss': sum(losses) / len(train),
                'per_image': train_report['per_image'],
                'pairwise': train_report['pairwise'],
                'lr': scheduler.get_last_lr()[0],
            }
            selection = train_report['pairwise']
            if val:
                val_report = evaluate(model, val, cfg.optimizer.batch_size)
                metrics['val_per_image'] = val_report['per_image']
                metrics['val_pairwise'] = val_report['pairwise']
                selection = val_report['pairwise']
            if selection > best_score:
                best_epoch, best_score = epoch, selection
                save_checkpoint(self.checkpoint_dir / 'best.ckpt', model.state_dict(), self._metadata(epoch))

            self._append(self.metrics_path, metrics)
            self._append(self.timing_path, {'epoch': epoch, 'seconds': time.perf_counter() - started})
            self.record.epochs_completed = epoch
            self.record.best_val_pairwise = best_score
            self.record.save(update_fields=['epochs_completed', 'best_val_pairwise', 'updated_at'])
            logger.info(
                f"Run {cfg.name} epoch {epoch}/{cfg.epochs}: loss {metrics['loss']:.4f}, "
                f"pairwise {metrics['pairwise']:.3f}, selection {selection:.3f}"
            )

        save_checkpoint(self.checkpoint_dir / 'last.ckpt', model.state_dict(), self._metadata(cfg.epochs))
        return best_epoch, best_score

    def _finish(self, model, best_epoch, best_score, held_out):
        state, _ = load_checkpoint(self.checkpoint_dir / 'best.ckpt')
        model.load_state_dict(state, strict=True)
        report = evaluate(model, held_out, self.cfg.optimizer.batch_size) if held_out else None
        summary = {
            'name': self.cfg.name,
            'model': self.cfg.model,
            'seed': self.cfg.seed,
            'code_version': self.version,
            'epochs': self.cfg.epochs,
            'best_epoch': best_epoch,
            'best_selection_pairwise': best_score if math.isfinite(best_score) else None,
            'test': report,
        }
        with open(self.run_dir / 'summary.json', 'w', encoding='utf-8') as handle:
            json.dump(summary, handle, indent=2, sort_keys=True)

        self.record.status = RunStatus.COMPLETED
        self.record.final_report = report
        self.record.save()
        logger.info(f"Run {self.cfg.name} completed; best epoch {best_epoch}")
        return summary
