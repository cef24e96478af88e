"""Recurrent 1-to-n training of the neural operators, and model rollouts."""

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict, field, fields
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .closure import closure_from_rho_beta
from .dataset import DatasetManifest, TrainingWindow, WindowLoader, scaled_count, window_index
from .integrator import SolutionSequence
from .spectral import FrontState
from ..nn import functional as F
from ..nn.checkpoint import Checkpoint, save_checkpoint
from ..nn.models import BETA_SCALE, GammaInput, OperatorModel
from ..nn.optim import Adam, AdamState, clip_grad_norm, global_norm, step_lr
from ..nn.tensor import Tensor, grad, no_grad
from ..utils.errors import (
    ConfigError,
    NonFiniteError,
    NonFiniteGradientError,
    StorageError,
    TrainingDivergedError,
)
from ..utils.progress import ProgressTracker

logger = logging.getLogger(__name__)

LOG_COLUMNS = ('epoch', 'train_l2', 'valid_l2', 'valid_l2_1step', 'lr', 'grad_norm_max', 'seconds')


@dataclass(frozen=True)
class TrainingConfig:
    """Optimization schedule and batching."""
    epochs: int = 1000
    batch_size: int = 1000
    micro_batch: int = 50
    lr: float = 0.0025
    weight_decay: float = 1e-4
    scheduler_step: int = 100
    scheduler_gamma: float = 0.5
    clip_norm: float = 50.0
    n_recurrent: int = 20
    stride: int = 1
    seed: int = 0
    scale: float = 1.0
    checkpoint_every: int = 100
    threads: int = 1
    deterministic: bool = True
    betas: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.betas is not None:
            object.__setattr__(self, 'betas', tuple(float(b) for b in self.betas))
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        for name in ('batch_size', 'micro_batch', 'scheduler_step', 'n_recurrent', 'stride',
                     'checkpoint_every', 'threads'):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1, got {getattr(self, name)}")
        for name in ('lr', 'clip_norm', 'scale', 'scheduler_gamma'):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")

    @property
    def effective_epochs(self) -> int:
        return 0 if self.epochs == 0 else scaled_count(self.epochs, self.scale)

    @property
    def effective_batch_size(self) -> int:
        return scaled_count(self.batch_size, self.scale)

    def to_dict(self) -> dict:
        data = asdict(self)
        data['betas'] = list(self.betas) if self.betas is not None else None
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'TrainingConfig':
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"Unknown TrainingConfig keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class EpochRecord:
    epoch: int
    train_l2: float
    valid_l2: float
    valid_l2_1step: float
    lr: float
    grad_norm_max: float
    seconds: float


@dataclass
class TrainLog:
    """One row per completed epoch."""
    rows: List[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def append(self, record: EpochRecord):
        self.rows.append(record)

    def write_csv(self, path: Path):
        try:
            with open(path, 'w', newline='') as f:
                writer = csv.writer(f)
                writer.writerow(LOG_COLUMNS)
                for r in self.rows:
                    writer.writerow([r.epoch] + [f"{getattr(r, c):.10g}" for c in LOG_COLUMNS[1:]])
        except OSError as e:
            raise StorageError(f"Failed to write training log {path}: {e}")


@dataclass
class WindowBatch:
    """Stacked windows: inputs (B, N), targets (B, n, N), raw (rho, beta) pairs (B, 2)."""
    inputs: np.ndarray
    targets: np.ndarray
    gammas: np.ndarray

    @classmethod
    def from_windows(cls, windows: Sequence[TrainingWindow]) -> 'WindowBatch':
        return cls(
            inputs=np.stack([w.input for w in windows]),
            targets=np.stack([w.targets for w in windows]),
            gammas=np.array([(w.rho, w.beta) for w in windows], dtype=np.float64),
        )

    def __len__(self) -> int:
        return len(self.inputs)

    def slice(self, start: int, stop: int) -> 'WindowBatch':
        return WindowBatch(self.inputs[start:stop], self.targets[start:stop], self.gammas[start:stop])

    def shard(self, parts: int) -> List['WindowBatch']:
        bounds = np.array_split(np.arange(len(self)), parts)
        return [WindowBatch(self.inputs[b], self.targets[b], self.gammas[b]) for b in bounds if len(b)]


@dataclass
class TrainingResult:
    checkpoint: Checkpoint
    log: TrainLog
    best_checkpoint: Optional[Path] = None


def normalize_gamma(gammas: np.ndarray) -> np.ndarray:
    """Raw (rho, beta) rows to the (rho, beta/40) network input."""
    gammas = np.atleast_2d(np.asarray(gammas, dtype=np.float64))
    return np.column_stack([gammas[:, 0], gammas[:, 1] / BETA_SCALE])


ModelFn = Callable[[Tensor, np.ndarray], Tensor]


def rollout_losses(model: ModelFn, batch: WindowBatch) -> Tuple[Tensor, Tensor]:
    """Per-sample relative L2 of the n-step prediction stack and of the first step.

    Raises:
        NonFiniteError: If a prediction becomes non-finite, naming the rollout depth
    """
    steps = batch.targets.shape[1]
    count, n = batch.inputs.shape
    gamma = normalize_gamma(batch.gammas)

    v = Tensor(batch.inputs)
    predictions: List[Tensor] = []
    for depth in range(1, steps + 1):
        v = model(v, gamma)
        if not np.all(np.isfinite(v.data)):
            raise NonFiniteError(f"Non-finite prediction at rollout depth {depth}", index=depth)
        predictions.append(F.reshape(v, (count, 1, n)))

    stack = F.concat(predictions, axis=1)
    per_sample = F.relative_l2(stack, Tensor(batch.targets))
    first = F.relative_l2(predictions[0], Tensor(batch.targets[:, :1]))
    return per_sample, first


def loss_1_to_n(model: ModelFn, window: Union[TrainingWindow, WindowBatch]) -> Tensor:
    """Relative L2 of the n recurrent predictions against the n targets.

    The predictions and targets are each stacked before taking the single
    ratio; for a batch the per-window ratios are averaged.
    """
    batch = WindowBatch.from_windows([window]) if isinstance(window, TrainingWindow) else window
    per_sample, _ = rollout_losses(model, batch)
    return F.mean(per_sample)


def batch_gradients(model: OperatorModel, batch: WindowBatch, shards: int = 1,
                    micro_batch: Optional[int] = None) -> Tuple[float, List[np.ndarray]]:
    """Mean batch loss and its parameter gradients.

    The batch is walked in contiguous micro-batches of at most micro_batch
    windows, holding one graph per micro-batch. With
    shards > 1 each micro-batch is further split across threads, each
    with its own graph. Every piece's loss is already divided by the full
    batch size, so the partial gradients are summed in order.
    """
    params = model.parameters()
    total = len(batch)
    step = total if micro_batch is None else max(1, micro_batch)

    def shard_job(piece: WindowBatch):
        per_sample, _ = rollout_losses(model, piece)
        loss = F.scale(F.sum(per_sample), 1.0 / total)
        return float(loss.data), grad(loss, params)

    loss_value = 0.0
    grads = [np.zeros_like(p.data) for p in params]
    pool = ThreadPoolExecutor(max_workers=shards) if shards > 1 else None
    try:
        for start in range(0, total, step):
            micro = batch.slice(start, start + step)
            pieces = micro.shard(shards) if shards > 1 else [micro]
            if pool is None or len(pieces) == 1:
                results = [shard_job(piece) for piece in pieces]
            else:
                results = list(pool.map(shard_job, pieces))
            for value, piece_grads in results:
                loss_value += value
                for acc, g in zip(grads, piece_grads):
                    acc += g
    finally:
        if pool is not None:
            pool.shutdown()
    return loss_value, grads


def evaluate(model: OperatorModel, manifest: DatasetManifest, n: int, stride: int = 1,
             betas: Optional[Sequence[float]] = None, batch_size: int = 256) -> Tuple[float, float]:
    """Mean n-step and 1-step relative L2 over every window of a split."""
    rows = window_index(manifest, n, stride, betas)
    if len(rows) == 0:
        return float('nan'), float('nan')
    loader = WindowLoader(manifest, n)
    n_step_sum = one_step_sum = 0.0

    with no_grad():
        for start in range(0, len(rows), batch_size):
            batch = WindowBatch(*loader.batch(rows[start:start + batch_size]))
            try:
                per_sample, first = rollout_losses(model, batch)
            except NonFiniteError as e:
                logger.warning(f"Validation rollout diverged: {e}")
                return float('inf'), float('inf')
            n_step_sum += float(np.sum(per_sample.data))
            one_step_sum += float(np.sum(first.data))

    return n_step_sum / len(rows), one_step_sum / len(rows)


class Trainer:
    """Runs the optimization schedule for one model and owns its optimizer.

    The count of consecutive non-finite batches carries across epoch
    boundaries.
    """

    def __init__(self, model: OperatorModel, config: TrainingConfig, out_dir: Optional[Path] = None,
                 resume: Optional[Checkpoint] = None):
        self.model = model
        self.config = config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.rng = np.random.default_rng(config.seed)
        self.optimizer = Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
        self.start_epoch = 0
        self.log = TrainLog()
        self.best_valid = float('inf')
        self.best_path: Optional[Path] = None
        self.last_checkpoint: Optional[Path] = None
        self.consecutive_bad = 0

        if resume is not None:
            self._resume(resume)

        if self.out_dir is not None:
            try:
                self.out_dir.mkdir(parents=True, exist_ok=True)
            except OSError as e:
                raise StorageError(f"Cannot create {self.out_dir}: {e}")

    def _resume(self, checkpoint: Checkpoint):
        self.model.load_state_dict(checkpoint.weights)
        self.start_epoch = checkpoint.epoch
        if checkpoint.optimizer is not None:
            self.optimizer.state = AdamState(step=checkpoint.optimizer.step,
                                             m=[m.copy() for m in checkpoint.optimizer.m],
                                             v=[v.copy() for v in checkpoint.optimizer.v])
        if checkpoint.rng_state is not None:
            self.rng.bit_generator.state = checkpoint.rng_state
        best = checkpoint.metrics.get('best_valid_l2')
        self.best_valid = float('inf') if best is None else float(best)
        logger.info(f"Resuming from epoch {self.start_epoch}")

    def _checkpoint(self, epoch: int, metrics: Optional[dict] = None) -> Checkpoint:
        data = {'best_valid_l2': self.best_valid}
        data.update(metrics or {})
        return Checkpoint.from_model(self.model, epoch=epoch, optimizer=self.optimizer,
                                     rng=self.rng, metrics=data)

    def _save(self, name: str, epoch: int, metrics: Optional[dict] = None) -> Optional[Path]:
        if self.out_dir is None:
            return None
        return save_checkpoint(self.out_dir / name, self._checkpoint(epoch, metrics))

    def _shards(self) -> int:
        return 1 if self.config.deterministic else self.config.threads

    def _run_epoch(self, loader: WindowLoader, rows: np.ndarray) -> Tuple[float, float]:
        """One pass over shuffled batches; returns (mean train loss, max post-clip norm)."""
        cfg = self.config
        batch_size = cfg.effective_batch_size
        order = self.rng.permutation(len(rows))
        loss_sum, counted, norm_max = 0.0, 0, 0.0

        for start in range(0, len(order), batch_size):
            batch = WindowBatch(*loader.batch(rows[order[start:start + batch_size]]))
            try:
                loss_value, grads = batch_gradients(self.model, batch, self._shards(), cfg.micro_batch)
                if not np.isfinite(loss_value):
                    raise NonFiniteError(f"Non-finite batch loss {loss_value}")
                clipped, _ = clip_grad_norm(grads, cfg.clip_norm)
                self.optimizer.step(clipped)
            except (NonFiniteError, NonFiniteGradientError) as e:
                self.consecutive_bad += 1
                if self.consecutive_bad >= 2:
                    raise TrainingDivergedError(
                        f"Two consecutive non-finite batches: {e}", last_checkpoint=self.last_checkpoint
                    )
                logger.warning(f"Skipping optimizer step: {e}")
                continue

            self.consecutive_bad = 0
            norm_max = max(norm_max, global_norm(clipped))
            loss_sum += loss_value * len(batch)
            counted += len(batch)

        return (loss_sum / counted if counted else float('nan')), norm_max

    def fit(self, train_manifest: DatasetManifest,
            valid_manifest: Optional[DatasetManifest] = None) -> TrainingResult:
        cfg = self.config
        n = cfg.n_recurrent
        rows = window_index(train_manifest, n, cfg.stride, cfg.betas)
        loader = WindowLoader(train_manifest, n)
        epochs = cfg.effective_epochs

        logger.info(f"Training {self.model.kind} on {len(rows)} windows for {epochs} epochs "
                    f"(batch {cfg.effective_batch_size}, n={n})")
        if self.out_dir is not None and self.start_epoch == 0:
            self.last_checkpoint = self._save('initial.ckpt', 0)

        with ProgressTracker(total=max(0, epochs - self.start_epoch), desc="Training", unit="epoch") as progress:
            for epoch in range(self.start_epoch, epochs):
                started = time.perf_counter()
                self.optimizer.lr = step_lr(cfg.lr, epoch, cfg.scheduler_step, cfg.scheduler_gamma)
                train_l2, norm_max = self._run_epoch(loader, rows)

                if valid_manifest is not None:
                    valid_l2, valid_1 = evaluate(self.model, valid_manifest, n, cfg.stride, cfg.betas)
                else:
                    valid_l2, valid_1 = float('nan'), float('nan')

                seconds = 0.0 if cfg.deterministic else time.perf_counter() - started
                self.log.append(EpochRecord(epoch + 1, train_l2, valid_l2, valid_1,
                                            self.optimizer.lr, norm_max, seconds))
                self._after_epoch(epoch + 1, valid_l2)
                progress.set_postfix(train=f"{train_l2:.4f}", valid=f"{valid_l2:.4f}")
                progress.update(1)

        final = self._checkpoint(max(epochs, self.start_epoch))
        if self.out_dir is not None:
            save_checkpoint(self.out_dir / 'final.ckpt', final)
            self.log.write_csv(self.out_dir / 'train_log.csv')
        return TrainingResult(checkpoint=final, log=self.log, best_checkpoint=self.best_path)

    def _after_epoch(self, epoch: int, valid_l2: float):
        if np.isfinite(valid_l2) and valid_l2 < self.best_valid:
            self.best_valid = valid_l2
            path = self._save('best.ckpt', epoch, {'valid_l2': valid_l2})
            if path is not None:
                self.best_path = path
                self.last_checkpoint = path
        if epoch % self.config.checkpoint_every == 0:
            path = self._save(f'checkpoint_epoch{epoch:04d}.ckpt', epoch)
            if path is not None:
                self.last_checkpoint = path
        if self.out_dir is not None:
            self.log.write_csv(self.out_dir / 'train_log.csv')


def train(model: OperatorModel, train_manifest: DatasetManifest, config: TrainingConfig,
          valid_manifest: Optional[DatasetManifest] = None, out_dir: Optional[Path] = None,
          resume: Optional[Checkpoint] = None) -> TrainingResult:
    """Optimize model weights with the 1-to-n objective.

    Args:
        model: Model to train in place
        train_manifest: Training corpus
        config: Schedule, batching and seeds
        valid_manifest: Validation corpus evaluated once per epoch
        out_dir: Directory for checkpoints and train_log.csv (nothing written when None)
        resume: Checkpoint to continue from

    Returns:
        TrainingResult with the final checkpoint and the per-epoch log

    Raises:
        TrainingDivergedError: After two consecutive non-finite batches
    """
    return Trainer(model, config, out_dir=out_dir, resume=resume).fit(train_manifest, valid_manifest)


def rollout(model: Union[OperatorModel, Checkpoint], initial: Union[FrontState, np.ndarray],
            gamma: GammaInput, n_steps: int, dt_out: float = 0.15) -> SolutionSequence:
    """Apply the learned map recurrently n_steps times.

    A non-finite prediction truncates the sequence; failed_at records the
    index of the first bad state.
    """
    if isinstance(model, Checkpoint):
        model = model.to_model()
    if n_steps < 0:
        raise ConfigError(f"n_steps must be non-negative, got {n_steps}")

    values = initial.values if isinstance(initial, FrontState) else np.asarray(initial, dtype=np.float64)
    states = [values.copy()]
    failed_at = None

    with ProgressTracker(total=n_steps, desc=f"Rollout rho={gamma.rho:g} beta={gamma.beta:g}",
                         unit="step") as progress:
        current = values
        for i in range(1, n_steps + 1):
            current = model.predict(current, gamma)
            if not np.all(np.isfinite(current)):
                failed_at = i
                logger.warning(f"Rollout produced a non-finite state at step {i}; truncating")
                break
            states.append(current)
            progress.update(1)

    params = closure_from_rho_beta(gamma.rho, gamma.beta)
    return SolutionSequence(params=params, dt_out=dt_out, states=np.stack(states), failed_at=failed_at)
