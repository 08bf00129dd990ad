"""
Trainer Module
AO initialization, joint refinement with early stopping, and the restart
policy. Training reports serialize to a history CSV and a JSON summary.
"""

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Optional, Sequence, Union

import numpy as np

from .config import TrainConfig
from .cp import CpFactors, cp_gradient, cp_warmstart, init_cp_factors
from .errors import ConfigError, DivergenceError
from .head import HeadInterface
from .metrics import compute_metrics
from .model import JuliaModel, loss
from .models import SparseTensor, DatasetSplit, MetricsReport, check_bounds
from .optimizer import BlockStepper
from .tensor_data import split_dataset
from .utils import (
    make_rng, minibatches, EarlyStopping,
    STREAM_CP_INIT, STREAM_HEAD_INIT, STREAM_AO, STREAM_REFINE
)


logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ('epoch', 'phase', 'train_loss', 'val_rmse', 'seconds')

HeadFactory = Callable[[tuple[int, ...], int, np.random.Generator, str], HeadInterface]


class TrainPhase(Enum):
    """Phase an epoch belongs to."""
    WARMSTART = "warmstart"
    AO = "ao"
    REFINE = "refine"


class TrainStatus(Enum):
    """Status of a training run."""
    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    CANCELLED = "cancelled"
    DIVERGED = "diverged"


@dataclass
class EpochRecord:
    """One logged epoch."""
    epoch: int
    phase: TrainPhase
    train_loss: float
    val_rmse: float      # nan when the validation set is empty
    seconds: float


@dataclass
class TrainProgress:
    """Progress information passed to the progress callback after every epoch."""
    attempt: int
    max_attempts: int
    phase: TrainPhase
    epoch: int
    train_loss: float
    val_rmse: float
    status: TrainStatus


def _json_number(value: Optional[float]) -> Optional[float]:
    if value is None or not math.isfinite(value):
        return None
    return float(value)


@dataclass
class TrainReport:
    """Per-epoch history and outcome of a training run."""
    records: list[EpochRecord] = field(default_factory=list)
    restart_count: int = 0
    success: bool = False
    status: TrainStatus = TrainStatus.PENDING
    final_metrics: Optional[MetricsReport] = None
    attempt_seeds: list[int] = field(default_factory=list)
    attempt_rfes: list[float] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def epochs(self) -> int:
        return len(self.records)

    @property
    def train_losses(self) -> list[float]:
        return [r.train_loss for r in self.records]

    @property
    def val_rmses(self) -> list[float]:
        return [r.val_rmse for r in self.records]

    @property
    def phases(self) -> list[TrainPhase]:
        return [r.phase for r in self.records]

    def epochs_in(self, phase: TrainPhase) -> int:
        return sum(1 for r in self.records if r.phase == phase)

    def to_dict(self, include_timing: bool = True) -> dict[str, Any]:
        """JSON-ready summary; non-finite numbers become null."""
        return {
            'success': self.success,
            'status': self.status.value,
            'restart_count': self.restart_count,
            'attempt_seeds': list(self.attempt_seeds),
            'attempt_rfes': [_json_number(v) for v in self.attempt_rfes],
            'epochs': self.epochs,
            'epochs_by_phase': {p.value: self.epochs_in(p) for p in TrainPhase},
            'final_metrics': self.final_metrics.to_dict() if self.final_metrics else None,
            'seconds': self.seconds if include_timing else 0.0,
        }

    def write_history_csv(self, path: Union[str, Path], include_timing: bool = True) -> None:
        """
        Write ``epoch,phase,train_loss,val_rmse,seconds``, one row per epoch.

        Losses are written with ``repr`` so the file reproduces exactly;
        without timing the ``seconds`` column is 0.0.
        """
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(HISTORY_COLUMNS)
            for r in self.records:
                writer.writerow([
                    r.epoch, r.phase.value, repr(r.train_loss), repr(r.val_rmse),
                    repr(r.seconds) if include_timing else '0.0',
                ])

    def write_summary_json(
        self,
        path: Union[str, Path],
        include_timing: bool = True,
        extra: Optional[dict[str, Any]] = None
    ) -> None:
        summary = self.to_dict(include_timing)
        if extra:
            summary.update(extra)
        Path(path).write_text(json.dumps(summary, indent=2, allow_nan=False) + '\n', encoding='utf-8')


class JuliaTrainer:
    """
    Trains a JuliaModel: warm start, alternating block updates, joint
    refinement, and restarts on failure.

    Features:
    - Progress tracking with callbacks
    - Cancellation between epochs
    - Pluggable nonlinear head through ``head_factory``
    - ``block_callback(block, before, after)`` after each AO block, for
      inspecting frozen parameters
    """

    def __init__(
        self,
        cfg: TrainConfig,
        progress_callback: Optional[Callable[[TrainProgress], None]] = None,
        head_factory: Optional[HeadFactory] = None,
        block_callback: Optional[Callable[[str, JuliaModel, JuliaModel], None]] = None
    ):
        """
        Initialize trainer.

        Args:
            cfg: Training hyperparameters.
            progress_callback: Optional callback called with TrainProgress updates.
            head_factory: Builds the head of fresh models as
                ``head_factory(shape, F, rng, activation)``; defaults to the
                gated two-flow head.
            block_callback: Optional hook receiving copies of the model before
                and after each AO block.
        """
        self.cfg = cfg
        self.progress_callback = progress_callback
        self.head_factory = head_factory
        self.block_callback = block_callback
        self._cancelled = False
        self._attempt = 0
        self._max_attempts = 1
        self._clock = time.perf_counter()

    def cancel(self):
        """Cancel the ongoing training after the current epoch."""
        self._cancelled = True

    @property
    def cancelled(self) -> bool:
        return self._cancelled

    # ── Model construction ──────────────────────────────────────────────

    def new_model(self, shape: Sequence[int], R: int, F: int, seed: int) -> JuliaModel:
        """Freshly initialised model for one attempt seed."""
        if self.head_factory is None:
            return JuliaModel.initialize(shape, R, F, seed, self.cfg.activation)
        if R < 0 or F < 0 or R + F < 1:
            raise ConfigError(f"Rank split must satisfy R >= 0, F >= 0, R + F >= 1; got {R}/{F}")
        shape = tuple(int(d) for d in shape)
        cp = init_cp_factors(shape, R, make_rng(seed, STREAM_CP_INIT))
        head = None
        if F > 0:
            head = self.head_factory(shape, F, make_rng(seed, STREAM_HEAD_INIT), self.cfg.activation)
        return JuliaModel(shape, cp, head, self.cfg.activation)

    # ── Bookkeeping ─────────────────────────────────────────────────────

    def _loss(self, model: JuliaModel, tensor: SparseTensor, cfg: TrainConfig) -> float:
        return loss(model, tensor, cfg.workers, cfg.deterministic)

    def _record(
        self,
        report: TrainReport,
        phase: TrainPhase,
        model: JuliaModel,
        train: SparseTensor,
        val: SparseTensor,
        cfg: TrainConfig
    ) -> tuple[float, float]:
        """Log one epoch; returns (train loss, validation loss)."""
        now = time.perf_counter()
        seconds, self._clock = now - self._clock, now

        train_loss = self._loss(model, train, cfg)
        val_loss = self._loss(model, val, cfg) if val.nnz else math.nan
        if not math.isfinite(train_loss) or (val.nnz and not math.isfinite(val_loss)):
            raise DivergenceError('joint', f"non-finite loss in {phase.value} epoch {report.epochs + 1}")
        val_rmse = math.sqrt(val_loss / val.nnz) if val.nnz else math.nan

        record = EpochRecord(report.epochs + 1, phase, train_loss, val_rmse, seconds)
        report.records.append(record)
        logger.debug("%s epoch %d: train loss %.6g, val RMSE %.6g",
                     phase.value, record.epoch, train_loss, val_rmse)

        if self.progress_callback:
            self.progress_callback(TrainProgress(
                attempt=self._attempt + 1,
                max_attempts=self._max_attempts,
                phase=phase,
                epoch=record.epoch,
                train_loss=train_loss,
                val_rmse=val_rmse,
                status=TrainStatus.RUNNING,
            ))
        # Exclude bookkeeping from the next epoch's timing
        self._clock = time.perf_counter()
        return train_loss, val_loss

    @staticmethod
    def _monitored(losses: tuple[float, float], val: SparseTensor) -> float:
        return losses[1] if val.nnz else losses[0]

    def _stopper(
        self,
        model: JuliaModel,
        train: SparseTensor,
        val: SparseTensor,
        cfg: TrainConfig
    ) -> EarlyStopping:
        """Stopping rule primed with the loss of ``model`` before any update."""
        stopper = EarlyStopping(cfg.early_stop_rel_tol, cfg.patience)
        stopper.update(self._loss(model, val if val.nnz else train, cfg))
        return stopper

    def _steppers(self, model: JuliaModel, kind: str, cfg: TrainConfig) -> tuple[BlockStepper, Optional[BlockStepper]]:
        linear = BlockStepper(model.cp.size, cfg.lr_linear, kind, 'linear',
                              cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        nonlinear = None
        if model.head is not None:
            nonlinear = BlockStepper(model.head.flatten().size, cfg.lr_nonlinear, kind, 'nonlinear',
                                     cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        return linear, nonlinear

    @staticmethod
    def _split_tensors(data: SparseTensor, split: DatasetSplit) -> tuple[SparseTensor, SparseTensor]:
        split.validate(data.nnz)
        return data.subset(split.train), data.subset(split.val)

    # ── Epoch kernels ───────────────────────────────────────────────────

    def _block_epoch(
        self,
        model: JuliaModel,
        train: SparseTensor,
        block: str,
        stepper: BlockStepper,
        rng: np.random.Generator,
        cfg: TrainConfig
    ) -> None:
        """One shuffled pass updating a single block; the other stays frozen."""
        n = train.nnz
        for batch in minibatches(n, cfg.batch_size, rng):
            idx = train.indices[batch]
            residuals = model.residuals(idx, train.values[batch])
            scale = n / len(batch)
            if block == 'linear':
                grad = cp_gradient(model.cp, idx, residuals).flatten() * scale
                model.cp = model.cp.unflatten(stepper.step(model.cp.flatten(), grad))
            else:
                grad = model.head.gradient(idx, residuals).flatten() * scale
                model.head = model.head.unflatten(stepper.step(model.head.flatten(), grad))

    def _joint_epoch(
        self,
        model: JuliaModel,
        train: SparseTensor,
        linear: BlockStepper,
        nonlinear: Optional[BlockStepper],
        rng: np.random.Generator,
        cfg: TrainConfig
    ) -> None:
        """One shuffled pass updating both blocks from shared residuals."""
        n = train.nnz
        for batch in minibatches(n, cfg.batch_size, rng):
            idx = train.indices[batch]
            cp_grad, head_grad, _ = model.gradient(idx, train.values[batch])
            scale = n / len(batch)
            new_cp = model.cp
            if model.R > 0:
                new_cp = model.cp.unflatten(linear.step(model.cp.flatten(), cp_grad.flatten() * scale))
            if head_grad is not None:
                model.head = model.head.unflatten(
                    nonlinear.step(model.head.flatten(), head_grad.flatten() * scale))
            model.cp = new_cp

    def _run_block(
        self,
        model: JuliaModel,
        train: SparseTensor,
        val: SparseTensor,
        report: TrainReport,
        block: str,
        stepper: BlockStepper,
        rng: np.random.Generator,
        cfg: TrainConfig
    ) -> tuple[float, float]:
        before = model.copy() if self.block_callback else None
        losses = (math.nan, math.nan)
        for _ in range(cfg.ao_epochs_per_block):
            self._block_epoch(model, train, block, stepper, rng, cfg)
            losses = self._record(report, TrainPhase.AO, model, train, val, cfg)
        if self.block_callback:
            self.block_callback(block, before, model.copy())
        return losses

    # ── Phases ──────────────────────────────────────────────────────────

    def _ao(
        self,
        model: JuliaModel,
        train: SparseTensor,
        val: SparseTensor,
        report: TrainReport,
        cfg: TrainConfig
    ) -> JuliaModel:
        if model.R > 0 and cfg.warmstart_epochs > 0:
            logger.info("Warm start: %d CP epochs at rank %d", cfg.warmstart_epochs, model.R)

            def on_epoch(epoch: int, factors: CpFactors, _cp_loss: float) -> None:
                model.cp = factors
                self._record(report, TrainPhase.WARMSTART, model, train, val, cfg)

            model.cp = cp_warmstart(train, model.shape, model.R, cfg.warmstart_epochs, cfg,
                                    init=model.cp, on_epoch=on_epoch)
        if model.head is None or cfg.ao_max_iters == 0 or cfg.ao_epochs_per_block == 0:
            return model

        logger.info("AO initialization: up to %d iterations", cfg.ao_max_iters)
        rng = make_rng(cfg.seed, STREAM_AO)
        linear, nonlinear = self._steppers(model, 'adam', cfg)
        stopper = self._stopper(model, train, val, cfg)
        for t in range(1, cfg.ao_max_iters + 1):
            if self._cancelled:
                break
            losses = self._run_block(model, train, val, report, 'nonlinear', nonlinear, rng, cfg)
            if model.R > 0:
                losses = self._run_block(model, train, val, report, 'linear', linear, rng, cfg)
            if stopper.update(self._monitored(losses, val)):
                logger.info("AO stopped after %d iterations (relative change %.3g)", t, stopper.last_change)
                break
        return model

    def _refine(
        self,
        model: JuliaModel,
        train: SparseTensor,
        val: SparseTensor,
        report: TrainReport,
        cfg: TrainConfig
    ) -> JuliaModel:
        if cfg.max_epochs == 0:
            return model
        logger.info("Joint refinement (%s): up to %d epochs", cfg.optimizer, cfg.max_epochs)
        rng = make_rng(cfg.seed, STREAM_REFINE)
        linear, nonlinear = self._steppers(model, cfg.optimizer, cfg)
        stopper = self._stopper(model, train, val, cfg)
        for epoch in range(1, cfg.max_epochs + 1):
            if self._cancelled:
                break
            self._joint_epoch(model, train, linear, nonlinear, rng, cfg)
            losses = self._record(report, TrainPhase.REFINE, model, train, val, cfg)
            if stopper.update(self._monitored(losses, val)):
                logger.info("Refinement converged after %d epochs", epoch)
                break
        return model

    def _evaluate(self, model: JuliaModel, train: SparseTensor, val: SparseTensor) -> MetricsReport:
        target = val if val.nnz else train
        return compute_metrics(model.predict_batch(target.indices), target.values)

    def _warn_empty_val(self, val: SparseTensor) -> None:
        if val.nnz == 0:
            logger.warning("Validation set is empty, early stopping monitors the training loss")

    def _begin_run(self) -> None:
        self._cancelled = False
        self._attempt = 0
        self._max_attempts = self.cfg.max_restarts + 1

    # ── Public operations ───────────────────────────────────────────────

    def ao_initialize(self, model: JuliaModel, data: SparseTensor, split: DatasetSplit) -> JuliaModel:
        """
        Warm-start the CP block, then alternate head and CP block epochs.

        With F = 0 this is the warm start alone; with R = 0 the warm start is
        skipped. The input model is not modified.

        Raises:
            DivergenceError: If a loss or gradient becomes non-finite.
        """
        train, val = self._split_tensors(data, split)
        self._warn_empty_val(val)
        self._clock = time.perf_counter()
        return self._ao(model.copy(), train, val, TrainReport(status=TrainStatus.RUNNING), self.cfg)

    def refine(
        self,
        model: JuliaModel,
        data: SparseTensor,
        split: DatasetSplit
    ) -> tuple[JuliaModel, TrainReport]:
        """
        Joint mini-batch training of all parameters with early stopping on the
        validation loss. The input model is not modified.

        Returns:
            (refined model, report of the refinement epochs)

        Raises:
            DivergenceError: If a loss or gradient becomes non-finite.
        """
        train, val = self._split_tensors(data, split)
        self._warn_empty_val(val)
        report = TrainReport(status=TrainStatus.RUNNING)
        started = self._clock = time.perf_counter()
        model = self._refine(model.copy(), train, val, report, self.cfg)
        report.final_metrics = self._evaluate(model, train, val)
        report.success = report.final_metrics.rfe_defined and report.final_metrics.rfe < 1
        report.status = TrainStatus.CANCELLED if self._cancelled else TrainStatus.COMPLETED
        report.seconds = time.perf_counter() - started
        return model, report

    def train_with_restarts(
        self,
        data: SparseTensor,
        shape: Sequence[int],
        R: int,
        F: int,
        split: Optional[DatasetSplit] = None
    ) -> tuple[JuliaModel, TrainReport]:
        """
        Train with AO initialization (or naive random init) plus refinement,
        restarting with a fresh seed while the validation RFE is >= 1.

        Attempt k uses seed ``cfg.seed + k * 1_000_003``; at most
        ``cfg.max_restarts`` restarts follow the first attempt. A diverged
        attempt counts as RFE = inf.

        Args:
            data: Observed entries.
            shape: Tensor dimensions.
            R: Multi-linear rank.
            F: Nonlinear rank.
            split: Train/val/test positions; drawn from ``cfg.seed`` if absent.

        Returns:
            (model, report) of the first successful attempt, else of the
            attempt with the lowest validation RFE, flagged unsuccessful.
        """
        cfg = self.cfg
        if R < 0 or F < 0 or R + F < 1:
            raise ConfigError(f"Rank split must satisfy R >= 0, F >= 0, R + F >= 1; got {R}/{F}")
        shape = tuple(int(d) for d in shape)
        check_bounds(data.indices, shape)
        if split is None:
            split = split_dataset(data, cfg.train_frac, cfg.val_frac, cfg.seed)
        train, val = self._split_tensors(data, split)
        self._warn_empty_val(val)

        self._begin_run()
        started = time.perf_counter()
        seeds: list[int] = []
        rfes: list[float] = []
        best: Optional[tuple[float, JuliaModel, TrainReport]] = None

        for k in range(self._max_attempts):
            if self._cancelled:
                break
            self._attempt = k
            seed = cfg.attempt_seed(k)
            attempt_cfg = cfg.with_seed(seed)
            report = TrainReport(status=TrainStatus.RUNNING)
            logger.info("Attempt %d/%d (seed %d): JULIA(%d/%d) on %d training entries",
                        k + 1, self._max_attempts, seed, R, F, train.nnz)
            self._clock = time.perf_counter()
            model = self.new_model(shape, R, F, seed)
            rfe = math.inf
            try:
                if attempt_cfg.init == 'ao':
                    model = self._ao(model, train, val, report, attempt_cfg)
                model = self._refine(model, train, val, report, attempt_cfg)
                report.final_metrics = self._evaluate(model, train, val)
                if report.final_metrics.rfe_defined:
                    rfe = report.final_metrics.rfe
                report.status = TrainStatus.CANCELLED if self._cancelled else TrainStatus.COMPLETED
            except DivergenceError as e:
                logger.warning("Attempt %d diverged: %s", k + 1, e)
                report.status = TrainStatus.DIVERGED
                model = self.new_model(shape, R, F, seed)

            seeds.append(seed)
            rfes.append(rfe)
            if best is None or rfe < best[0]:
                best = (rfe, model, report)
            if rfe < 1:
                break
            if k + 1 < self._max_attempts:
                logger.info("Attempt %d failed (RFE %.4g), restarting", k + 1, rfe)

        if best is None:
            logger.warning("Training cancelled before the first attempt")
            report = TrainReport(status=TrainStatus.CANCELLED)
            report.seconds = time.perf_counter() - started
            return self.new_model(shape, R, F, cfg.seed), report

        rfe, model, report = best
        report.attempt_seeds = seeds
        report.attempt_rfes = rfes
        report.restart_count = len(seeds) - 1
        report.success = rfe < 1
        report.seconds = time.perf_counter() - started
        if report.success:
            logger.info("Training succeeded with validation RFE %.4g after %d restarts", rfe, report.restart_count)
        else:
            logger.warning("No attempt reached RFE < 1 in %d attempts (best %.4g)", len(seeds), rfe)
        return model, report


def ao_initialize(model: JuliaModel, data: SparseTensor, split: DatasetSplit, cfg: TrainConfig) -> JuliaModel:
    return JuliaTrainer(cfg).ao_initialize(model, data, split)


def refine(
    model: JuliaModel,
    data: SparseTensor,
    split: DatasetSplit,
    cfg: TrainConfig
) -> tuple[JuliaModel, TrainReport]:
    return JuliaTrainer(cfg).refine(model, data, split)


def train_with_restarts(
    data: SparseTensor,
    shape: Sequence[int],
    R: int,
    F: int,
    cfg: TrainConfig,
    split: Optional[DatasetSplit] = None,
    progress_callback: Optional[Callable[[TrainProgress], None]] = None
) -> tuple[JuliaModel, TrainReport]:
    return JuliaTrainer(cfg, progress_callback).train_with_restarts(data, shape, R, F, split)
