"""
CP Module
Multi-linear (CP) predictor, its gradient with respect to the factor
matrices, the CP-only warm start, and standalone CP completion.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .config import TrainConfig
from .errors import ShapeMismatchError, ConfigError, DivergenceError
from .models import SparseTensor, check_bounds
from .optimizer import BlockStepper
from .utils import (
    make_rng, minibatches, EarlyStopping, STREAM_CP_INIT, STREAM_WARMSTART, STREAM_REFINE
)


logger = logging.getLogger(__name__)

INIT_STD = 0.1


@dataclass(eq=False)
class CpFactors:
    """N factor matrices A_n of shape (I_n, R) sharing the rank R."""
    factors: list[np.ndarray]

    def __post_init__(self):
        self.factors = [np.asarray(a, dtype=np.float64) for a in self.factors]
        if not self.factors:
            raise ShapeMismatchError("CpFactors needs at least one factor matrix")
        if any(a.ndim != 2 for a in self.factors):
            raise ShapeMismatchError("Factor matrices must be 2-D")
        ranks = {a.shape[1] for a in self.factors}
        if len(ranks) != 1:
            raise ShapeMismatchError(f"Factor matrices disagree on rank: {sorted(ranks)}")

    @property
    def rank(self) -> int:
        return self.factors[0].shape[1]

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(a.shape[0] for a in self.factors)

    @property
    def ndim(self) -> int:
        return len(self.factors)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.factors)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.factors)

    def copy(self) -> 'CpFactors':
        return CpFactors([a.copy() for a in self.factors])

    def zeros_like(self) -> 'CpFactors':
        return CpFactors([np.zeros_like(a) for a in self.factors])

    def flatten(self) -> np.ndarray:
        if self.size == 0:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in self.factors])

    def unflatten(self, vector: np.ndarray) -> 'CpFactors':
        """Factors with this layout holding the values of ``vector``."""
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.size,):
            raise ShapeMismatchError(f"Expected a vector of length {self.size}, got {vector.shape}")
        out, start = [], 0
        for a in self.factors:
            out.append(vector[start:start + a.size].reshape(a.shape).copy())
            start += a.size
        return CpFactors(out)


def init_cp_factors(
    shape: Sequence[int],
    rank: int,
    rng: np.random.Generator,
    std: float = INIT_STD
) -> CpFactors:
    """I.i.d. Gaussian factors with mean 0 and standard deviation ``std``."""
    if rank < 0:
        raise ConfigError(f"rank must be >= 0, got {rank}")
    return CpFactors([rng.normal(0.0, std, size=(int(d), rank)) for d in shape])


def _gather_rows(factors: Sequence[np.ndarray], indices: np.ndarray) -> list[np.ndarray]:
    return [a[indices[:, n]] for n, a in enumerate(factors)]


def cp_predict_batch(factors: CpFactors, indices: np.ndarray) -> np.ndarray:
    """Predictions sum_r prod_n A_n(i_n, r) for a (B, N) index array."""
    indices = np.asarray(indices, dtype=np.int64).reshape(-1, factors.ndim)
    if factors.rank == 0:
        return np.zeros(indices.shape[0])
    rows = _gather_rows(factors.factors, indices)
    prod = rows[0].copy()
    for r in rows[1:]:
        prod *= r
    return prod.sum(axis=1)


def cp_predict(factors: CpFactors, index: Sequence[int]) -> float:
    """
    Multi-linear prediction at one index.

    Raises:
        ShapeMismatchError: If ``index`` is out of bounds.
    """
    index = np.asarray(index, dtype=np.int64).reshape(1, -1)
    check_bounds(index, factors.shape)
    return float(cp_predict_batch(factors, index)[0])


def cp_gradient(factors: CpFactors, indices: np.ndarray, residuals: np.ndarray) -> CpFactors:
    """
    Gradient of sum(residual^2) with respect to every factor matrix.

    Args:
        factors: Current multi-linear factors.
        indices: (B, N) indices of the batch entries.
        residuals: (B,) prediction minus target under the full model.

    Returns:
        Gradient laid out as CpFactors; rows not touched by the batch are zero.
    """
    indices = np.asarray(indices, dtype=np.int64).reshape(-1, factors.ndim)
    residuals = np.asarray(residuals, dtype=np.float64)
    grad = factors.zeros_like()
    if factors.rank == 0 or indices.shape[0] == 0:
        return grad
    check_bounds(indices, factors.shape)

    rows = _gather_rows(factors.factors, indices)
    scale = 2.0 * residuals[:, None]
    for n in range(factors.ndim):
        others = scale.copy()
        for m, r in enumerate(rows):
            if m != n:
                others = others * r
        np.add.at(grad.factors[n], indices[:, n], others)
    return grad


def cp_loss(factors: CpFactors, tensor: SparseTensor) -> float:
    """CP-only squared loss sum (x - g)^2 over the entries of ``tensor``."""
    residuals = cp_predict_batch(factors, tensor.indices) - tensor.values
    return float(np.dot(residuals, residuals))


def cp_warmstart(
    train: SparseTensor,
    shape: Sequence[int],
    rank: int,
    epochs: int,
    cfg: TrainConfig,
    init: Optional[CpFactors] = None,
    on_epoch: Optional[Callable[[int, CpFactors, float], None]] = None
) -> CpFactors:
    """
    Fit the multi-linear block alone for a fixed number of epochs.

    Starts from ``init`` or, if absent, from Gaussian factors drawn from the
    CP-init stream of ``cfg.seed``; runs ``epochs`` shuffled mini-batch passes
    of Adam at ``cfg.lr_linear``. ``on_epoch(epoch, factors, loss)`` is called
    after every pass.

    Raises:
        ConfigError: If ``rank < 1`` or ``epochs < 1``.
        DivergenceError: If the loss becomes non-finite.
    """
    if rank < 1:
        raise ConfigError(f"Warm start needs rank >= 1, got {rank}")
    if epochs < 1:
        raise ConfigError(f"Warm start needs epochs >= 1, got {epochs}")
    shape = tuple(int(d) for d in shape)
    if rank > min(shape):
        logger.warning("Rank %d exceeds the smallest mode dimension %d (overcomplete CP)", rank, min(shape))

    factors = init.copy() if init is not None else init_cp_factors(shape, rank, make_rng(cfg.seed, STREAM_CP_INIT))
    if factors.shape != shape or factors.rank != rank:
        raise ShapeMismatchError(f"Initial factors have shape {factors.shape} and rank {factors.rank}")

    rng = make_rng(cfg.seed, STREAM_WARMSTART)
    stepper = BlockStepper(factors.size, cfg.lr_linear, 'adam', 'linear',
                           cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    n = train.nnz
    for epoch in range(epochs):
        for batch in minibatches(n, cfg.batch_size, rng):
            idx = train.indices[batch]
            residuals = cp_predict_batch(factors, idx) - train.values[batch]
            grad = cp_gradient(factors, idx, residuals).flatten() * (n / len(batch))
            factors = factors.unflatten(stepper.step(factors.flatten(), grad))
        loss = cp_loss(factors, train)
        if not np.isfinite(loss):
            raise DivergenceError('linear', f"non-finite warm-start loss at epoch {epoch + 1}")
        logger.debug("Warm start epoch %d/%d: loss %.6g", epoch + 1, epochs, loss)
        if on_epoch:
            on_epoch(epoch + 1, factors, loss)
    return factors


def fit_cp(
    train: SparseTensor,
    val: SparseTensor,
    shape: Sequence[int],
    rank: int,
    cfg: TrainConfig
) -> tuple[CpFactors, int]:
    """
    Standalone CP completion: warm start followed by mini-batch refinement
    of the factors until the validation loss stops changing.

    Uses the same seeded streams and stopping rule as the joint trainer, so a
    model without a nonlinear head trained there ends at the same factors.

    Returns:
        (fitted factors, number of refinement epochs run)
    """
    shape = tuple(int(d) for d in shape)
    factors = init_cp_factors(shape, rank, make_rng(cfg.seed, STREAM_CP_INIT))
    if cfg.warmstart_epochs > 0:
        factors = cp_warmstart(train, shape, rank, cfg.warmstart_epochs, cfg, init=factors)

    monitor = val
    if val.nnz == 0:
        logger.warning("Validation set is empty, early stopping monitors the training loss")
        monitor = train
    stopper = EarlyStopping(cfg.early_stop_rel_tol, cfg.patience)
    stopper.update(cp_loss(factors, monitor))

    rng = make_rng(cfg.seed, STREAM_REFINE)
    stepper = BlockStepper(factors.size, cfg.lr_linear, cfg.optimizer, 'linear',
                           cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    n = train.nnz
    epochs = 0
    for _ in range(cfg.max_epochs):
        for batch in minibatches(n, cfg.batch_size, rng):
            idx = train.indices[batch]
            residuals = cp_predict_batch(factors, idx) - train.values[batch]
            grad = cp_gradient(factors, idx, residuals).flatten() * (n / len(batch))
            factors = factors.unflatten(stepper.step(factors.flatten(), grad))
        epochs += 1
        monitored = cp_loss(factors, monitor)
        if not np.isfinite(monitored):
            raise DivergenceError('linear', f"non-finite loss at epoch {epochs}")
        if stopper.update(monitored):
            break
    logger.debug("CP completion stopped after %d epochs", epochs)
    return factors, epochs
