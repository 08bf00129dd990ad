"""
Synthetic Data Module
Ground-truth mixed multi-linear / nonlinear tensors and the identifiability
experiment built on them.
"""

import logging
import math
from dataclasses import dataclass, asdict
from typing import Callable, Optional, Sequence

import numpy as np

from .config import TrainConfig, ACTIVATIONS
from .cp import CpFactors, init_cp_factors, cp_predict_batch
from .errors import ConfigError
from .head import NonlinearParams, init_head
from .metrics import compute_metrics, align_components
from .model import JuliaModel
from .models import SparseTensor, MetricsReport, AlignmentReport
from .tensor_data import split_dataset
from .trainer import JuliaTrainer, TrainProgress
from .utils import (
    make_rng, format_shape,
    STREAM_SYNTH_CP, STREAM_SYNTH_HEAD, STREAM_SYNTH_MASK, STREAM_SYNTH_NOISE
)


logger = logging.getLogger(__name__)

WEIGHT_RANGE = (0.5, 2.0)
MAX_PAIR_CONGRUENCE = 0.9
MAX_RESAMPLES = 100
MAX_SHUFFLE_CELLS = 10 ** 8
TRUTH_EMBEDDING_STD = 1.0
TRUTH_HEAD_SCALE = 0.5


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of a generated tensor."""
    shape: tuple[int, ...]
    R_true: int
    F_true: int
    missing_rate: float = 0.8
    noise_std: float = 0.0
    seed: int = 0
    activation: str = 'relu'
    head_std: float = TRUTH_EMBEDDING_STD
    head_scale: float = TRUTH_HEAD_SCALE

    def __post_init__(self):
        object.__setattr__(self, 'shape', tuple(int(d) for d in self.shape))
        self.validate()

    def validate(self) -> None:
        """
        Raises:
            ConfigError: On any out-of-range field.
        """
        if not self.shape or any(d < 1 for d in self.shape):
            raise ConfigError(f"Shape must be non-empty with positive dimensions, got {list(self.shape)}")
        if self.R_true < 0 or self.F_true < 0 or self.R_true + self.F_true < 1:
            raise ConfigError(f"Need R_true, F_true >= 0 and R_true + F_true >= 1; got {self.R_true}/{self.F_true}")
        if not 0 <= self.missing_rate < 1:
            raise ConfigError(f"missing_rate must lie in [0, 1), got {self.missing_rate}")
        if not (math.isfinite(self.noise_std) and self.noise_std >= 0):
            raise ConfigError(f"noise_std must be finite and >= 0, got {self.noise_std}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.head_std <= 0:
            raise ConfigError(f"head_std must be positive, got {self.head_std}")
        if not (math.isfinite(self.head_scale) and self.head_scale > 0):
            raise ConfigError(f"head_scale must be finite and positive, got {self.head_scale}")
        if self.n_observed < 1:
            raise ConfigError("missing_rate leaves no observed entries")

    @property
    def n_cells(self) -> int:
        return math.prod(self.shape)

    @property
    def n_observed(self) -> int:
        return int(round((1 - self.missing_rate) * self.n_cells))

    def to_dict(self) -> dict:
        d = asdict(self)
        d['shape'] = list(self.shape)
        return d


def _max_pair_congruence(normalised: Sequence[np.ndarray]) -> float:
    rank = normalised[0].shape[1]
    if rank < 2:
        return 0.0
    congruence = np.ones((rank, rank))
    for u in normalised:
        congruence *= np.abs(u.T @ u)
    np.fill_diagonal(congruence, 0.0)
    return float(congruence.max())


def ground_truth_cp(shape: Sequence[int], rank: int, rng: np.random.Generator) -> CpFactors:
    """
    Gaussian factors with unit-norm columns; component weights drawn
    log-uniformly from [0.5, 2] are absorbed into the first mode.

    Draws are repeated while two components have congruence above 0.9.
    """
    shape = tuple(int(d) for d in shape)
    if rank == 0:
        return init_cp_factors(shape, 0, rng)
    for _ in range(MAX_RESAMPLES):
        normalised = []
        for d in shape:
            a = rng.standard_normal((d, rank))
            normalised.append(a / np.linalg.norm(a, axis=0))
        if _max_pair_congruence(normalised) <= MAX_PAIR_CONGRUENCE:
            break
    else:
        logger.warning("Could not draw components with pairwise congruence <= %.2f in %d tries",
                       MAX_PAIR_CONGRUENCE, MAX_RESAMPLES)
    low, high = np.log(WEIGHT_RANGE[0]), np.log(WEIGHT_RANGE[1])
    weights = np.exp(rng.uniform(low, high, size=rank))
    normalised[0] = normalised[0] * weights
    return CpFactors(normalised)


def ground_truth_head(
    shape: Sequence[int],
    rank: int,
    rng: np.random.Generator,
    cells: np.ndarray,
    activation: str = 'relu',
    embedding_std: float = TRUTH_EMBEDDING_STD
) -> NonlinearParams:
    """
    Random head whose output varies across ``cells``: embeddings with std
    ``embedding_std``, MLP and output weights with std 1/sqrt(fan-in), and an
    output bias of minus the median pre-activation over ``cells``, so the
    output ReLU is active on half of them.
    """
    n, f = len(shape), rank
    head = init_head(shape, rank, rng, activation, embedding_std)
    head.mlp_w1 = head.mlp_w1 * (1.0 / (embedding_std * math.sqrt(n * f)))
    head.mlp_w2 = head.mlp_w2 * (1.0 / (embedding_std * f))
    head.out_w = head.out_w * (1.0 / (embedding_std * math.sqrt(f)))
    head.out_bias = 0.0
    if len(cells):
        head.out_bias = -float(np.median(head.output_preactivation(cells)))
    return head


def scale_head_output(head: NonlinearParams, factor: float) -> NonlinearParams:
    """
    Head whose output is ``factor`` times that of ``head``; ``factor`` > 0.

    Both activations are positively homogeneous, so scaling the output
    weights and bias scales f.
    """
    scaled = head.copy()
    scaled.out_w = scaled.out_w * factor
    scaled.out_bias = scaled.out_bias * factor
    return scaled


def _rms(values: np.ndarray) -> float:
    return float(np.sqrt(np.mean(values * values))) if len(values) else 0.0


def sample_cells(shape: Sequence[int], count: int, rng: np.random.Generator) -> np.ndarray:
    """
    ``count`` distinct cells drawn uniformly without replacement, as a
    (count, N) index array in row-major cell order.
    """
    shape = tuple(int(d) for d in shape)
    cells = math.prod(shape)
    if not 0 <= count <= cells:
        raise ConfigError(f"Cannot sample {count} cells from {cells}")
    if cells <= MAX_SHUFFLE_CELLS:
        ranks = rng.permutation(cells)[:count]
    else:
        chosen: set[int] = set()
        while len(chosen) < count:
            for r in rng.integers(0, cells, size=count - len(chosen)):
                chosen.add(int(r))
        ranks = np.fromiter(chosen, dtype=np.int64, count=count)
    ranks = np.sort(ranks)
    return np.stack(np.unravel_index(ranks, shape), axis=1).astype(np.int64)


def generate(spec: SyntheticSpec) -> tuple[SparseTensor, JuliaModel]:
    """
    Draw a ground-truth model and observe x = g + f (+ noise) on a uniformly
    sampled subset of cells.

    The head output is rescaled so that its RMS over the observed cells is
    ``spec.head_scale`` times the RMS of g there, or ``spec.head_scale``
    itself when R_true = 0.

    Returns:
        (observed tensor, ground-truth model)
    """
    shape = spec.shape
    cp = ground_truth_cp(shape, spec.R_true, make_rng(spec.seed, STREAM_SYNTH_CP))
    count = spec.n_observed
    if count < spec.R_true * sum(shape):
        logger.warning("Only %d observed entries for R_true=%d on %s; the problem is under-determined",
                       count, spec.R_true, format_shape(shape))
    indices = sample_cells(shape, count, make_rng(spec.seed, STREAM_SYNTH_MASK))

    head = None
    if spec.F_true > 0:
        head = ground_truth_head(shape, spec.F_true, make_rng(spec.seed, STREAM_SYNTH_HEAD), indices,
                                 spec.activation, spec.head_std)
        reference = _rms(cp_predict_batch(cp, indices)) if spec.R_true > 0 else 1.0
        current = _rms(head.predict_batch(indices))
        if current > 0 and reference > 0:
            head = scale_head_output(head, spec.head_scale * reference / current)
        else:
            logger.warning("Ground-truth head is zero on every observed cell")
    truth = JuliaModel(shape, cp, head, spec.activation)
    values = truth.predict_batch(indices)
    if spec.noise_std > 0:
        values = values + make_rng(spec.seed, STREAM_SYNTH_NOISE).normal(0.0, spec.noise_std, size=count)
    logger.info("Generated %s tensor with %d observed entries (R=%d, F=%d)",
                format_shape(shape), count, spec.R_true, spec.F_true)
    return SparseTensor(shape, indices, values), truth


def identifiability_experiment(
    spec: SyntheticSpec,
    fit_R: int,
    fit_F: int,
    cfg: TrainConfig,
    progress_callback: Optional[Callable[[TrainProgress], None]] = None
) -> tuple[MetricsReport, Optional[AlignmentReport]]:
    """
    Generate, split (``cfg.train_frac`` train, rest test), train JULIA(fit_R/fit_F)
    and score the held-out entries.

    Returns:
        (test metrics, alignment of the fitted CP block against the truth).
        The alignment is None when ``fit_R`` differs from ``spec.R_true`` or
        is 0.
    """
    data, truth = generate(spec)
    split = split_dataset(data, cfg.train_frac, cfg.val_frac, cfg.seed)
    trainer = JuliaTrainer(cfg, progress_callback)
    model, report = trainer.train_with_restarts(data, spec.shape, fit_R, fit_F, split)

    test = data.subset(split.test)
    metrics = compute_metrics(model.predict_batch(test.indices), test.values)
    alignment = None
    if fit_R == spec.R_true and fit_R > 0:
        alignment = align_components(model.cp, truth.cp)
    logger.info("Identifiability: test RMSE %.4g, success %s", metrics.rmse, report.success)
    return metrics, alignment
