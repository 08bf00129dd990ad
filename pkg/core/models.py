"""
Data Models Module
Core dataclasses used throughout the application.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import TensorDataError, DuplicateIndexError, ShapeMismatchError


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class SparseTensor:
    """An N-way tensor given by its observed entries in coordinate form."""
    shape: tuple[int, ...]
    indices: np.ndarray   # (nnz, N) int64, 0-based
    values: np.ndarray    # (nnz,) float64

    def __post_init__(self):
        shape = tuple(int(d) for d in self.shape)
        indices = np.asarray(self.indices, dtype=np.int64)
        values = np.asarray(self.values, dtype=np.float64)
        if indices.ndim == 1 and indices.size == 0:
            indices = indices.reshape(0, len(shape))
        object.__setattr__(self, 'shape', shape)
        object.__setattr__(self, 'indices', _frozen(indices))
        object.__setattr__(self, 'values', _frozen(values))
        self.validate()

    def validate(self) -> None:
        """
        Check the tensor invariants.

        Raises:
            TensorDataError: On a bad shape or non-finite value.
            ShapeMismatchError: On an out-of-bounds index.
            DuplicateIndexError: When two entries share an index tuple.
        """
        if not self.shape or any(d < 1 for d in self.shape):
            raise TensorDataError(f"Shape must be a non-empty list of positive integers, got {list(self.shape)}")
        if self.indices.ndim != 2 or self.indices.shape[1] != self.ndim:
            raise ShapeMismatchError(
                f"Indices must have {self.ndim} columns, got array of shape {self.indices.shape}"
            )
        if self.values.shape != (self.indices.shape[0],):
            raise ShapeMismatchError("Index and value counts differ")
        if not np.all(np.isfinite(self.values)):
            raise TensorDataError("All values must be finite")
        check_bounds(self.indices, self.shape)
        if self.nnz > 1 and np.unique(self.indices, axis=0).shape[0] != self.nnz:
            raise DuplicateIndexError("Two entries share the same index tuple")

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def nnz(self) -> int:
        return int(self.indices.shape[0])

    def subset(self, positions: np.ndarray) -> 'SparseTensor':
        """Tensor restricted to the entries at the given positions."""
        positions = np.asarray(positions, dtype=np.int64)
        return SparseTensor(self.shape, self.indices[positions], self.values[positions])

    def entries(self) -> list[tuple[tuple[int, ...], float]]:
        """Entries as (index tuple, value) pairs."""
        return [(tuple(int(i) for i in idx), float(v)) for idx, v in zip(self.indices, self.values)]

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


def check_bounds(indices: np.ndarray, shape: tuple[int, ...]) -> None:
    """Raise ShapeMismatchError if any index component lies outside ``shape``."""
    indices = np.asarray(indices)
    if indices.size == 0:
        return
    if indices.shape[-1] != len(shape):
        raise ShapeMismatchError(f"Index has {indices.shape[-1]} modes, tensor has {len(shape)}")
    bad = (indices < 0) | (indices >= np.asarray(shape))
    if np.any(bad):
        row = int(np.argwhere(bad)[0][0]) if indices.ndim == 2 else 0
        offending = indices[row] if indices.ndim == 2 else indices
        raise ShapeMismatchError(
            f"Index {tuple(int(i) for i in offending)} out of bounds for shape {list(shape)}"
        )


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint train / validation / test positions into a parent tensor's entries."""
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int = 0

    def __post_init__(self):
        for name in ('train', 'val', 'test'):
            object.__setattr__(self, name, _frozen(np.asarray(getattr(self, name), dtype=np.int64)))

    def validate(self, nnz: int) -> None:
        """Check that the partitions are disjoint and cover ``range(nnz)``."""
        combined = np.concatenate([self.train, self.val, self.test])
        if combined.size != nnz or not np.array_equal(np.sort(combined), np.arange(nnz)):
            raise TensorDataError("Split partitions must be disjoint and cover every entry")

    def to_dict(self) -> dict:
        return {
            'train': self.train.tolist(),
            'val': self.val.tolist(),
            'test': self.test.tolist(),
            'seed': self.seed,
        }


@dataclass
class MetricsReport:
    """Prediction quality over an evaluation set."""
    rmse: float
    mae: float
    rfe: Optional[float]
    n_entries: int
    rfe_error: Optional[str] = None

    @property
    def rfe_defined(self) -> bool:
        return self.rfe is not None

    def to_dict(self) -> dict:
        return {
            'rmse': self.rmse,
            'mae': self.mae,
            'rfe': self.rfe,
            'rfe_error': self.rfe_error,
            'n_entries': self.n_entries,
        }


@dataclass
class AlignmentReport:
    """Component matching of estimated CP factors against a reference."""
    permutation: list[int]            # estimated component r -> reference component
    congruences: list[float]          # per estimated component, under the permutation
    signed_cosines: list[list[float]] = field(default_factory=list)  # [mode][component]

    @property
    def mean_congruence(self) -> float:
        if not self.congruences:
            return math.nan
        return float(np.mean(self.congruences))

    def to_dict(self) -> dict:
        return {
            'permutation': list(self.permutation),
            'congruences': list(self.congruences),
            'mean_congruence': self.mean_congruence,
            'signed_cosines': [list(row) for row in self.signed_cosines],
        }
