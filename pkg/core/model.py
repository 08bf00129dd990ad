"""
Model Module
The combined predictor x = g + f, its squared loss, the joint gradient on
shared residuals, and JSON checkpoints.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .config import ACTIVATIONS
from .cp import CpFactors, cp_predict_batch, cp_gradient, init_cp_factors
from .errors import (
    ShapeMismatchError, CheckpointError, CheckpointVersionError, ConfigError
)
from .head import NonlinearParams, HeadInterface, init_head
from .models import SparseTensor, check_bounds
from .utils import make_rng, STREAM_CP_INIT, STREAM_HEAD_INIT


logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

Entries = Union[SparseTensor, Sequence[tuple[Sequence[int], float]]]


@dataclass(eq=False)
class JuliaModel:
    """Multi-linear block (rank R) plus an optional nonlinear head (rank F)."""
    shape: tuple[int, ...]
    cp: CpFactors
    head: Optional[HeadInterface] = None
    activation: str = 'relu'

    def __post_init__(self):
        self.shape = tuple(int(d) for d in self.shape)
        self.validate()

    def validate(self) -> None:
        """
        Raises:
            ShapeMismatchError: If a block's row counts disagree with the shape.
            ConfigError: If R + F < 1.
        """
        if self.cp.shape != self.shape:
            raise ShapeMismatchError(f"CP factors built for {self.cp.shape}, model shape is {self.shape}")
        if self.head is not None and self.head.shape != self.shape:
            raise ShapeMismatchError(f"Head built for {self.head.shape}, model shape is {self.shape}")
        if self.R + self.F < 1:
            raise ConfigError("A model needs R + F >= 1")

    @property
    def R(self) -> int:
        return self.cp.rank

    @property
    def F(self) -> int:
        return 0 if self.head is None else self.head.rank

    @property
    def ndim(self) -> int:
        return len(self.shape)

    def copy(self) -> 'JuliaModel':
        return JuliaModel(self.shape, self.cp.copy(),
                          None if self.head is None else self.head.copy(), self.activation)

    @classmethod
    def initialize(
        cls,
        shape: Sequence[int],
        R: int,
        F: int,
        seed: int,
        activation: str = 'relu'
    ) -> 'JuliaModel':
        """
        Randomly initialised model; the CP and head blocks draw from separate
        seeded streams so either block's draw is independent of the other's rank.
        """
        if R < 0 or F < 0 or R + F < 1:
            raise ConfigError(f"Rank split must satisfy R >= 0, F >= 0, R + F >= 1; got {R}/{F}")
        if activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")
        shape = tuple(int(d) for d in shape)
        cp = init_cp_factors(shape, R, make_rng(seed, STREAM_CP_INIT))
        head = init_head(shape, F, make_rng(seed, STREAM_HEAD_INIT), activation) if F > 0 else None
        return cls(shape, cp, head, activation)

    def predict_batch(self, indices: np.ndarray) -> np.ndarray:
        """Predictions g + f for a (B, N) index array."""
        indices = np.asarray(indices, dtype=np.int64).reshape(-1, self.ndim)
        out = cp_predict_batch(self.cp, indices)
        if self.head is not None:
            out = out + self.head.predict_batch(indices)
        return out

    def predict(self, index: Sequence[int]) -> float:
        """
        Prediction at one index.

        Raises:
            ShapeMismatchError: If ``index`` is out of bounds.
        """
        index = np.asarray(index, dtype=np.int64).reshape(1, -1)
        check_bounds(index, self.shape)
        return float(self.predict_batch(index)[0])

    def residuals(self, indices: np.ndarray, values: np.ndarray) -> np.ndarray:
        """Prediction minus target."""
        return self.predict_batch(indices) - values

    def gradient(
        self,
        indices: np.ndarray,
        values: np.ndarray
    ) -> tuple[CpFactors, Optional[HeadInterface], np.ndarray]:
        """
        Joint gradient of sum((x - prediction)^2) on one batch.

        Returns:
            (CP gradient, head gradient or None, residuals) computed from
            shared residuals.
        """
        res = self.residuals(indices, values)
        cp_grad = cp_gradient(self.cp, indices, res)
        head_grad = self.head.gradient(indices, res) if self.head is not None else None
        return cp_grad, head_grad, res


def _as_arrays(entries: Entries, ndim: int) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(entries, SparseTensor):
        return entries.indices, entries.values
    entries = list(entries)
    if not entries:
        return np.zeros((0, ndim), dtype=np.int64), np.zeros(0)
    indices = np.array([tuple(idx) for idx, _ in entries], dtype=np.int64)
    values = np.array([float(v) for _, v in entries], dtype=np.float64)
    return indices, values


def _partial_loss(model: JuliaModel, indices: np.ndarray, values: np.ndarray) -> float:
    res = model.residuals(indices, values)
    return float(np.dot(res, res))


def loss(
    model: JuliaModel,
    entries: Entries,
    workers: int = 1,
    deterministic: bool = True
) -> float:
    """
    Squared loss sum (x - prediction)^2 over ``entries`` (0 for no entries).

    With ``workers > 1`` the entries are split into contiguous partitions
    evaluated on a thread pool. In deterministic mode partial sums are reduced
    in partition order; otherwise in completion order.
    """
    indices, values = _as_arrays(entries, model.ndim)
    n = values.shape[0]
    if n == 0:
        return 0.0
    if workers <= 1 or n < 2 * workers:
        return _partial_loss(model, indices, values)

    parts = np.array_split(np.arange(n), workers)
    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = [executor.submit(_partial_loss, model, indices[p], values[p]) for p in parts]
        if deterministic:
            return float(sum(f.result() for f in futures))
        total = 0.0
        for future in as_completed(futures):
            total += future.result()
        return total


# ── Checkpoints ──────────────────────────────────────────────────────────────

def _encode(array: np.ndarray) -> dict:
    array = np.asarray(array, dtype=np.float64)
    return {'dims': list(array.shape), 'data': [float(x) for x in array.ravel()]}


def _decode(obj, name: str, dims: tuple[int, ...]) -> np.ndarray:
    try:
        declared = tuple(int(d) for d in obj['dims'])
        data = np.array(obj['data'], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"Malformed tensor field {name!r}: {e}") from e
    if declared != dims:
        raise CheckpointError(f"Field {name!r} has dims {list(declared)}, expected {list(dims)}")
    if data.size != int(np.prod(dims, dtype=np.int64)):
        raise CheckpointError(f"Field {name!r} holds {data.size} numbers, dims {list(dims)} need more or fewer")
    if not np.all(np.isfinite(data)):
        raise CheckpointError(f"Field {name!r} holds non-finite numbers")
    return data.reshape(dims)


def checkpoint_to_dict(model: JuliaModel) -> dict:
    """Checkpoint document of ``model`` (format version 1)."""
    head = model.head
    if head is not None and not isinstance(head, NonlinearParams):
        raise CheckpointError(f"Cannot serialise head of type {type(head).__name__}")
    doc = {
        'version': CHECKPOINT_VERSION,
        'shape': list(model.shape),
        'R': model.R,
        'F': model.F,
        'activation': head.activation if head is not None else model.activation,
        'cp_factors': [_encode(a) for a in model.cp.factors],
        'embeddings': None,
        'mlp_w1': None,
        'mlp_b1': None,
        'mlp_w2': None,
        'mlp_b2': None,
        'gate_z': None,
        'out_w': None,
        'out_bias': None,
    }
    if head is not None:
        doc.update({
            'embeddings': [_encode(b) for b in head.embeddings],
            'mlp_w1': _encode(head.mlp_w1),
            'mlp_b1': _encode(head.mlp_b1),
            'mlp_w2': _encode(head.mlp_w2),
            'mlp_b2': _encode(head.mlp_b2),
            'gate_z': _encode(head.gate_z),
            'out_w': _encode(head.out_w),
            'out_bias': float(head.out_bias),
        })
    return doc


def checkpoint_from_dict(doc: dict) -> JuliaModel:
    """
    Rebuild a model from a checkpoint document.

    Raises:
        CheckpointVersionError: Unknown ``version``.
        CheckpointError: Missing fields or dimensions inconsistent with ``shape``.
    """
    if not isinstance(doc, dict):
        raise CheckpointError("Checkpoint must be a JSON object")
    if doc.get('version') != CHECKPOINT_VERSION:
        raise CheckpointVersionError(doc.get('version'))
    try:
        shape = tuple(int(d) for d in doc['shape'])
        R, F = int(doc['R']), int(doc['F'])
        activation = str(doc['activation'])
        cp_docs = doc['cp_factors']
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"Checkpoint is missing a required field: {e}") from e
    if not shape or any(d < 1 for d in shape) or R < 0 or F < 0 or R + F < 1:
        raise CheckpointError(f"Inconsistent header: shape {list(shape)}, R={R}, F={F}")
    if activation not in ACTIVATIONS:
        raise CheckpointError(f"Unknown activation {activation!r}")
    if not isinstance(cp_docs, list) or len(cp_docs) != len(shape):
        raise CheckpointError(f"Expected {len(shape)} CP factor matrices")

    cp = CpFactors([_decode(d, f'cp_factors[{n}]', (shape[n], R)) for n, d in enumerate(cp_docs)])
    head = None
    if F > 0:
        n = len(shape)
        emb_docs = doc.get('embeddings')
        if not isinstance(emb_docs, list) or len(emb_docs) != n:
            raise CheckpointError(f"Expected {n} embedding matrices")
        try:
            out_bias = float(doc['out_bias'])
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"Invalid out_bias: {e}") from e
        head = NonlinearParams(
            embeddings=[_decode(d, f'embeddings[{m}]', (shape[m], F)) for m, d in enumerate(emb_docs)],
            mlp_w1=_decode(doc.get('mlp_w1'), 'mlp_w1', (n * F, F * F)),
            mlp_b1=_decode(doc.get('mlp_b1'), 'mlp_b1', (F * F,)),
            mlp_w2=_decode(doc.get('mlp_w2'), 'mlp_w2', (F * F, F)),
            mlp_b2=_decode(doc.get('mlp_b2'), 'mlp_b2', (F,)),
            gate_z=_decode(doc.get('gate_z'), 'gate_z', (F,)),
            out_w=_decode(doc.get('out_w'), 'out_w', (F,)),
            out_bias=out_bias,
            activation=activation,
        )
    return JuliaModel(shape, cp, head, activation)


def save_checkpoint(model: JuliaModel, path: Union[str, Path]) -> None:
    """
    Write ``model`` as a JSON checkpoint; floats keep their exact value.

    Raises:
        CheckpointError: Non-finite parameters or an unwritable path.
    """
    try:
        text = json.dumps(checkpoint_to_dict(model), allow_nan=False)
    except ValueError as e:
        raise CheckpointError(f"Cannot save a model with non-finite parameters: {e}") from e
    try:
        Path(path).write_text(text, encoding='utf-8')
    except OSError as e:
        raise CheckpointError(f"Cannot write checkpoint {path}: {e}") from e
    logger.info("Saved R=%d/F=%d checkpoint to %s", model.R, model.F, path)


def load_checkpoint(path: Union[str, Path]) -> JuliaModel:
    """
    Read a JSON checkpoint.

    Raises:
        CheckpointError: Unreadable, corrupt or inconsistent file.
        CheckpointVersionError: Unknown format version.
    """
    try:
        doc = json.loads(Path(path).read_text(encoding='utf-8'))
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise CheckpointError(f"Corrupt checkpoint {path}: {e}") from e
    return checkpoint_from_dict(doc)
