"""
Nonlinear Head Module
The nonlinear term f: embedding matrices B_n, an element-wise flow, a
concatenation-MLP flow, a learnable gate mixing both, and an output layer.

For one index (i_1, ..., i_N) with embedding rows e_n = B_n(i_n, :):

    b_tilde = act(e_1 * ... * e_N)
    b_breve = act(w2^T act(w1^T [e_1, ..., e_N] + b1) + b2)
    b       = z * b_tilde + (1 - z) * b_breve
    f       = act(w^T b + eps)

The ReLU derivative at exactly 0 is taken to be 0.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import ACTIVATIONS
from .errors import ShapeMismatchError, ConfigError
from .models import check_bounds


INIT_STD = 0.1
GATE_INIT = 0.5
OUT_BIAS_INIT = 0.1


def activate(x: np.ndarray, activation: str) -> np.ndarray:
    if activation == 'relu':
        return np.maximum(x, 0.0)
    return x


def activation_derivative(pre: np.ndarray, activation: str) -> np.ndarray:
    if activation == 'relu':
        return (pre > 0).astype(np.float64)
    return np.ones_like(pre)


class HeadInterface(ABC):
    """
    Extension point for nonlinear heads.

    A head maps the index rows of a batch to one real value each, provides the
    exact gradient of sum(residual^2) with respect to its own parameters, and
    round-trips its parameters through a flat vector.
    """

    @property
    @abstractmethod
    def rank(self) -> int:
        """Number of nonlinear components F."""

    @property
    @abstractmethod
    def shape(self) -> tuple[int, ...]:
        """Tensor shape the head was built for."""

    @abstractmethod
    def predict_batch(self, indices: np.ndarray) -> np.ndarray:
        """Head outputs for a (B, N) index array."""

    @abstractmethod
    def gradient(self, indices: np.ndarray, residuals: np.ndarray) -> 'HeadInterface':
        """Parameter-shaped gradient of sum(residual^2) on the batch."""

    @abstractmethod
    def flatten(self) -> np.ndarray:
        """All parameters as one vector."""

    @abstractmethod
    def unflatten(self, vector: np.ndarray) -> 'HeadInterface':
        """A head with this layout holding the values of ``vector``."""

    @abstractmethod
    def copy(self) -> 'HeadInterface':
        pass


@dataclass(eq=False)
class NonlinearParams(HeadInterface):
    """Parameters of the default gated two-flow head."""
    embeddings: list[np.ndarray]     # N matrices (I_n, F)
    mlp_w1: np.ndarray               # (N*F, F^2)
    mlp_b1: np.ndarray               # (F^2,)
    mlp_w2: np.ndarray               # (F^2, F)
    mlp_b2: np.ndarray               # (F,)
    gate_z: np.ndarray               # (F,)
    out_w: np.ndarray                # (F,)
    out_bias: float
    activation: str = 'relu'

    def __post_init__(self):
        self.embeddings = [np.asarray(b, dtype=np.float64) for b in self.embeddings]
        for name in ('mlp_w1', 'mlp_b1', 'mlp_w2', 'mlp_b2', 'gate_z', 'out_w'):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.out_bias = float(self.out_bias)
        self.validate()

    def validate(self) -> None:
        """
        Check that every dimension is consistent with N and F.

        Raises:
            ShapeMismatchError: On an inconsistent dimension.
            ConfigError: On an unknown activation.
        """
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if not self.embeddings or any(b.ndim != 2 for b in self.embeddings):
            raise ShapeMismatchError("Embeddings must be a non-empty list of 2-D matrices")
        ranks = {b.shape[1] for b in self.embeddings}
        if len(ranks) != 1 or self.rank < 1:
            raise ShapeMismatchError(f"Embeddings must share a column count F >= 1, got {sorted(ranks)}")
        n, f = len(self.embeddings), self.rank
        expected = {
            'mlp_w1': (n * f, f * f),
            'mlp_b1': (f * f,),
            'mlp_w2': (f * f, f),
            'mlp_b2': (f,),
            'gate_z': (f,),
            'out_w': (f,),
        }
        for name, dims in expected.items():
            if getattr(self, name).shape != dims:
                raise ShapeMismatchError(f"{name} must have shape {dims}, got {getattr(self, name).shape}")

    @property
    def rank(self) -> int:
        return self.embeddings[0].shape[1]

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(b.shape[0] for b in self.embeddings)

    @property
    def ndim(self) -> int:
        return len(self.embeddings)

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in flattening order (out_bias last, as a 1-vector)."""
        return [*self.embeddings, self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2,
                self.gate_z, self.out_w, np.array([self.out_bias])]

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflatten(self, vector: np.ndarray) -> 'NonlinearParams':
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.size,):
            raise ShapeMismatchError(f"Expected a vector of length {self.size}, got {vector.shape}")
        parts, start = [], 0
        for a in self.arrays():
            parts.append(vector[start:start + a.size].reshape(a.shape).copy())
            start += a.size
        n = self.ndim
        return NonlinearParams(
            embeddings=parts[:n],
            mlp_w1=parts[n], mlp_b1=parts[n + 1], mlp_w2=parts[n + 2], mlp_b2=parts[n + 3],
            gate_z=parts[n + 4], out_w=parts[n + 5], out_bias=float(parts[n + 6][0]),
            activation=self.activation,
        )

    def copy(self) -> 'NonlinearParams':
        return self.unflatten(self.flatten())

    def zeros_like(self) -> 'NonlinearParams':
        return self.unflatten(np.zeros(self.size))

    def predict_batch(self, indices: np.ndarray) -> np.ndarray:
        indices = np.asarray(indices, dtype=np.int64).reshape(-1, self.ndim)
        rows = [b[indices[:, n]] for n, b in enumerate(self.embeddings)]
        return _forward(self, rows)['out']

    def output_preactivation(self, indices: np.ndarray) -> np.ndarray:
        """w^T b + eps for a (B, N) index array, before the output activation."""
        indices = np.asarray(indices, dtype=np.int64).reshape(-1, self.ndim)
        rows = [b[indices[:, n]] for n, b in enumerate(self.embeddings)]
        return _forward(self, rows)['out_pre']

    def gradient(self, indices: np.ndarray, residuals: np.ndarray) -> 'NonlinearParams':
        return head_gradient(self, indices, residuals)


def init_head(
    shape: Sequence[int],
    rank: int,
    rng: np.random.Generator,
    activation: str = 'relu',
    std: float = INIT_STD
) -> NonlinearParams:
    """
    Random head: Gaussian weights and embeddings (mean 0, ``std``), zero MLP
    biases, gate 0.5 everywhere, output bias 0.1.
    """
    if rank < 1:
        raise ConfigError(f"Head rank F must be >= 1, got {rank}")
    n, f = len(shape), rank
    embeddings = [rng.normal(0.0, std, size=(int(d), f)) for d in shape]
    return NonlinearParams(
        embeddings=embeddings,
        mlp_w1=rng.normal(0.0, std, size=(n * f, f * f)),
        mlp_b1=np.zeros(f * f),
        mlp_w2=rng.normal(0.0, std, size=(f * f, f)),
        mlp_b2=np.zeros(f),
        gate_z=np.full(f, GATE_INIT),
        out_w=rng.normal(0.0, std, size=f),
        out_bias=OUT_BIAS_INIT,
        activation=activation,
    )


def _check_rows(rows: Sequence[np.ndarray], width: int) -> None:
    if any(np.shape(r)[-1] != width for r in rows):
        raise ShapeMismatchError(f"All rows must have length {width}, got {[np.shape(r) for r in rows]}")


def elementwise_flow(rows: Sequence[np.ndarray], activation: str = 'relu') -> np.ndarray:
    """act(e_1 * ... * e_N) for N rows of equal length."""
    rows = [np.asarray(r, dtype=np.float64) for r in rows]
    if not rows:
        raise ShapeMismatchError("elementwise_flow needs at least one row")
    _check_rows(rows, rows[0].shape[-1])
    prod = rows[0].copy()
    for r in rows[1:]:
        prod = prod * r
    return activate(prod, activation)


def mlp_flow(rows: Sequence[np.ndarray], params: NonlinearParams) -> np.ndarray:
    """act(w2^T act(w1^T concat(rows) + b1) + b2), concatenating mode 1 first."""
    rows = [np.asarray(r, dtype=np.float64) for r in rows]
    if len(rows) != params.ndim:
        raise ShapeMismatchError(f"Expected {params.ndim} rows, got {len(rows)}")
    _check_rows(rows, params.rank)
    x = np.concatenate(rows, axis=-1)
    hidden = activate(x @ params.mlp_w1 + params.mlp_b1, params.activation)
    return activate(hidden @ params.mlp_w2 + params.mlp_b2, params.activation)


def head_predict(params: NonlinearParams, rows: Sequence[np.ndarray]) -> float:
    """Head output for the N embedding rows of a single index."""
    rows = [np.asarray(r, dtype=np.float64).reshape(1, -1) for r in rows]
    if len(rows) != params.ndim:
        raise ShapeMismatchError(f"Expected {params.ndim} rows, got {len(rows)}")
    _check_rows(rows, params.rank)
    return float(_forward(params, rows)['out'][0])


def head_predict_at(params: NonlinearParams, index: Sequence[int]) -> float:
    """Head output at one tensor index."""
    index = np.asarray(index, dtype=np.int64).reshape(1, -1)
    check_bounds(index, params.shape)
    return float(params.predict_batch(index)[0])


def _forward(params: NonlinearParams, rows: list[np.ndarray]) -> dict[str, np.ndarray]:
    """Batched forward pass keeping every intermediate needed by the backward pass."""
    act = params.activation
    prod = rows[0].copy()
    for r in rows[1:]:
        prod = prod * r
    b_tilde = activate(prod, act)
    x = np.concatenate(rows, axis=1)
    h1_pre = x @ params.mlp_w1 + params.mlp_b1
    h1 = activate(h1_pre, act)
    h2_pre = h1 @ params.mlp_w2 + params.mlp_b2
    b_breve = activate(h2_pre, act)
    b = params.gate_z * b_tilde + (1.0 - params.gate_z) * b_breve
    out_pre = b @ params.out_w + params.out_bias
    return {
        'rows': rows, 'prod': prod, 'b_tilde': b_tilde, 'x': x,
        'h1_pre': h1_pre, 'h1': h1, 'h2_pre': h2_pre, 'b_breve': b_breve,
        'b': b, 'out_pre': out_pre, 'out': activate(out_pre, act),
    }


def head_gradient(params: NonlinearParams, indices: np.ndarray, residuals: np.ndarray) -> NonlinearParams:
    """
    Exact reverse-mode gradient of sum(residual^2) with respect to every head
    parameter, including the embedding rows touched by the batch.

    Args:
        params: Current head parameters.
        indices: (B, N) batch indices.
        residuals: (B,) prediction minus target under the full model.
    """
    indices = np.asarray(indices, dtype=np.int64).reshape(-1, params.ndim)
    residuals = np.asarray(residuals, dtype=np.float64)
    grad = params.zeros_like()
    if indices.shape[0] == 0:
        return grad
    check_bounds(indices, params.shape)

    act, f, n = params.activation, params.rank, params.ndim
    rows = [b[indices[:, m]] for m, b in enumerate(params.embeddings)]
    c = _forward(params, rows)

    d_out_pre = 2.0 * residuals * activation_derivative(c['out_pre'], act)
    grad.out_w = c['b'].T @ d_out_pre
    grad.out_bias = float(d_out_pre.sum())

    d_b = d_out_pre[:, None] * params.out_w
    grad.gate_z = np.sum(d_b * (c['b_tilde'] - c['b_breve']), axis=0)

    # element-wise flow
    d_prod = d_b * params.gate_z * activation_derivative(c['prod'], act)

    # MLP flow
    d_h2_pre = d_b * (1.0 - params.gate_z) * activation_derivative(c['h2_pre'], act)
    grad.mlp_w2 = c['h1'].T @ d_h2_pre
    grad.mlp_b2 = d_h2_pre.sum(axis=0)
    d_h1_pre = (d_h2_pre @ params.mlp_w2.T) * activation_derivative(c['h1_pre'], act)
    grad.mlp_w1 = c['x'].T @ d_h1_pre
    grad.mlp_b1 = d_h1_pre.sum(axis=0)
    d_x = d_h1_pre @ params.mlp_w1.T

    for m in range(n):
        d_row = d_x[:, m * f:(m + 1) * f].copy()
        others = d_prod
        for k, r in enumerate(rows):
            if k != m:
                others = others * r
        d_row += others
        np.add.at(grad.embeddings[m], indices[:, m], d_row)
    return grad
