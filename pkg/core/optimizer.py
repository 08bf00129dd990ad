"""
Optimizer Module
First-order steppers (Adam, plain SGD) over flattened parameter blocks.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DivergenceError, ConfigError


@dataclass
class AdamState:
    """Moment estimates of one parameter block."""
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8

    @classmethod
    def zeros(cls, size: int, beta1: float = 0.9, beta2: float = 0.999, eps_hat: float = 1e-8) -> 'AdamState':
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")
        return cls(np.zeros(size), np.zeros(size), 0, beta1, beta2, eps_hat)


def _check_finite(grads: np.ndarray, block: str) -> None:
    if not np.all(np.isfinite(grads)):
        raise DivergenceError(block, "non-finite gradient")


def adam_step(
    state: AdamState,
    params: np.ndarray,
    grads: np.ndarray,
    lr: float,
    block: str = "parameter"
) -> tuple[AdamState, np.ndarray]:
    """
    One Adam update with bias correction.

    The state is updated in place; a new parameter vector is returned and the
    input ``params`` is left untouched.

    Raises:
        DivergenceError: If ``grads`` holds a non-finite component.
    """
    if params.shape != grads.shape or params.shape != state.first_moment.shape:
        raise ValueError(
            f"Length mismatch: params {params.shape}, grads {grads.shape}, state {state.first_moment.shape}"
        )
    if lr <= 0:
        raise ConfigError(f"Learning rate must be positive, got {lr}")
    _check_finite(grads, block)

    state.step_count += 1
    state.first_moment *= state.beta1
    state.first_moment += (1.0 - state.beta1) * grads
    state.second_moment *= state.beta2
    state.second_moment += (1.0 - state.beta2) * (grads * grads)

    bc1 = 1.0 - state.beta1 ** state.step_count
    bc2 = 1.0 - state.beta2 ** state.step_count
    m_hat = state.first_moment / bc1
    v_hat = state.second_moment / bc2
    return state, params - lr * m_hat / (np.sqrt(v_hat) + state.eps_hat)


def sgd_step(params: np.ndarray, grads: np.ndarray, lr: float, block: str = "parameter") -> np.ndarray:
    """
    Plain gradient step ``params - lr * grads``.

    Raises:
        DivergenceError: If ``grads`` holds a non-finite component.
    """
    if params.shape != grads.shape:
        raise ValueError(f"Length mismatch: params {params.shape}, grads {grads.shape}")
    _check_finite(grads, block)
    return params - lr * grads


class BlockStepper:
    """
    Stepper owning the optimizer state of a single parameter block.

    Args:
        size: Length of the flattened block.
        lr: Learning rate for this block.
        kind: 'adam' or 'sgd'.
        block: Block name used in divergence errors.
    """

    def __init__(
        self,
        size: int,
        lr: float,
        kind: str = 'adam',
        block: str = 'parameter',
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps_hat: float = 1e-8
    ):
        if kind not in ('adam', 'sgd'):
            raise ConfigError(f"Unknown optimizer: {kind!r}")
        self.lr = lr
        self.kind = kind
        self.block = block
        self.state: Optional[AdamState] = AdamState.zeros(size, beta1, beta2, eps_hat) if kind == 'adam' else None

    def step(self, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
        if self.state is None:
            return sgd_step(params, grads, self.lr, self.block)
        self.state, new_params = adam_step(self.state, params, grads, self.lr, self.block)
        return new_params
