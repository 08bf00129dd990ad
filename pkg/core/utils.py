"""
Shared Utilities Module
Common helpers used across the application.
"""

from typing import Iterator, Optional

import numpy as np


# Independent random streams per purpose, seeded as default_rng([seed, stream])
STREAM_CP_INIT = 0
STREAM_HEAD_INIT = 1
STREAM_WARMSTART = 2
STREAM_AO = 3
STREAM_REFINE = 4
STREAM_SYNTH_CP = 10
STREAM_SYNTH_HEAD = 11
STREAM_SYNTH_MASK = 12
STREAM_SYNTH_NOISE = 13


def make_rng(seed: int, stream: int) -> np.random.Generator:
    """Generator for one named random stream of a seeded run."""
    return np.random.default_rng([int(seed), int(stream)])


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Yield the positions 0..n-1 in a seeded shuffled order, ``batch_size`` at a time."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def format_seconds(seconds: float) -> str:
    """Format a duration to a short human readable string."""
    if seconds >= 3600:
        return f"{seconds / 3600:.1f} h"
    elif seconds >= 60:
        return f"{seconds / 60:.1f} min"
    return f"{seconds:.2f} s"


def format_shape(shape) -> str:
    return 'x'.join(str(int(d)) for d in shape)


def parse_int_list(text: str) -> list[int]:
    """Parse '100,100,100' into [100, 100, 100]."""
    return [int(part) for part in text.replace(' ', '').split(',') if part]


class EarlyStopping:
    """
    Relative-change stopping rule on a monitored loss.

    ``update(value)`` returns True once |L_t - L_{t-1}| / L_{t-1} has been
    below ``rel_tol`` for ``patience`` consecutive updates. The first update
    only records the starting value. A previous loss of exactly 0 stops
    immediately.
    """

    def __init__(self, rel_tol: float, patience: int = 1):
        self.rel_tol = rel_tol
        self.patience = patience
        self.previous: Optional[float] = None
        self.streak = 0
        self.last_change: Optional[float] = None

    def update(self, value: float) -> bool:
        previous, self.previous = self.previous, value
        if previous is None:
            return False
        if previous == 0:
            self.last_change = 0.0
            return True
        self.last_change = abs(value - previous) / previous
        self.streak = self.streak + 1 if self.last_change < self.rel_tol else 0
        return self.streak >= self.patience
