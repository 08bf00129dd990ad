"""
Metrics Module
RMSE / MAE / RFE, success rate over repeated runs, a Hungarian assignment
solver, and alignment of estimated CP components against a reference.
"""

from typing import Sequence

import numpy as np

from .cp import CpFactors
from .errors import EvaluationError, ShapeMismatchError
from .models import MetricsReport, AlignmentReport


RFE_NORM_FLOOR = 1e-12


def compute_metrics(pred: Sequence[float], truth: Sequence[float]) -> MetricsReport:
    """
    Prediction quality over one evaluation set.

    rmse = sqrt(mean r^2), mae = mean |r|, rfe = ||pred - truth|| / ||truth||.
    When ||truth|| is below 1e-12 the RFE is undefined: ``rfe`` is None and
    ``rfe_error`` says why, while rmse and mae stay valid.

    Raises:
        EvaluationError: Empty or unequal-length inputs.
    """
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.size == 0:
        raise EvaluationError("Cannot compute metrics over an empty evaluation set")
    if pred.shape != truth.shape:
        raise EvaluationError(f"Prediction and truth lengths differ: {pred.size} vs {truth.size}")

    residual = pred - truth
    rmse = float(np.sqrt(np.mean(residual * residual)))
    mae = float(np.mean(np.abs(residual)))
    truth_norm = float(np.linalg.norm(truth))
    if truth_norm < RFE_NORM_FLOOR:
        return MetricsReport(rmse, mae, None, int(pred.size),
                             rfe_error=f"RFE undefined: reference norm {truth_norm:.3g} below {RFE_NORM_FLOOR:g}")
    rfe = float(np.linalg.norm(residual) / truth_norm)
    return MetricsReport(rmse, mae, rfe, int(pred.size))


def success_rate(rfe_values: Sequence[float]) -> float:
    """
    Fraction of runs whose RFE is strictly below 1.

    Raises:
        EvaluationError: If ``rfe_values`` is empty.
    """
    values = np.asarray(list(rfe_values), dtype=np.float64)
    if values.size == 0:
        raise EvaluationError("success_rate needs at least one RFE value")
    return float(np.mean(values < 1.0))


# ── Hungarian algorithm ──────────────────────────────────────────────────────

def _min_cost_assignment(cost: np.ndarray) -> tuple[list[int], float]:
    """
    Shortest augmenting path Hungarian method (row potentials u, column
    potentials v), O(n^3). Returns (row -> column assignment, total cost).
    """
    n = cost.shape[0]
    if n == 0:
        return [], 0.0
    inf = float('inf')
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)       # p[j] = row matched to column j (1-based, 0 = none)
    way = [0] * (n + 1)

    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            row = cost[i0 - 1]
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break

    assignment = [-1] * n
    for j in range(1, n + 1):
        assignment[p[j] - 1] = j - 1
    return assignment, float(sum(cost[i, assignment[i]] for i in range(n)))


def hungarian(cost) -> list[int]:
    """
    Minimum-cost assignment of rows to columns of a square cost matrix.

    Among optimal assignments, the lexicographically smallest one (comparing
    the column chosen for row 0, then row 1, ...) is returned.

    Returns:
        ``assignment[i]`` = column assigned to row ``i``.

    Raises:
        ShapeMismatchError: Non-square input.
        EvaluationError: Non-finite costs.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ShapeMismatchError(f"Cost matrix must be square, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise EvaluationError("Cost matrix must be finite")
    n = cost.shape[0]
    _, optimum = _min_cost_assignment(cost)
    tol = 1e-9 * max(1.0, float(np.abs(cost).sum()))

    # Fix rows in order, taking the smallest column that still admits an optimum
    assignment: list[int] = []
    free = list(range(n))
    spent = 0.0
    for i in range(n):
        for j in free:
            rest = [c for c in free if c != j]
            _, tail = _min_cost_assignment(cost[np.ix_(range(i + 1, n), rest)])
            if spent + cost[i, j] + tail <= optimum + tol:
                assignment.append(j)
                spent += cost[i, j]
                free = rest
                break
    return assignment


def assignment_cost(cost, assignment: Sequence[int]) -> float:
    cost = np.asarray(cost, dtype=np.float64)
    return float(sum(cost[i, j] for i, j in enumerate(assignment)))


# ── Component alignment ──────────────────────────────────────────────────────

def _normalise_columns(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(matrix, axis=0)
    safe = np.where(norms > 0, norms, 1.0)
    return matrix / safe, norms > 0


def assign_congruence(congruence) -> tuple[list[int], list[float]]:
    """
    Optimal matching for a congruence matrix (rows: estimated, columns:
    reference), minimising sum(1 - congruence).

    Returns:
        (permutation, per-estimated-component congruence under it)
    """
    congruence = np.asarray(congruence, dtype=np.float64)
    permutation = hungarian(1.0 - congruence)
    return permutation, [float(congruence[r, s]) for r, s in enumerate(permutation)]


def align_components(estimated: CpFactors, reference: CpFactors) -> AlignmentReport:
    """
    Match estimated CP components to reference components.

    Columns are l2-normalised per mode; the congruence of estimated component
    r with reference component s is prod_n |cos(A_hat_n[:, r], A_n[:, s])|.
    Zero-norm columns get congruence 0 with everything.

    Raises:
        ShapeMismatchError: Different mode count, rank, or shape.
    """
    if estimated.ndim != reference.ndim or estimated.rank != reference.rank:
        raise ShapeMismatchError(
            f"Cannot align rank {estimated.rank} ({estimated.ndim} modes) "
            f"against rank {reference.rank} ({reference.ndim} modes)"
        )
    if estimated.shape != reference.shape:
        raise ShapeMismatchError(f"Shapes differ: {estimated.shape} vs {reference.shape}")
    rank = estimated.rank
    if rank == 0:
        return AlignmentReport([], [], [])

    congruence = np.ones((rank, rank))
    cosines = []
    for a_hat, a_ref in zip(estimated.factors, reference.factors):
        u, u_ok = _normalise_columns(a_hat)
        w, w_ok = _normalise_columns(a_ref)
        cos = u.T @ w
        cos[~u_ok, :] = 0.0
        cos[:, ~w_ok] = 0.0
        cosines.append(cos)
        congruence *= np.abs(cos)

    permutation, per_component = assign_congruence(congruence)
    signed = [[float(cos[r, s]) for r, s in enumerate(permutation)] for cos in cosines]
    return AlignmentReport(permutation, per_component, signed)
