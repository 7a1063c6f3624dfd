"""Global feature correlation, Sinkhorn normalization, and the initial flow.

The correlation kernel is exp(dot(x_i, y_j) / (sqrt(d) * epsilon)) with the
exponent clamped to [-30, 30] against overflow on untrained features.
Sinkhorn alternates row scaling (target marginal 1/n) and column scaling
(target 1/m) for a number of full sweeps and always closes with a row sweep,
so the initial-flow barycenters read from exactly normalized rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NumericError

EXP_CLAMP = 30.0


def _as_float(arr):
    arr = np.asarray(arr)
    return arr if arr.dtype == np.float32 else arr.astype(np.float64)


@dataclass
class TransportPlan:
    matrix: Tensor  # (n, m), strictly positive
    epsilon: float
    iterations: int  # Sinkhorn sweeps applied so far (0 = raw kernel)

    @property
    def shape(self):
        return self.matrix.shape

    def transposed(self) -> "TransportPlan":
        return TransportPlan(ad.transpose(self.matrix), self.epsilon, self.iterations)


def correlation_kernel(x, y, epsilon: float) -> TransportPlan:
    """Unnormalized transport kernel from feature dot products."""
    x = ad.as_tensor(x)
    y = ad.as_tensor(y)
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"feature widths differ: {x.shape[1]} vs {y.shape[1]}")
    d = x.shape[1]
    scores = ad.matmul(x, ad.transpose(y)) * (1.0 / (np.sqrt(d) * epsilon))
    kernel = ad.exp(ad.clip(scores, -EXP_CLAMP, EXP_CLAMP))
    return TransportPlan(kernel, epsilon, 0)


def sinkhorn(kernel: TransportPlan, iterations: int) -> TransportPlan:
    """Alternating row/column rescaling toward uniform marginals.

    Each sweep scales rows to sum 1/n then columns to sum 1/m; a final row
    sweep follows the last iteration.
    """
    w = kernel.matrix
    n, m = w.shape
    if np.any(w.data <= 0.0):
        raise NumericError("sinkhorn requires a strictly positive kernel")
    row_target = 1.0 / n
    col_target = 1.0 / m
    for _ in range(iterations):
        w = w * (row_target / ad.tsum(w, axis=1, keepdims=True))
        w = w * (col_target / ad.tsum(w, axis=0, keepdims=True))
    w = w * (row_target / ad.tsum(w, axis=1, keepdims=True))
    return TransportPlan(w, kernel.epsilon, iterations)


def marginal_deviation(plan: TransportPlan) -> tuple[float, float]:
    """Max absolute deviation of row/column sums from uniform marginals."""
    w = plan.matrix.data
    n, m = w.shape
    row = np.abs(w.sum(axis=1) - 1.0 / n).max()
    col = np.abs(w.sum(axis=0) - 1.0 / m).max()
    return float(row), float(col)


def initial_flow(plan: TransportPlan, points, targets) -> Tensor:
    """Row-normalized transport barycenter minus the point itself.

    For the reverse direction call with the transposed plan and the roles of
    the two clouds swapped.
    """
    w = plan.matrix
    n, m = w.shape
    points = _as_float(points)
    targets = _as_float(targets)
    if points.shape[0] != n or targets.shape[0] != m:
        raise ValueError("plan shape does not match the point clouds")
    row_sums = ad.tsum(w, axis=1, keepdims=True)
    if np.any(row_sums.data <= 0.0):
        raise NumericError("initial_flow requires positive row sums")
    barycenter = ad.matmul(w, ad.constant(targets)) / row_sums
    return barycenter - ad.constant(points)
