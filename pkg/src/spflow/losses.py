"""Self-supervised losses (Chamfer, smoothness, cycle consistency).

All three are sums over points (a mean-normalized mode exists for comparing
across cloud sizes) and are differentiable with respect to flow inputs:
nearest-neighbor choices are frozen, distances are not.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError
from .geometry import backward_interpolate, knn, pairwise_sqdist, validate_cloud


def _as_np(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def chamfer_loss(warped_source, target, reduction="sum") -> Tensor:
    """Symmetric sum of unsquared nearest-neighbor distances between two clouds."""
    ws_np, t_np = _as_np(warped_source), _as_np(target)
    if ws_np.ndim != 2 or ws_np.shape[0] < 1 or t_np.ndim != 2 or t_np.shape[0] < 1:
        raise DataError("chamfer_loss requires non-empty clouds")
    ws_t, t_t = ad.as_tensor(warped_source), ad.as_tensor(target)
    # one distance matrix serves both directions; argmin keeps the
    # smaller-index tie rule via first occurrence
    d2 = pairwise_sqdist(t_np, ws_np)
    nearest_warped = d2.argmin(axis=1)
    nearest_target = d2.argmin(axis=0)
    loss = ad.tsum(ad.l2norm_rows(t_t - ad.gather(ws_t, nearest_warped))) + ad.tsum(
        ad.l2norm_rows(ws_t - ad.gather(t_t, nearest_target))
    )
    if reduction == "mean":
        loss = loss * (1.0 / (ws_np.shape[0] + t_np.shape[0]))
    return loss


def smoothness_neighbors(coords, neighborhood_k=8) -> np.ndarray:
    """k nearest neighbors of each point excluding itself (cacheable)."""
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if n < 2:
        raise DataError("smoothness needs at least two points")
    if not (0 < neighborhood_k < n):
        raise ValueError(f"neighborhood_k must be in [1, {n - 1}], got {neighborhood_k}")
    idx = knn(coords, coords, neighborhood_k + 1).indices
    # drop self by identity; with >k coincident points self may be absent,
    # drop the farthest instead to keep exactly k neighbors
    rows = np.arange(n)[:, None]
    keep = idx != rows
    extra = keep.sum(axis=1) - neighborhood_k  # 0, or 1 when self was absent
    if np.any(extra):
        last = keep.shape[1] - 1
        keep[extra > 0, last] = False
    return idx[keep].reshape(n, neighborhood_k)


def smoothness_loss(coords, flow, neighborhood_k=8, reduction="sum", neighbors=None) -> Tensor:
    """Mean flow difference to each point's k nearest neighbors, summed over points."""
    n = np.asarray(coords).shape[0]
    if neighbors is None:
        neighbors = smoothness_neighbors(coords, neighborhood_k)
    flow_t = ad.as_tensor(flow)
    diff = ad.reshape(flow_t, (n, 1, 3)) - ad.gather(flow_t, neighbors)
    per_point = ad.mean(ad.l2norm_rows(diff), axis=1)
    loss = ad.tsum(per_point)
    if reduction == "mean":
        loss = loss * (1.0 / n)
    return loss


def cycle_residual(flow_a, flow_b, coords_a, coords_b, warp_b=None) -> Tensor:
    """flow_a plus the reverse flow interpolated into a's frame.

    flow_b maps cloud b toward a, so the warped positions coords_b + flow_b
    live in a's frame; interpolating flow_b from there onto coords_a and
    adding it to flow_a leaves zero for perfectly cycle-consistent flows.
    `warp_b` overrides the flow used for warping (defaults to flow_b itself).
    """
    flow_a = ad.as_tensor(flow_a)
    flow_b = ad.as_tensor(flow_b)
    warped_b = ad.constant(coords_b) + (
        flow_b if warp_b is None else ad.as_tensor(warp_b)
    )
    pulled = backward_interpolate(flow_b, warped_b, validate_cloud(coords_a))
    return flow_a + pulled


def consistency_loss(flow_p, flow_q, coords_p, coords_q, reduction="sum") -> Tensor:
    """Bidirectional cycle-consistency penalty between the two flow fields."""
    res_p = cycle_residual(flow_p, flow_q, coords_p, coords_q)
    res_q = cycle_residual(flow_q, flow_p, coords_q, coords_p)
    loss = ad.tsum(ad.l2norm_rows(res_p)) + ad.tsum(ad.l2norm_rows(res_q))
    if reduction == "mean":
        loss = loss * (1.0 / (res_p.shape[0] + res_q.shape[0]))
    return loss


@dataclass
class LossReport:
    chamfer: float
    smoothness: float
    consistency: float
    total: float
    alpha: float
    beta: float


def total_loss(chamfer, smoothness, consistency, alpha, beta) -> LossReport:
    """Weighted combination chamfer + alpha*smoothness + beta*consistency."""
    if alpha < 0 or beta < 0:
        raise ValueError("loss weights must be non-negative")
    parts = [float(_as_np(x)) for x in (chamfer, smoothness, consistency)]
    if not all(np.isfinite(parts)):
        raise DataError("loss parts must be finite")
    ch, sm, co = parts
    return LossReport(ch, sm, co, ch + alpha * sm + beta * co, alpha, beta)
