"""Per-point descriptors from raw coordinates via stacked set convolutions.

A set convolution gathers each point's k nearest neighbors, runs a shared
per-neighbor MLP on (neighbor feature, relative coordinate) and max-pools
over the neighborhood. Only relative offsets enter the computation, so the
encoder is translation-invariant and permutation-equivariant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import NeighborIndex, knn, validate_cloud

LEAKY_SLOPE = 0.1


@dataclass
class SetConvParams:
    """Shared per-neighbor MLP of a set convolution.

    Activation (leaky ReLU) is applied between layers, never after the last,
    so gate nonlinearities and feature stacking stay in the caller's hands.
    """

    weights: list  # per-layer (in, out) Tensors
    biases: list  # per-layer (out,) Tensors
    k_conv: int

    @property
    def in_width(self):
        return self.weights[0].shape[0]

    @property
    def out_width(self):
        return self.weights[-1].shape[1]


@dataclass
class EncoderParams:
    layers: list  # three SetConvParams
    width: int  # descriptor width d


def _mlp(h, weights, biases, slope=LEAKY_SLOPE):
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        h = ad.matmul(h, w) + b
        if i != last:
            h = ad.leaky_relu(h, slope)
    return h


def set_conv(coords, feats, params: SetConvParams, neighbors: NeighborIndex | None = None):
    """One set convolution over a cloud; `feats` may be None (coordinates only).

    k_conv is truncated to the point count, so single-point clouds degenerate
    to a per-point MLP on a zero relative offset.
    """
    coords = validate_cloud(coords)
    n = coords.shape[0]
    k = min(params.k_conv, n)
    if neighbors is None or neighbors.k != k:
        neighbors = knn(coords, coords, k)
    idx = neighbors.indices
    rel = coords[idx] - coords[:, None, :]  # (n, k, 3)
    if feats is None:
        h = ad.constant(rel)
    else:
        if feats.shape[0] != n:
            raise ValueError(f"feature rows {feats.shape[0]} != point count {n}")
        h = ad.concat([ad.gather(ad.as_tensor(feats), idx), ad.constant(rel)], axis=-1)
    if h.shape[-1] != params.in_width:
        raise ValueError(f"set_conv input width {h.shape[-1]} != expected {params.in_width}")
    h = _mlp(h, params.weights, params.biases)
    return ad.tmax(h, axis=1)


def encode(coords, params: EncoderParams, neighbors: NeighborIndex | None = None) -> Tensor:
    """Stack of three set convolutions producing unit-norm (n, d) descriptors.

    The final row normalization keeps feature dot products in [-1, 1] so the
    entropic correlation kernel stays inside its clamp at any weight scale.
    """
    coords = validate_cloud(coords)
    n = coords.shape[0]
    k = min(params.layers[0].k_conv, n)
    if neighbors is None or neighbors.k != k:
        neighbors = knn(coords, coords, k)
    f = None
    last = len(params.layers) - 1
    for i, layer in enumerate(params.layers):
        f = set_conv(coords, f, layer, neighbors)
        if i != last:
            f = ad.leaky_relu(f, LEAKY_SLOPE)
    norms = ad.l2norm_rows(f) + 1e-12
    return f / ad.reshape(norms, (n, 1))
