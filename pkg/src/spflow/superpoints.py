"""Flow-guided online superpoint generation.

Each iteration: warp points and centers by the previous flow, look up their
nearest matches in the other cloud, score each point against its K nearest
centers with two small MLPs (feature-space and coordinate-space differences),
softmax the scores into a soft association map, and update every center as
the association-weighted mean of its attendees.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import farthest_point_sample, knn, nearest_match

# a center whose total attention mass falls below this keeps its old state
DEGENERATE_MASS = 1e-8


@dataclass
class SuperpointSet:
    """L center coordinates, flows, and descriptors."""

    sc: Tensor  # (L, 3)
    sf: Tensor  # (L, 3)
    sd: Tensor  # (L, d)

    @property
    def count(self):
        return self.sc.shape[0]


@dataclass
class AssociationMap:
    """Per-point attended center indices and their softmax weights."""

    centers: np.ndarray  # (n, K) int64, K nearest centers in coordinate space
    weights: Tensor  # (n, K), rows sum to 1

    @property
    def k(self):
        return self.centers.shape[1]


@dataclass
class WarpedCorrespondence:
    """Warped positions plus the matched descriptors from the other cloud."""

    p_hat: Tensor  # (n, 3) warped points
    x_hat: Tensor  # (n, d) descriptor of each warped point's nearest target
    sc_hat: Tensor  # (L, 3) warped centers
    sd_hat: Tensor  # (L, d) descriptor of each warped center's nearest target
    point_match: np.ndarray  # (n,) target indices
    center_match: np.ndarray  # (L,) target indices


def init_superpoints(coords, flow0, feats, count, seed_index=0) -> SuperpointSet:
    """Seed centers at farthest-point-sampled points, copying flow/descriptor."""
    n = coords.shape[0]
    if count > n:
        raise ValueError(f"cannot sample {count} centers from {n} points")
    idx = farthest_point_sample(coords, count, seed_index)
    return SuperpointSet(
        sc=ad.constant(coords[idx]),
        sf=ad.gather(ad.as_tensor(flow0), idx),
        sd=ad.gather(ad.as_tensor(feats), idx),
    )


def warp_correspondences(coords, flow_prev, centers: SuperpointSet, target, target_feats) -> WarpedCorrespondence:
    """Warp points/centers by the previous flow and fetch nearest-target descriptors."""
    p_hat = ad.constant(coords) + ad.as_tensor(flow_prev)
    sc_hat = centers.sc + centers.sf
    point_match = nearest_match(p_hat.data, target)
    center_match = nearest_match(sc_hat.data, target)
    tf = ad.as_tensor(target_feats)
    return WarpedCorrespondence(
        p_hat=p_hat,
        x_hat=ad.gather(tf, point_match),
        sc_hat=sc_hat,
        sd_hat=ad.gather(tf, center_match),
        point_match=point_match,
        center_match=center_match,
    )


def _pairwise_mlp(diff, params):
    """Two shared layers with leaky ReLU between, then a channel sum: one logit per pair."""
    h = ad.matmul(diff, params.weights[0]) + params.biases[0]
    h = ad.leaky_relu(h, 0.1)
    h = ad.matmul(h, params.weights[1]) + params.biases[1]
    return ad.tsum(h, axis=-1)


def association(coords, feats, flow_prev, centers: SuperpointSet, warped: WarpedCorrespondence, k, params) -> AssociationMap:
    """Softmax attention of each point over its K nearest superpoint centers.

    Logits add a feature-space score on (x || x_hat) differences and a
    coordinate-space score on (p || p_hat) differences, each from its own MLP.
    """
    if k > centers.count:
        raise ValueError(f"K={k} exceeds center count {centers.count}")
    n = coords.shape[0]
    nbr = knn(coords, centers.sc.data, k).indices  # (n, K)

    feats = ad.as_tensor(feats)
    d = feats.shape[1]
    point_feat = ad.reshape(ad.concat([feats, warped.x_hat], axis=1), (n, 1, 2 * d))
    center_feat = ad.concat([ad.gather(centers.sd, nbr), ad.gather(warped.sd_hat, nbr)], axis=-1)
    u = point_feat - center_feat  # (n, K, 2d)

    point_geo = ad.reshape(ad.concat([ad.constant(coords), warped.p_hat], axis=1), (n, 1, 6))
    center_geo = ad.concat([ad.gather(centers.sc, nbr), ad.gather(warped.sc_hat, nbr)], axis=-1)
    g = point_geo - center_geo  # (n, K, 6)

    logits = _pairwise_mlp(u, params.feat_mlp) + _pairwise_mlp(g, params.geo_mlp)
    return AssociationMap(centers=nbr, weights=ad.softmax(logits, axis=-1))


def update_centers(assoc: AssociationMap, coords, flow_prev, feats, prev: SuperpointSet) -> SuperpointSet:
    """Association-weighted mean of coordinates/flow/features per center.

    Centers attended by (numerically) no point retain their previous state.
    """
    n, k = assoc.centers.shape
    length = prev.count
    w = assoc.weights
    mass = ad.index_add(length, assoc.centers, w)  # (L,)
    alive = mass.data >= DEGENERATE_MASS
    denom = ad.reshape(ad.where(alive, mass, np.ones(length, dtype=mass.dtype)), (length, 1))

    def aggregate(values, prev_values):
        vals = ad.as_tensor(values)
        c = vals.shape[1]
        contrib = ad.mul(ad.reshape(w, (n, k, 1)), ad.reshape(vals, (n, 1, c)))
        total = ad.index_add(length, assoc.centers, contrib)
        return ad.where(alive[:, None], total / denom, prev_values)

    return SuperpointSet(
        sc=aggregate(coords, prev.sc),
        sf=aggregate(flow_prev, prev.sf),
        sd=aggregate(feats, prev.sd),
    )
