"""Point-cloud containers and non-learned geometric primitives.

Point clouds are plain (n, 3) float64 arrays. KNN ordering is exact and
deterministic: ascending squared distance, ties broken by the smaller
reference index. A cKDTree fast path kicks in for large problems and is
repaired at tie boundaries so it stays bit-equivalent to the brute-force
rule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError

# above this many query*reference pairs the KD-tree path is faster
_TREE_THRESHOLD = 1 << 22


def validate_cloud(coords, name="cloud") -> np.ndarray:
    arr = np.asarray(coords)
    if arr.dtype != np.float32:  # float32 passes through for inference mode
        arr = arr.astype(np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise DataError(f"{name} must have shape (n, 3), got {arr.shape}")
    if arr.shape[0] < 1:
        raise DataError(f"{name} must contain at least one point")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite coordinates")
    return arr


@dataclass
class NeighborIndex:
    """Per-query neighbor indices and squared distances, ascending."""

    indices: np.ndarray  # (nq, k) int64
    sqdists: np.ndarray  # (nq, k) float64

    @property
    def k(self):
        return self.indices.shape[1]


# beyond this many pairs the gemm-based distance block is worth the rounding
_FAST_BLOCK_THRESHOLD = 1 << 17


def _sqdist_block(queries, references, exact=None):
    """Pairwise squared distances.

    The exact form sums squared differences; the fast form expands
    |q|^2 + |r|^2 - 2 q.r through BLAS (equal in real arithmetic, last-ulp
    different in floats) and is used for large blocks.
    """
    if exact is None:
        exact = queries.shape[0] * references.shape[0] <= _FAST_BLOCK_THRESHOLD
    if exact:
        diff = queries[:, None, :] - references[None, :, :]
        return np.einsum("ijk,ijk->ij", diff, diff)
    d2 = -2.0 * (queries @ references.T)
    d2 += np.einsum("ij,ij->i", queries, queries)[:, None]
    d2 += np.einsum("ij,ij->i", references, references)[None, :]
    np.maximum(d2, 0.0, out=d2)
    return d2


def pairwise_sqdist(queries, references, exact=None):
    """Full (nq, nr) squared-distance matrix (chunk via knn for huge inputs)."""
    return _sqdist_block(
        np.asarray(queries, dtype=np.float64), np.asarray(references, dtype=np.float64), exact
    )


def _select_k(d2, k):
    """Smallest k per row under the exact (distance, index) order.

    Float argpartition does the heavy lifting; rows whose selection boundary
    is ambiguous (ties with unselected entries) are re-ranked with complex
    keys, which sort lexicographically by (distance, index).
    """
    nq, nr = d2.shape
    if k == 1:
        sel = d2.argmin(axis=1)[:, None]  # first occurrence = smallest index
        return sel, np.take_along_axis(d2, sel, axis=1)
    if k >= nr:
        keys = d2 + 1j * np.arange(nr)
        sel = np.argsort(keys, axis=1)
        return sel, np.take_along_axis(d2, sel, axis=1)
    part = np.argpartition(d2, k - 1, axis=1)[:, :k]
    part_d2 = np.take_along_axis(d2, part, axis=1)
    # order the k selected by (distance, index)
    order = np.argsort(part_d2 + 1j * part, axis=1)
    sel = np.take_along_axis(part, order, axis=1)
    sel_d2 = np.take_along_axis(part_d2, order, axis=1)
    # a tie across the selection boundary needs the index rule re-applied
    boundary = sel_d2[:, -1]
    suspect = (d2 <= boundary[:, None]).sum(axis=1) > k
    if np.any(suspect):
        keys = d2[suspect] + 1j * np.arange(nr)
        full = np.argsort(keys, axis=1)[:, :k]
        sel[suspect] = full
        sel_d2[suspect] = np.take_along_axis(d2[suspect], full, axis=1)
    return sel, sel_d2


def _knn_brute(queries, references, k, exact=None):
    nq, nr = queries.shape[0], references.shape[0]
    idx = np.empty((nq, k), dtype=np.int64)
    sq = np.empty((nq, k), dtype=np.float64)
    chunk = max(1, int(4e6 // max(nr, 1)))
    for s in range(0, nq, chunk):
        d2 = _sqdist_block(queries[s : s + chunk], references, exact)
        sel, sel_d2 = _select_k(d2, k)
        idx[s : s + chunk] = sel
        sq[s : s + chunk] = sel_d2
    return NeighborIndex(idx, sq)


def _knn_tree(queries, references, k):
    tree = cKDTree(references)
    dist, _ = tree.query(queries, k=k)
    dist = dist.reshape(len(queries), k)
    # re-rank candidates with the canonical (sqdist, index) rule; a widened
    # ball catches references the tree dropped at a tied k-th distance
    radius = dist[:, -1] * (1.0 + 1e-9) + 1e-300
    lists = tree.query_ball_point(queries, radius)
    idx = np.empty((len(queries), k), dtype=np.int64)
    sq = np.empty((len(queries), k), dtype=np.float64)
    for i, cand in enumerate(lists):
        cand = np.asarray(cand, dtype=np.int64)
        diff = references[cand] - queries[i]
        d2 = np.einsum("ij,ij->i", diff, diff)
        order = np.lexsort((cand, d2))[:k]
        idx[i] = cand[order]
        sq[i] = d2[order]
    return NeighborIndex(idx, sq)


def knn(queries, references, k, method="auto") -> NeighborIndex:
    """Exact k nearest references for each query point.

    Ties are broken toward the smaller reference index; both the brute-force
    and KD-tree paths honor that rule exactly.
    """
    queries = validate_cloud(queries, "queries")
    references = validate_cloud(references, "references")
    if k <= 0:
        raise ValueError("k must be at least 1")
    if k > references.shape[0]:
        raise ValueError(f"k={k} exceeds reference count {references.shape[0]}")
    if method == "auto":
        big = queries.shape[0] * references.shape[0] > _TREE_THRESHOLD
        method = "tree" if big else "brute"
    if method == "tree":
        return _knn_tree(queries, references, k)
    return _knn_brute(queries, references, k)


def nearest_match(points, target) -> np.ndarray:
    """Index of each point's nearest target point (knn with k=1)."""
    return knn(points, target, 1).indices[:, 0]


def farthest_point_sample(coords, count, seed_index=0) -> np.ndarray:
    """Greedy max-min-distance subset selection.

    The first index is `seed_index`; each next pick maximizes distance to the
    already-selected set (argmax ties resolve to the smallest index). Asking
    for count >= n returns all n indices in selection order.
    """
    coords = validate_cloud(coords)
    n = coords.shape[0]
    if count < 1:
        raise ValueError("count must be at least 1")
    if not (0 <= seed_index < n):
        raise ValueError(f"seed_index {seed_index} out of range for {n} points")
    count = min(count, n)
    selected = np.empty(count, dtype=np.int64)
    selected[0] = seed_index
    diff = coords - coords[seed_index]
    dists = np.einsum("ij,ij->i", diff, diff)
    for i in range(1, count):
        nxt = int(np.argmax(dists))
        selected[i] = nxt
        diff = coords - coords[nxt]
        np.minimum(dists, np.einsum("ij,ij->i", diff, diff), out=dists)
    return selected


# exact-coincidence threshold of the interpolation rule: distance < 1e-10
_COINCIDENT_SQ = 1e-20


def backward_interpolate(values_on_source, source, dest):
    """Inverse-distance 3-NN interpolation of per-point values onto dest.

    Weights are 1/(d + 1e-8) over the (up to) 3 nearest source points; a dest
    point within 1e-10 of a source point copies that source value exactly.
    Accepts Tensors for any argument and returns a Tensor (differentiable
    w.r.t. values and coordinates, not neighbor choice) if any input is one;
    otherwise plain ndarrays in, ndarray out.
    """
    tensor_mode = any(isinstance(x, Tensor) for x in (values_on_source, source, dest))
    src_np = source.data if isinstance(source, Tensor) else np.asarray(source, dtype=np.float64)
    dst_np = dest.data if isinstance(dest, Tensor) else np.asarray(dest, dtype=np.float64)
    vals_np = (
        values_on_source.data
        if isinstance(values_on_source, Tensor)
        else np.asarray(values_on_source, dtype=np.float64)
    )
    src_np = validate_cloud(src_np, "source")
    if vals_np.shape[0] != src_np.shape[0]:
        raise DataError(
            f"values rows {vals_np.shape[0]} must match source count {src_np.shape[0]}"
        )
    k = min(3, src_np.shape[0])
    nn = knn(dst_np, src_np, k)
    coinc = nn.sqdists[:, 0] < _COINCIDENT_SQ

    if not tensor_mode:
        d = np.sqrt(nn.sqdists)
        w = 1.0 / (d + 1e-8)
        w /= w.sum(axis=1, keepdims=True)
        out = np.einsum("ik,ikc->ic", w, vals_np[nn.indices])
        if coinc.any():
            out[coinc] = vals_np[nn.indices[coinc, 0]]
        return out

    values = ad.as_tensor(values_on_source)
    source_t = ad.as_tensor(source)
    dest_t = ad.as_tensor(dest)
    nd = dst_np.shape[0]
    gathered_src = ad.gather(source_t, nn.indices)  # (nd, k, 3)
    diff = ad.sub(ad.reshape(dest_t, (nd, 1, 3)), gathered_src)
    d2 = ad.tsum(ad.square(diff), axis=-1)  # (nd, k)
    # keep sqrt off exact zeros; those rows are replaced by the copy rule
    d2 = ad.where(coinc[:, None], np.ones((1, 1), dtype=d2.dtype), d2)
    w = 1.0 / (ad.sqrt(d2) + 1e-8)
    w = ad.div(w, ad.tsum(w, axis=1, keepdims=True))
    gathered_vals = ad.gather(values, nn.indices)  # (nd, k, c)
    interp = ad.tsum(ad.mul(ad.reshape(w, (nd, k, 1)), gathered_vals), axis=1)
    if not coinc.any():
        return interp
    copied = ad.gather(values, nn.indices[:, 0])
    return ad.where(coinc[:, None], copied, interp)
