"""Superpoint-guided iterative flow refinement.

Each iteration reconstructs per-point flow from the freshly updated
superpoint flows, encodes how consistent the two directions are, folds flow
embedding + flow feature (gated by that confidence) into a context vector,
advances a set-conv GRU, and regresses a residual on top of the
reconstruction. Both directions run symmetrically and share all weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import encode, set_conv
from .errors import NumericError
from .geometry import knn, validate_cloud
from .losses import cycle_residual
from .model import FlowModel, MlpParams
from .superpoints import (
    AssociationMap,
    SuperpointSet,
    association,
    init_superpoints,
    update_centers,
    warp_correspondences,
)
from .transport import correlation_kernel, initial_flow, marginal_deviation, sinkhorn


@dataclass
class PipelineConfig:
    superpoints: int = 30  # L, center count
    attended: int = 2  # K, centers each point attends to
    iterations: int = 3  # T, refinement rounds
    feat_width: int = 32  # d
    hidden_width: int = 32  # d_h
    k_conv: int = 8
    sinkhorn_epsilon: float = 0.03
    sinkhorn_sweeps: int = 10
    alpha: float = 0.5  # smoothness weight
    beta: float = 0.2  # consistency weight
    loss_all_iterations: bool = True  # False supervises only the final flow
    smooth_k: int = 8
    fps_seed: int = 0  # source-side center seeding
    fps_seed_target: int = 0

    def validate(self):
        if self.attended > self.superpoints:
            raise ValueError(f"K={self.attended} must not exceed L={self.superpoints}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if min(self.superpoints, self.attended, self.feat_width, self.hidden_width) < 1:
            raise ValueError("counts and widths must be positive")
        if self.sinkhorn_epsilon <= 0 or self.sinkhorn_sweeps < 0:
            raise ValueError("invalid sinkhorn settings")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")
        return self


@dataclass
class IterationState:
    superpoints_p: SuperpointSet
    superpoints_q: SuperpointSet
    assoc_p: AssociationMap
    assoc_q: AssociationMap
    recon_p: Tensor
    recon_q: Tensor
    conf_p: Tensor
    conf_q: Tensor
    flow_p: Tensor
    flow_q: Tensor


@dataclass
class PipelineResult:
    feats_p: Tensor
    feats_q: Tensor
    plan: object
    init_flow_p: Tensor
    init_flow_q: Tensor
    iterations: list = field(default_factory=list)

    @property
    def final_flow_p(self):
        return self.iterations[-1].flow_p

    @property
    def final_flow_q(self):
        return self.iterations[-1].flow_q


def reconstruct_flow(assoc: AssociationMap, centers: SuperpointSet) -> Tensor:
    """Association-weighted blend of each point's attended center flows."""
    n, k = assoc.centers.shape
    sf = ad.gather(centers.sf, assoc.centers)  # (n, K, 3)
    return ad.tsum(ad.mul(ad.reshape(assoc.weights, (n, k, 1)), sf), axis=1)


def _conf_mlp(x, params: MlpParams):
    h = ad.matmul(x, params.weights[0]) + params.biases[0]
    h = ad.leaky_relu(h, 0.1)
    return ad.sigmoid(ad.matmul(h, params.weights[1]) + params.biases[1])


def consistency_confidence(
    recon_p, recon_q, coords_p, coords_q, pi: MlpParams, tau: MlpParams,
    warp_p=None, warp_q=None,
):
    """Per-point confidence from the bidirectional flow disagreement.

    The reverse flow is pulled into the other frame through warped-frame
    interpolation; by default the reconstructed flows themselves do the
    warping.
    """
    res_p = cycle_residual(recon_p, recon_q, coords_p, coords_q, warp_b=warp_q)
    res_q = cycle_residual(recon_q, recon_p, coords_q, coords_p, warp_b=warp_p)
    return _conf_mlp(res_p, pi), _conf_mlp(res_q, tau)


def iteration_context(recon, conf, coords, feats, target, target_feats, model: FlowModel,
                      self_neighbors=None) -> Tensor:
    """Correlation + flow features, gated by confidence, merged by set convs."""
    n = coords.shape[0]
    k = min(model.k_conv, target.shape[0])
    warped = ad.constant(coords) + recon
    idx = knn(warped.data, target, k).indices
    neigh_feat = ad.gather(ad.as_tensor(target_feats), idx)  # (n, k, d)
    own = ad.broadcast_to(ad.reshape(feats, (n, 1, model.feat_width)), neigh_feat.shape)
    rel = ad.gather(ad.constant(target), idx) - ad.reshape(warped, (n, 1, 3))
    h = ad.concat([neigh_feat, own, rel], axis=-1)
    corr = ad.tmax(ad.matmul(h, model.embed_w) + model.embed_b, axis=1)  # F_c
    flowfeat = ad.matmul(recon, model.flowfeat_w) + model.flowfeat_b  # F_e
    gated_c = corr * conf
    gated_e = flowfeat * conf
    return set_conv(coords, gated_c, model.ctx_c, self_neighbors) + set_conv(
        coords, gated_e, model.ctx_e, self_neighbors
    )


def gru_step(h, v, coords, model: FlowModel, self_neighbors=None) -> Tensor:
    """Gated recurrent update with set convolutions as the gate transforms."""
    hv = ad.concat([h, v], axis=-1)
    z = ad.sigmoid(set_conv(coords, hv, model.gru_z, self_neighbors))
    r = ad.sigmoid(set_conv(coords, hv, model.gru_r, self_neighbors))
    cand = ad.tanh(
        set_conv(coords, ad.concat([r * h, v], axis=-1), model.gru_h, self_neighbors)
    )
    return (1.0 - z) * h + z * cand


def regress_and_update(h, recon, head: MlpParams) -> Tensor:
    """Residual flow from the hidden state, added onto the reconstruction."""
    mid = ad.leaky_relu(ad.matmul(h, head.weights[0]) + head.biases[0], 0.1)
    delta = ad.matmul(mid, head.weights[1]) + head.biases[1]
    return recon + delta


def _check_stage(name, *tensors):
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise NumericError(f"non-finite values at stage: {name}")


def _check_invariants(state: IterationState):
    for side, assoc, conf, in (("p", state.assoc_p, state.conf_p), ("q", state.assoc_q, state.conf_q)):
        w = assoc.weights.data
        if np.abs(w.sum(axis=1) - 1.0).max() > 1e-6:
            raise NumericError(f"association rows ({side}) do not sum to 1")
        if w.min() < 0.0 or w.max() > 1.0 + 1e-12:
            raise NumericError(f"association weights ({side}) outside [0, 1]")
        c = conf.data
        if c.min() < 0.0 or c.max() > 1.0:
            raise NumericError(f"confidence ({side}) outside [0, 1]")


def _entropy(weights):
    w = np.clip(weights, 1e-12, 1.0)
    return float(-(w * np.log(w)).sum(axis=1).mean())


def run_pipeline(source, target, model: FlowModel, cfg: PipelineConfig,
                 check_invariants=False, trace=None) -> PipelineResult:
    """Full bidirectional flow estimation: transport init + T refinement rounds.

    Deterministic given inputs, parameters, and cfg.fps_seed. Any non-finite
    intermediate aborts with the first offending stage named. `trace`, if
    given, receives one dict per stage with flow norms, marginal deviations,
    and association entropies.
    """
    cfg.validate()
    p = validate_cloud(source, "source")
    q = validate_cloud(target, "target")
    if cfg.superpoints > min(p.shape[0], q.shape[0]):
        raise ValueError("superpoint count exceeds cloud size")

    kc_p = min(cfg.k_conv, p.shape[0])
    kc_q = min(cfg.k_conv, q.shape[0])
    nbr_p = knn(p, p, kc_p)
    nbr_q = knn(q, q, kc_q)

    x = encode(p, model.encoder, nbr_p)
    y = encode(q, model.encoder, nbr_q)
    _check_stage("feature encoding", x, y)

    plan = sinkhorn(correlation_kernel(x, y, cfg.sinkhorn_epsilon), cfg.sinkhorn_sweeps)
    _check_stage("sinkhorn transport", plan.matrix)
    flow_p = initial_flow(plan, p, q)
    flow_q = initial_flow(plan.transposed(), q, p)
    _check_stage("initial flow", flow_p, flow_q)

    sp_p = init_superpoints(p, flow_p, x, cfg.superpoints, cfg.fps_seed)
    sp_q = init_superpoints(q, flow_q, y, cfg.superpoints, cfg.fps_seed_target)

    result = PipelineResult(
        feats_p=x, feats_q=y, plan=plan, init_flow_p=flow_p, init_flow_q=flow_q
    )
    if trace is not None:
        row_dev, col_dev = marginal_deviation(plan)
        trace(
            {
                "stage": "init",
                "marginal_row_dev": row_dev,
                "marginal_col_dev": col_dev,
                "flow_norm_p": float(np.linalg.norm(flow_p.data, axis=1).mean()),
                "flow_norm_q": float(np.linalg.norm(flow_q.data, axis=1).mean()),
            }
        )

    h_p = ad.zeros((p.shape[0], model.hidden_width), dtype=x.dtype)
    h_q = ad.zeros((q.shape[0], model.hidden_width), dtype=y.dtype)

    for t in range(1, cfg.iterations + 1):
        warped_p = warp_correspondences(p, flow_p, sp_p, q, y)
        warped_q = warp_correspondences(q, flow_q, sp_q, p, x)
        assoc_p = association(p, x, flow_p, sp_p, warped_p, cfg.attended, model.assoc)
        assoc_q = association(q, y, flow_q, sp_q, warped_q, cfg.attended, model.assoc)
        _check_stage(f"association (t={t})", assoc_p.weights, assoc_q.weights)

        sp_p = update_centers(assoc_p, p, flow_p, x, sp_p)
        sp_q = update_centers(assoc_q, q, flow_q, y, sp_q)
        _check_stage(f"center update (t={t})", sp_p.sc, sp_p.sf, sp_q.sc, sp_q.sf)

        recon_p = reconstruct_flow(assoc_p, sp_p)
        recon_q = reconstruct_flow(assoc_q, sp_q)
        _check_stage(f"flow reconstruction (t={t})", recon_p, recon_q)

        conf_p, conf_q = consistency_confidence(
            recon_p, recon_q, p, q, model.conf_pi, model.conf_tau
        )
        _check_stage(f"consistency confidence (t={t})", conf_p, conf_q)

        v_p = iteration_context(recon_p, conf_p, p, x, q, y, model, nbr_p)
        v_q = iteration_context(recon_q, conf_q, q, y, p, x, model, nbr_q)
        _check_stage(f"iteration context (t={t})", v_p, v_q)

        h_p = gru_step(h_p, v_p, p, model, nbr_p)
        h_q = gru_step(h_q, v_q, q, model, nbr_q)
        _check_stage(f"gru update (t={t})", h_p, h_q)

        flow_p = regress_and_update(h_p, recon_p, model.head)
        flow_q = regress_and_update(h_q, recon_q, model.head)
        _check_stage(f"flow regression (t={t})", flow_p, flow_q)

        state = IterationState(
            superpoints_p=sp_p, superpoints_q=sp_q,
            assoc_p=assoc_p, assoc_q=assoc_q,
            recon_p=recon_p, recon_q=recon_q,
            conf_p=conf_p, conf_q=conf_q,
            flow_p=flow_p, flow_q=flow_q,
        )
        if check_invariants:
            _check_invariants(state)
            for h in (h_p, h_q):
                if np.abs(h.data).max() >= 1.0:
                    raise NumericError(f"GRU hidden state escaped (-1, 1) at t={t}")
        if trace is not None:
            trace(
                {
                    "iteration": t,
                    "flow_norm_p": float(np.linalg.norm(flow_p.data, axis=1).mean()),
                    "flow_norm_q": float(np.linalg.norm(flow_q.data, axis=1).mean()),
                    "assoc_entropy_p": _entropy(assoc_p.weights.data),
                    "assoc_entropy_q": _entropy(assoc_q.weights.data),
                    "conf_mean_p": float(conf_p.data.mean()),
                    "conf_mean_q": float(conf_q.data.mean()),
                }
            )
        result.iterations.append(state)

    return result
