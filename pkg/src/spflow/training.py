"""Self-supervised training loop and evaluation helpers.

Per scene, the pipeline's per-iteration flows are scored with
chamfer + alpha*smoothness + beta*consistency (both directions, summed over
iterations, undiscounted). Batches accumulate mean gradients, ADAM steps
with the decayed learning rate. Scene gradients inside a batch can be
computed on worker threads (SPFLOW_THREADS); results are reduced in scene
order so thread count never changes the numbers.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass

import numpy as np

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None

from . import autodiff as ad
from .losses import chamfer_loss, consistency_loss, smoothness_loss, smoothness_neighbors
from .model import FlowModel, bind_model
from .optim import OptimConfig, ParameterStore, adam_step, backward, lr_at_epoch
from .refinement import PipelineConfig, run_pipeline
from .rng import SplitMix64


def worker_count() -> int:
    env = os.environ.get("SPFLOW_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def scene_loss(model: FlowModel, cfg: PipelineConfig, source, target):
    """Total self-supervised loss over all refinement iterations of one scene."""
    result = run_pipeline(source, target, model, cfg)
    smooth_p = smoothness_neighbors(source, cfg.smooth_k)
    smooth_q = smoothness_neighbors(target, cfg.smooth_k)
    total = None
    parts = np.zeros(3)
    supervised = result.iterations if cfg.loss_all_iterations else result.iterations[-1:]
    for state in supervised:
        warped_p = ad.constant(source) + state.flow_p
        warped_q = ad.constant(target) + state.flow_q
        ch = chamfer_loss(warped_p, target) + chamfer_loss(warped_q, source)
        sm = smoothness_loss(source, state.flow_p, neighbors=smooth_p) + smoothness_loss(
            target, state.flow_q, neighbors=smooth_q
        )
        co = consistency_loss(state.flow_p, state.flow_q, source, target)
        term = ch + cfg.alpha * sm + cfg.beta * co
        total = term if total is None else total + term
        parts += (ch.item(), sm.item(), co.item())
    return total, parts


def _clone_store(store: ParameterStore) -> ParameterStore:
    clone = ParameterStore()
    for name, t in store.items():
        clone.add(name, t.data.copy())
    return clone


def _scene_gradients(store, feat_width, hidden_width, k_conv, cfg, scene):
    local = _clone_store(store)
    model = bind_model(local, feat_width, hidden_width, k_conv)
    loss, parts = scene_loss(model, cfg, scene[0], scene[1])
    backward(loss, local)
    return local.gradients(), loss.item(), parts


@dataclass
class EpochStats:
    epoch: int
    lr: float
    loss: float
    chamfer: float
    smoothness: float
    consistency: float


def train(scenes, model: FlowModel, cfg: PipelineConfig, optim: OptimConfig,
          epochs: int, batch_size=2, seed=0, threads=None, log=None):
    """Run `epochs` passes over (source, target) scene pairs; returns stats."""
    if not scenes:
        raise ValueError("no training scenes")
    threads = threads or worker_count()
    sched = OptimConfig(
        lr=optim.lr, beta1=optim.beta1, beta2=optim.beta2, eps=optim.eps,
        decay_epochs=optim.decay_epochs, decay_factor=optim.decay_factor,
        total_epochs=max(optim.total_epochs, epochs),
    )
    rng = SplitMix64(seed)
    store = model.store
    history = []
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    # the tensors here are too small for BLAS threading to pay off; scene-level
    # workers are the parallelism, so pin BLAS pools to one thread
    limiter = threadpool_limits(limits=1) if threadpool_limits is not None else nullcontext()

    def run_epoch(epoch):
        lr = lr_at_epoch(sched, epoch)
        order = rng.permutation(len(scenes))
        sums = np.zeros(4)
        for start in range(0, len(order), batch_size):
            batch = [scenes[i] for i in order[start : start + batch_size]]
            args = [
                (store, model.feat_width, model.hidden_width, model.k_conv, cfg, sc)
                for sc in batch
            ]
            if pool is not None and len(batch) > 1:
                results = list(pool.map(lambda a: _scene_gradients(*a), args))
            else:
                results = [_scene_gradients(*a) for a in args]
            store.zero_grads()
            scale = 1.0 / len(batch)
            for grads, loss_val, parts in results:
                store.add_gradients(grads)
                sums += (loss_val, *parts)
            for _, t in store.items():
                t.grad = t.grad * scale  # grad buffers may be shared, no in-place
            adam_step(store, lr, optim.beta1, optim.beta2, optim.eps)
        return EpochStats(
            epoch=epoch, lr=lr,
            loss=sums[0] / len(scenes),
            chamfer=sums[1] / len(scenes),
            smoothness=sums[2] / len(scenes),
            consistency=sums[3] / len(scenes),
        )

    try:
        with limiter:
            for epoch in range(epochs):
                stats = run_epoch(epoch)
                history.append(stats)
                if log is not None:
                    log(stats)
    finally:
        if pool is not None:
            pool.shutdown()
    return history


def estimate_flow(model: FlowModel, cfg: PipelineConfig, source, target,
                  check_invariants=False, trace=None):
    """Source-side and target-side final flows as plain arrays."""
    result = run_pipeline(source, target, model, cfg,
                          check_invariants=check_invariants, trace=trace)
    return result.final_flow_p.data, result.final_flow_q.data, result
