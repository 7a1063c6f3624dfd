"""Finite-difference verification of the reverse-mode gradients.

Every exported op is checked against central differences (step 1e-5) on
randomized kink-free inputs; composite checks cover the encoder, the
transport init, the superpoint generation chain, each loss, and the full
pipeline loss at T=2 on a small synthetic pair. The `gradcheck` CLI
subcommand runs this battery and exits 4 on any failure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import encode
from .geometry import backward_interpolate
from .losses import chamfer_loss, consistency_loss, smoothness_loss
from .model import build_model
from .optim import backward
from .refinement import PipelineConfig
from .superpoints import association, init_superpoints, update_centers, warp_correspondences
from .synthetic import SyntheticConfig, generate_scene
from .training import scene_loss
from .transport import correlation_kernel, initial_flow, sinkhorn

FD_STEP = 1e-5
OP_TOL = 1e-6
MODULE_TOL = 1e-4
END_TO_END_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_err < self.tolerance


def relative_error(analytic, numeric, floor=1e-6):
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def _noise_floor(loss_scale, grad_scale=0.0):
    """Denominator floor for gradient comparisons.

    Central differences carry roundoff around eps*f_effective/h (~1e-10 here),
    so entries four decades below the gradient/loss scale cannot be resolved
    to 1e-6 relative accuracy; they are compared against the floor instead.
    """
    return max(1e-6, 1e-4 * max(1.0, abs(loss_scale), abs(grad_scale)))


def _fd_array(loss_fn, arr, step=FD_STEP, order=2):
    """Central differences of loss_fn() w.r.t. every entry of arr (in place).

    order=4 uses the five-point stencil, which removes the h^2 truncation
    term; composite checks need it because their third derivatives are large.
    """
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)

    def at(i, delta):
        orig = flat[i]
        flat[i] = orig + delta
        value = loss_fn()
        flat[i] = orig
        return value

    for i in range(flat.size):
        if order == 4:
            gflat[i] = (
                8.0 * (at(i, step) - at(i, -step)) - (at(i, 2 * step) - at(i, -2 * step))
            ) / (12.0 * step)
        else:
            gflat[i] = (at(i, step) - at(i, -step)) / (2.0 * step)
    return grad


def check_op(name, builder, inputs, tol=OP_TOL):
    """Compare tape gradients against FD for loss = sum(proj * op(inputs))."""
    tensors = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = builder(*tensors)
    rng = np.random.default_rng(7)
    proj = rng.uniform(-1.0, 1.0, size=out.shape)
    loss = ad.tsum(out * proj)
    loss.backward()
    worst = 0.0
    for t, x in zip(tensors, inputs):
        def f(t=t):
            fresh = [Tensor(u.data, requires_grad=True) for u in tensors]
            return float((builder(*fresh).data * proj).sum())

        fd = _fd_array(f, t.data)
        worst = max(worst, relative_error(t.grad, fd))
    return CheckResult(name, worst, tol)


def _away_from(x, value, margin=0.02, push=0.05):
    x = x.copy()
    near = np.abs(x - value) < margin
    x[near] += np.sign(x[near] - value + 1e-12) * push
    return x


def op_checks():
    rng = np.random.default_rng(1234)
    u = lambda *s: rng.uniform(-1.0, 1.0, size=s)
    pos = lambda *s: rng.uniform(0.4, 1.5, size=s)
    a34, b34 = u(3, 4), u(3, 4)
    idx = rng.integers(0, 3, size=(5, 2))
    mask = rng.uniform(size=(3, 4)) > 0.5
    spread = u(3, 5) + np.arange(5) * 0.11  # keep max/argmax away from ties

    checks = [
        ("add", lambda a, b: a + b, [a34, b34]),
        ("add_broadcast", lambda a, b: a + b, [a34, u(1, 4)]),
        ("sub", lambda a, b: a - b, [a34, b34]),
        ("mul", lambda a, b: a * b, [a34, b34]),
        ("div", lambda a, b: a / b, [a34, pos(3, 4)]),
        ("neg", lambda a: -a, [a34]),
        ("square", ad.square, [a34]),
        ("sqrt", ad.sqrt, [pos(3, 4)]),
        ("exp", ad.exp, [a34]),
        ("matmul_2d", lambda a, b: ad.matmul(a, b), [u(3, 4), u(4, 2)]),
        ("matmul_3d", lambda a, b: ad.matmul(a, b), [u(2, 3, 4), u(4, 2)]),
        ("transpose", ad.transpose, [a34]),
        ("reshape", lambda a: ad.reshape(a, (4, 3)), [a34]),
        ("broadcast_to", lambda a: ad.broadcast_to(a, (5, 3, 4)), [a34]),
        ("concat", lambda a, b: ad.concat([a, b], axis=1), [a34, u(3, 2)]),
        ("gather", lambda a: ad.gather(a, idx), [a34]),
        ("index_add", lambda v: ad.index_add(4, idx, v), [u(5, 2, 3)]),
        ("sum_all", lambda a: ad.tsum(a), [a34]),
        ("sum_axis", lambda a: ad.tsum(a, axis=1, keepdims=True), [a34]),
        ("mean", lambda a: ad.mean(a, axis=0), [a34]),
        ("max", lambda a: ad.tmax(a, axis=1), [spread]),
        ("sigmoid", ad.sigmoid, [a34]),
        ("tanh", ad.tanh, [a34]),
        ("relu", ad.relu, [_away_from(u(3, 4), 0.0)]),
        ("leaky_relu", lambda a: ad.leaky_relu(a, 0.1), [_away_from(u(3, 4), 0.0)]),
        ("softmax", lambda a: ad.softmax(a, axis=-1), [a34]),
        ("clip", lambda a: ad.clip(a, -0.5, 0.5),
         [_away_from(_away_from(u(3, 4), 0.5), -0.5)]),
        ("where", lambda a, b: ad.where(mask, a, b), [a34, b34]),
        ("l2norm_rows", ad.l2norm_rows, [pos(4, 3)]),
    ]
    return [check_op(name, fn, args) for name, fn, args in checks]


def _randomize_biases(model, seed):
    """Move biases off zero so no pre-activation sits exactly on a ReLU kink
    (central differences would straddle the two slopes there)."""
    rng = np.random.default_rng(seed)
    for name, t in model.store.items():
        if name.endswith(".b"):
            t.data[...] = rng.uniform(-0.3, 0.3, size=t.data.shape)
    return model


def _fd_wrt_store(loss_fn, store, names=None, step=FD_STEP, order=4):
    grads = {}
    for name, t in store.items():
        if names is not None and name not in names:
            continue
        grads[name] = _fd_array(loss_fn, t.data, step, order)
    return grads


def _compare_store(store, fd_grads, loss_scale=1.0):
    grad_scale = max(
        (np.abs(store[name].grad).max() for name in fd_grads if store[name].grad.size),
        default=0.0,
    )
    floor = _noise_floor(loss_scale, grad_scale)
    worst = 0.0
    for name, fd in fd_grads.items():
        worst = max(worst, relative_error(store[name].grad, fd, floor))
    return worst


def check_encoder():
    model = _randomize_biases(build_model(seed=11), seed=111)
    rng = np.random.default_rng(5)
    cloud = rng.uniform(-1.0, 1.0, size=(6, 3))
    proj = rng.uniform(-1.0, 1.0, size=(6, model.feat_width))

    def forward():
        return float((encode(cloud, model.encoder).data * proj).sum())

    loss = ad.tsum(encode(cloud, model.encoder) * proj)
    backward(loss, model.store)
    names = [n for n in model.store.names() if n.startswith("encoder.")]
    fd = _fd_wrt_store(forward, model.store, names)
    return CheckResult("encoder", _compare_store(model.store, fd, loss.item()), OP_TOL)


def check_transport():
    model = _randomize_biases(build_model(seed=13), seed=113)
    rng = np.random.default_rng(6)
    p = rng.uniform(-1.0, 1.0, size=(5, 3))
    q = rng.uniform(-1.0, 1.0, size=(6, 3))

    def flow_sq():
        x = encode(p, model.encoder)
        y = encode(q, model.encoder)
        plan = sinkhorn(correlation_kernel(x, y, 0.03), 5)
        f = initial_flow(plan, p, q)
        return ad.tsum(ad.square(f))

    loss = flow_sq()
    backward(loss, model.store)
    names = [n for n in model.store.names() if n.startswith("encoder.")]
    fd = _fd_wrt_store(lambda: flow_sq().item(), model.store, names)
    return CheckResult("transport_init", _compare_store(model.store, fd, loss.item()), MODULE_TOL)


def check_superpoints():
    model = _randomize_biases(build_model(seed=17), seed=117)
    rng = np.random.default_rng(8)
    p = rng.uniform(-1.0, 1.0, size=(8, 3))
    q = p + 0.3 + 0.01 * rng.uniform(-1.0, 1.0, size=(8, 3))
    flow_prev = rng.uniform(-0.1, 0.1, size=(8, 3))
    proj_sc = rng.uniform(-1.0, 1.0, size=(3, 3))
    proj_sf = rng.uniform(-1.0, 1.0, size=(3, 3))
    proj_w = rng.uniform(-1.0, 1.0, size=(8, 2))

    def forward():
        x = encode(p, model.encoder)
        y = encode(q, model.encoder)
        sp = init_superpoints(p, ad.constant(flow_prev), x, 3)
        warped = warp_correspondences(p, ad.constant(flow_prev), sp, q, y)
        assoc = association(p, x, ad.constant(flow_prev), sp, warped, 2, model.assoc)
        updated = update_centers(assoc, p, ad.constant(flow_prev), x, sp)
        return (
            ad.tsum(assoc.weights * proj_w)
            + ad.tsum(updated.sc * proj_sc)
            + ad.tsum(updated.sf * proj_sf)
        )

    loss = forward()
    backward(loss, model.store)
    names = [n for n in model.store.names() if n.startswith("assoc.")]
    fd = _fd_wrt_store(lambda: forward().item(), model.store, names)
    return CheckResult(
        "superpoint_generation", _compare_store(model.store, fd, loss.item()), MODULE_TOL
    )


def check_losses():
    rng = np.random.default_rng(9)
    p = rng.uniform(-1.0, 1.0, size=(7, 3))
    q = rng.uniform(-1.0, 1.0, size=(8, 3))
    fp0 = rng.uniform(-0.3, 0.3, size=(7, 3))
    fq0 = rng.uniform(-0.3, 0.3, size=(8, 3))
    results = []

    def run(name, loss_of, arrays, tol=OP_TOL):
        tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        loss = loss_of(*tensors)
        loss.backward()
        worst = 0.0
        for t in tensors:
            fd = _fd_array(lambda: float(loss_of(*[Tensor(u.data) for u in tensors]).data), t.data)
            worst = max(worst, relative_error(t.grad, fd))
        results.append(CheckResult(name, worst, tol))

    run("chamfer_loss", lambda f: chamfer_loss(ad.constant(p) + f, q), [fp0])
    run("smoothness_loss", lambda f: smoothness_loss(p, f, 3), [fp0])
    run("consistency_loss", lambda fp, fq: consistency_loss(fp, fq, p, q), [fp0, fq0])
    run(
        "backward_interpolate",
        lambda v, s, d: ad.tsum(ad.square(backward_interpolate(v, s, d))),
        [rng.uniform(-1, 1, (6, 3)), rng.uniform(-1, 1, (6, 3)), rng.uniform(-1, 1, (4, 3))],
    )
    return results


def _tiny_setup():
    cfg = PipelineConfig(
        superpoints=4, attended=2, iterations=2, feat_width=8, hidden_width=8,
        k_conv=4, sinkhorn_sweeps=5, smooth_k=3,
    )
    scene = generate_scene(SyntheticConfig(
        parts=2, points_per_part=7, part_extent=0.8, translation_range=0.25,
        rotation_range=0.2, separation=1.0, noise_sigma=0.001, seed=3,
    ))
    model = _randomize_biases(
        build_model(cfg.feat_width, cfg.hidden_width, cfg.k_conv, seed=23), seed=123
    )
    return model, cfg, scene


def check_end_to_end():
    """Full pipeline loss at T=2 on a 14-point pair, FD over every parameter."""
    model, cfg, scene = _tiny_setup()
    loss, _ = scene_loss(model, cfg, scene.source, scene.target)
    backward(loss, model.store)

    def forward():
        value, _ = scene_loss(model, cfg, scene.source, scene.target)
        return value.item()

    fd = _fd_wrt_store(forward, model.store)
    return CheckResult(
        "end_to_end_T2", _compare_store(model.store, fd, loss.item()), END_TO_END_TOL
    )


MODULE_CHECKS = {
    "numeric-core": lambda: op_checks(),
    "feature-encoder": lambda: [check_encoder()],
    "transport-init": lambda: [check_transport()],
    "superpoint-generation": lambda: [check_superpoints()],
    "losses-metrics": lambda: check_losses(),
    "flow-refinement": lambda: [check_end_to_end()],
}


def run_checks(module=None, report=print):
    """Run the battery (optionally one module); returns True when all pass."""
    if module is not None and module not in MODULE_CHECKS:
        raise ValueError(
            f"unknown module {module!r}; choose from {', '.join(sorted(MODULE_CHECKS))}"
        )
    selected = [module] if module else list(MODULE_CHECKS)
    all_ok = True
    debug_was = ad.debug_checks_enabled()
    ad.set_debug_checks(True)
    try:
        for mod in selected:
            for result in MODULE_CHECKS[mod]():
                status = "ok" if result.passed else "FAIL"
                if report is not None:
                    report(
                        f"[{status}] {mod}:{result.name} "
                        f"max_rel_err={result.max_rel_err:.3e} tol={result.tolerance:.0e}"
                    )
                all_ok = all_ok and result.passed
    finally:
        ad.set_debug_checks(debug_was)
    return all_ok
