"""Learnable-parameter construction and the bundles the pipeline stages consume.

All weights live in one ParameterStore under dotted names (the checkpoint
schema); the FlowModel object just holds typed views onto those tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import EncoderParams, SetConvParams
from .optim import ParameterStore
from .rng import SplitMix64


@dataclass
class MlpParams:
    weights: list
    biases: list


@dataclass
class AssociationParams:
    feat_mlp: MlpParams  # scores 2d-wide feature differences
    geo_mlp: MlpParams  # scores 6-wide coordinate differences


@dataclass
class FlowModel:
    feat_width: int
    hidden_width: int
    k_conv: int
    encoder: EncoderParams
    assoc: AssociationParams
    conf_pi: MlpParams
    conf_tau: MlpParams
    embed_w: object  # flow-embedding shared layer
    embed_b: object
    flowfeat_w: object  # linear flow feature
    flowfeat_b: object
    ctx_c: SetConvParams
    ctx_e: SetConvParams
    gru_z: SetConvParams
    gru_r: SetConvParams
    gru_h: SetConvParams
    head: MlpParams  # residual-flow regressor
    store: ParameterStore


def _layer_shapes(d: int, d_h: int) -> dict[str, tuple]:
    w1 = max(4, d // 2)
    shapes = {
        "encoder.l1.w": (3, w1),
        "encoder.l2.w": (w1 + 3, d),
        "encoder.l3.w": (d + 3, d),
        "assoc.feat.l1.w": (2 * d, 16),
        "assoc.feat.l2.w": (16, 16),
        "assoc.geo.l1.w": (6, 16),
        "assoc.geo.l2.w": (16, 16),
        "conf.pi.l1.w": (3, 16),
        "conf.pi.l2.w": (16, 1),
        "conf.tau.l1.w": (3, 16),
        "conf.tau.l2.w": (16, 1),
        "embed.w": (2 * d + 3, d),
        "flowfeat.w": (3, d),
        "ctx.c.w": (d + 3, d),
        "ctx.e.w": (d + 3, d),
        "gru.z.w": (d_h + d + 3, d_h),
        "gru.r.w": (d_h + d + 3, d_h),
        "gru.h.w": (d_h + d + 3, d_h),
        "head.l1.w": (d_h, 16),
        "head.l2.w": (16, 3),
    }
    full = {}
    for name, shape in shapes.items():
        full[name] = shape
        full[name[:-2] + ".b"] = (shape[1],)
    return full


def parameter_schema(feat_width: int, hidden_width: int) -> dict[str, tuple]:
    return _layer_shapes(feat_width, hidden_width)


def infer_widths(schema: dict[str, tuple]) -> tuple[int, int]:
    """Recover (d, d_h) from checkpoint tensor shapes."""
    try:
        d = schema["encoder.l3.w"][1]
        d_h = schema["gru.z.w"][1]
    except KeyError as e:
        raise ValueError(f"checkpoint missing tensor {e} needed to infer widths")
    return int(d), int(d_h)


def build_model(feat_width=32, hidden_width=32, k_conv=8, seed=0) -> FlowModel:
    """Fresh model with Glorot-uniform weights and zero biases."""
    rng = SplitMix64(seed)
    store = ParameterStore()
    shapes = _layer_shapes(feat_width, hidden_width)
    for name in shapes:
        shape = shapes[name]
        if name.endswith(".b"):
            store.add(name, np.zeros(shape))
        else:
            fan_in, fan_out = shape
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            store.add(name, rng.uniform(-bound, bound, size=shape))
    return bind_model(store, feat_width, hidden_width, k_conv)


def cast_model(model: FlowModel, dtype) -> FlowModel:
    """Copy of the model with parameters cast (float32 for fast inference)."""
    store = ParameterStore()
    for name, t in model.store.items():
        store.add(name, t.data.astype(dtype))
    return bind_model(store, model.feat_width, model.hidden_width, model.k_conv)


def bind_model(store: ParameterStore, feat_width: int, hidden_width: int, k_conv=8) -> FlowModel:
    """Wrap an existing store (e.g. from a checkpoint) in typed views."""

    def mlp(prefix, n_layers=2):
        return MlpParams(
            weights=[store[f"{prefix}.l{i}.w"] for i in range(1, n_layers + 1)],
            biases=[store[f"{prefix}.l{i}.b"] for i in range(1, n_layers + 1)],
        )

    def setconv(prefix, k=k_conv):
        return SetConvParams(
            weights=[store[f"{prefix}.w"]], biases=[store[f"{prefix}.b"]], k_conv=k
        )

    encoder = EncoderParams(
        layers=[
            SetConvParams([store[f"encoder.l{i}.w"]], [store[f"encoder.l{i}.b"]], k_conv)
            for i in (1, 2, 3)
        ],
        width=feat_width,
    )
    return FlowModel(
        feat_width=feat_width,
        hidden_width=hidden_width,
        k_conv=k_conv,
        encoder=encoder,
        assoc=AssociationParams(feat_mlp=mlp("assoc.feat"), geo_mlp=mlp("assoc.geo")),
        conf_pi=mlp("conf.pi"),
        conf_tau=mlp("conf.tau"),
        embed_w=store["embed.w"],
        embed_b=store["embed.b"],
        flowfeat_w=store["flowfeat.w"],
        flowfeat_b=store["flowfeat.b"],
        ctx_c=setconv("ctx.c"),
        ctx_e=setconv("ctx.e"),
        gru_z=setconv("gru.z"),
        gru_r=setconv("gru.r"),
        gru_h=setconv("gru.h"),
        head=mlp("head"),
        store=store,
    )
