"""Command-line surface: gen, estimate, train, eval, gradcheck.

Exit codes: 0 success, 2 usage error (argparse), 3 data error, 4 numeric
failure. SPFLOW_THREADS caps training worker threads.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io as sio
from .config import load_configs
from .errors import DataError, NumericError
from .metrics import evaluate
from .model import bind_model, build_model, cast_model, infer_widths, parameter_schema
from .refinement import PipelineConfig
from .synthetic import generate_scene
from .training import estimate_flow, train, worker_count


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="spflow",
        description="Self-supervised 3D scene flow with online superpoints.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="emit synthetic scene pairs")
    gen.add_argument("--config", required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--count", type=int, default=1)

    est = sub.add_parser("estimate", help="estimate flow for one cloud pair")
    est.add_argument("--source", required=True)
    est.add_argument("--target", required=True)
    est.add_argument("--ckpt", required=True)
    est.add_argument("--iters", type=int, default=None)
    est.add_argument("--superpoints", type=int, default=None)
    est.add_argument("--knn", type=int, default=None)
    est.add_argument("--out", required=True)
    est.add_argument("--trace", default=None)
    est.add_argument("--export-superpoints", default=None)
    est.add_argument("--fp32", action="store_true",
                     help="run inference in float32 (training/tests stay float64)")

    tr = sub.add_parser("train", help="self-supervised training on a scene directory")
    tr.add_argument("--data", required=True)
    tr.add_argument("--config", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--epochs", type=int, default=None)
    tr.add_argument("--seed", type=int, default=0)

    ev = sub.add_parser("eval", help="score a predicted flow against ground truth")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--json", dest="json_out", default=None)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    gc.add_argument("--module", default=None)
    return parser


def _cmd_gen(args):
    _, _, synth, _ = load_configs(args.config)
    out = Path(args.out)
    for i in range(args.count):
        cfg = replace(synth, seed=synth.seed + i)
        scene = generate_scene(cfg)
        meta = {"index": i, "config": cfg.to_dict(), "points": int(scene.source.shape[0])}
        sio.save_scene(out / f"scene_{i:04d}", scene, meta)
    print(f"wrote {args.count} scene(s) under {out}")
    return 0


def _cmd_estimate(args):
    store = sio.load_checkpoint(args.ckpt)
    d, d_h = infer_widths(store.schema())
    sio_schema = parameter_schema(d, d_h)
    sio.load_checkpoint(args.ckpt, schema=sio_schema)  # full shape validation
    cfg = PipelineConfig(feat_width=d, hidden_width=d_h)
    if args.iters is not None:
        cfg.iterations = args.iters
    if args.superpoints is not None:
        cfg.superpoints = args.superpoints
    if args.knn is not None:
        cfg.attended = args.knn
    model = bind_model(store, d, d_h, cfg.k_conv)
    source = sio.load_cloud(args.source)
    target = sio.load_cloud(args.target)
    if args.fp32:
        model = cast_model(model, np.float32)
        source = source.astype(np.float32)
        target = target.astype(np.float32)

    trace_sink = None
    trace_file = None
    if args.trace:
        trace_file = open(args.trace, "w")

        def trace_sink(record):
            trace_file.write(json.dumps(record) + "\n")

    try:
        flow_p, _, result = estimate_flow(model, cfg, source, target, trace=trace_sink)
    finally:
        if trace_file is not None:
            trace_file.close()
    sio.save_flow(args.out, flow_p)
    if args.export_superpoints:
        last = result.iterations[-1]
        weights = last.assoc_p.weights.data
        dominant = last.assoc_p.centers[np.arange(len(weights)), weights.argmax(axis=1)]
        sio.export_superpoints_ply(args.export_superpoints, source, dominant)
    print(f"wrote flow for {source.shape[0]} points to {args.out}")
    return 0


def _cmd_train(args):
    pipeline, optim, _, train_keys = load_configs(args.config)
    epochs = args.epochs if args.epochs is not None else train_keys.get("epochs", optim.total_epochs)
    batch_size = train_keys.get("batch_size", 2)
    scenes = []
    for scene_dir in sio.list_scene_dirs(args.data):
        source = sio.load_cloud(scene_dir / "source.bin")
        target = sio.load_cloud(scene_dir / "target.bin")
        scenes.append((source, target))  # gtflow.bin deliberately unread
    model = build_model(pipeline.feat_width, pipeline.hidden_width, pipeline.k_conv,
                        seed=args.seed)

    def log(stats):
        print(
            f"epoch {stats.epoch:3d} lr={stats.lr:.2e} loss={stats.loss:.4f} "
            f"(ch={stats.chamfer:.4f} sm={stats.smoothness:.4f} co={stats.consistency:.4f})"
        )

    train(scenes, model, pipeline, optim, epochs=epochs, batch_size=batch_size,
          seed=args.seed, threads=worker_count(), log=log)
    sio.save_checkpoint(model.store, args.out)
    print(f"saved checkpoint to {args.out}")
    return 0


def _cmd_eval(args):
    pred = sio.load_flow(args.pred)
    gt = sio.load_flow(args.gt)
    report = evaluate(pred, gt)
    payload = report.to_json()
    print(payload)
    if args.json_out:
        Path(args.json_out).write_text(payload + "\n")
    return 0


def _cmd_gradcheck(args):
    from .verify import run_checks

    try:
        ok = run_checks(args.module)
    except ValueError as e:
        print(str(e), file=sys.stderr)
        return 2
    return 0 if ok else 4


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "gen": _cmd_gen,
        "estimate": _cmd_estimate,
        "train": _cmd_train,
        "eval": _cmd_eval,
        "gradcheck": _cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
