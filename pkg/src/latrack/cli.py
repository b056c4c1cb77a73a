"""Command-line entry point: profile / train / track / bench subcommands.

Environment:
  SGLA_PRECISION  'f32' or 'f64' (default f64) scalar width
  SGLA_THREADS    cap on BLAS worker threads
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import tensor as T
from .adaptation import profile_redundancy
from .checkpoint import CheckpointError, load_model, save_model
from .config import ConfigError, RunConfig, load_config
from .harness import bench_both, early_exit_iou, eval_pairs, eval_suite, run_ope, train, train_suite
from .model import TrackerModel


def _choice_mode(train_mode: str) -> str:
    return {"maximizing": "module", "minimizing": "module",
            "random": "random", "fixed_layer": "fixed"}[train_mode]


def _load_run(args) -> RunConfig:
    return load_config(args.config, args.set or [])


def _require_ckpt(path: str) -> TrackerModel:
    if not os.path.exists(path):
        raise SystemExit(f"error: checkpoint not found: {path}")
    try:
        return load_model(path)
    except CheckpointError as exc:
        raise SystemExit(f"error: cannot load checkpoint {path}: {exc}")


def _outdir(cfg: RunConfig) -> str:
    path = cfg.get("output", "dir")
    os.makedirs(path, exist_ok=True)
    return path


def cmd_profile(args) -> int:
    cfg = _load_run(args)
    model = _require_ckpt(args.ckpt)
    out = _outdir(cfg)
    pairs = eval_pairs(model.config, cfg.scenario(), cfg.get("eval", "seed"), args.samples)
    report = profile_redundancy(model.backbone, [(z, s) for z, s, _ in pairs])
    report.to_csv(os.path.join(out, "redundancy.csv"))
    iou_per_layer = early_exit_iou(model, pairs)
    with open(os.path.join(out, "early_exit.csv"), "w") as fh:
        fh.write("layer_index,mean_iou,n_samples\n")
        for i, v in enumerate(iou_per_layer, start=1):
            fh.write(f"{i},{v:.6f},{len(pairs)}\n")
    payload = report.to_json_dict()
    payload["early_exit_mean_iou"] = [float(v) for v in iou_per_layer]
    with open(os.path.join(out, "redundancy.json"), "w") as fh:
        json.dump(payload, fh, indent=2)
    print(f"profiled {len(pairs)} samples over {model.config.backbone.num_layers} layers -> {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_run(args)
    out = _outdir(cfg)
    seed = cfg.get("train", "seed")
    model = TrackerModel(cfg.model_config(), seed=seed)
    sequences = train_suite(cfg.scenario(), seed, cfg.get("train", "sequences"),
                            cfg.get("train", "frames_per_sequence"))
    result = train(model, sequences, cfg.train_config())
    ckpt_path = os.path.join(out, "model.ckpt")
    save_model(ckpt_path, model)
    result.to_csv(os.path.join(out, "loss_history.csv"))
    print(f"trained {len(result.loss_history)} steps; final loss {result.loss_history[-1]:.4f}")
    print(f"checkpoint -> {ckpt_path}")
    return 0


def cmd_track(args) -> int:
    cfg = _load_run(args)
    model = _require_ckpt(args.ckpt)
    out = _outdir(cfg)
    scen = cfg.scenario()
    frames = cfg.get("eval", "frames_per_sequence")
    sequences = eval_suite(scen, args.seed, cfg.get("eval", "sequences"), frames)
    ope, results = run_ope(model, sequences, cfg.policy(),
                           choice_mode=_choice_mode(cfg.get("train", "mode")), seed=args.seed)
    for i, res in enumerate(results):
        with open(os.path.join(out, f"seq_{i:03d}.txt"), "w") as fh:
            fh.write("\n".join(res.to_otb_lines()) + "\n")
        with open(os.path.join(out, f"seq_{i:03d}.json"), "w") as fh:
            json.dump(res.to_json_dict(), fh, indent=2)
    with open(os.path.join(out, "ope.json"), "w") as fh:
        json.dump(ope.to_json_dict(), fh, indent=2)
    ope.curves_to_csv(os.path.join(out, "ope_curves.csv"))
    print(f"OPE over {len(sequences)} sequences: AUC {ope.auc:.3f}, P@20px {ope.precision:.3f}")
    return 0


def cmd_bench(args) -> int:
    cfg = _load_run(args)
    model = _require_ckpt(args.ckpt)
    out = _outdir(cfg)
    report = bench_both(model, n_frames=cfg.get("eval", "bench_frames"),
                        warmup=cfg.get("eval", "bench_warmup"))
    with open(os.path.join(out, "bench.json"), "w") as fh:
        json.dump(report, fh, indent=2)
    print(f"full: {report['full']['fps']:.1f} fps, layer_adaptive: {report['layer_adaptive']['fps']:.1f} fps")
    print(f"flop ratio {report['flop_ratio']:.3f}, param ratio {report['param_ratio']:.3f}, "
          f"fps ratio {report['fps_ratio']:.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latrack",
                                     description="layer-adaptive ViT tracker toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="INI config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a config value")

    p = sub.add_parser("profile", help="layer redundancy and early-exit profiling")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--samples", type=int, default=50)
    p.set_defaults(fn=cmd_profile)

    p = sub.add_parser("train", help="train a tracker on synthetic sequences")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("track", help="run one-pass evaluation on a synthetic suite")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_track)

    p = sub.add_parser("bench", help="FLOPs/params/FPS for full vs layer-adaptive")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    prec = os.environ.get("SGLA_PRECISION")
    if prec:
        try:
            T.set_precision(prec)
        except ValueError as exc:
            print(f"error: SGLA_PRECISION: {exc}", file=sys.stderr)
            return 2
    threads = os.environ.get("SGLA_THREADS")
    if threads:
        try:
            import threadpoolctl

            threadpoolctl.threadpool_limits(limits=int(threads))
        except ValueError:
            print(f"error: SGLA_THREADS must be an integer, got {threads!r}", file=sys.stderr)
            return 2
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
