"""Command-line interface: pretrain, train, eval, ablate, plot."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np


def _load_cfg(path):
    from .harness import load_config

    return load_config(path)


def cmd_pretrain(args) -> int:
    from .harness import config_to_json, run_pretrain

    cfg = _load_cfg(args.config)
    cfg = dataclasses.replace(cfg, mode="pretrain", out_dir=args.out or cfg.out_dir)
    res = run_pretrain(cfg)
    Path(cfg.out_dir, "config.json").write_text(config_to_json(cfg))
    print(json.dumps({"log": res["log"], "checkpoint": res["checkpoint"],
                      "final_total": res["epochs"][-1]["total"]}))
    return 0


def cmd_train(args) -> int:
    from .harness import config_to_json, run_detect

    cfg = _load_cfg(args.config)
    cfg = dataclasses.replace(cfg, mode="detect", out_dir=args.out or cfg.out_dir)
    if args.init:
        cfg = dataclasses.replace(cfg, init="pretrained", init_checkpoint=args.init)
    res = run_detect(cfg)
    Path(cfg.out_dir, "config.json").write_text(config_to_json(cfg))
    print(json.dumps({"log": res["log"], "checkpoint": res["checkpoint"],
                      "mAP": res["mAP"]}))
    return 0


def _parse_scene_spec(spec: str):
    """SEED:COUNT, e.g. '900000:32'."""
    seed, _, count = spec.partition(":")
    return int(seed), int(count)


def cmd_eval(args) -> int:
    from .decoder import decode_detections, write_detections_jsonl
    from .harness import load_checkpoint
    from .metrics import EvalConfig, evaluate_map
    from .model import Detector, ModelConfig
    from .synthscene import SceneConfig, ScenePool
    from .harness import _from_dict

    ck = load_checkpoint(args.ckpt)
    if args.config:
        cfg = _load_cfg(args.config)
        model_cfg, scene_cfg = cfg.model, cfg.scene
    else:
        model_cfg, scene_cfg = ModelConfig(), SceneConfig()
    model = Detector(model_cfg, seed=0)
    own = dict(model.named_parameters())
    for name, arr in ck.params.items():
        if name in own:
            own[name].data = arr.copy()
    model.eval()

    seed, count = _parse_scene_spec(args.scenes)
    pool = ScenePool(scene_cfg, seed)
    preds, gts = {}, {}
    for i in range(count):
        scene = pool.get(i)
        res = model(scene)
        preds[scene.scene_id] = decode_detections(res.final, model.grid)
        gts[scene.scene_id] = scene.gt_boxes
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    write_detections_jsonl(out / "detections.jsonl", preds)
    results = evaluate_map(preds, gts, EvalConfig())
    payload = {
        "mAP": results["mAP"],
        "per_class": {
            k: {"ap": v["ap"],
                "ap_per_threshold": {str(t): a for t, a in v["ap_per_threshold"].items()}}
            for k, v in results["per_class"].items()
        },
        "skipped_classes": results["skipped_classes"],
    }
    (out / "results.json").write_text(json.dumps(payload, indent=1))
    print(json.dumps({"mAP": results["mAP"],
                      "detections": str(out / "detections.jsonl"),
                      "results": str(out / "results.json")}))
    return 0


def cmd_ablate(args) -> int:
    from .harness import run_ablation

    cfg = _load_cfg(args.config)
    fractions = tuple(float(f) for f in args.fractions.split(",")) if args.fractions else (0.2,)
    seeds = tuple(int(s) for s in args.seeds.split(",")) if args.seeds else (0, 1, 2)
    report = run_ablation(args.table, cfg, args.out or f"runs/ablation_{args.table}",
                          seeds=seeds, fractions=fractions)
    print(json.dumps({"table": report["table"], "ranking": report["ranking"],
                      "summary": {k: v["mean"] for k, v in report["summary"].items()}}))
    return 0


def cmd_plot(args) -> int:
    from .harness import plot_metrics_log

    plot_metrics_log(args.log, args.out)
    print(json.dumps({"plot": args.out}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="pf3d",
        description="Desk-scale progressive LiDAR-camera fusion: training, "
        "evaluation, and ablations on procedural scenes.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("pretrain", help="run masked-modeling pre-training")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=cmd_pretrain)

    st = sub.add_parser("train", help="train the detector")
    st.add_argument("--config", required=True)
    st.add_argument("--init", default=None, help="pre-training checkpoint to start from")
    st.add_argument("--out", default=None)
    st.set_defaults(fn=cmd_train)

    se = sub.add_parser("eval", help="evaluate a checkpoint on generated scenes")
    se.add_argument("--ckpt", required=True)
    se.add_argument("--scenes", required=True, help="SEED:COUNT, e.g. 900000:32")
    se.add_argument("--config", default=None)
    se.add_argument("--out", default=None)
    se.set_defaults(fn=cmd_eval)

    sa = sub.add_parser("ablate", help="run one ablation table")
    sa.add_argument("--table", required=True, choices=["2a", "2c", "2d", "2e"])
    sa.add_argument("--config", required=True)
    sa.add_argument("--seeds", default=None, help="comma list, default 0,1,2")
    sa.add_argument("--fractions", default=None, help="comma list for table 2a")
    sa.add_argument("--out", default=None)
    sa.set_defaults(fn=cmd_ablate)

    sl = sub.add_parser("plot", help="plot a JSON-lines metrics log to SVG")
    sl.add_argument("--log", required=True)
    sl.add_argument("--out", required=True)
    sl.set_defaults(fn=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
