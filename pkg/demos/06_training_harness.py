"""A miniature two-stage run: pre-train briefly, fine-tune, evaluate,
plot.  Everything is deterministic given the seeds in the config.

Run:  python3 demos/06_training_harness.py   (about two minutes)
"""

import dataclasses
import json
from pathlib import Path

from pf3d.harness import (
    TrainConfig,
    config_to_json,
    load_checkpoint,
    plot_metrics_log,
    run_detect,
    run_pretrain,
)
from pf3d.model import ModelConfig
from pf3d.synthscene import SceneConfig

out = Path("/tmp/pf3d_demo")
cfg = TrainConfig(
    mode="pretrain",
    epochs=3,
    batch_size=4,
    seed=0,
    peak_lr=2e-3,
    n_scenes=16,
    eval_scenes=8,
    out_dir=str(out / "pretrain"),
    model=ModelConfig(),
    scene=SceneConfig(),
)
print("pre-training 3 epochs on 16 scenes...")
pre = run_pretrain(cfg)
for row in pre["epochs"]:
    print(f"  epoch {row['epoch']}: total {row['total']:.3f}")

print("\nfine-tuning 3 epochs from the checkpoint...")
ft_cfg = dataclasses.replace(
    cfg,
    mode="detect",
    epochs=3,
    batch_size=1,
    init="pretrained",
    init_checkpoint=pre["checkpoint"],
    out_dir=str(out / "detect"),
)
ft = run_detect(ft_cfg)
for row in ft["epochs"]:
    print(f"  epoch {row['epoch']}: loss {row['loss']:.3f}")
print(f"  held-out mAP: {ft['mAP']:.4f}")

ck = load_checkpoint(ft["checkpoint"])
print(f"\ncheckpoint: epoch {ck.epoch}, {len(ck.params)} tensors, "
      f"config hash {ck.config_hash}")

plot_metrics_log(pre["log"], out / "pretrain.svg")
plot_metrics_log(ft["log"], out / "detect.svg")
print(f"plots: {out}/pretrain.svg, {out}/detect.svg")
print("\nthe same flows are scriptable via the CLI:")
print("  pf3d pretrain --config cfg.json --out runs/pre")
print("  pf3d train --config cfg.json --init runs/pre/checkpoint.pf3d")
print("  pf3d eval --ckpt runs/detect/checkpoint.pf3d --scenes 900000:24")
print("  pf3d ablate --table 2c --config cfg.json")
print("  pf3d plot --log runs/detect/metrics.jsonl --out fig.svg")
