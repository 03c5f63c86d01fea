import sys, time, json
import numpy as np
from pf3d.harness import TrainConfig, run_detect
from pf3d.model import ModelConfig
from pf3d.synthscene import SceneConfig

seed = int(sys.argv[1]); epochs = int(sys.argv[2]); ckpt = sys.argv[3]
drop = float(sys.argv[4]) if len(sys.argv) > 4 else 0.1
lr = float(sys.argv[5]) if len(sys.argv) > 5 else 6e-3
out = {}
for init in ("random", "pretrained"):
    cfg = TrainConfig(
        mode="detect", epochs=epochs, batch_size=1, seed=seed, peak_lr=lr,
        n_scenes=200, label_fraction=0.2, eval_scenes=48,
        lambda_reg=2.0, lambda_cls=2.0,
        init=init, init_checkpoint=ckpt if init == "pretrained" else "",
        out_dir=f"/tmp/pair_{init}_{seed}_{epochs}_{drop}",
        model=ModelConfig(dropout=drop), scene=SceneConfig(),
    )
    t0 = time.time()
    res = run_detect(cfg)
    out[init] = {"mAP": round(res["mAP"], 4),
                 "loss_last": round(res["epochs"][-1]["loss"], 3),
                 "mins": round((time.time()-t0)/60, 1)}
    print(json.dumps({init: out[init], "seed": seed}), flush=True)
print(json.dumps({"seed": seed, "pretrained_wins": out["pretrained"]["mAP"] >= out["random"]["mAP"]}))
