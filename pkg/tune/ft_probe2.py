import sys, time, json, dataclasses
import numpy as np
from pf3d.harness import TrainConfig, run_detect
from pf3d.model import ModelConfig
from pf3d.synthscene import SceneConfig

peak, epochs, bs, seed, drop = (float(sys.argv[1]), int(sys.argv[2]), int(sys.argv[3]),
                                 int(sys.argv[4]), float(sys.argv[5]))
cfg = TrainConfig(
    mode="detect", epochs=epochs, batch_size=bs, seed=seed, peak_lr=peak,
    n_scenes=200, label_fraction=0.2, eval_scenes=24,
    lambda_reg=2.0, lambda_cls=2.0,
    out_dir=f"/tmp/ft2_{peak}_{epochs}_{bs}_{seed}_{drop}",
    model=ModelConfig(dropout=drop), scene=SceneConfig(),
)
t0 = time.time()
res = run_detect(cfg)
losses = [round(r["loss"], 2) for r in res["epochs"]]
print(json.dumps({"lr": peak, "ep": epochs, "bs": bs, "drop": drop,
                  "loss": [losses[0], losses[len(losses)//2], losses[-1]],
                  "mAP": round(res["mAP"], 4), "mins": round((time.time()-t0)/60, 1)}))
