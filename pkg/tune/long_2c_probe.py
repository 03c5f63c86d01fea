import sys, time, json
import numpy as np
from pf3d.harness import TrainConfig, run_detect
from pf3d.model import ModelConfig
from pf3d.synthscene import SceneConfig

mode, epochs, seed = sys.argv[1], int(sys.argv[2]), int(sys.argv[3])
inoise = float(sys.argv[4]) if len(sys.argv) > 4 else 0.25
cfg = TrainConfig(
    mode="detect", epochs=epochs, batch_size=1, seed=seed, peak_lr=6e-3,
    n_scenes=200, label_fraction=0.2, eval_scenes=48,
    lambda_reg=2.0, lambda_cls=2.0,
    out_dir=f"/tmp/l2c_{mode}_{epochs}_{seed}_{inoise}",
    model=ModelConfig(dropout=0.1, fusion_mode=mode),
    scene=SceneConfig(intensity_noise=inoise),
)
t0 = time.time()
res = run_detect(cfg)
final = json.loads(open(res["log"]).read().strip().split("\n")[-1])
print(json.dumps({"mode": mode, "ep": epochs, "seed": seed, "mAP": round(res["mAP"], 4),
                  "per_class": {k: round(v, 3) for k, v in final["per_class"].items()},
                  "mins": round((time.time()-t0)/60, 1)}))
