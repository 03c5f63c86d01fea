import sys, time, json
import numpy as np
from pf3d.harness import TrainConfig, run_detect
from pf3d.model import ModelConfig
from pf3d.synthscene import SceneConfig

peak = float(sys.argv[1]); epochs = int(sys.argv[2]); lreg = float(sys.argv[3])
lcls = float(sys.argv[4]) if len(sys.argv) > 4 else 2.0
cfg = TrainConfig(
    mode="detect", epochs=epochs, batch_size=4, seed=0, peak_lr=peak,
    n_scenes=8, eval_scenes=8, scene_seed=10_000, eval_scene_seed=10_000,
    lambda_reg=lreg, lambda_cls=lcls,
    out_dir=f"/tmp/overfit_{peak}_{lreg}_{lcls}",
    model=ModelConfig(), scene=SceneConfig(),
)
t0 = time.time()
res = run_detect(cfg)
losses = [round(r["loss"], 3) for r in res["epochs"]]
print(json.dumps({"lr": peak, "lreg": lreg, "lcls": lcls,
                  "losses": losses[:5] + ["..."] + losses[-3:],
                  "mAP_train": res["mAP"], "mins": round((time.time()-t0)/60, 1)}))
