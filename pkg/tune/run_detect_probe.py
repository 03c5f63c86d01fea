import sys, time, json
import numpy as np
from pf3d.harness import TrainConfig, run_detect
from pf3d.model import ModelConfig
from pf3d.synthscene import SceneConfig

peak = float(sys.argv[1]) if len(sys.argv) > 1 else 2e-3
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 10
seed = int(sys.argv[3]) if len(sys.argv) > 3 else 0
n_scenes = int(sys.argv[4]) if len(sys.argv) > 4 else 40
frac = float(sys.argv[5]) if len(sys.argv) > 5 else 1.0

cfg = TrainConfig(
    mode="detect", epochs=epochs, batch_size=4, seed=seed, peak_lr=peak,
    n_scenes=n_scenes, label_fraction=frac, eval_scenes=24,
    out_dir=f"/tmp/probe_lr{peak}_e{epochs}_s{seed}",
    model=ModelConfig(), scene=SceneConfig(),
)
t0 = time.time()
res = run_detect(cfg)
print(json.dumps({"lr": peak, "epochs": epochs, "seed": seed,
                  "losses": [round(r["loss"], 3) for r in res["epochs"]],
                  "mAP": res["mAP"], "mins": round((time.time()-t0)/60, 1)}))
