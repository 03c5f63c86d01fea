import time, json
from pf3d.harness import TrainConfig, run_pretrain
from pf3d.model import ModelConfig
from pf3d.synthscene import SceneConfig

cfg = TrainConfig(
    mode="pretrain", epochs=20, batch_size=4, seed=0, peak_lr=2e-3,
    n_scenes=200, out_dir="/tmp/pretrain_ref",
    model=ModelConfig(), scene=SceneConfig(),
)
t0 = time.time()
res = run_pretrain(cfg)
rows = res["epochs"]
print(json.dumps({"ep1_total": round(rows[0]["total"], 3),
                  "ep20_total": round(rows[-1]["total"], 3),
                  "ratio": round(rows[-1]["total"]/rows[0]["total"], 3),
                  "mins": round((time.time()-t0)/60, 1)}))
