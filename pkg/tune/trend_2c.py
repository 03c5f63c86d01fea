import sys, time, json, dataclasses
import numpy as np
from pf3d.harness import TrainConfig, run_detect
from pf3d.model import ModelConfig
from pf3d.synthscene import SceneConfig

seeds = [int(s) for s in sys.argv[1].split(",")]
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 20
results = {}
for mode in ("none", "bev_only", "bev_pv"):
    results[mode] = []
    for seed in seeds:
        cfg = TrainConfig(
            mode="detect", epochs=epochs, batch_size=1, seed=seed, peak_lr=6e-3,
            n_scenes=200, label_fraction=0.2, eval_scenes=48,
            lambda_reg=2.0, lambda_cls=2.0,
            out_dir=f"/tmp/t2c_{mode}_{seed}",
            model=ModelConfig(dropout=0.1, fusion_mode=mode), scene=SceneConfig(),
        )
        t0 = time.time()
        res = run_detect(cfg)
        results[mode].append(res["mAP"])
        print(json.dumps({"mode": mode, "seed": seed, "mAP": round(res["mAP"], 4),
                          "mins": round((time.time()-t0)/60, 1)}), flush=True)
means = {m: float(np.mean(v)) for m, v in results.items()}
print(json.dumps({"means": {k: round(v, 4) for k, v in means.items()},
                  "ordering_ok": means["bev_pv"] >= means["bev_only"] >= means["none"]}))
