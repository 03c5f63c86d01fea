import sys, time, json
import numpy as np
from pf3d.harness import TrainConfig, AdamW, LrSchedule, lr_at, evaluate_detector, load_pretrained_backbone
from pf3d.decoder import DetectionLossConfig, detection_loss
from pf3d.model import Detector, ModelConfig
from pf3d.synthscene import SceneConfig, ScenePool, split_labels
from pf3d.tensor import backward

epochs = int(sys.argv[1]); peak = float(sys.argv[2]); seed = int(sys.argv[3])
init_ckpt = sys.argv[4] if len(sys.argv) > 4 else ""
mcfg = ModelConfig(dropout=0.0)
scfg = SceneConfig()
pool = ScenePool(scfg, 10_000)
eval_pool = ScenePool(scfg, 900_000)
labeled = split_labels(list(range(200)), 0.2)
model = Detector(mcfg, seed=seed)
if init_ckpt:
    load_pretrained_backbone(model, init_ckpt)
model.train()
lc = DetectionLossConfig(2.0, 2.0)
opt = AdamW(list(model.named_parameters()))
steps_total = epochs * len(labeled)
sched = LrSchedule(int(0.05 * steps_total), peak, 1e-5, steps_total)
rng = np.random.default_rng([seed, 0xA22])
g = 0
t0 = time.time()
for ep in range(1, epochs + 1):
    order = rng.permutation(len(labeled))
    tot = 0.0
    for i in order:
        opt.zero_grad()
        scene = pool.get(int(labeled[i]))
        res = model(scene)
        loss, parts = detection_loss(res.pred_sets, scene.gt_boxes, model.grid, lc)
        backward(loss)
        opt.step(lr_at(g, sched)); g += 1
        tot += parts["loss"]
    if ep % 5 == 0 or ep == epochs:
        ev = evaluate_detector(model, eval_pool, range(24))
        print(json.dumps({"ep": ep, "loss": round(tot/len(labeled), 3),
                          "mAP": round(ev["mAP"], 4),
                          "mins": round((time.time()-t0)/60, 1)}), flush=True)
