"""Detection end to end: decode a scene, match with the Hungarian
assignment, score with distance-threshold mAP.

Run:  python3 demos/05_detection_and_map.py
"""

import numpy as np

from pf3d.decoder import (
    DetectionLossConfig,
    decode_detections,
    detection_loss,
    hungarian_match,
)
from pf3d.metrics import EvalConfig, evaluate_map
from pf3d.model import Detector, ModelConfig
from pf3d.synthscene import CLASS_NAMES, SceneConfig, generate_scene
from pf3d.tensor import backward

model = Detector(ModelConfig(), seed=0)
scene = generate_scene(SceneConfig(), seed=21)

# forward: 6 prediction sets (2 BEV + 2 PV + 2 joint layers)
model.eval()
res = model(scene)
print(f"prediction sets: {[p.stage for p in res.pred_sets]}")
print(f"joint queries: {res.q_join.shape[0]} (= 2 x n_queries)")

# the training loss matches predictions to ground truth one-to-one
model.train()
loss, parts = detection_loss(
    model(scene).pred_sets, scene.gt_boxes, model.grid, DetectionLossConfig()
)
backward(loss)
print(f"loss {parts['loss']:.3f} = cls {parts['loss_cls']:.3f} "
      f"+ reg {parts['loss_reg']:.3f} (weighted)")

# Hungarian assignment on a toy cost
cost = np.array([[1.0, 2.0, 8.0], [2.0, 1.0, 8.0]])
print(f"hungarian on {cost.shape}: {hungarian_match(cost)}")

# untrained detections are noise; mAP scores them anyway
model.eval()
dets = decode_detections(model(scene).final, model.grid)
result = evaluate_map({scene.scene_id: dets}, {scene.scene_id: scene.gt_boxes},
                      EvalConfig())
print(f"untrained mAP on one scene: {result['mAP']:.4f}")
print(f"ground truth classes: "
      f"{[CLASS_NAMES[b.class_id] for b in scene.gt_boxes]}")
