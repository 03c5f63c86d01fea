"""One masked-modeling step, dissected: the mask plan, the noise records,
and the five losses that sum to the training objective.

Run:  python3 demos/04_masked_pretraining.py
"""

import numpy as np

from pf3d.model import ModelConfig
from pf3d.pretrain import PretrainModel, make_mask_plan, pretrain_step
from pf3d.synthscene import SceneConfig, generate_scene
from pf3d.tensor import backward

rng = np.random.default_rng(3)

# the asymmetric mask plan: a coin picks which modality gets 0.7
plan = make_mask_plan(n_img=192, n_vox=140, rng=rng, pixels_per_token=64)
print(f"high-ratio modality: {plan.high_modality}")
print(f"image tokens masked {len(plan.img_masked)} / 192, "
      f"voxels masked {len(plan.vox_masked)} / 140")
print(f"masked pixels N_mp = {plan.n_mp}, unmasked N_up = {plan.n_up}")

# a full step through the shared backbone
model = PretrainModel(ModelConfig(), seed=0)
model.train()
scene = generate_scene(SceneConfig(), seed=11)
total, parts = pretrain_step(scene, model, np.random.default_rng(7))
print("\nloss breakdown:")
for key, val in parts.items():
    print(f"  {key:14s} {val:8.4f}")
print(f"sum of components == total: "
      f"{abs(sum(v for k, v in parts.items() if k != 'total') - parts['total']) < 1e-12}")

backward(total)
grads = sum(1 for _, p in model.named_parameters() if p.grad is not None)
print(f"parameters receiving gradients: {grads}")
