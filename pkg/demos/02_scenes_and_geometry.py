"""Procedural scenes and the calibrated-sensor geometry that ties the
two views together.

Run:  python3 demos/02_scenes_and_geometry.py
"""

import numpy as np

from pf3d.encoders import voxelize
from pf3d.geometry import project_to_camera, unproject_from_camera
from pf3d.model import ModelConfig
from pf3d.synthscene import CLASS_NAMES, SceneConfig, generate_scene

scene = generate_scene(SceneConfig(), seed=7)
print(f"scene 7: {len(scene.points)} LiDAR points, "
      f"{len(scene.images)} cameras, {len(scene.gt_boxes)} boxes")
for b in scene.gt_boxes:
    print(f"  {CLASS_NAMES[b.class_id]:10s} at ({b.x:+.1f}, {b.y:+.1f}) "
          f"size ({b.w:.1f} x {b.l:.1f} x {b.h:.1f}) yaw {b.yaw:+.2f}")

# ---------------------------------------------------------------------------
# project LiDAR points into camera 0 and verify the round trip
# ---------------------------------------------------------------------------
calib = scene.calibs[0]
uv, depth, ok = project_to_camera(scene.points[:, :3], calib)
vis = ok & (uv[:, 0] >= 0) & (uv[:, 0] < 96) & (uv[:, 1] >= 0) & (uv[:, 1] < 64)
print(f"\ncamera 0 sees {vis.sum()} of {len(ok)} points")
back = unproject_from_camera(uv[vis], depth[vis], calib)
print(f"project/unproject round trip max error: "
      f"{np.abs(back - scene.points[vis, :3]).max():.2e} m")

# ---------------------------------------------------------------------------
# the same scene voxelized onto the BEV grid
# ---------------------------------------------------------------------------
grid = ModelConfig().make_grid()
batch, occ = voxelize(scene.points, grid, 8, np.random.default_rng(0))
print(f"\nvoxelized: {len(batch.voxels)} voxel tokens, "
      f"{occ.grid.sum()} occupied cells, {batch.n_dropped} points out of range")
cols = occ.grid.any(axis=2)
print("BEV occupancy (x right, y up):")
for j in reversed(range(grid.n_y)):
    print("  " + "".join("#" if cols[i, j] else "." for i in range(grid.n_x)))
