"""Procedural multi-sensor scenes with exact ground truth.

Each scene is a flat ground plane plus 1-4 cuboid objects drawn from three
archetypes (car-, pedestrian-, and barrier-like).  A ray-cast LiDAR samples
surfaces with class-dependent (noisy) reflectance; two pinhole cameras
render flat-shaded color images with exact depth maps from the same
geometry, so cross-modal supervision targets are consistent by
construction.

LiDAR intensities overlap heavily between classes while image colors are
clean per class: telling classes apart reliably requires the camera.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .geometry import BevGrid, CameraCalib
from .tensor import ContractError

LIDAR_MAX_RANGE = 40.0
SKY_DEPTH = 60.0
SKY_RGB = np.array([0.10, 0.12, 0.15])
LIGHT_DIR = np.array([0.40, 0.25, 0.88]) / np.linalg.norm([0.40, 0.25, 0.88])
GROUND_ALBEDO = 0.25
GROUND_RGB = np.array([0.35, 0.32, 0.28])
INTENSITY_NOISE = 0.15


@dataclass
class ClassSpec:
    name: str
    length: float
    width: float
    height: float
    jitter: float  # relative size jitter
    albedo: float  # scalar LiDAR reflectance
    rgb: tuple


CLASS_SPECS = [
    ClassSpec("car", 4.0, 1.8, 1.5, 0.12, 0.45, (0.85, 0.15, 0.10)),
    ClassSpec("pedestrian", 0.7, 0.7, 1.7, 0.12, 0.55, (0.10, 0.75, 0.20)),
    ClassSpec("barrier", 2.2, 0.5, 1.0, 0.12, 0.65, (0.15, 0.25, 0.85)),
]

CLASS_NAMES = [c.name for c in CLASS_SPECS]


@dataclass
class GtBox:
    class_id: int
    x: float
    y: float
    z: float  # center height
    w: float
    l: float
    h: float
    yaw: float

    def corners_half(self) -> np.ndarray:
        return np.array([self.l / 2, self.w / 2, self.h / 2])


@dataclass
class SceneConfig:
    n_cameras: int = 2
    image_width: int = 96
    image_height: int = 64
    focal: float = 55.0
    x_min: float = -8.0
    x_max: float = 8.0
    y_min: float = -8.0
    y_max: float = 8.0
    min_boxes: int = 1
    max_boxes: int = 4
    n_azimuth: int = 48
    n_elevation: int = 20
    elevation_min: float = -0.62  # radians, ~-35.5 deg
    elevation_max: float = 0.09
    sensor_height: float = 1.8
    camera_height: float = 1.6
    margin: float = 2.0  # keep box centers this far inside the range
    ego_clearance: float = 1.2  # keep boxes off the sensor rig, meters
    intensity_noise: float = 0.15  # LiDAR reflectance noise sigma
    max_decoys: int = 0  # non-object clutter cuboids per scene (0 disables)


@dataclass
class SceneSample:
    scene_id: int
    points: np.ndarray  # [n, 4] x, y, z, intensity
    images: list  # per camera [3, H, W] in [0, 1]
    depth_maps: list  # per camera [H, W] meters
    calibs: list
    gt_boxes: list
    decoys: list = field(default_factory=list)  # clutter, not ground truth
    # debug-only fields, not part of the cached representation
    point_object_ids: np.ndarray | None = None
    object_id_maps: list | None = None


# ---------------------------------------------------------------------------
# rig
# ---------------------------------------------------------------------------


def default_calibs(cfg: SceneConfig) -> list[CameraCalib]:
    """Two cameras: one facing +x, one facing -x, near the LiDAR."""
    k = np.array(
        [
            [cfg.focal, 0.0, cfg.image_width / 2],
            [0.0, cfg.focal, cfg.image_height / 2],
            [0.0, 0.0, 1.0],
        ]
    )
    calibs = []
    rigs = [
        (np.array([[0.0, -1, 0], [0, 0, -1], [1, 0, 0]]), np.array([0.2, 0.0, 0.0])),
        (np.array([[0.0, 1, 0], [0, 0, -1], [-1, 0, 0]]), np.array([-0.2, 0.0, 0.0])),
    ]
    for r, offset in rigs[: cfg.n_cameras]:
        center = offset + np.array([0.0, 0.0, cfg.camera_height])
        e = np.eye(4)
        e[:3, :3] = r
        e[:3, 3] = -r @ center
        calibs.append(CameraCalib(k, e, cfg.image_width, cfg.image_height))
    return calibs


# ---------------------------------------------------------------------------
# box sampling
# ---------------------------------------------------------------------------


def sample_boxes(cfg: SceneConfig, rng: np.random.Generator) -> list[GtBox]:
    """Non-overlapping boxes with class-conditional size priors.

    Pose retries cap at 100 per box; an unplaceable box is skipped, so
    crowded configs may come back with fewer boxes.
    """
    n = int(rng.integers(cfg.min_boxes, cfg.max_boxes + 1))
    boxes: list[GtBox] = []
    for _ in range(n):
        cls = int(rng.integers(len(CLASS_SPECS)))
        spec = CLASS_SPECS[cls]
        scale = 1.0 + rng.uniform(-spec.jitter, spec.jitter, size=3)
        l, w, h = spec.length * scale[0], spec.width * scale[1], spec.height * scale[2]
        radius = 0.5 * np.hypot(l, w)
        for _attempt in range(100):
            x = rng.uniform(cfg.x_min + cfg.margin, cfg.x_max - cfg.margin)
            y = rng.uniform(cfg.y_min + cfg.margin, cfg.y_max - cfg.margin)
            yaw = rng.uniform(-np.pi, np.pi)
            if np.hypot(x, y) < radius + cfg.ego_clearance:
                continue  # would sit on the sensor rig
            ok = True
            for other in boxes:
                r2 = 0.5 * np.hypot(other.l, other.w)
                if np.hypot(x - other.x, y - other.y) < radius + r2:
                    ok = False
                    break
            if ok:
                boxes.append(GtBox(cls, x, y, h / 2, w, l, h, yaw))
                break
    return boxes


# ---------------------------------------------------------------------------
# ray casting
# ---------------------------------------------------------------------------


def _ray_box_t(origins, dirs, box: GtBox):
    """Slab intersection of rays with an oriented box.

    Returns (t, hit_mask, normals); t is the entry distance along each ray.
    """
    c, s = np.cos(-box.yaw), np.sin(-box.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    center = np.array([box.x, box.y, box.z])
    o = (origins - center) @ rot.T
    d = dirs @ rot.T
    half = box.corners_half()
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    t_lo = np.minimum(t1, t2)
    t_hi = np.maximum(t1, t2)
    # rays parallel to a slab axis: inside -> (-inf, inf), outside -> miss
    parallel = np.abs(d) < 1e-12
    inside = np.abs(o) <= half
    t_lo = np.where(parallel, np.where(inside, -np.inf, np.inf), t_lo)
    t_hi = np.where(parallel, np.where(inside, np.inf, -np.inf), t_hi)
    t_near = t_lo.max(axis=-1)
    t_far = t_hi.min(axis=-1)
    hit = (t_near <= t_far) & (t_far > 1e-9) & (t_near > 1e-9)
    axis = t_lo.argmax(axis=-1)
    sign = -np.sign(np.take_along_axis(d, axis[:, None], axis=1))[:, 0]
    normals_box = np.zeros_like(dirs)
    normals_box[np.arange(len(dirs)), axis] = sign
    normals = normals_box @ rot  # rotate back to world
    return t_near, hit, normals


def _cast_rays(origins, dirs, boxes: list[GtBox]):
    """Nearest surface along each ray.

    Returns (t, object_id, normals); object_id is -1 for ground, -2 for sky
    (no hit), box index otherwise.
    """
    n = len(dirs)
    best_t = np.full(n, np.inf)
    obj = np.full(n, -2, dtype=np.intp)
    normals = np.zeros((n, 3))
    # ground plane z = 0
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = -origins[:, 2] / dz
    gmask = (dz < -1e-12) & (tg > 1e-9)
    best_t[gmask] = tg[gmask]
    obj[gmask] = -1
    normals[gmask] = [0.0, 0.0, 1.0]
    for b_idx, box in enumerate(boxes):
        t, hit, nrm = _ray_box_t(origins, dirs, box)
        closer = hit & (t < best_t)
        best_t[closer] = t[closer]
        obj[closer] = b_idx
        normals[closer] = nrm[closer]
    return best_t, obj, normals


def _shade(obj_ids, normals, solid_rgbs) -> np.ndarray:
    """Flat Lambertian color per hit; solid_rgbs indexed by solid id."""
    rgb = np.empty((len(obj_ids), 3))
    lam = np.clip(normals @ LIGHT_DIR, 0.25, 1.0)
    rgb[:] = SKY_RGB
    ground = obj_ids == -1
    rgb[ground] = GROUND_RGB * lam[ground, None]
    for s_idx, color in enumerate(solid_rgbs):
        m = obj_ids == s_idx
        rgb[m] = np.asarray(color) * lam[m, None]
    return rgb


DECOY_RGB = (0.45, 0.43, 0.40)  # dull clutter, near ground color


def sample_decoys(cfg: SceneConfig, rng: np.random.Generator, existing) -> list[GtBox]:
    """Non-object clutter cuboids that mimic object footprints and LiDAR
    reflectance but render in a dull non-class color.

    Geometrically and in intensity they alias the object classes, so
    telling them apart requires the camera.
    """
    n = int(rng.integers(0, cfg.max_decoys + 1)) if cfg.max_decoys else 0
    decoys: list[GtBox] = []
    for _ in range(n):
        mimic = int(rng.integers(len(CLASS_SPECS)))
        spec = CLASS_SPECS[mimic]
        scale = 1.0 + rng.uniform(-spec.jitter, spec.jitter, size=3)
        l, w, h = spec.length * scale[0], spec.width * scale[1], spec.height * scale[2]
        radius = 0.5 * np.hypot(l, w)
        for _attempt in range(100):
            x = rng.uniform(cfg.x_min + cfg.margin, cfg.x_max - cfg.margin)
            y = rng.uniform(cfg.y_min + cfg.margin, cfg.y_max - cfg.margin)
            yaw = rng.uniform(-np.pi, np.pi)
            if np.hypot(x, y) < radius + cfg.ego_clearance:
                continue
            ok = True
            for other in existing + decoys:
                r2 = 0.5 * np.hypot(other.l, other.w)
                if np.hypot(x - other.x, y - other.y) < radius + r2:
                    ok = False
                    break
            if ok:
                decoys.append(GtBox(mimic, x, y, h / 2, w, l, h, yaw))
                break
    return decoys


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------


def _remap_solid_ids(ids: np.ndarray, n_boxes: int) -> np.ndarray:
    """Solid indices >= n_boxes are decoys; map decoy j to -(10 + j)."""
    out = ids.copy()
    dec = ids >= n_boxes
    out[dec] = -(10 + (ids[dec] - n_boxes))
    return out


def generate_scene(cfg: SceneConfig, seed: int) -> SceneSample:
    """Deterministic scene from a seed: boxes, LiDAR cloud, images, depths."""
    rng = np.random.default_rng(seed)
    boxes = sample_boxes(cfg, rng)
    decoys = sample_decoys(cfg, rng, boxes)
    solids = boxes + decoys
    solid_albedo = [CLASS_SPECS[b.class_id].albedo for b in solids]
    solid_rgb = [
        CLASS_SPECS[b.class_id].rgb if i < len(boxes) else DECOY_RGB
        for i, b in enumerate(solids)
    ]

    # LiDAR: azimuth ring with a per-scene phase, fixed elevations
    phase = rng.uniform(0.0, 2 * np.pi / cfg.n_azimuth)
    az = phase + np.linspace(0, 2 * np.pi, cfg.n_azimuth, endpoint=False)
    el = np.linspace(cfg.elevation_min, cfg.elevation_max, cfg.n_elevation)
    aa, ee = np.meshgrid(az, el, indexing="ij")
    dirs = np.stack(
        [np.cos(ee) * np.cos(aa), np.cos(ee) * np.sin(aa), np.sin(ee)], axis=-1
    ).reshape(-1, 3)
    origin = np.array([0.0, 0.0, cfg.sensor_height])
    origins = np.broadcast_to(origin, dirs.shape)
    t, obj, _normals = _cast_rays(origins, dirs, solids)
    hit = np.isfinite(t) & (t <= LIDAR_MAX_RANGE) & (obj != -2)
    pts = origins[hit] + dirs[hit] * t[hit][:, None]
    albedo = np.where(
        obj[hit] == -1,
        GROUND_ALBEDO,
        np.array([GROUND_ALBEDO] + solid_albedo)[obj[hit] + 1],
    )
    intensity = np.clip(
        albedo + rng.normal(0.0, cfg.intensity_noise, size=len(pts)), 0.02, 1.0
    )
    points = np.concatenate([pts, intensity[:, None]], axis=1)

    # cameras
    calibs = default_calibs(cfg)
    images, depths, obj_maps = [], [], []
    h, w = cfg.image_height, cfg.image_width
    us, vs = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5, indexing="xy")
    pix = np.stack([us.ravel(), vs.ravel(), np.ones(h * w)], axis=-1)
    for calib in calibs:
        rays_cam = pix @ np.linalg.inv(calib.intrinsics).T  # z_cam = 1 per ray
        r = calib.rotation
        cam_center = -r.T @ calib.translation
        rays_world = rays_cam @ r
        cam_origins = np.broadcast_to(cam_center, rays_world.shape)
        t_img, obj_img, normals_img = _cast_rays(cam_origins, rays_world, solids)
        visible = np.isfinite(t_img) & (obj_img != -2)
        depth = np.where(visible, t_img, SKY_DEPTH)  # rays have unit camera depth
        rgb = _shade(obj_img, normals_img, solid_rgb)
        rgb[~visible] = SKY_RGB
        images.append(rgb.reshape(h, w, 3).transpose(2, 0, 1).copy())
        depths.append(depth.reshape(h, w).copy())
        obj_maps.append(_remap_solid_ids(obj_img, len(boxes)).reshape(h, w).copy())

    point_obj = _remap_solid_ids(obj[hit], len(boxes))
    return SceneSample(
        scene_id=seed,
        points=points,
        images=images,
        depth_maps=depths,
        calibs=calibs,
        gt_boxes=boxes,
        decoys=decoys,
        point_object_ids=point_obj,
        object_id_maps=obj_maps,
    )


# ---------------------------------------------------------------------------
# label-split protocol
# ---------------------------------------------------------------------------

_SPLIT_GROUPS = {
    0.2: (0,),
    0.4: (0, 2),
    0.6: (0, 2, 4),
    0.8: (0, 1, 2, 4),
    1.0: (0, 1, 2, 3, 4),
}


def split_labels(scene_ids, fraction: float) -> list:
    """Systematic subset of sorted scene ids by index mod 5.

    20% keeps positions i mod 5 == 0; 40% adds {2}; 60% adds {4}; 80% is
    {0, 1, 2, 4}; 100% keeps everything.  Other fractions are invalid.
    """
    key = round(float(fraction), 6)
    groups = _SPLIT_GROUPS.get(key)
    if groups is None:
        raise ContractError(
            f"fraction must be one of {sorted(_SPLIT_GROUPS)}, got {fraction}"
        )
    ids = list(scene_ids)
    if ids != sorted(ids):
        raise ContractError("scene ids must be sorted")
    return [sid for i, sid in enumerate(ids) if i % 5 in groups]


# ---------------------------------------------------------------------------
# on-disk cache: scenes/<seed>/{points.bin, cam<k>.bin, depth<k>.bin,
#                                calib.json, gt.json}
# ---------------------------------------------------------------------------


def save_scene(root, sample: SceneSample) -> Path:
    d = Path(root) / str(sample.scene_id)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "points.bin", "wb") as f:
        T.write_tensor(f, sample.points)
    for k, (img, dep) in enumerate(zip(sample.images, sample.depth_maps)):
        with open(d / f"cam{k}.bin", "wb") as f:
            T.write_tensor(f, img)
        with open(d / f"depth{k}.bin", "wb") as f:
            T.write_tensor(f, dep)
    payload = {
        "cameras": [
            {
                "intrinsics": c.intrinsics.tolist(),
                "extrinsics": c.extrinsics.tolist(),
                "width": c.width,
                "height": c.height,
            }
            for c in sample.calibs
        ]
    }
    with open(d / "calib.json", "w") as f:
        json.dump(payload, f)
    def _box_row(b):
        return {
            "class": CLASS_NAMES[b.class_id],
            "x": b.x, "y": b.y, "z": b.z,
            "w": b.w, "l": b.l, "h": b.h, "yaw": b.yaw,
        }

    with open(d / "gt.json", "w") as f:
        json.dump(
            {
                "scene_id": sample.scene_id,
                "boxes": [_box_row(b) for b in sample.gt_boxes],
                "decoys": [_box_row(b) for b in sample.decoys],
            },
            f,
        )
    return d


def load_scene(root, scene_id: int) -> SceneSample:
    d = Path(root) / str(scene_id)
    with open(d / "points.bin", "rb") as f:
        points = T.read_tensor(f)
    with open(d / "calib.json") as f:
        cams = json.load(f)["cameras"]
    calibs = [
        CameraCalib(np.array(c["intrinsics"]), np.array(c["extrinsics"]),
                    int(c["width"]), int(c["height"]))
        for c in cams
    ]
    images, depths = [], []
    for k in range(len(calibs)):
        with open(d / f"cam{k}.bin", "rb") as f:
            images.append(T.read_tensor(f))
        with open(d / f"depth{k}.bin", "rb") as f:
            depths.append(T.read_tensor(f))
    with open(d / "gt.json") as f:
        gt = json.load(f)

    def _row_box(b):
        return GtBox(CLASS_NAMES.index(b["class"]), b["x"], b["y"], b["z"],
                     b["w"], b["l"], b["h"], b["yaw"])

    boxes = [_row_box(b) for b in gt["boxes"]]
    decoys = [_row_box(b) for b in gt.get("decoys", [])]
    return SceneSample(scene_id, points, images, depths, calibs, boxes, decoys)


class ScenePool:
    """Lazy, memoized scene provider; scene i uses seed base_seed + i.

    If ``cache_dir`` (or the PF3D_SCENE_CACHE env var) is set, scenes are
    persisted there keyed by seed.
    """

    def __init__(self, cfg: SceneConfig, base_seed: int, cache_dir=None):
        self.cfg = cfg
        self.base_seed = base_seed
        env = os.environ.get("PF3D_SCENE_CACHE")
        self.cache_dir = Path(cache_dir or env) if (cache_dir or env) else None
        self._memo: dict[int, SceneSample] = {}

    def get(self, i: int) -> SceneSample:
        if i in self._memo:
            return self._memo[i]
        seed = self.base_seed + i
        if self.cache_dir is not None:
            d = self.cache_dir / str(seed)
            if (d / "gt.json").exists():
                sample = load_scene(self.cache_dir, seed)
            else:
                sample = generate_scene(self.cfg, seed)
                save_scene(self.cache_dir, sample)
        else:
            sample = generate_scene(self.cfg, seed)
        self._memo[i] = sample
        return sample
