"""Calibrated-sensor coordinate transforms.

BEV grid <-> metric space, pinhole projection/unprojection, the BEV->PV
occupancy-guided feature mapping, and the PV->BEV lift-splat with a
discrete per-pixel depth distribution.

Conventions
-----------
* LiDAR frame: x forward, y left, z up, meters.  All world points and boxes
  live here.
* Camera frame: x right, y down, z forward (OpenCV).  ``extrinsics`` is the
  4x4 rigid transform taking LiDAR-frame points to the camera frame.
* BEV cell (i, j) covers [x_min + i*s_x, x_min + (i+1)*s_x) x [...]; the
  metric location used when projecting a cell is its (i*s_x + x_min,
  j*s_y + y_min) corner, with z at the occupied bin's center height.
* Flat voxel index = (i * n_y + j) * n_z + k; flat BEV cell = i * n_y + j;
  flat PV cell = row * W + col.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .features import FeatureMap, MODALITY_CAMERA, MODALITY_LIDAR, VIEW_BEV, VIEW_PV
from .nn import map_to_tokens, tokens_to_map
from .tensor import ContractError, ShapeError, Tensor

EPS_DEPTH = 1e-6


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass
class CameraCalib:
    """Pinhole intrinsics (3x3, pixels) + LiDAR->camera extrinsics (4x4)."""

    intrinsics: np.ndarray
    extrinsics: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        self.extrinsics = np.asarray(self.extrinsics, dtype=np.float64)
        k, e = self.intrinsics, self.extrinsics
        if k.shape != (3, 3) or e.shape != (4, 4):
            raise ShapeError(
                f"calibration shapes: intrinsics {k.shape}, extrinsics {e.shape}"
            )
        if not (k[0, 0] > 0 and k[1, 1] > 0):
            raise ContractError("focal lengths must be positive")
        if abs(k[1, 0]) > 1e-12 or abs(k[2, 0]) > 1e-12 or abs(k[2, 1]) > 1e-12:
            raise ContractError("intrinsics must be upper-triangular")
        r = e[:3, :3]
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise ContractError("extrinsic rotation is not orthonormal")
        if np.linalg.det(r) < 0:
            raise ContractError("extrinsic rotation must be proper (det +1)")

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsics[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.extrinsics[:3, 3]


@dataclass
class BevGrid:
    """Ground-plane grid with a vertical extent split into n_z bins."""

    x_min: float
    y_min: float
    s_x: float
    s_y: float
    n_x: int
    n_y: int
    z_min: float
    z_max: float
    n_z: int

    def __post_init__(self):
        if self.s_x <= 0 or self.s_y <= 0:
            raise ContractError("cell sizes must be positive")

    @property
    def s_z(self) -> float:
        return (self.z_max - self.z_min) / self.n_z

    @property
    def x_max(self) -> float:
        return self.x_min + self.n_x * self.s_x

    @property
    def y_max(self) -> float:
        return self.y_min + self.n_y * self.s_y

    def voxel_index(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(indices [n,3], in_range [n]) for points [n,3]."""
        rel = (pts - np.array([self.x_min, self.y_min, self.z_min])) / np.array(
            [self.s_x, self.s_y, self.s_z]
        )
        idx = np.floor(rel).astype(np.intp)
        ok = (
            (idx[:, 0] >= 0)
            & (idx[:, 0] < self.n_x)
            & (idx[:, 1] >= 0)
            & (idx[:, 1] < self.n_y)
            & (idx[:, 2] >= 0)
            & (idx[:, 2] < self.n_z)
        )
        return idx, ok


@dataclass
class FrustumGrid:
    """Feature-plane cells x discrete depth bins for one camera."""

    w_f: int
    h_f: int
    depth_values: np.ndarray

    def __post_init__(self):
        self.depth_values = np.asarray(self.depth_values, dtype=np.float64)
        dv = self.depth_values
        if dv.ndim != 1 or len(dv) == 0:
            raise ShapeError(f"depth_values must be 1-D, got shape {dv.shape}")
        if not (np.all(dv > 0) and np.all(np.diff(dv) > 0)):
            raise ContractError("depth_values must be positive and increasing")

    @property
    def d_f(self) -> int:
        return len(self.depth_values)


def uniform_frustum(w_f: int, h_f: int, d_f: int, d_near: float, d_far: float) -> FrustumGrid:
    return FrustumGrid(w_f, h_f, np.linspace(d_near, d_far, d_f))


@dataclass
class Occupancy:
    """Boolean [n_x, n_y, n_z] marking voxels holding at least one point."""

    grid: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=bool)


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------


def project_to_camera(points, calib: CameraCalib):
    """Project LiDAR-frame points to pixel coordinates.

    Returns (uv [...,2], depth [...], valid [...]); ``valid`` is False for
    points at or behind the image plane (camera z <= 1e-6 m), whose uv/depth
    entries are meaningless rather than raising.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    cam = pts @ calib.rotation.T + calib.translation
    z = cam[..., 2]
    valid = z > EPS_DEPTH
    zs = np.where(valid, z, 1.0)
    proj = cam @ calib.intrinsics.T
    uv = proj[..., :2] / zs[..., None]
    return uv, z, valid


def unproject_from_camera(uv, depth, calib: CameraCalib) -> np.ndarray:
    """Inverse of :func:`project_to_camera` at a known camera-frame depth."""
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    depth = np.asarray(depth, dtype=np.float64)
    ones = np.ones(uv.shape[:-1] + (1,))
    hom = np.concatenate([uv, ones], axis=-1)
    rays = hom @ np.linalg.inv(calib.intrinsics).T
    cam = rays * depth[..., None]
    return (cam - calib.translation) @ calib.rotation


def homogeneous_image_point(u, v, d) -> np.ndarray:
    """Homogeneous frustum coordinates (u*d, v*d, d, 1) for grid points."""
    u, v, d = np.broadcast_arrays(
        np.asarray(u, dtype=np.float64),
        np.asarray(v, dtype=np.float64),
        np.asarray(d, dtype=np.float64),
    )
    return np.stack([u * d, v * d, d, np.ones_like(d)], axis=-1)


def make_frustum_points(frustum: FrustumGrid, calib: CameraCalib) -> np.ndarray:
    """3-D LiDAR-frame points for every (cell, depth bin) of the frustum.

    Cells are sampled at their pixel centers.  Output is
    [h_f * w_f * d_f, 3], ordered row-major over (row, col) with depth
    fastest: flat = (row * w_f + col) * d_f + k.
    """
    su = calib.width / frustum.w_f
    sv = calib.height / frustum.h_f
    us = (np.arange(frustum.w_f) + 0.5) * su
    vs = (np.arange(frustum.h_f) + 0.5) * sv
    v, u, d = np.meshgrid(vs, us, frustum.depth_values, indexing="ij")
    hom = homogeneous_image_point(u.ravel(), v.ravel(), d.ravel())
    cam = hom[:, :3] @ np.linalg.inv(calib.intrinsics).T
    return (cam - calib.translation) @ calib.rotation


def make_bev_points(grid: BevGrid, heights) -> np.ndarray:
    """Metric 3-D points for every BEV cell at every requested height.

    Cell (i, j) maps to (x_min + i*s_x, y_min + j*s_y, h); output is
    [n_x * n_y * n_h, 3] ordered (i, j, h) with h fastest.
    """
    heights = np.atleast_1d(np.asarray(heights, dtype=np.float64))
    if heights.size < 1:
        raise ContractError("need at least one height")
    xs = grid.x_min + np.arange(grid.n_x) * grid.s_x
    ys = grid.y_min + np.arange(grid.n_y) * grid.s_y
    x, y, h = np.meshgrid(xs, ys, heights, indexing="ij")
    return np.stack([x.ravel(), y.ravel(), h.ravel()], axis=-1)


# ---------------------------------------------------------------------------
# BEV -> PV mapping
# ---------------------------------------------------------------------------


def map_bev_to_pv(
    fmap: FeatureMap,
    occ: Occupancy,
    grid: BevGrid,
    calib: CameraCalib,
    pv_shape: tuple[int, int],
) -> FeatureMap:
    """Scatter BEV features into a camera's PV grid via occupied voxels.

    Every occupied z-bin of every BEV column contributes a 3-D point at the
    bin's center height; points projecting onto the image scatter that
    column's feature vector into the hit PV cell.  Collisions average;
    cells nobody hits stay zero.  Off-image / behind-camera projections are
    silently dropped.
    """
    c, nx, ny = fmap.data.shape
    if (nx, ny) != (occ.grid.shape[0], occ.grid.shape[1]) or (nx, ny) != (
        grid.n_x,
        grid.n_y,
    ):
        raise ShapeError(
            f"BEV feature {fmap.data.shape} vs occupancy {occ.grid.shape} "
            f"vs grid ({grid.n_x}, {grid.n_y})"
        )
    h_pv, w_pv = pv_shape
    stride_u = calib.width / w_pv
    stride_v = calib.height / h_pv

    occ_idx = np.argwhere(occ.grid)  # [m, 3] (i, j, k)
    out_rows = h_pv * w_pv
    if len(occ_idx) == 0:
        zero = Tensor(np.zeros((c, h_pv, w_pv)))
        return FeatureMap(zero, VIEW_PV, fmap.modality, stride=int(round(stride_u)))

    pts = np.stack(
        [
            grid.x_min + occ_idx[:, 0] * grid.s_x,
            grid.y_min + occ_idx[:, 1] * grid.s_y,
            grid.z_min + (occ_idx[:, 2] + 0.5) * grid.s_z,
        ],
        axis=-1,
    )
    uv, _, valid = project_to_camera(pts, calib)
    col = np.floor(uv[:, 0] / stride_u).astype(np.intp)
    row = np.floor(uv[:, 1] / stride_v).astype(np.intp)
    keep = valid & (col >= 0) & (col < w_pv) & (row >= 0) & (row < h_pv)
    if not np.any(keep):
        zero = Tensor(np.zeros((c, h_pv, w_pv)))
        return FeatureMap(zero, VIEW_PV, fmap.modality, stride=int(round(stride_u)))

    src_cell = occ_idx[keep, 0] * ny + occ_idx[keep, 1]
    dst_cell = row[keep] * w_pv + col[keep]

    tokens = map_to_tokens(fmap.data)  # [nx*ny, C]
    gathered = T.gather_rows(tokens, src_cell)
    summed = T.scatter_rows(gathered, dst_cell, out_rows)
    counts = np.bincount(dst_cell, minlength=out_rows).astype(np.float64)
    meaned = summed * (1.0 / np.maximum(counts, 1.0))[:, None]
    return FeatureMap(
        tokens_to_map(meaned, h_pv, w_pv),
        VIEW_PV,
        fmap.modality,
        stride=int(round(stride_u)),
    )


# ---------------------------------------------------------------------------
# PV -> BEV lift-splat
# ---------------------------------------------------------------------------


def frustum_voxel_indices(
    frustum: FrustumGrid, calib: CameraCalib, grid: BevGrid
) -> tuple[np.ndarray, np.ndarray]:
    """(flat voxel index, in-range mask) per frustum sample.

    Sample ordering matches :func:`make_frustum_points`.
    """
    pts = make_frustum_points(frustum, calib)
    vox, ok = grid.voxel_index(pts)
    flat = (vox[:, 0] * grid.n_y + vox[:, 1]) * grid.n_z + vox[:, 2]
    return np.where(ok, flat, 0), ok


def splat_pv_to_voxels(
    fmap: FeatureMap,
    depth_logits: Tensor,
    frustum: FrustumGrid,
    calib: CameraCalib,
    grid: BevGrid,
) -> Tensor:
    """Depth-weighted sum-pool of PV features into the voxel grid.

    ``depth_logits`` is [H, W, D_f]; its softmax along the last axis is the
    per-pixel depth distribution.  Returns the dense voxel tensor
    [n_x * n_y * n_z, C]; out-of-range frustum samples are dropped.
    """
    c, h, w = fmap.data.shape
    if depth_logits.shape != (h, w, frustum.d_f):
        raise ShapeError(
            f"depth logits {depth_logits.shape} vs PV {fmap.data.shape} "
            f"with {frustum.d_f} depth bins"
        )
    if (h, w) != (frustum.h_f, frustum.w_f):
        raise ShapeError(
            f"PV spatial {(h, w)} vs frustum ({frustum.h_f}, {frustum.w_f})"
        )
    d_f = frustum.d_f
    probs = T.reshape(T.softmax(depth_logits, axis=-1), (h * w * d_f, 1))
    tokens = map_to_tokens(fmap.data)  # [h*w, C]
    pixel_of_sample = np.repeat(np.arange(h * w), d_f)
    feats = T.gather_rows(tokens, pixel_of_sample)  # [h*w*d_f, C]
    weighted = feats * probs

    flat_idx, ok = frustum_voxel_indices(frustum, calib, grid)
    keep = np.flatnonzero(ok)
    kept = T.gather_rows(weighted, keep)
    n_vox = grid.n_x * grid.n_y * grid.n_z
    return T.scatter_rows(kept, flat_idx[keep], n_vox)


def reduce_voxels_to_bev(voxels: Tensor, grid: BevGrid, reduce_conv) -> FeatureMap:
    """Reshape [n_x*n_y*n_z, C] voxels to [n_z*C, n_x, n_y] and apply the
    learned channel-reduction convolution back to C channels."""
    n_vox, c = voxels.shape
    stacked = T.reshape(voxels, (grid.n_x, grid.n_y, grid.n_z * c))
    as_map = T.permute(stacked, (2, 0, 1))
    reduced = reduce_conv(as_map)
    return FeatureMap(reduced, VIEW_BEV, MODALITY_CAMERA, stride=1)


def lift_pv_to_bev(
    fmap: FeatureMap,
    depth_logits: Tensor,
    frustum: FrustumGrid,
    calib: CameraCalib,
    grid: BevGrid,
    reduce_conv,
) -> FeatureMap:
    """Lift one camera's PV features into BEV space.

    Composition of :func:`splat_pv_to_voxels` and
    :func:`reduce_voxels_to_bev`.  ``reduce_conv`` must be bias-free so the
    whole mapping stays linear in the features.
    """
    return reduce_voxels_to_bev(
        splat_pv_to_voxels(fmap, depth_logits, frustum, calib, grid),
        grid,
        reduce_conv,
    )


# ---------------------------------------------------------------------------
# calibration file I/O
# ---------------------------------------------------------------------------


def save_calibs(path, calibs: list[CameraCalib]) -> None:
    payload = {
        "cameras": [
            {
                "intrinsics": c.intrinsics.tolist(),
                "extrinsics": c.extrinsics.tolist(),
                "width": c.width,
                "height": c.height,
            }
            for c in calibs
        ]
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=1)


def load_calibs(path) -> list[CameraCalib]:
    with open(path) as f:
        payload = json.load(f)
    return [
        CameraCalib(
            np.array(c["intrinsics"]),
            np.array(c["extrinsics"]),
            int(c["width"]),
            int(c["height"]),
        )
        for c in payload["cameras"]
    ]
