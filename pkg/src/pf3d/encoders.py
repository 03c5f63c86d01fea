"""Tokenization and the tiny trainable encoders.

Images are cut into non-overlapping patches; point clouds are bucketed
into voxels with a fixed point budget per voxel.  The encoders are small
conv stacks: three stride-2 blocks for images (stride 8 total, matching
the patch size so one token corresponds to one PV feature cell) and a
shared per-point MLP with masked max-pooling scattered onto the BEV grid
for voxels.

All convolutions here use circular padding, which keeps constant inputs
exactly constant across spatial positions (true translation equivariance
on the torus).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .diagnostics import counters
from .features import FeatureMap, MODALITY_CAMERA, MODALITY_LIDAR, VIEW_BEV, VIEW_PV
from .geometry import BevGrid, Occupancy
from .nn import MLP, Conv2d, Module, tokens_to_map
from .tensor import ContractError, Tensor


# ---------------------------------------------------------------------------
# tokenization
# ---------------------------------------------------------------------------


@dataclass
class ImageTokenBatch:
    """Patch tokens for one camera: [n, p*p*3] with (row, col) positions."""

    patches: np.ndarray
    positions: np.ndarray
    camera_id: int
    patch: int
    grid_hw: tuple[int, int]


@dataclass
class VoxelTokenBatch:
    """Voxel tokens: [n_vox, N, 4] points (xyz + intensity), zero-padded.

    ``valid_counts[v]`` is the number of real points in voxel v; padding
    rows are zeros and excluded from every loss.
    """

    voxels: np.ndarray
    indices: np.ndarray  # [n_vox, 3] (i, j, k)
    valid_counts: np.ndarray
    n_dropped: int = 0


def patchify(image, p: int, camera_id: int = 0) -> ImageTokenBatch:
    """Cut [3, H, W] into p x p tokens, row-major; exact inverse exists."""
    img = image.data if isinstance(image, Tensor) else np.asarray(image)
    c, h, w = img.shape
    if h % p or w % p:
        raise ContractError(f"patch size {p} must divide image dims {(h, w)}")
    gh, gw = h // p, w // p
    # [C,H,W] -> [gh, gw, p, p, C] -> [n, p*p*C]
    tokens = (
        img.reshape(c, gh, p, gw, p)
        .transpose(1, 3, 2, 4, 0)
        .reshape(gh * gw, p * p * c)
    )
    rows, cols = np.divmod(np.arange(gh * gw), gw)
    return ImageTokenBatch(
        tokens.copy(), np.stack([rows, cols], axis=1), camera_id, p, (gh, gw)
    )


def unpatchify(patches: np.ndarray, grid_hw: tuple[int, int], p: int) -> np.ndarray:
    """Reassemble [n, p*p*3] row-major tokens into [3, H, W]."""
    gh, gw = grid_hw
    c = patches.shape[1] // (p * p)
    img = (
        patches.reshape(gh, gw, p, p, c)
        .transpose(4, 0, 2, 1, 3)
        .reshape(c, gh * p, gw * p)
    )
    return img.copy()


def unpatchify_t(patches: Tensor, grid_hw: tuple[int, int], p: int) -> Tensor:
    """Differentiable unpatchify for token Tensors."""
    gh, gw = grid_hw
    c = patches.shape[1] // (p * p)
    x = T.reshape(patches, (gh, gw, p, p, c))
    x = T.permute(x, (4, 0, 2, 1, 3))
    return T.reshape(x, (c, gh * p, gw * p))


def voxelize(
    points: np.ndarray, grid: BevGrid, n_points: int, rng: np.random.Generator
) -> tuple[VoxelTokenBatch, Occupancy]:
    """Bucket points into voxels with at most ``n_points`` kept per voxel.

    Overfull voxels are subsampled uniformly without replacement; underfull
    ones are zero-padded with ``valid_counts`` recording the real count.
    Points outside the grid are dropped and counted in the
    ``voxelize.dropped_points`` diagnostic.  Tokens come out sorted by flat
    voxel index, so the result is deterministic given the rng.
    """
    if n_points < 1:
        raise ContractError("n_points must be >= 1")
    points = np.asarray(points, dtype=np.float64)
    occ = np.zeros((grid.n_x, grid.n_y, grid.n_z), dtype=bool)
    if len(points) == 0:
        return (
            VoxelTokenBatch(
                np.zeros((0, n_points, 4)), np.zeros((0, 3), dtype=np.intp),
                np.zeros(0, dtype=np.intp), 0,
            ),
            Occupancy(occ),
        )
    idx, ok = grid.voxel_index(points[:, :3])
    n_dropped = int((~ok).sum())
    counters.add("voxelize.dropped_points", n_dropped)
    points, idx = points[ok], idx[ok]
    flat = (idx[:, 0] * grid.n_y + idx[:, 1]) * grid.n_z + idx[:, 2]
    order = np.argsort(flat, kind="stable")
    points, idx, flat = points[order], idx[order], flat[order]
    uniq, starts = np.unique(flat, return_index=True)
    starts = list(starts) + [len(flat)]

    voxels = np.zeros((len(uniq), n_points, 4))
    indices = np.zeros((len(uniq), 3), dtype=np.intp)
    valid = np.zeros(len(uniq), dtype=np.intp)
    for v in range(len(uniq)):
        lo, hi = starts[v], starts[v + 1]
        members = points[lo:hi]
        indices[v] = idx[lo]
        if len(members) > n_points:
            pick = rng.choice(len(members), size=n_points, replace=False)
            members = members[np.sort(pick)]
        valid[v] = len(members)
        voxels[v, : len(members)] = members
        occ[tuple(indices[v])] = True
    return VoxelTokenBatch(voxels, indices, valid, n_dropped), Occupancy(occ)


# ---------------------------------------------------------------------------
# circular padding helper
# ---------------------------------------------------------------------------


def pad_circular(x: Tensor, p: int) -> Tensor:
    """Wrap-pad the last two axes of a [..., H, W] tensor by p cells.

    Works for pads larger than the axis length (the content tiles)."""
    return T.wrap_pad2d(x, p)


class CircConv2d(Module):
    """Conv2d with circular boundary handling."""

    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0,
                 dilation=1, groups=1, bias=True):
        super().__init__()
        self.conv = Conv2d(
            c_in, c_out, kernel, rng, stride=stride, padding=0,
            dilation=dilation, groups=groups, bias=bias,
        )
        self.pad = padding

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(pad_circular(x, self.pad))


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------


class ImageEncoder(Module):
    """Three strided conv+GeLU blocks: [3, H, W] -> [d, H/8, W/8].

    ``encode`` also accepts a camera batch [B, 3, H, W] (one conv pass)."""

    def __init__(self, d: int, rng: np.random.Generator):
        super().__init__()
        widths = [3, max(8, d // 2), max(12, 3 * d // 4), d]
        self.blocks = [
            CircConv2d(widths[i], widths[i + 1], 3, rng, stride=2, padding=1)
            for i in range(3)
        ]

    def encode(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = T.gelu(block(x))
        return x

    def __call__(self, image: Tensor) -> FeatureMap:
        return FeatureMap(self.encode(image), VIEW_PV, MODALITY_CAMERA, stride=8)


class VoxelEncoder(Module):
    """Shared per-point MLP + masked max-pool, scattered onto the BEV grid,
    followed by two conv+GeLU blocks."""

    def __init__(self, d: int, rng: np.random.Generator):
        super().__init__()
        self.point_mlp = MLP([7, d, d], rng)
        self.conv1 = CircConv2d(d, d, 3, rng, padding=1)
        self.conv2 = CircConv2d(d, d, 3, rng, padding=1)
        self.d = d

    def point_features(self, batch: VoxelTokenBatch, grid: BevGrid) -> np.ndarray:
        """Per-point inputs: offsets from voxel center, normalized absolute
        position, intensity.  Padding rows are zero."""
        n_vox, n_pts, _ = batch.voxels.shape
        feats = np.zeros((n_vox, n_pts, 7))
        if n_vox == 0:
            return feats
        centers = np.stack(
            [
                grid.x_min + (batch.indices[:, 0] + 0.5) * grid.s_x,
                grid.y_min + (batch.indices[:, 1] + 0.5) * grid.s_y,
                grid.z_min + (batch.indices[:, 2] + 0.5) * grid.s_z,
            ],
            axis=-1,
        )
        span = np.array(
            [grid.x_max - grid.x_min, grid.y_max - grid.y_min, grid.z_max - grid.z_min]
        )
        mins = np.array([grid.x_min, grid.y_min, grid.z_min])
        feats[:, :, 0:3] = batch.voxels[:, :, :3] - centers[:, None, :]
        feats[:, :, 3:6] = (batch.voxels[:, :, :3] - mins) / span
        feats[:, :, 6] = batch.voxels[:, :, 3]
        mask = np.arange(n_pts)[None, :] >= batch.valid_counts[:, None]
        feats[mask] = 0.0
        return feats

    def embed_tokens(self, batch: VoxelTokenBatch, grid: BevGrid) -> Tensor:
        """[n_vox, d] per-voxel embeddings (max over valid points)."""
        n_vox, n_pts, _ = batch.voxels.shape
        if n_vox == 0:
            return Tensor(np.zeros((0, self.d)))
        feats = Tensor(self.point_features(batch, grid))
        per_point = self.point_mlp(feats)  # [n_vox, N, d]
        pad = np.arange(n_pts)[None, :] >= batch.valid_counts[:, None]
        neg = np.where(pad, -1e9, 0.0)[:, :, None]
        return T.tmax(per_point + neg, axis=1)

    def to_bev(self, emb: Tensor, indices: np.ndarray, grid: BevGrid) -> FeatureMap:
        flat = indices[:, 0] * grid.n_y + indices[:, 1]
        cells = T.scatter_rows(emb, flat, grid.n_x * grid.n_y)
        x = tokens_to_map(cells, grid.n_x, grid.n_y)
        x = T.gelu(self.conv1(x))
        x = T.gelu(self.conv2(x))
        return FeatureMap(x, VIEW_BEV, MODALITY_LIDAR, stride=1)

    def __call__(self, batch: VoxelTokenBatch, grid: BevGrid) -> FeatureMap:
        return self.to_bev(self.embed_tokens(batch, grid), batch.indices, grid)
