"""Model assembly: shared backbone (encoders + cross-view mapping + fusion)
and the detection model built on top of it.

The backbone is the transferable part: fine-tuning from a pre-training
checkpoint copies every parameter under ``backbone.`` and leaves the
decoder and prediction heads freshly initialized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .decoder import DecodeResult, Decoder
from .encoders import CircConv2d, ImageEncoder, VoxelEncoder, voxelize
from .features import FeatureMap, MODALITY_CAMERA, VIEW_PV
from .fusion import build_fusion
from .geometry import (
    BevGrid,
    FrustumGrid,
    lift_pv_to_bev,
    map_bev_to_pv,
    reduce_voxels_to_bev,
    splat_pv_to_voxels,
    uniform_frustum,
)
from .nn import Conv2d, Module
from .synthscene import SceneSample
from .tensor import ContractError, Tensor

VOXELIZE_SALT = 0x5EED


def _stack(tensors: list[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    return T.concat(
        [T.reshape(t, (1,) + t.shape) for t in tensors], axis=0
    )


@dataclass
class ModelConfig:
    embed_dim: int = 32
    heads: int = 4
    window: int = 4
    ffn_hidden: int = 128
    dec_dim: int = 32
    dec_heads: int = 4
    dec_ffn: int = 64
    n_queries: int = 32
    n_classes: int = 3
    patch: int = 8
    voxel_points: int = 8
    depth_bins: int = 16
    depth_near: float = 1.0
    depth_far: float = 40.0
    dropout: float = 0.1
    head_hidden: int = 64
    noise_sigma: float = 0.05
    intensity_lambda: float = 1.0
    mask_ratio_high: float = 0.7
    mask_ratio_low: float = 0.3
    fusion_mode: str = "bev_pv"  # none | bev_only | bev_pv
    fusion_variant: str = "iif"  # concat | self_cross | base | base_nocat | iif
    decoder_mode: str = "specific"  # specific | agnostic
    # BEV grid
    x_min: float = -8.0
    y_min: float = -8.0
    s_x: float = 1.0
    s_y: float = 1.0
    n_x: int = 16
    n_y: int = 16
    z_min: float = -0.5
    z_max: float = 3.5
    n_z: int = 8

    def make_grid(self) -> BevGrid:
        return BevGrid(
            self.x_min, self.y_min, self.s_x, self.s_y,
            self.n_x, self.n_y, self.z_min, self.z_max, self.n_z,
        )


def scene_voxel_rng(scene_id: int) -> np.random.Generator:
    """Per-scene rng for voxel subsampling: stable across epochs and runs."""
    return np.random.default_rng([VOXELIZE_SALT, int(scene_id) & 0x7FFFFFFF])


class Backbone(Module):
    """Encoders, depth head, lift reduction, and both fusion blocks."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        d = cfg.embed_dim
        self.image_encoder = ImageEncoder(d, rng)
        self.voxel_encoder = VoxelEncoder(d, rng)
        self.depth_head = Conv2d(d, cfg.depth_bins, 1, rng)
        self.lift_reduce = Conv2d(cfg.n_z * d, d, 1, rng, bias=False)
        self.fusion_bev = build_fusion(
            cfg.fusion_variant, d, cfg.window, cfg.heads, cfg.ffn_hidden, rng
        )
        self.fusion_pv = build_fusion(
            cfg.fusion_variant, d, cfg.window, cfg.heads, cfg.ffn_hidden, rng
        )

    def depth_logits(self, f_pv: FeatureMap) -> Tensor:
        """[H, W, D_f] per-pixel depth distribution logits."""
        return T.permute(self.depth_head(f_pv.data), (1, 2, 0))

    def lift_cameras(
        self,
        f_pvs: list[FeatureMap],
        frustums: list[FrustumGrid],
        calibs,
        grid: BevGrid,
        depth_logits=None,
    ) -> FeatureMap:
        """Sum the per-camera voxel splats, then reduce channels once."""
        total = None
        for i, (f_pv, frustum, calib) in enumerate(zip(f_pvs, frustums, calibs)):
            dl = depth_logits[i] if depth_logits is not None else self.depth_logits(f_pv)
            vox = splat_pv_to_voxels(f_pv, dl, frustum, calib, grid)
            total = vox if total is None else total + vox
        return reduce_voxels_to_bev(total, grid, self.lift_reduce)

    def fuse(
        self,
        cfg: ModelConfig,
        f_l_bev: FeatureMap,
        f_c_pvs: list[FeatureMap] | None,
        occ,
        frustums,
        calibs,
        grid: BevGrid,
    ) -> tuple[FeatureMap, list[FeatureMap] | None]:
        """Cross-view mapping + fusion per the configured mode.

        Cameras run through the depth head and the PV fusion block as one
        batch; the per-camera splats and scatters stay per camera."""
        if cfg.fusion_mode == "none":
            return f_l_bev, None
        pv_batch = _stack([f.data for f in f_c_pvs])
        dl_batch = T.permute(self.depth_head(pv_batch), (0, 2, 3, 1))
        depth_logits = [dl_batch[i] for i in range(len(f_c_pvs))]
        f_c_bev = self.lift_cameras(f_c_pvs, frustums, calibs, grid, depth_logits)
        fused_bev = FeatureMap(
            self.fusion_bev(f_l_bev.data, f_c_bev.data), "bev", "fused", 1
        )
        if cfg.fusion_mode == "bev_only":
            return fused_bev, f_c_pvs
        inter_batch = _stack(
            [
                map_bev_to_pv(
                    f_l_bev, occ, grid, calib, (f.height, f.width)
                ).data
                for f, calib in zip(f_c_pvs, calibs)
            ]
        )
        fused_batch = self.fusion_pv(pv_batch, inter_batch)
        fused_pvs = [
            FeatureMap(fused_batch[i], VIEW_PV, "fused", f_c_pvs[i].stride)
            for i in range(len(f_c_pvs))
        ]
        return fused_bev, fused_pvs


class Detector(Module):
    """Full detection model: backbone + two-view set-prediction decoder."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng([seed, 0xD7EC])
        self.cfg = cfg
        self.grid = cfg.make_grid()
        self.backbone = Backbone(cfg, rng)
        self.decoder = Decoder(
            cfg.embed_dim,
            cfg.dec_dim,
            cfg.dec_heads,
            cfg.dec_ffn,
            cfg.n_queries,
            cfg.n_classes,
            rng,
            mode=cfg.decoder_mode,
            p_drop=cfg.dropout,
            head_hidden=cfg.head_hidden,
        )
        self._frustum_cache: dict = {}

    def frustum_for(self, height: int, width: int) -> FrustumGrid:
        key = (height, width)
        if key not in self._frustum_cache:
            self._frustum_cache[key] = uniform_frustum(
                width // self.cfg.patch,
                height // self.cfg.patch,
                self.cfg.depth_bins,
                self.cfg.depth_near,
                self.cfg.depth_far,
            )
        return self._frustum_cache[key]

    def forward(self, scene: SceneSample, rng=None) -> DecodeResult:
        """Decode one scene; ``rng`` enables dropout (training mode only)."""
        cfg = self.cfg
        grid = self.grid
        vox_batch, occ = voxelize(
            scene.points, grid, cfg.voxel_points, scene_voxel_rng(scene.scene_id)
        )
        f_l_bev = self.backbone.voxel_encoder(vox_batch, grid)

        if cfg.fusion_mode == "none":
            return self.decoder.decode_all(f_l_bev, grid, rng=rng)

        pv_batch = self.backbone.image_encoder.encode(Tensor(np.stack(scene.images)))
        f_c_pvs = [
            FeatureMap(pv_batch[i], VIEW_PV, MODALITY_CAMERA, stride=8)
            for i in range(len(scene.images))
        ]
        frustums = [
            self.frustum_for(c.height, c.width) for c in scene.calibs
        ]
        fused_bev, fused_pvs = self.backbone.fuse(
            cfg, f_l_bev, f_c_pvs, occ, frustums, scene.calibs, grid
        )
        return self.decoder.decode_all(
            fused_bev, grid, fused_pvs, frustums, scene.calibs, rng=rng
        )

    __call__ = forward
