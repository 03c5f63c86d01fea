"""Multi-modal masked-modeling pre-training.

Image patches and LiDAR voxels are treated as interchangeable tokens.  A
coin flip picks which modality gets the high mask ratio (0.7; the other
gets 0.3); unmasked tokens receive recorded Gaussian noise.  Masked image
tokens are replaced by a learned patch of pixels before the conv encoder;
masked voxel tokens are replaced by a learned embedding after the point
MLP.  Five objectives supervise the fused features:

* masked image patch RGB reconstruction (L1),
* masked voxel point-set reconstruction (Chamfer) with a cross-modal
  pixel-intensity term riding on the same nearest-neighbor structure,
* unmasked image patch denoising (L1 against the recorded noise),
* unmasked voxel denoising (Chamfer between predicted and actual noise),
* masked patch depth prediction (scale-invariant log + relative squared).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .diagnostics import counters
from .geometry import project_to_camera
from .nn import MLP, Module
from .tensor import ContractError, Parameter, Tensor

DEPTH_FLOOR = 1e-3


# ---------------------------------------------------------------------------
# masking and noise
# ---------------------------------------------------------------------------


@dataclass
class MaskPlan:
    high_modality: str  # "image" | "voxel"
    r_hi: float
    r_lo: float
    img_masked: np.ndarray
    img_unmasked: np.ndarray
    vox_masked: np.ndarray
    vox_unmasked: np.ndarray
    n_mp: int  # masked image pixels
    n_up: int  # unmasked image pixels


def _draw(n: int, ratio: float, rng: np.random.Generator):
    count = int(np.ceil(ratio * n))
    if count == 0:
        return np.zeros(0, dtype=np.intp), np.arange(n, dtype=np.intp)
    masked = np.sort(rng.choice(n, size=count, replace=False))
    unmasked = np.setdiff1d(np.arange(n), masked)
    return masked.astype(np.intp), unmasked.astype(np.intp)


def make_mask_plan(
    n_img: int,
    n_vox: int,
    rng: np.random.Generator,
    r_hi: float = 0.7,
    r_lo: float = 0.3,
    pixels_per_token: int = 64,
) -> MaskPlan:
    """A fair coin picks the high-ratio modality; each modality masks
    ceil(r * n) tokens drawn uniformly without replacement."""
    if n_img < 1 or n_vox < 1:
        raise ContractError(f"need tokens in both modalities, got {n_img}/{n_vox}")
    high = "image" if rng.random() < 0.5 else "voxel"
    r_img = r_hi if high == "image" else r_lo
    r_vox = r_hi if high == "voxel" else r_lo
    img_m, img_u = _draw(n_img, r_img, rng)
    vox_m, vox_u = _draw(n_vox, r_vox, rng)
    return MaskPlan(
        high_modality=high,
        r_hi=r_hi,
        r_lo=r_lo,
        img_masked=img_m,
        img_unmasked=img_u,
        vox_masked=vox_m,
        vox_unmasked=vox_u,
        n_mp=len(img_m) * pixels_per_token,
        n_up=len(img_u) * pixels_per_token,
    )


@dataclass
class NoiseRecord:
    noise: np.ndarray  # exactly what was added, elementwise
    sigma: float


def inject_noise(
    tokens: np.ndarray, sigma: float, rng: np.random.Generator
) -> tuple[np.ndarray, NoiseRecord]:
    """tokens + N(0, sigma^2); the record stores the noise bit-exactly."""
    tokens = np.asarray(tokens, dtype=np.float64)
    noise = rng.normal(0.0, sigma, size=tokens.shape) if sigma > 0 else np.zeros_like(tokens)
    return tokens + noise, NoiseRecord(noise, sigma)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _pairwise_sq(a, b) -> Tensor:
    """[n, d] x [m, d] -> [n, m] squared euclidean distances (Tensor)."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    n, d = a.shape
    m = b.shape[0]
    diff = T.reshape(a, (n, 1, d)) - T.reshape(b, (1, m, d))
    return T.tsum(T.square(diff), axis=2)


def chamfer_loss(p_gt, p_rec) -> Tensor:
    """Symmetric Chamfer: mean-of-min squared distances, both directions,
    summed.  Both sets must be non-empty."""
    p_gt = p_gt if isinstance(p_gt, Tensor) else Tensor(p_gt)
    p_rec = p_rec if isinstance(p_rec, Tensor) else Tensor(p_rec)
    if p_gt.shape[0] == 0 or p_rec.shape[0] == 0:
        raise ContractError("chamfer_loss needs non-empty point sets")
    d = _pairwise_sq(p_gt, p_rec)
    return T.mean(T.tmin(d, axis=1)) + T.mean(T.tmin(d, axis=0))


def intensity_chamfer_loss(
    gt_pts,
    gt_int,
    rec_pts,
    rec_int,
    lam: float = 1.0,
    gt_int_valid: np.ndarray | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Chamfer with an intensity term riding on the geometric neighbor.

    The nearest neighbor is chosen by geometry alone; the per-pair term is
    squared distance + lam * |intensity difference|.  Returns
    (total, geometric part, intensity part).  ``gt_int_valid`` masks ground
    truth points without an intensity target out of the intensity term.
    """
    gt_pts = gt_pts if isinstance(gt_pts, Tensor) else Tensor(gt_pts)
    rec_pts = rec_pts if isinstance(rec_pts, Tensor) else Tensor(rec_pts)
    gt_i = gt_int if isinstance(gt_int, Tensor) else Tensor(gt_int)
    rec_i = rec_int if isinstance(rec_int, Tensor) else Tensor(rec_int)
    n, m = gt_pts.shape[0], rec_pts.shape[0]
    if n == 0 or m == 0:
        raise ContractError("intensity_chamfer_loss needs non-empty sets")
    valid = np.ones(n) if gt_int_valid is None else gt_int_valid.astype(np.float64)

    d = _pairwise_sq(gt_pts, rec_pts)
    j_fwd = np.argmin(d.data, axis=1)  # per gt point
    j_bwd = np.argmin(d.data, axis=0)  # per rec point
    geom = T.mean(T.take_along(d, j_fwd[:, None], axis=1)) + T.mean(
        T.take_along(d, j_bwd[None, :], axis=0)
    )
    int_fwd = (gt_i - T.gather_rows(rec_i, j_fwd)).abs() * valid
    int_bwd = (rec_i - gt_i.data[j_bwd]).abs() * valid[j_bwd]
    intensity = (T.mean(int_fwd) + T.mean(int_bwd)) * lam
    return geom + intensity, geom, intensity


def recon_loss_image(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean absolute error over masked pixels; 0 (with a warning) if none."""
    if pred.size == 0:
        warnings.warn("recon_loss_image: no masked pixels", stacklevel=2)
        return Tensor(0.0)
    return T.mean((pred - target).abs())


def denoise_loss_image(pred: Tensor, record: NoiseRecord) -> Tensor:
    """Mean absolute error between predicted and recorded noise."""
    if pred.size == 0:
        warnings.warn("denoise_loss_image: no unmasked pixels", stacklevel=2)
        return Tensor(0.0)
    return T.mean((pred - record.noise).abs())


def denoise_loss_voxel(pred_noise, actual_noise) -> Tensor:
    """Symmetric Chamfer between predicted and actual per-point noise sets."""
    return chamfer_loss(actual_noise, pred_noise)


def depth_loss(d_true: np.ndarray, d_pred) -> Tensor:
    """Scale-invariant log error plus squared relative error.

    mean((log d - log dhat)^2) - mean(log d - log dhat)^2
    + mean((d - dhat)/d)^2.  Nonpositive depths clamp to 1e-3 m (counted).
    """
    d_true = np.asarray(d_true, dtype=np.float64)
    n_clamped = int((d_true <= 0).sum())
    if n_clamped:
        counters.add("depth_loss.clamped_targets", n_clamped)
        d_true = np.maximum(d_true, DEPTH_FLOOR)
    d_pred = d_pred if isinstance(d_pred, Tensor) else Tensor(d_pred)
    counters.add("depth_loss.clamped_preds", int((d_pred.data <= 0).sum()))
    d_pred = T.clamp_min(d_pred, DEPTH_FLOOR)
    diff = np.log(d_true) - T.log(d_pred)
    rel = (d_true - d_pred) * (1.0 / d_true)
    return T.mean(T.square(diff)) - T.square(T.mean(diff)) + T.square(T.mean(rel))


# ---------------------------------------------------------------------------
# grouped chamfer (vectorized over voxels with equal point counts)
# ---------------------------------------------------------------------------


def _batched_chamfer(
    gt: np.ndarray,
    rec: Tensor,
    gt_int: np.ndarray | None = None,
    rec_int: Tensor | None = None,
    int_valid: np.ndarray | None = None,
    lam: float = 1.0,
):
    """Chamfer over a batch of equally-sized set pairs.

    gt: [k, c, 3]; rec: [k, n, 3] Tensor.  Returns (geom [k] Tensor,
    intensity [k] Tensor or None).  Nearest neighbors by geometry only.
    """
    k, c, _ = gt.shape
    n = rec.shape[1]
    diff = Tensor(gt).reshape(k, c, 1, 3) - T.reshape(rec, (k, 1, n, 3))
    d = T.tsum(T.square(diff), axis=3)  # [k, c, n]
    j_fwd = np.argmin(d.data, axis=2)  # [k, c]
    j_bwd = np.argmin(d.data, axis=1)  # [k, n]
    fwd = T.mean(T.take_along(d, j_fwd[:, :, None], axis=2), axis=(1, 2))
    bwd = T.mean(T.take_along(d, j_bwd[:, None, :], axis=1), axis=(1, 2))
    geom = fwd + bwd
    if gt_int is None:
        return geom, None
    valid = np.ones((k, c)) if int_valid is None else int_valid.astype(np.float64)
    rec_at_fwd = T.take_along(rec_int, j_fwd, axis=1)  # [k, c]
    int_fwd = T.mean((rec_at_fwd - gt_int).abs() * valid, axis=1)
    gt_at_bwd = np.take_along_axis(gt_int, j_bwd, axis=1)  # [k, n]
    val_at_bwd = np.take_along_axis(valid, j_bwd, axis=1)
    int_bwd = T.mean((rec_int - gt_at_bwd).abs() * val_at_bwd, axis=1)
    return geom, (int_fwd + int_bwd) * lam


# ---------------------------------------------------------------------------
# pre-training model and step
# ---------------------------------------------------------------------------


def pixel_intensity_targets(points: np.ndarray, images, calibs):
    """Grayscale image intensity at each point's projection.

    The first camera with a valid hit wins; points no camera sees get
    valid = False and a zero target.
    """
    k = len(points)
    target = np.zeros(k)
    valid = np.zeros(k, dtype=bool)
    for img, calib in zip(images, calibs):
        if not (~valid).any():
            break
        uv, _, ok = project_to_camera(points, calib)
        col = np.floor(uv[:, 0]).astype(int)
        row = np.floor(uv[:, 1]).astype(int)
        h, w = img.shape[1], img.shape[2]
        hit = ok & (col >= 0) & (col < w) & (row >= 0) & (row < h) & (~valid)
        if hit.any():
            gray = img[:, row[hit], col[hit]].mean(axis=0)
            target[hit] = gray
            valid[hit] = True
    return target, valid


class PretrainModel(Module):
    """Backbone plus masked-modeling heads and mask embeddings."""

    def __init__(self, cfg, seed: int = 0):
        super().__init__()
        from .model import Backbone

        rng = np.random.default_rng([seed, 0x93E7])
        self.cfg = cfg
        self.grid = cfg.make_grid()
        self.backbone = Backbone(cfg, rng)
        d = cfg.embed_dim
        p3 = cfg.patch * cfg.patch * 3
        n = cfg.voxel_points
        h = cfg.head_hidden
        self.mask_patch = Parameter(rng.normal(0.0, 0.02, size=p3))
        self.mask_voxel = Parameter(rng.normal(0.0, 0.02, size=d))
        self.head_img_recon = MLP([d, h, p3], rng)
        self.head_img_noise = MLP([d, h, p3], rng)
        self.head_vox_recon = MLP([d, h, n * 4], rng)
        self.head_vox_noise = MLP([d, h, n * 3], rng)
        self.head_depth = MLP([d, h, 1], rng)


def _masked_token_matrix(
    patches: np.ndarray,
    masked_local: np.ndarray,
    unmasked_local: np.ndarray,
    unmasked_values: np.ndarray,
    mask_patch,
) -> Tensor:
    """Assemble a camera's token matrix: noised originals at unmasked rows,
    the learned mask patch at masked rows."""
    n_tok, width = patches.shape
    parts = []
    if len(unmasked_local):
        parts.append(T.scatter_rows(Tensor(unmasked_values), unmasked_local, n_tok))
    if len(masked_local):
        tiled = T.broadcast_to(
            T.reshape(mask_patch, (1, width)), (len(masked_local), width)
        )
        parts.append(T.scatter_rows(tiled, masked_local, n_tok))
    out = parts[0]
    for extra in parts[1:]:
        out = out + extra
    return out


def pretrain_step(scene, model, rng: np.random.Generator):
    """One scene through the masked-modeling pipeline.

    Returns (total loss Tensor, breakdown dict of floats).  The total is
    the exact sum of the six logged components.
    """
    from .encoders import patchify, unpatchify_t, voxelize
    from .geometry import uniform_frustum
    from .nn import map_to_tokens

    cfg = model.cfg
    grid = model.grid
    p = cfg.patch
    sigma = cfg.noise_sigma
    if cfg.fusion_mode == "none":
        raise ContractError("pre-training needs both modalities (fusion_mode != none)")

    # ---- tokenize ----------------------------------------------------------
    tok_batches = [patchify(img, p, cam) for cam, img in enumerate(scene.images)]
    patches_all = np.concatenate([b.patches for b in tok_batches], axis=0)
    n_per_cam = [len(b.patches) for b in tok_batches]
    cam_offsets = np.cumsum([0] + n_per_cam)
    vox_batch, occ = voxelize(scene.points, grid, cfg.voxel_points, rng)
    n_vox = len(vox_batch.voxels)
    if n_vox == 0:
        raise ContractError("scene produced no voxel tokens")

    # ---- mask + noise ------------------------------------------------------
    plan = make_mask_plan(
        len(patches_all), n_vox, rng, cfg.mask_ratio_high, cfg.mask_ratio_low,
        pixels_per_token=p * p,
    )
    noised_unm_patches, img_record = inject_noise(
        patches_all[plan.img_unmasked], sigma, rng
    )
    vox_unm = vox_batch.voxels[plan.vox_unmasked]
    _, vox_rec_raw = inject_noise(vox_unm[:, :, :3], sigma, rng)
    unm_counts = vox_batch.valid_counts[plan.vox_unmasked]
    pad = np.arange(cfg.voxel_points)[None, :] >= unm_counts[:, None]
    vox_noise = vox_rec_raw.noise.copy()
    vox_noise[pad] = 0.0
    vox_record = NoiseRecord(vox_noise, sigma)

    # ---- encode images (masked tokens -> learned patch) --------------------
    from .features import FeatureMap, MODALITY_CAMERA, VIEW_PV
    from .model import _stack

    imgs_t = []
    for cam, batch in enumerate(tok_batches):
        lo, hi = cam_offsets[cam], cam_offsets[cam + 1]
        m_here = plan.img_masked[(plan.img_masked >= lo) & (plan.img_masked < hi)] - lo
        u_sel = (plan.img_unmasked >= lo) & (plan.img_unmasked < hi)
        u_here = plan.img_unmasked[u_sel] - lo
        tokens = _masked_token_matrix(
            batch.patches, m_here, u_here, noised_unm_patches[u_sel],
            model.mask_patch,
        )
        imgs_t.append(unpatchify_t(tokens, batch.grid_hw, p))
    pv_batch = model.backbone.image_encoder.encode(_stack(imgs_t))
    f_c_pvs = [
        FeatureMap(pv_batch[i], VIEW_PV, MODALITY_CAMERA, stride=8)
        for i in range(len(imgs_t))
    ]

    # ---- encode voxels (masked tokens -> learned embedding) ----------------
    noised_voxels = vox_batch.voxels.copy()
    noised_voxels[plan.vox_unmasked, :, :3] = (
        vox_unm[:, :, :3] + vox_record.noise
    )
    noised_batch = type(vox_batch)(
        noised_voxels, vox_batch.indices, vox_batch.valid_counts, vox_batch.n_dropped
    )
    emb = model.backbone.voxel_encoder.embed_tokens(noised_batch, grid)
    d = cfg.embed_dim
    parts = [
        T.scatter_rows(T.gather_rows(emb, plan.vox_unmasked), plan.vox_unmasked, n_vox)
    ]
    if len(plan.vox_masked):
        tiled = T.broadcast_to(
            T.reshape(model.mask_voxel, (1, d)), (len(plan.vox_masked), d)
        )
        parts.append(T.scatter_rows(tiled, plan.vox_masked, n_vox))
    emb_final = parts[0] if len(parts) == 1 else parts[0] + parts[1]
    f_l_bev = model.backbone.voxel_encoder.to_bev(emb_final, vox_batch.indices, grid)

    # ---- cross-view + fusion ------------------------------------------------
    frustums = [
        uniform_frustum(
            c.width // p, c.height // p, cfg.depth_bins, cfg.depth_near, cfg.depth_far
        )
        for c in scene.calibs
    ]
    fused_bev, fused_pvs = model.backbone.fuse(
        cfg, f_l_bev, f_c_pvs, occ, frustums, scene.calibs, grid
    )

    # ---- heads --------------------------------------------------------------
    pv_tokens = T.concat([map_to_tokens(f.data) for f in fused_pvs], axis=0)
    bev_tokens = map_to_tokens(fused_bev.data)

    m_feats = T.gather_rows(pv_tokens, plan.img_masked)
    loss_recon_img = recon_loss_image(
        model.head_img_recon(m_feats), patches_all[plan.img_masked]
    )
    u_feats = T.gather_rows(pv_tokens, plan.img_unmasked)
    loss_den_img = denoise_loss_image(model.head_img_noise(u_feats), img_record)

    # per-patch mean depth targets from the renderer
    depth_means = np.concatenate(
        [
            dm.reshape(b.grid_hw[0], p, b.grid_hw[1], p).mean(axis=(1, 3)).reshape(-1)
            for dm, b in zip(scene.depth_maps, tok_batches)
        ]
    )
    d_pred = T.exp(T.reshape(model.head_depth(m_feats), (-1,)))
    loss_depth = depth_loss(depth_means[plan.img_masked], d_pred)

    # voxel-side features
    cell_of_vox = vox_batch.indices[:, 0] * grid.n_y + vox_batch.indices[:, 1]
    vox_feats = T.gather_rows(bev_tokens, cell_of_vox)
    half = np.array([grid.s_x / 2, grid.s_y / 2, grid.s_z / 2])
    centers = np.stack(
        [
            grid.x_min + (vox_batch.indices[:, 0] + 0.5) * grid.s_x,
            grid.y_min + (vox_batch.indices[:, 1] + 0.5) * grid.s_y,
            grid.z_min + (vox_batch.indices[:, 2] + 0.5) * grid.s_z,
        ],
        axis=-1,
    )

    # masked voxel reconstruction + cross-modal intensity
    n_vp = cfg.voxel_points
    m_idx = plan.vox_masked
    m_vox_feats = T.gather_rows(vox_feats, m_idx)
    pred = T.reshape(model.head_vox_recon(m_vox_feats), (len(m_idx), n_vp, 4))
    pred_xyz = pred[:, :, 0:3]
    pred_int = pred[:, :, 3]
    m_counts = vox_batch.valid_counts[m_idx]
    geom_sum = None
    int_sum = None
    for c in np.unique(m_counts):
        sel = np.flatnonzero(m_counts == c)
        gv = m_idx[sel]
        gt_local = np.stack(
            [
                (vox_batch.voxels[v, :c, :3] - centers[v]) / half
                for v in gv
            ]
        )
        flat_pts = vox_batch.voxels[gv, :c, :3].reshape(-1, 3)
        tgt, tgt_valid = pixel_intensity_targets(flat_pts, scene.images, scene.calibs)
        gt_int = tgt.reshape(len(gv), c)
        gt_valid = tgt_valid.reshape(len(gv), c)
        geom, inten = _batched_chamfer(
            gt_local,
            T.gather_rows(pred_xyz, sel),
            gt_int,
            T.gather_rows(pred_int, sel),
            gt_valid,
            cfg.intensity_lambda,
        )
        gs = T.tsum(geom)
        is_ = T.tsum(inten)
        geom_sum = gs if geom_sum is None else geom_sum + gs
        int_sum = is_ if int_sum is None else int_sum + is_
    if geom_sum is None:
        loss_recon_vox = Tensor(0.0)
        loss_int = Tensor(0.0)
    else:
        loss_recon_vox = geom_sum * (1.0 / len(m_idx))
        loss_int = int_sum * (1.0 / len(m_idx))

    # unmasked voxel denoising
    u_idx = plan.vox_unmasked
    if len(u_idx):
        u_vox_feats = T.gather_rows(vox_feats, u_idx)
        pred_noise = T.reshape(
            model.head_vox_noise(u_vox_feats), (len(u_idx), n_vp, 3)
        )
        den_sum = None
        for c in np.unique(unm_counts):
            sel = np.flatnonzero(unm_counts == c)
            actual = vox_record.noise[sel, :c, :]
            geom, _ = _batched_chamfer(actual, T.gather_rows(pred_noise, sel))
            s = T.tsum(geom)
            den_sum = s if den_sum is None else den_sum + s
        loss_den_vox = den_sum * (1.0 / len(u_idx))
    else:
        warnings.warn("pretrain_step: no unmasked voxels", stacklevel=2)
        loss_den_vox = Tensor(0.0)

    total = (
        loss_recon_img + loss_recon_vox + loss_den_img + loss_den_vox
        + loss_int + loss_depth
    )
    breakdown = {
        "L_recon_img": loss_recon_img.item(),
        "L_recon_vox": loss_recon_vox.item(),
        "L_den_img": loss_den_img.item(),
        "L_den_vox": loss_den_vox.item(),
        "L_xmodal_int": loss_int.item(),
        "L_depth": loss_depth.item(),
        "total": total.item(),
    }
    return total, breakdown
