"""Set-prediction decoding over fused BEV and PV features.

Queries start from learnable anchor points in normalized 3-D coordinates,
refine independently against each view's 3-D position-aware features for
two layers, then jointly (concatenated queries against concatenated cell
tokens) for two more.  Shared prediction heads run after every layer (deep
supervision); training matches predictions to ground truth one-to-one with
a Hungarian assignment under a cost mirroring the loss: weighted
classification probability plus L1 box distance in the normalized box
parameterization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .features import FeatureMap
from .geometry import BevGrid, CameraCalib, FrustumGrid, make_bev_points, make_frustum_points
from .nn import Conv2d, LayerNorm, Linear, MLP, Module, map_to_tokens
from .synthscene import GtBox
from .tensor import ContractError, Parameter, Tensor


# ---------------------------------------------------------------------------
# configuration / result types
# ---------------------------------------------------------------------------


@dataclass
class DetectionLossConfig:
    lambda_cls: float = 2.0
    lambda_reg: float = 0.25
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if self.lambda_cls <= 0 or self.lambda_reg <= 0:
            raise ContractError("loss weights must be positive")


@dataclass
class PredictionSet:
    """Raw per-layer predictions for one scene (tensors keep gradients)."""

    stage: str
    logits: Tensor  # [n_q, n_classes]
    center_norm: Tensor  # [n_q, 3] in (0, 1)
    log_size: Tensor  # [n_q, 3]
    sin_cos: Tensor  # [n_q, 2], unnormalized

    @property
    def n_queries(self) -> int:
        return self.logits.shape[0]

    def box_vector(self) -> np.ndarray:
        return np.concatenate(
            [self.center_norm.data, self.log_size.data, self.sin_cos.data], axis=1
        )


@dataclass
class Detection:
    """One decoded box: metric center/size, yaw, class probabilities."""

    class_id: int
    score: float
    box: np.ndarray  # (x, y, z, w, l, h, yaw)
    probs: np.ndarray


@dataclass
class DecodeResult:
    pred_sets: list
    q_bev: Tensor | None
    q_pv: Tensor | None
    q_join: Tensor | None

    @property
    def final(self) -> PredictionSet:
        return self.pred_sets[-1]


# ---------------------------------------------------------------------------
# Hungarian matching
# ---------------------------------------------------------------------------


def hungarian_match(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-total-cost one-to-one assignment on a rectangular matrix.

    Successive-shortest-augmenting-path algorithm with potentials; exact.
    Column scans take the first minimum, so results are deterministic with
    low indices preferred on ties.  Returns (row, col) pairs covering
    min(n_rows, n_cols); empty when either side is empty.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ContractError(f"cost must be 2-D, got shape {cost.shape}")
    n_pred, n_gt = cost.shape
    if n_pred == 0 or n_gt == 0:
        return []
    if not np.isfinite(cost).all():
        raise ContractError("cost matrix must be finite")
    transposed = n_pred > n_gt
    c = cost.T if transposed else cost
    n, m = c.shape  # n <= m

    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    match = np.zeros(m + 1, dtype=np.intp)  # col -> row, 1-based, 0 = free
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        way = np.zeros(m + 1, dtype=np.intp)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            cur = c[i0 - 1, :] - u[i0] - v[1:]
            better = (~used[1:]) & (cur < minv[1:])
            minv[1:] = np.where(better, cur, minv[1:])
            way[1:] = np.where(better, j0, way[1:])
            masked = np.where(used[1:], np.inf, minv[1:])
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            used_cols = np.flatnonzero(used)
            u[match[used_cols]] += delta
            v[used_cols] -= delta
            minv[1:] = np.where(used[1:], minv[1:], minv[1:] - delta)
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1

    pairs = [(int(match[j] - 1), j - 1) for j in range(1, m + 1) if match[j]]
    if transposed:
        pairs = [(j, i) for i, j in pairs]
    return sorted(pairs)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


N_FOURIER = 6


def fourier_features(normed: np.ndarray, n_freq: int = N_FOURIER) -> np.ndarray:
    """Sine/cosine features of unit-cube coordinates at octave frequencies.

    Raw coordinates through a small MLP are too low-frequency for attention
    to single out individual cells; this is the standard fix."""
    freqs = (2.0 ** np.arange(n_freq)) * np.pi
    ang = normed[..., None] * freqs  # [..., 3, n_freq]
    feats = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    return feats.reshape(normed.shape[:-1] + (3 * 2 * n_freq,))


class PositionEmbed(Module):
    """Sine-featurized 3-D points through a two-layer MLP."""

    def __init__(self, dim: int, hidden: int, rng):
        super().__init__()
        self.mlp = MLP([3 * 2 * N_FOURIER, hidden, dim], rng)

    def __call__(self, points: np.ndarray, mins, spans) -> Tensor:
        normed = np.clip((np.asarray(points) - mins) / spans, 0.0, 1.0)
        return self.mlp(Tensor(fourier_features(normed)))


class QueryInit(Module):
    """Learnable anchors in the normalized unit cube + their embeddings.

    Anchors are stored as logits so the normalized coordinates stay inside
    [0, 1] no matter what training does to the parameter.  Embeddings are
    the two-layer MLP of the (sine-featurized) anchor coordinates.
    """

    def __init__(self, n_queries: int, dim: int, rng):
        super().__init__()
        uniform = rng.uniform(0.02, 0.98, size=(n_queries, 3))
        self.anchor_logits = Parameter(np.log(uniform / (1.0 - uniform)))
        self.mlp = MLP([3 * 2 * N_FOURIER, dim, dim], rng)
        self.n_queries = n_queries

    def anchors(self) -> Tensor:
        return T.sigmoid(self.anchor_logits)

    def embed(self, anchors: Tensor) -> Tensor:
        freqs = (2.0 ** np.arange(N_FOURIER)) * np.pi
        n = anchors.shape[0]
        ang = T.reshape(anchors, (n, 3, 1)) * freqs.reshape(1, 1, -1)
        feats = T.reshape(
            T.concat([T.tsin(ang), T.tcos(ang)], axis=2),
            (n, 3 * 2 * N_FOURIER),
        )
        return self.mlp(feats)

    def initial_queries(self) -> Tensor:
        return self.embed(self.anchors())


class MultiheadAttention(Module):
    def __init__(self, dim: int, heads: int, rng, p_drop: float = 0.0):
        super().__init__()
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)
        self.heads = heads
        self.p_drop = p_drop

    def __call__(self, q_in: Tensor, k_in: Tensor, v_in: Tensor, rng=None) -> Tensor:
        nq, d = q_in.shape
        nk = k_in.shape[0]
        h, dh = self.heads, d // self.heads

        def split(t, n):
            return T.permute(T.reshape(t, (n, h, dh)), (1, 0, 2))

        qh = split(self.wq(q_in), nq)
        kh = split(self.wk(k_in), nk)
        vh = split(self.wv(v_in), nk)
        scores = T.matmul(qh, T.permute(kh, (0, 2, 1))) * (1.0 / np.sqrt(dh))
        attn = T.softmax(scores, axis=-1)
        out = T.matmul(attn, vh)
        out = self.wo(T.reshape(T.permute(out, (1, 0, 2)), (nq, d)))
        if rng is not None and self.training and self.p_drop > 0:
            out = T.dropout(out, self.p_drop, rng)
        return out


class DecoderLayer(Module):
    """self-attention, norm, cross-attention, norm, FFN, norm; residual
    around each (sub-block + norm) pair."""

    def __init__(self, dim: int, heads: int, ffn_hidden: int, rng, p_drop: float = 0.1):
        super().__init__()
        self.self_attn = MultiheadAttention(dim, heads, rng, p_drop)
        self.cross_attn = MultiheadAttention(dim, heads, rng, p_drop)
        self.norm1 = LayerNorm(dim)
        self.norm2 = LayerNorm(dim)
        self.norm3 = LayerNorm(dim)
        self.fc1 = Linear(dim, ffn_hidden, rng)
        self.fc2 = Linear(ffn_hidden, dim, rng)
        self.p_drop = p_drop

    def __call__(self, q: Tensor, q_pos: Tensor, cells: Tensor, rng=None) -> Tensor:
        qp = q + q_pos
        q = q + self.norm1(self.self_attn(qp, qp, q, rng))
        q = q + self.norm2(self.cross_attn(q + q_pos, cells, cells, rng))
        hidden = T.gelu(self.fc1(q))
        if rng is not None and self.training and self.p_drop > 0:
            hidden = T.dropout(hidden, self.p_drop, rng)
        q = q + self.norm3(self.fc2(hidden))
        return q


class DetectionHeads(Module):
    """Two FFNs shared across decoder layers: class logits and box params."""

    def __init__(self, dim: int, hidden: int, n_classes: int, rng):
        super().__init__()
        self.cls = MLP([dim, hidden, n_classes], rng)
        self.reg = MLP([dim, hidden, 8], rng)

    def predict(self, q: Tensor, anchor_logits: Tensor, stage: str) -> PredictionSet:
        raw = self.reg(q)
        return PredictionSet(
            stage=stage,
            logits=self.cls(q),
            center_norm=T.sigmoid(raw[:, 0:3] + anchor_logits),
            log_size=raw[:, 3:6],
            sin_cos=raw[:, 6:8],
        )


# ---------------------------------------------------------------------------
# the decoder
# ---------------------------------------------------------------------------


class Decoder(Module):
    """View-specific refinement then joint decoding ("specific" mode), or a
    single view-agnostic stack over the concatenated cells ("agnostic")."""

    def __init__(
        self,
        fusion_dim: int,
        dim: int,
        heads: int,
        ffn_hidden: int,
        n_queries: int,
        n_classes: int,
        rng,
        mode: str = "specific",
        p_drop: float = 0.1,
        pe_hidden: int = 64,
        head_hidden: int = 64,
    ):
        super().__init__()
        if mode not in ("specific", "agnostic"):
            raise ContractError(f"decoder mode {mode!r}")
        self.mode = mode
        self.dim = dim
        self.pe = PositionEmbed(dim, pe_hidden, rng)
        self.in_bev = Conv2d(fusion_dim, dim, 1, rng)
        self.in_pv = Conv2d(fusion_dim, dim, 1, rng)
        self.query_init = QueryInit(n_queries, dim, rng)
        if mode == "specific":
            self.layers_bev = [DecoderLayer(dim, heads, ffn_hidden, rng, p_drop) for _ in range(2)]
            self.layers_pv = [DecoderLayer(dim, heads, ffn_hidden, rng, p_drop) for _ in range(2)]
            self.layers_joint = [DecoderLayer(dim, heads, ffn_hidden, rng, p_drop) for _ in range(2)]
        else:
            self.layers_joint = [DecoderLayer(dim, heads, ffn_hidden, rng, p_drop) for _ in range(4)]
        self.heads = DetectionHeads(dim, head_hidden, n_classes, rng)

    # --- position-aware cell tokens ---------------------------------------

    def bev_cells(self, f_bev: FeatureMap, grid: BevGrid) -> Tensor:
        mins = np.array([grid.x_min, grid.y_min, grid.z_min])
        spans = np.array(
            [grid.x_max - grid.x_min, grid.y_max - grid.y_min, grid.z_max - grid.z_min]
        )
        mid_h = 0.5 * (grid.z_min + grid.z_max)
        pts = make_bev_points(grid, [mid_h])
        pe = self.pe(pts, mins, spans)
        tokens = map_to_tokens(self.in_bev(f_bev.data))
        return tokens + pe

    def pv_cells(
        self,
        f_pvs: list[FeatureMap],
        frustums: list[FrustumGrid],
        calibs: list[CameraCalib],
        grid: BevGrid,
    ) -> Tensor:
        """Position-aware PV cell tokens, all cameras concatenated.

        Each cell's embedding is the mean of its depth-sample embeddings;
        cameras share one MLP pass and one 1x1 conv pass."""
        mins = np.array([grid.x_min, grid.y_min, grid.z_min])
        spans = np.array(
            [grid.x_max - grid.x_min, grid.y_max - grid.y_min, grid.z_max - grid.z_min]
        )
        pts = np.concatenate(
            [make_frustum_points(f, c) for f, c in zip(frustums, calibs)], axis=0
        )
        pe_all = self.pe(pts, mins, spans)  # [sum cells * depth, dim]
        n_cells = sum(f.h_f * f.w_f for f in frustums)
        d_f = frustums[0].d_f
        pe = T.mean(T.reshape(pe_all, (n_cells, d_f, self.dim)), axis=1)
        stacked = T.concat(
            [T.reshape(f.data, (1,) + f.data.shape) for f in f_pvs], axis=0
        )
        feats = self.in_pv(stacked)  # [B, dim, h, w]
        b, c, h, w = feats.shape
        tokens = T.reshape(T.permute(feats, (0, 2, 3, 1)), (b * h * w, c))
        return tokens + pe

    # --- decoding ----------------------------------------------------------

    def decode_all(
        self,
        f_bev: FeatureMap,
        grid: BevGrid,
        f_pvs: list[FeatureMap] | None = None,
        frustums: list[FrustumGrid] | None = None,
        calibs: list[CameraCalib] | None = None,
        rng=None,
    ) -> DecodeResult:
        """Run the full query pipeline; heads fire after every layer."""
        kv_bev = self.bev_cells(f_bev, grid)
        kv_pv = None
        if f_pvs is not None:
            kv_pv = self.pv_cells(f_pvs, frustums, calibs, grid)

        q0 = self.query_init.initial_queries()
        q_pos = q0
        a_logits = self.query_init.anchor_logits
        preds: list[PredictionSet] = []

        if self.mode == "agnostic":
            kv = kv_bev if kv_pv is None else T.concat([kv_bev, kv_pv], axis=0)
            q = q0
            for li, layer in enumerate(self.layers_joint):
                q = layer(q, q_pos, kv, rng)
                preds.append(self.heads.predict(q, a_logits, f"joint{li}"))
            return DecodeResult(preds, None, None, q)

        q_bev = q0
        for li, layer in enumerate(self.layers_bev):
            q_bev = layer(q_bev, q_pos, kv_bev, rng)
            preds.append(self.heads.predict(q_bev, a_logits, f"bev{li}"))

        if kv_pv is not None:
            q_pv = q0
            for li, layer in enumerate(self.layers_pv):
                q_pv = layer(q_pv, q_pos, kv_pv, rng)
                preds.append(self.heads.predict(q_pv, a_logits, f"pv{li}"))
            q_join = T.concat([q_bev, q_pv], axis=0)
            pos_join = T.concat([q_pos, q_pos], axis=0)
            logits_join = T.concat([a_logits, a_logits], axis=0)
            kv_join = T.concat([kv_bev, kv_pv], axis=0)
        else:
            q_pv = None
            q_join = q_bev
            pos_join = q_pos
            logits_join = a_logits
            kv_join = kv_bev

        for li, layer in enumerate(self.layers_joint):
            q_join = layer(q_join, pos_join, kv_join, rng)
            preds.append(self.heads.predict(q_join, logits_join, f"joint{li}"))
        return DecodeResult(preds, q_bev, q_pv, q_join)


# ---------------------------------------------------------------------------
# targets, loss, decoding to metric boxes
# ---------------------------------------------------------------------------


def normalized_box_targets(gt_boxes: list[GtBox], grid: BevGrid) -> np.ndarray:
    """[n_gt, 8]: normalized center, log sizes, yaw sin/cos."""
    out = np.zeros((len(gt_boxes), 8))
    spans = np.array(
        [grid.x_max - grid.x_min, grid.y_max - grid.y_min, grid.z_max - grid.z_min]
    )
    mins = np.array([grid.x_min, grid.y_min, grid.z_min])
    for i, b in enumerate(gt_boxes):
        out[i, 0:3] = (np.array([b.x, b.y, b.z]) - mins) / spans
        out[i, 3:6] = np.log([b.w, b.l, b.h])
        out[i, 6] = np.sin(b.yaw)
        out[i, 7] = np.cos(b.yaw)
    return out


def match_cost(
    ps: PredictionSet, gt_vec: np.ndarray, gt_cls: np.ndarray, cfg: DetectionLossConfig
) -> np.ndarray:
    """lambda_cls * (-p_class) + lambda_reg * sum |box - gt| (normalized)."""
    probs = 1.0 / (1.0 + np.exp(-ps.logits.data))
    cls_cost = -probs[:, gt_cls]
    reg_cost = np.abs(ps.box_vector()[:, None, :] - gt_vec[None, :, :]).sum(-1)
    return cfg.lambda_cls * cls_cost + cfg.lambda_reg * reg_cost


def _focal_terms(logits: Tensor, targets: np.ndarray, alpha: float, gamma: float) -> Tensor:
    """Elementwise focal loss on sigmoid logits (stable log-sigmoid forms)."""
    p = T.sigmoid(logits)
    log_p = T.softplus(logits * -1.0) * -1.0
    log_not_p = T.softplus(logits) * -1.0
    pos = ((1.0 - p) ** 2.0 if gamma == 2.0 else (1.0 - p) ** gamma) * log_p * -alpha
    neg = (p**gamma) * log_not_p * -(1.0 - alpha)
    return targets * pos + (1.0 - targets) * neg


def detection_loss(
    pred_sets: list[PredictionSet],
    gt_boxes: list[GtBox],
    grid: BevGrid,
    cfg: DetectionLossConfig,
) -> tuple[Tensor, dict]:
    """Averaged over prediction sets: focal classification on all queries
    (unmatched queries get the all-background target) + L1 on matched boxes
    in the normalized parameterization."""
    n_gt = len(gt_boxes)
    gt_cls = np.array([b.class_id for b in gt_boxes], dtype=np.intp)
    gt_vec = normalized_box_targets(gt_boxes, grid)
    norm = max(n_gt, 1)

    total = None
    cls_total = 0.0
    reg_total = 0.0
    for ps in pred_sets:
        n_q, n_classes = ps.logits.shape
        targets = np.zeros((n_q, n_classes))
        if n_gt:
            pairs = hungarian_match(match_cost(ps, gt_vec, gt_cls, cfg))
            rows = np.array([i for i, _ in pairs], dtype=np.intp)
            cols = np.array([j for _, j in pairs], dtype=np.intp)
            targets[rows, gt_cls[cols]] = 1.0
        loss_cls = T.tsum(_focal_terms(ps.logits, targets, cfg.alpha, cfg.gamma)) * (
            1.0 / norm
        )
        if n_gt:
            pred_vec = T.concat([ps.center_norm, ps.log_size, ps.sin_cos], axis=1)
            matched = T.gather_rows(pred_vec, rows)
            loss_reg = T.tsum((matched - gt_vec[cols]).abs()) * (1.0 / norm)
        else:
            loss_reg = Tensor(0.0)
        set_loss = loss_cls * cfg.lambda_cls + loss_reg * cfg.lambda_reg
        total = set_loss if total is None else total + set_loss
        cls_total += loss_cls.item()
        reg_total += loss_reg.item()

    n_sets = len(pred_sets)
    total = total * (1.0 / n_sets)
    breakdown = {
        "loss": total.item(),
        "loss_cls": cls_total / n_sets,
        "loss_reg": reg_total / n_sets,
    }
    return total, breakdown


def decode_detections(ps: PredictionSet, grid: BevGrid) -> list[Detection]:
    """Convert a prediction set to metric-space detections."""
    probs = 1.0 / (1.0 + np.exp(-ps.logits.data))
    mins = np.array([grid.x_min, grid.y_min, grid.z_min])
    spans = np.array(
        [grid.x_max - grid.x_min, grid.y_max - grid.y_min, grid.z_max - grid.z_min]
    )
    centers = ps.center_norm.data * spans + mins
    sizes = np.exp(ps.log_size.data)
    sc = ps.sin_cos.data
    norms = np.maximum(np.sqrt((sc**2).sum(axis=1, keepdims=True)), 1e-12)
    sc = sc / norms
    yaw = np.arctan2(sc[:, 0], sc[:, 1])
    out = []
    for i in range(ps.n_queries):
        cls = int(np.argmax(probs[i]))
        out.append(
            Detection(
                class_id=cls,
                score=float(probs[i, cls]),
                box=np.array(
                    [
                        centers[i, 0], centers[i, 1], centers[i, 2],
                        sizes[i, 0], sizes[i, 1], sizes[i, 2], yaw[i],
                    ]
                ),
                probs=probs[i].copy(),
            )
        )
    return out


def write_detections_jsonl(path, per_scene: dict) -> None:
    """One JSON line per detection: scene_id, class, score, box."""
    from .synthscene import CLASS_NAMES

    with open(path, "w") as f:
        for scene_id in sorted(per_scene):
            for det in per_scene[scene_id]:
                f.write(
                    json.dumps(
                        {
                            "scene_id": scene_id,
                            "class": CLASS_NAMES[det.class_id],
                            "score": round(det.score, 9),
                            "box": [round(float(v), 9) for v in det.box],
                        }
                    )
                    + "\n"
                )
