"""Inter/intra-modality fusion with windowed cross-attention.

The full fusion block runs two base units side by side: both take queries
from the view's native (intra) features, and keys/values from the channel
concatenation of native and cross-mapped (inter) features; the second unit
sees that concatenation enriched by a dilated depthwise-separable conv
stack for wider spatial context.  Each base unit applies two window
attention layers: the second cyclically shifts the key/value map by half a
window (queries keep their own features) so information crosses window
boundaries.  Seam masks forbid attention across the wrap-around introduced
by the cyclic shift.

Also provides the simpler fusion variants used by the ablation harness:
plain concatenation, self-then-cross attention, a single base unit, and
two base units without the channel concatenation.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoders import CircConv2d
from .nn import Conv2d, LayerNorm, Linear, Module, map_to_tokens, tokens_to_map
from .tensor import Parameter, ShapeError, Tensor

NEG_INF = -1e9


# ---------------------------------------------------------------------------
# window bookkeeping
# ---------------------------------------------------------------------------


def relative_position_index(m: int) -> np.ndarray:
    """[m*m, m*m] lookup into a (2m-1)^2 relative-offset table."""
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij"))
    flat = coords.reshape(2, -1)
    rel = flat[:, :, None] - flat[:, None, :]  # (2, L, L)
    rel = rel.transpose(1, 2, 0) + (m - 1)
    return (rel[..., 0] * (2 * m - 1) + rel[..., 1]).astype(np.intp)


def _pad_to_multiple(x: Tensor, m: int) -> tuple[Tensor, int, int]:
    h, w = x.shape[-2], x.shape[-1]
    hp = ((h + m - 1) // m) * m
    wp = ((w + m - 1) // m) * m
    if (hp, wp) != (h, w):
        x = T.pad2d(x, (0, hp - h), (0, wp - w))
    return x, hp, wp


def _partition_padded(x: Tensor, m: int) -> Tensor:
    """[C, Hp, Wp] or [B, C, Hp, Wp] -> [(B*)n_windows, m*m, C]."""
    if x.ndim == 3:
        c, hp, wp = x.shape
        nh, nw = hp // m, wp // m
        x = T.reshape(x, (c, nh, m, nw, m))
        x = T.permute(x, (1, 3, 2, 4, 0))
        return T.reshape(x, (nh * nw, m * m, c))
    b, c, hp, wp = x.shape
    nh, nw = hp // m, wp // m
    x = T.reshape(x, (b, c, nh, m, nw, m))
    x = T.permute(x, (0, 2, 4, 3, 5, 1))
    return T.reshape(x, (b * nh * nw, m * m, c))


def _unpartition_padded(win: Tensor, m: int, hp: int, wp: int, batch: int = 0) -> Tensor:
    nh, nw = hp // m, wp // m
    c = win.shape[-1]
    if batch == 0:
        x = T.reshape(win, (nh, nw, m, m, c))
        x = T.permute(x, (4, 0, 2, 1, 3))
        return T.reshape(x, (c, hp, wp))
    x = T.reshape(win, (batch, nh, nw, m, m, c))
    x = T.permute(x, (0, 5, 1, 3, 2, 4))
    return T.reshape(x, (batch, c, hp, wp))


def window_partition(x: Tensor, m: int) -> Tensor:
    """Partition [C, H, W] into non-overlapping m x m windows, zero-padding
    the bottom/right edge up to multiples of m."""
    x, hp, wp = _pad_to_multiple(x, m)
    return _partition_padded(x, m)


def window_unpartition(win: Tensor, m: int, out_hw: tuple[int, int]) -> Tensor:
    """Inverse of :func:`window_partition`; crops padding back off."""
    h, w = out_hw
    hp = ((h + m - 1) // m) * m
    wp = ((w + m - 1) // m) * m
    x = _unpartition_padded(win, m, hp, wp)
    if (hp, wp) != (h, w):
        x = x[:, :h, :w]
    return x


def window_masks(h: int, w: int, m: int, shift: int = 0) -> np.ndarray | None:
    """Additive attention mask [n_windows, m*m, m*m].

    Forbids attending to zero-padded cells and, when ``shift`` > 0, to
    keys whose content wrapped around a different edge of the map than the
    query's (the cyclic-shift seams).  Returns None when nothing is masked.
    """
    hp = ((h + m - 1) // m) * m
    wp = ((w + m - 1) // m) * m
    valid = np.zeros((hp, wp), dtype=bool)
    valid[:h, :w] = True
    s = shift % min(hp, wp) if shift else 0
    if shift:
        valid = np.roll(valid, (-shift, -shift), axis=(0, 1))
        # region id: whether the rolled position holds content that wrapped
        wrap_r = np.arange(hp) >= (hp - (shift % hp))
        wrap_c = np.arange(wp) >= (wp - (shift % wp))
        ids = 2 * wrap_r[:, None].astype(int) + wrap_c[None, :].astype(int)
    else:
        ids = np.zeros((hp, wp), dtype=int)
    del s

    def part(a):
        nh, nw = hp // m, wp // m
        return (
            a.reshape(nh, m, nw, m).transpose(0, 2, 1, 3).reshape(nh * nw, m * m)
        )

    valid_w = part(valid)
    ids_w = part(ids)
    same = ids_w[:, :, None] == ids_w[:, None, :]
    allowed = same & valid_w[:, None, :]
    if allowed.all():
        return None
    return np.where(allowed, 0.0, NEG_INF)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


class WindowConfig(Module):
    """Window geometry plus the per-head relative position bias table."""

    def __init__(self, m: int, heads: int, dim: int, rng: np.random.Generator):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"dim {dim} not divisible by heads {heads}")
        self.m = m
        self.heads = heads
        self.dim = dim
        self.bias_table = Parameter(
            rng.normal(0.0, 0.02, size=((2 * m - 1) ** 2, heads))
        )
        self.rel_index = relative_position_index(m)

    def bias(self) -> Tensor:
        """[heads, m*m, m*m] additive bias from the learned table."""
        l = self.m * self.m
        flat = T.gather_rows(self.bias_table, self.rel_index.reshape(-1))
        return T.permute(T.reshape(flat, (l, l, self.heads)), (2, 0, 1))


def windowed_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    cfg: WindowConfig,
    attn_mask: np.ndarray | None = None,
) -> Tensor:
    """Multi-head attention within each window.

    ``q``, ``k``, ``v`` are [n_windows, m*m, dim]; the learned relative
    position bias is added per head; ``attn_mask`` (additive, broadcast
    over heads) screens padding and shift seams.  Heads are concatenated.
    """
    nw, l, d = q.shape
    h = cfg.heads
    dh = d // h

    def split_heads(t):
        return T.permute(T.reshape(t, (nw, l, h, dh)), (0, 2, 1, 3))

    qh, kh, vh = split_heads(q), split_heads(k), split_heads(v)
    scores = T.matmul(qh, T.permute(kh, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    scores = scores + T.reshape(cfg.bias(), (1, h, l, l))
    if attn_mask is not None:
        scores = scores + attn_mask[:, None, :, :]
    attn = T.softmax(scores, axis=-1)
    out = T.matmul(attn, vh)
    return T.reshape(T.permute(out, (0, 2, 1, 3)), (nw, l, d))


# ---------------------------------------------------------------------------
# base unit
# ---------------------------------------------------------------------------


class _FFN(Module):
    def __init__(self, dim: int, hidden: int, rng):
        super().__init__()
        self.norm = LayerNorm(dim)
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(self.norm(x))))


class InterIntraUnit(Module):
    """Two window-attention layers + FFNs, residual throughout.

    Queries always come from the unit's input stream; keys/values come
    from ``kv_map`` (the unified features, or whatever the variant feeds
    in).  The second attention layer consumes a cyclically half-window
    shifted key/value map while query features stay fixed; the shifted
    grouping is achieved by rolling both streams, attending, and rolling
    back, which leaves query contents untouched.
    """

    def __init__(self, dim: int, kv_dim: int, m: int, heads: int, hidden: int, rng):
        super().__init__()
        self.cfg = WindowConfig(m, heads, dim, rng)
        self.norm_q = LayerNorm(dim)
        self.norm_kv = LayerNorm(kv_dim)
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(kv_dim, dim, rng)
        self.v_proj = Linear(kv_dim, dim, rng)
        self.ffn1 = _FFN(dim, hidden, rng)
        self.ffn2 = _FFN(dim, hidden, rng)

    def _attend(self, x_map: Tensor, kv_map: Tensor, shift: int) -> Tensor:
        h, w = x_map.shape[-2], x_map.shape[-1]
        batch = x_map.shape[0] if x_map.ndim == 4 else 0
        m = self.cfg.m
        xq, hp, wp = _pad_to_multiple(x_map, m)
        kv, _, _ = _pad_to_multiple(kv_map, m)
        axes = (xq.ndim - 2, xq.ndim - 1)
        if shift:
            xq = T.roll(xq, (-shift, -shift), axes)
            kv = T.roll(kv, (-shift, -shift), axes)
        qw = _partition_padded(xq, m)
        kvw = _partition_padded(kv, m)
        q = self.q_proj(self.norm_q(qw))
        kv_n = self.norm_kv(kvw)
        mask = window_masks(h, w, m, shift)
        if mask is not None and batch:
            mask = np.tile(mask, (batch, 1, 1))
        out = windowed_attention(
            q, self.k_proj(kv_n), self.v_proj(kv_n), self.cfg, mask
        )
        out_map = _unpartition_padded(out, m, hp, wp, batch)
        if shift:
            out_map = T.roll(out_map, (shift, shift), axes)
        if (hp, wp) != (h, w):
            out_map = out_map[..., :h, :w]
        return out_map

    def _ffn_map(self, x_map: Tensor, ffn: _FFN) -> Tensor:
        h, w = x_map.shape[-2], x_map.shape[-1]
        if x_map.ndim == 3:
            return tokens_to_map(ffn(map_to_tokens(x_map)), h, w)
        b, c = x_map.shape[0], x_map.shape[1]
        tokens = T.reshape(T.permute(x_map, (0, 2, 3, 1)), (b * h * w, c))
        out = ffn(tokens)
        return T.permute(T.reshape(out, (b, h, w, c)), (0, 3, 1, 2))

    def __call__(self, x_map: Tensor, kv_map: Tensor) -> Tensor:
        if x_map.shape[-2:] != kv_map.shape[-2:] or x_map.ndim != kv_map.ndim:
            raise ShapeError(
                f"spatial dims disagree: {x_map.shape} vs {kv_map.shape}"
            )
        m = self.cfg.m
        x = x_map + self._attend(x_map, kv_map, 0)
        x = x + self._ffn_map(x, self.ffn1)
        x = x + self._attend(x, kv_map, m // 2)
        x = x + self._ffn_map(x, self.ffn2)
        return x


class ConvContext(Module):
    """Two dilated depthwise-separable 3x3 convs (dilations 2 then 4) at
    twice the embedding width, GeLU between; spatial dims preserved."""

    def __init__(self, channels: int, rng):
        super().__init__()
        self.dw1 = CircConv2d(channels, channels, 3, rng, padding=2, dilation=2,
                              groups=channels)
        self.pw1 = Conv2d(channels, channels, 1, rng)
        self.dw2 = CircConv2d(channels, channels, 3, rng, padding=4, dilation=4,
                              groups=channels)
        self.pw2 = Conv2d(channels, channels, 1, rng)

    def sep1(self, x: Tensor) -> Tensor:
        return self.pw1(self.dw1(x))

    def sep2(self, x: Tensor) -> Tensor:
        return self.pw2(self.dw2(x))

    def __call__(self, x: Tensor) -> Tensor:
        return self.sep2(T.gelu(self.sep1(x)))


# ---------------------------------------------------------------------------
# fusion blocks (full model + ablation variants)
# ---------------------------------------------------------------------------


class IIFBlock(Module):
    """Full fusion: local unit + conv-context unit, concatenated then
    projected back to the embedding width."""

    def __init__(self, dim: int, m: int, heads: int, hidden: int, rng):
        super().__init__()
        self.unit_local = InterIntraUnit(dim, 2 * dim, m, heads, hidden, rng)
        self.unit_context = InterIntraUnit(dim, 2 * dim, m, heads, hidden, rng)
        self.context = ConvContext(2 * dim, rng)
        self.proj = Conv2d(2 * dim, dim, 1, rng)

    def __call__(self, intra: Tensor, inter: Tensor) -> Tensor:
        unified = T.concat([inter, intra], axis=-3)
        local = self.unit_local(intra, unified)
        wide = self.unit_context(intra, self.context(unified))
        return self.proj(T.concat([local, wide], axis=-3))


class ConcatFusion(Module):
    """Channel concat + 1x1 projection; no attention."""

    def __init__(self, dim: int, m: int, heads: int, hidden: int, rng):
        super().__init__()
        self.proj = Conv2d(2 * dim, dim, 1, rng)

    def __call__(self, intra: Tensor, inter: Tensor) -> Tensor:
        return self.proj(T.concat([inter, intra], axis=-3))


class _SingleAttnBlock(Module):
    """One (unshifted) window attention + FFN with residuals."""

    def __init__(self, dim: int, kv_dim: int, m: int, heads: int, hidden: int, rng):
        super().__init__()
        self.cfg = WindowConfig(m, heads, dim, rng)
        self.norm_q = LayerNorm(dim)
        self.norm_kv = LayerNorm(kv_dim)
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(kv_dim, dim, rng)
        self.v_proj = Linear(kv_dim, dim, rng)
        self.ffn = _FFN(dim, hidden, rng)

    def __call__(self, x_map: Tensor, kv_map: Tensor) -> Tensor:
        h, w = x_map.shape[-2], x_map.shape[-1]
        batch = x_map.shape[0] if x_map.ndim == 4 else 0
        m = self.cfg.m
        xq, hp, wp = _pad_to_multiple(x_map, m)
        kv, _, _ = _pad_to_multiple(kv_map, m)
        q = self.q_proj(self.norm_q(_partition_padded(xq, m)))
        kv_n = self.norm_kv(_partition_padded(kv, m))
        mask = window_masks(h, w, m, 0)
        if mask is not None and batch:
            mask = np.tile(mask, (batch, 1, 1))
        out = windowed_attention(
            q, self.k_proj(kv_n), self.v_proj(kv_n), self.cfg, mask
        )
        out_map = _unpartition_padded(out, m, hp, wp, batch)[..., :h, :w]
        x = x_map + out_map
        if x.ndim == 3:
            return x + tokens_to_map(self.ffn(map_to_tokens(x)), h, w)
        b, c = x.shape[0], x.shape[1]
        tokens = T.reshape(T.permute(x, (0, 2, 3, 1)), (b * h * w, c))
        out = self.ffn(tokens)
        return x + T.permute(T.reshape(out, (b, h, w, c)), (0, 3, 1, 2))


class SelfCrossFusion(Module):
    """Window self-attention on intra features, then window cross-attention
    against inter features."""

    def __init__(self, dim: int, m: int, heads: int, hidden: int, rng):
        super().__init__()
        self.self_block = _SingleAttnBlock(dim, dim, m, heads, hidden, rng)
        self.cross_block = _SingleAttnBlock(dim, dim, m, heads, hidden, rng)

    def __call__(self, intra: Tensor, inter: Tensor) -> Tensor:
        x = self.self_block(intra, intra)
        return self.cross_block(x, inter)


class BaseFusion(Module):
    """A single inter-intra base unit on the unified features."""

    def __init__(self, dim: int, m: int, heads: int, hidden: int, rng):
        super().__init__()
        self.unit = InterIntraUnit(dim, 2 * dim, m, heads, hidden, rng)

    def __call__(self, intra: Tensor, inter: Tensor) -> Tensor:
        return self.unit(intra, T.concat([inter, intra], axis=-3))


class BaseNoCatFusion(Module):
    """Two successive base units without the channel concat: the first
    window-self-attends intra features, the second window-cross-attends
    against inter features."""

    def __init__(self, dim: int, m: int, heads: int, hidden: int, rng):
        super().__init__()
        self.unit_self = InterIntraUnit(dim, dim, m, heads, hidden, rng)
        self.unit_cross = InterIntraUnit(dim, dim, m, heads, hidden, rng)

    def __call__(self, intra: Tensor, inter: Tensor) -> Tensor:
        x = self.unit_self(intra, intra)
        return self.unit_cross(x, inter)


FUSION_VARIANTS = {
    "concat": ConcatFusion,
    "self_cross": SelfCrossFusion,
    "base": BaseFusion,
    "base_nocat": BaseNoCatFusion,
    "iif": IIFBlock,
}


def build_fusion(variant: str, dim: int, m: int, heads: int, hidden: int, rng) -> Module:
    try:
        cls = FUSION_VARIANTS[variant]
    except KeyError:
        raise ValueError(
            f"unknown fusion variant {variant!r}; one of {sorted(FUSION_VARIANTS)}"
        ) from None
    return cls(dim, m, heads, hidden, rng)
