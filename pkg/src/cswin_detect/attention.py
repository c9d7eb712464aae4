"""3D cross-shaped window attention.

A token grid is split into three head groups. Each group attends inside
non-overlapping stripes along one spatial axis: horizontal stripes span
``sw x W x D`` tokens, vertical ``H x sw x D`` and longitudinal
``H x W x sw``. Attention logits are cosine similarities divided by a
learnable per-head temperature plus a learned relative position bias.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import torch
from torch import nn

from .numeric import ShapeError, l2_normalize

AXES = ("horizontal", "vertical", "longitudinal")
TAU_MIN = 0.01


def _axis_index(axis) -> int:
    if isinstance(axis, int):
        if axis not in (0, 1, 2):
            raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
        return axis
    try:
        return AXES.index(axis)
    except ValueError:
        raise ValueError(f"unknown stripe axis {axis!r}; expected one of {AXES}") from None


@dataclass(frozen=True)
class StripeConfig:
    sw: int
    axis: str = "horizontal"

    def __post_init__(self):
        if int(self.sw) <= 0:
            raise ValueError(f"stripe width must be positive, got {self.sw}")
        _axis_index(self.axis)


@dataclass(frozen=True)
class PadRecord:
    """What :func:`merge_stripes` needs to invert a partition exactly."""

    axis: int
    sw: int
    grid: tuple[int, int, int]
    padded: int
    batched: bool

    @property
    def n_stripes(self) -> int:
        return self.padded // self.sw

    @property
    def window(self) -> tuple[int, int, int]:
        win = list(self.grid)
        win[self.axis] = self.sw
        return tuple(win)


def _partition_cl(x: torch.Tensor, sw: int, axis: int) -> tuple[torch.Tensor, int]:
    """(B, H, W, D, F) -> (B, M, *window, F), plus padded extent."""
    extent = x.shape[1 + axis]
    pad = (-extent) % sw
    if pad:
        shape = list(x.shape)
        shape[1 + axis] = pad
        x = torch.cat([x, x.new_zeros(shape)], dim=1 + axis)
    padded = extent + pad
    shape = list(x.shape)
    shape[1 + axis: 2 + axis] = [padded // sw, sw]
    x = x.reshape(shape)
    # move the stripe index M (at dim 1 + axis) right after the batch dim
    order = [0, 1 + axis] + [i for i in range(1, 5) if i != 1 + axis] + [5]
    return x.permute(order), padded


def _merge_cl(blocks: torch.Tensor, axis: int, extent: int) -> torch.Tensor:
    """Inverse of :func:`_partition_cl`; crops the padding."""
    order = [0] + list(range(2, 2 + axis)) + [1] + list(range(2 + axis, 6))
    x = blocks.permute(order)
    shape = list(x.shape)
    shape[1 + axis: 3 + axis] = [shape[1 + axis] * shape[2 + axis]]
    x = x.reshape(shape)
    return x.narrow(1 + axis, 0, extent)


def partition_stripes(t: torch.Tensor, cfg: StripeConfig) -> tuple[torch.Tensor, PadRecord]:
    """Split a channel-major token grid into stripes along ``cfg.axis``.

    ``t`` is ``(F, H, W, D)`` or ``(B, F, H, W, D)``. The result stacks the
    ``M`` stripe blocks on a leading axis: ``(M, *window, F)`` (or with a
    batch dim in front). Extents that are not a multiple of ``sw`` are
    zero-padded at the far end.
    """
    batched = t.ndim == 5
    if t.ndim not in (4, 5):
        raise ShapeError("token grid must be (F,H,W,D) or (B,F,H,W,D)", t.shape, ("B?", "F", "H", "W", "D"))
    if min(t.shape[-3:]) <= 0:
        raise ValueError("grid extents must be positive")
    axis = _axis_index(cfg.axis)
    x = t if batched else t.unsqueeze(0)
    x = x.permute(0, 2, 3, 4, 1)
    blocks, padded = _partition_cl(x, int(cfg.sw), axis)
    rec = PadRecord(axis, int(cfg.sw), tuple(x.shape[1:4]), padded, batched)
    return (blocks if batched else blocks[0]), rec


def merge_stripes(blocks: torch.Tensor, rec: PadRecord) -> torch.Tensor:
    """Reassemble stripe blocks into the original channel-major grid."""
    b = blocks if rec.batched else blocks.unsqueeze(0)
    expected = (rec.n_stripes, *rec.window)
    if b.ndim != 6 or tuple(b.shape[1:5]) != expected:
        raise ShapeError("stripe blocks inconsistent with pad record", b.shape[1:5], expected)
    x = _merge_cl(b, rec.axis, rec.grid[rec.axis]).permute(0, 4, 1, 2, 3)
    return x if rec.batched else x[0]


# -- relative position bias ------------------------------------------------

def bias_radii(sw: int, axis: int, radius: int) -> tuple[int, int, int]:
    """Clip radius per spatial axis; the stripe axis never needs more than sw - 1."""
    r = [radius, radius, radius]
    r[axis] = min(sw - 1, radius)
    return tuple(r)


def bias_table_size(sw: int, axis: int, radius: int) -> int:
    r = bias_radii(sw, axis, radius)
    return math.prod(2 * a + 1 for a in r)


def relative_offset_index(a, b, radii) -> int:
    """Table slot of the clipped offset between window coordinates ``a`` and ``b``."""
    idx = 0
    for ai, bi, r in zip(a, b, radii):
        off = max(-r, min(r, ai - bi))
        idx = idx * (2 * r + 1) + off + r
    return idx


@lru_cache(maxsize=64)
def _bias_index(window: tuple[int, int, int], radii: tuple[int, int, int]) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(*[torch.arange(n) for n in window], indexing="ij")).reshape(3, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    idx = torch.zeros(rel.shape[1:], dtype=torch.long)
    for a in range(3):
        r = radii[a]
        idx = idx * (2 * r + 1) + rel[a].clamp(-r, r) + r
    return idx


def relative_position_bias(table: torch.Tensor, window, radii) -> torch.Tensor:
    """Gather a ``(heads, n, n)`` bias from a ``(heads, table_size)`` table."""
    idx = _bias_index(tuple(window), tuple(radii))
    return table[:, idx]


# -- attention -------------------------------------------------------------

def attention_logits(q, k, tau, bias=None, use_cosine=True):
    """Pre-softmax logits ``(..., heads, n, n)``.

    Cosine mode: ``cos(q_i, k_j) / tau + B_ij``; a zero-norm query or key
    gives cosine 0. Dot mode: ``q_i . k_j / sqrt(d) + B_ij``. ``tau`` is per
    head (shape ``(heads,)``).
    """
    if q.shape[-2:] != k.shape[-2:]:
        raise ShapeError("q/k token counts", q.shape, k.shape)
    if use_cosine:
        tau = torch.as_tensor(tau, dtype=q.dtype)
        logits = l2_normalize(q) @ l2_normalize(k).transpose(-1, -2)
        logits = logits / tau.reshape(-1, 1, 1)
    else:
        logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if bias is not None:
        logits = logits + bias
    return logits


def scaled_cosine_attention(q, k, v, tau, bias=None, use_cosine=True, key_mask=None, return_weights=False):
    """Attention over the token axis of ``(..., heads, n, d)`` tensors.

    Logits come from :func:`attention_logits`; ``key_mask`` marks valid keys
    with True and masked keys get logit -inf.
    """
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError("k/v token counts", k.shape, v.shape)
    logits = attention_logits(q, k, tau, bias, use_cosine)
    if key_mask is not None:
        logits = logits.masked_fill(~key_mask[..., None, None, :], float("-inf"))
    weights = torch.softmax(logits, dim=-1)
    out = weights @ v
    return (out, weights) if return_weights else out


class CSwinAttention(nn.Module):
    """Grouped stripe attention on channels-last grids ``(B, H, W, D, C)``.

    Heads ``[0, G/3)`` use horizontal stripes, ``[G/3, 2G/3)`` vertical and
    ``[2G/3, G)`` longitudinal; their outputs are concatenated in that order
    and projected by ``proj`` (the C x C output matrix).
    """

    def __init__(self, dim, heads, sw, use_cosine=True, bias_radius=3, tau_init=0.1):
        super().__init__()
        if heads % 3:
            raise ValueError(f"head count must be divisible by 3, got {heads}")
        if dim % heads:
            raise ValueError(f"channel width {dim} not divisible by head count {heads}")
        if sw <= 0:
            raise ValueError(f"stripe width must be positive, got {sw}")
        self.dim, self.heads, self.sw = dim, heads, int(sw)
        self.use_cosine = use_cosine
        self.bias_radius = bias_radius
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        group_heads = heads // 3
        self.log_tau = nn.Parameter(torch.full((3, group_heads), math.log(tau_init)))
        self.rel_bias = nn.ParameterList(
            nn.Parameter(torch.randn(group_heads, bias_table_size(self.sw, a, bias_radius)) * 0.02) for a in range(3)
        )

    def tau(self) -> torch.Tensor:
        return self.log_tau.exp().clamp_min(TAU_MIN)

    def grouped(self, x: torch.Tensor) -> torch.Tensor:
        """Concatenated head-group outputs before the output projection."""
        b = x.shape[0]
        c3 = self.dim // 3
        gh = self.heads // 3
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        taus = self.tau()
        outs = []
        for a in range(3):
            sl = slice(a * c3, (a + 1) * c3)
            qs, padded = _partition_cl(q[..., sl], self.sw, a)
            ks, _ = _partition_cl(k[..., sl], self.sw, a)
            vs, _ = _partition_cl(v[..., sl], self.sw, a)
            m, window = qs.shape[1], tuple(qs.shape[2:5])
            n = math.prod(window)

            def heads_first(t):
                return t.reshape(b, m, n, gh, self.head_dim).transpose(2, 3)

            radii = bias_radii(self.sw, a, self.bias_radius)
            bias = relative_position_bias(self.rel_bias[a], window, radii)
            mask = None
            extent = x.shape[1 + a]
            if padded != extent:
                pos = torch.arange(padded).reshape(m, self.sw) < extent
                shape = [1, 1, 1]
                shape[a] = self.sw
                mask = pos.reshape(m, *shape).expand(m, *window).reshape(1, m, n)
            out = scaled_cosine_attention(
                heads_first(qs), heads_first(ks), heads_first(vs), taus[a], bias, self.use_cosine, mask
            )
            out = out.transpose(2, 3).reshape(b, m, *window, c3)
            outs.append(_merge_cl(out, a, extent))
        return torch.cat(outs, dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(self.grouped(x))


def cswin_attention(t: torch.Tensor, attn: CSwinAttention) -> torch.Tensor:
    """Apply ``attn`` to a channel-major grid ``(B, C, H, W, D)``."""
    return attn(t.permute(0, 2, 3, 4, 1)).permute(0, 4, 1, 2, 3)


class CSwinBlock(nn.Module):
    """Transformer block with cross-shaped window attention.

    ``norm_position="pre"`` wires ``x + Attn(Norm(x))`` then
    ``x + MLP(Norm(x))``; ``"post"`` uses the residual post-norm
    ``x + Norm(Attn(x))``. Operates on channels-last grids.
    """

    def __init__(self, dim, heads, sw, mlp_ratio=4.0, use_cosine=True, norm_position="pre", bias_radius=3, tau_init=0.1):
        super().__init__()
        if norm_position not in ("pre", "post"):
            raise ValueError(f"norm_position must be 'pre' or 'post', got {norm_position!r}")
        self.norm_position = norm_position
        self.norm1 = nn.LayerNorm(dim)
        self.attn = CSwinAttention(dim, heads, sw, use_cosine, bias_radius, tau_init)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        if self.norm_position == "pre":
            x = x + self.attn(self.norm1(x))
            return x + self.mlp(self.norm2(x))
        x = x + self.norm1(self.attn(x))
        return x + self.norm2(self.mlp(x))


def cswin_block_forward(t: torch.Tensor, block: CSwinBlock) -> torch.Tensor:
    """Apply ``block`` to a channel-major grid ``(B, C, H, W, D)``."""
    return block(t.permute(0, 2, 3, 4, 1)).permute(0, 4, 1, 2, 3)
