"""CSwin UNet: convolutional token embedding, four CSwin stages, CNN decoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
from torch import nn

from .attention import CSwinBlock

SKIP_NAMES = ("input", "stem", "stage1", "stage2", "stage3", "stage4")


@dataclass
class CSwinConfig:
    in_channels: int = 3
    out_channels: int = 2
    feature_size: int = 48
    depths: tuple = (1, 2, 4, 1)
    heads: tuple = (3, 6, 12, 24)
    stripe_widths: tuple = (1, 2, 5, 5)
    mlp_ratio: float = 4.0
    use_cosine: bool = True
    norm_position: str = "pre"
    bias_radius: int = 3
    tau_init: float = 0.1
    anisotropic: bool = False

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.heads = tuple(int(h) for h in self.heads)
        self.stripe_widths = tuple(int(s) for s in self.stripe_widths)
        if not (len(self.depths) == len(self.heads) == len(self.stripe_widths) == 4):
            raise ValueError("depths, heads and stripe_widths need one entry per stage (4)")
        for i, g in enumerate(self.heads):
            if g % 3:
                raise ValueError(f"stage {i + 1}: head count {g} not divisible by 3")
            if self.stage_dims[i] % g:
                raise ValueError(f"stage {i + 1}: width {self.stage_dims[i]} not divisible by {g} heads")
        if min(self.stripe_widths) <= 0:
            raise ValueError("stripe widths must be positive")

    @property
    def stage_dims(self) -> tuple[int, int, int, int]:
        f = self.feature_size
        return (f, 2 * f, 4 * f, 8 * f)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "CSwinConfig":
        return cls(**d)


def downsample_strides(spatial, anisotropic: bool = False) -> list[tuple[int, int, int]]:
    """Per-axis strides for the five stride-2 steps from input to 1/32.

    Isotropic mode requires every extent to be a multiple of 32. In
    anisotropic mode an axis whose extent has already reached 1 keeps
    stride 1 from then on.
    """
    spatial = [int(s) for s in spatial]
    if not anisotropic:
        bad = [s for s in spatial if s % 32]
        if bad:
            raise ValueError(f"spatial extents {tuple(spatial)} must be multiples of 32")
        return [(2, 2, 2)] * 5
    strides, cur = [], list(spatial)
    for _ in range(5):
        step = []
        for a in range(3):
            if cur[a] >= 2:
                if cur[a] % 2:
                    raise ValueError(f"axis {a} extent {spatial[a]} does not halve evenly; use multiples of 2^k")
                step.append(2)
                cur[a] //= 2
            else:
                step.append(1)
        strides.append(tuple(step))
    if cur[0] != spatial[0] // 32 or cur[1] != spatial[1] // 32 or spatial[0] % 32 or spatial[1] % 32:
        raise ValueError(f"in-plane extents {tuple(spatial[:2])} must be multiples of 32")
    return strides


class ChannelNorm(nn.Module):
    """LayerNorm over the channel axis of a channel-major grid."""

    def __init__(self, dim):
        super().__init__()
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        return self.norm(x.permute(0, 2, 3, 4, 1)).permute(0, 4, 1, 2, 3)


class InstanceNorm(nn.Module):
    """Affine instance norm that also accepts single-voxel grids."""

    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        mean = x.mean(dim=(2, 3, 4), keepdim=True)
        var = (x - mean).pow(2).mean(dim=(2, 3, 4), keepdim=True)
        y = (x - mean) / torch.sqrt(var + self.eps)
        return y * self.weight.view(1, -1, 1, 1, 1) + self.bias.view(1, -1, 1, 1, 1)


class ResBlock(nn.Module):
    """Two 3x3x3 convolutions with instance norm and a residual connection."""

    def __init__(self, cin, cout):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, cout, 3, padding=1, bias=False)
        self.norm1 = InstanceNorm(cout)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1, bias=False)
        self.norm2 = InstanceNorm(cout)
        self.act = nn.LeakyReLU(0.01)
        self.skip = None
        if cin != cout:
            self.skip = nn.Sequential(nn.Conv3d(cin, cout, 1, bias=False), InstanceNorm(cout))

    def forward(self, x):
        y = self.act(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return self.act(y + (x if self.skip is None else self.skip(x)))


class UpBlock(nn.Module):
    """Transposed-conv upsampling, skip concatenation, residual block."""

    def __init__(self, cin, cout, stride):
        super().__init__()
        self.up = nn.ConvTranspose3d(cin, cout, kernel_size=2, stride=stride, bias=False)
        self.res = ResBlock(2 * cout, cout)

    def forward(self, x, skip):
        up = self.up(x)
        # kernel 2 with stride 1 overshoots by one voxel on that axis
        up = up[:, :, : skip.shape[2], : skip.shape[3], : skip.shape[4]]
        return self.res(torch.cat([up, skip], dim=1))


class Stage(nn.Module):
    def __init__(self, dim, depth, heads, sw, cfg: CSwinConfig):
        super().__init__()
        self.blocks = nn.ModuleList(
            CSwinBlock(dim, heads, sw, cfg.mlp_ratio, cfg.use_cosine, cfg.norm_position, cfg.bias_radius, cfg.tau_init)
            for _ in range(depth)
        )

    def forward(self, x):
        x = x.permute(0, 2, 3, 4, 1)
        for blk in self.blocks:
            x = blk(x)
        return x.permute(0, 4, 1, 2, 3)


class EncoderFeatures(NamedTuple):
    stem: torch.Tensor          # F at 1/2
    stages: list                # F, 2F, 4F, 8F at 1/4 .. 1/32
    bottleneck: torch.Tensor    # 8F at 1/32


class CSwinEncoder(nn.Module):
    def __init__(self, cfg: CSwinConfig):
        super().__init__()
        self.cfg = cfg
        dims = cfg.stage_dims
        self.embed1 = nn.Conv3d(cfg.in_channels, dims[0], 7, padding=3)
        self.embed1_norm = ChannelNorm(dims[0])
        self.embed2 = nn.Conv3d(dims[0], dims[0], 3, padding=1)
        self.embed2_norm = ChannelNorm(dims[0])
        self.merges = nn.ModuleList()
        for i in range(1, 4):
            self.merges.append(nn.ModuleDict({"conv": nn.Conv3d(dims[i - 1], dims[i], 3, padding=1), "norm": ChannelNorm(dims[i])}))
        self.stages = nn.ModuleList(
            Stage(dims[i], cfg.depths[i], cfg.heads[i], cfg.stripe_widths[i], cfg) for i in range(4)
        )
        # last token embedding keeps the 1/32 resolution
        self.bottleneck = nn.Conv3d(dims[3], dims[3], 3, padding=1)
        self.bottleneck_norm = ChannelNorm(dims[3])

    def forward(self, x) -> EncoderFeatures:
        strides = downsample_strides(x.shape[2:], self.cfg.anisotropic)
        if x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected {self.cfg.in_channels} input channels, got {x.shape[1]}")
        # strides are input dependent in anisotropic mode, so set them per call
        self.embed1.stride = strides[0]
        self.embed2.stride = strides[1]
        stem = self.embed1_norm(self.embed1(x))
        h = self.embed2_norm(self.embed2(stem))
        feats = []
        for i in range(4):
            if i:
                m = self.merges[i - 1]
                m["conv"].stride = strides[i + 1]
                h = m["norm"](m["conv"](h))
            h = self.stages[i](h)
            feats.append(h)
        bott = self.bottleneck_norm(self.bottleneck(h))
        return EncoderFeatures(stem, feats, bott)


class CSwinDecoder(nn.Module):
    def __init__(self, cfg: CSwinConfig):
        super().__init__()
        self.cfg = cfg
        f1, f2, f4, f8 = cfg.stage_dims
        self.proc_input = ResBlock(cfg.in_channels, f1)
        self.proc_stem = ResBlock(f1, f1)
        self.proc_stages = nn.ModuleList(ResBlock(d, d) for d in cfg.stage_dims)
        self.proc_bottleneck = ResBlock(f8, f8)
        self.fuse_bottom = ResBlock(2 * f8, f8)
        self.up3 = UpBlock(f8, f4, 2)
        self.up2 = UpBlock(f4, f2, 2)
        self.up1 = UpBlock(f2, f1, 2)
        self.up_stem = UpBlock(f1, f1, 2)
        self.up_input = UpBlock(f1, f1, 2)
        self.head = nn.Conv3d(f1, cfg.out_channels, 1)

    def _set_strides(self, strides):
        # decoder level -> encoder downsampling step it undoes
        for blk, s in ((self.up3, strides[4]), (self.up2, strides[3]), (self.up1, strides[2]),
                       (self.up_stem, strides[1]), (self.up_input, strides[0])):
            blk.up.stride = s

    def logits(self, x, feats: EncoderFeatures, skip_mask=()):
        for name in skip_mask:
            if name not in SKIP_NAMES:
                raise ValueError(f"unknown skip {name!r}; expected one of {SKIP_NAMES}")
        expected = list(self.cfg.stage_dims)
        got = [f.shape[1] for f in feats.stages]
        if got != expected or feats.bottleneck.shape[1] != expected[3]:
            raise ValueError(f"feature widths {got} do not match decoder widths {expected}")
        self._set_strides(downsample_strides(x.shape[2:], self.cfg.anisotropic))

        def skip(name, t):
            return torch.zeros_like(t) if name in skip_mask else t

        s_in = skip("input", self.proc_input(x))
        s_stem = skip("stem", self.proc_stem(feats.stem))
        s = [skip(f"stage{i + 1}", self.proc_stages[i](f)) for i, f in enumerate(feats.stages)]
        h = self.fuse_bottom(torch.cat([self.proc_bottleneck(feats.bottleneck), s[3]], dim=1))
        h = self.up3(h, s[2])
        h = self.up2(h, s[1])
        h = self.up1(h, s[0])
        h = self.up_stem(h, s_stem)
        h = self.up_input(h, s_in)
        return self.head(h)


class CSwinUNet(nn.Module):
    """Encoder-decoder producing per-voxel class probabilities ``(B, 2, H, W, D)``."""

    def __init__(self, cfg: CSwinConfig | None = None, **kwargs):
        super().__init__()
        cfg = cfg or CSwinConfig(**kwargs)
        self.cfg = cfg
        self.encoder = CSwinEncoder(cfg)
        self.decoder = CSwinDecoder(cfg)

    def encode(self, x) -> EncoderFeatures:
        return self.encoder(x)

    def decode(self, x, feats: EncoderFeatures, skip_mask=()):
        return torch.softmax(self.decoder.logits(x, feats, skip_mask), dim=1)

    def forward_logits(self, x, skip_mask=()):
        return self.decoder.logits(x, self.encoder(x), skip_mask)

    def forward(self, x, skip_mask=()):
        return self.decode(x, self.encode(x), skip_mask)

    def detection_map(self, x) -> torch.Tensor:
        """Class-1 probability per voxel, ``(B, H, W, D)``."""
        return self.forward(x)[:, 1]
