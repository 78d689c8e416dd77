"""Conditional noise predictor: a residual UNet with a content compensation branch.

The network sees ``concat(x_t, y0[, y0 - x_t])`` along channels. When the
content compensation module (CCM) is enabled, a bias-free strided conv
pyramid over ``y0`` produces one feature map per encoder level, which is
added to the input of that level's last residual block.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


class ConfigError(ValueError):
    pass


class MissingConditionError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    blocks_per_level: int = 4
    time_embed_dim: int = 128
    use_difference_condition: bool = True
    use_ccm: bool = True
    out_channels: int = field(default=3, init=False)

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(int(m) for m in self.channel_multipliers))
        if self.base_channels < 1 or self.time_embed_dim < 2:
            raise ConfigError("base_channels and time_embed_dim must be positive")
        if len(self.channel_multipliers) < 1 or min(self.channel_multipliers) < 1:
            raise ConfigError("channel_multipliers must be a non-empty list of positive ints")
        if self.blocks_per_level < 1:
            raise ConfigError("blocks_per_level must be >= 1")

    @property
    def in_channels(self) -> int:
        return 3 * (2 + int(self.use_difference_condition))

    @property
    def levels(self) -> int:
        return len(self.channel_multipliers)

    @property
    def level_channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_multipliers]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        d.pop("out_channels")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d.pop("in_channels", None)
        d.pop("out_channels", None)
        return cls(**d)


# Named after the ablation variants: A = y0 only, B = +difference, C = +CCM, D = full.
VARIANTS = {
    "A": dict(use_difference_condition=False, use_ccm=False),
    "B": dict(use_difference_condition=True, use_ccm=False),
    "C": dict(use_difference_condition=False, use_ccm=True),
    "D": dict(use_difference_condition=True, use_ccm=True),
}


def variant_config(name: str, **overrides) -> ModelConfig:
    return ModelConfig(**{**VARIANTS[name.upper()], **overrides})


def _groups(channels: int) -> int:
    # at least 4 channels per group: with 1-channel groups the norm would
    # erase every per-channel shift, including the timestep shift
    limit = max(1, min(8, channels // 4))
    return max(g for g in range(1, limit + 1) if channels % g == 0)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([args.sin(), args.cos()], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class ContentCompensation(nn.Module):
    """Shallow strided-conv pyramid over the raw image; no biases, no norms."""

    def __init__(self, out_channels: list[int]):
        super().__init__()
        stages = []
        prev = 3
        for k, ch in enumerate(out_channels):
            stages.append(nn.Conv2d(prev, ch, 3, stride=1 if k == 0 else 2, padding=1, bias=False))
            prev = ch
        self.stages = nn.ModuleList(stages)

    def forward(self, y0):
        feats = []
        h = y0
        for conv in self.stages:
            h = F.silu(conv(h))
            feats.append(h)
        return feats


class CPDMNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.time_embed_dim
        chans = cfg.level_channels

        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.conv_in = nn.Conv2d(cfg.in_channels, cfg.base_channels, 3, padding=1)

        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        ccm_channels = []
        ch = cfg.base_channels
        for k, out in enumerate(chans):
            blocks = nn.ModuleList()
            for b in range(cfg.blocks_per_level):
                if b == cfg.blocks_per_level - 1:
                    ccm_channels.append(ch)
                blocks.append(ResBlock(ch, out, d))
                ch = out
            self.down.append(blocks)
            if k < cfg.levels - 1:
                self.downsample.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
        self.ccm = ContentCompensation(ccm_channels) if cfg.use_ccm else None

        self.mid = nn.ModuleList([ResBlock(ch, ch, d), ResBlock(ch, ch, d)])

        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for k in reversed(range(cfg.levels)):
            out = chans[k]
            blocks = nn.ModuleList()
            blocks.append(ResBlock(ch + chans[k], out, d))
            for _ in range(cfg.blocks_per_level - 1):
                blocks.append(ResBlock(out, out, d))
            ch = out
            self.up.append(blocks)
            if k > 0:
                self.upsample.append(nn.Conv2d(ch, ch, 3, padding=1))

        self.norm_out = nn.GroupNorm(_groups(ch), ch)
        self.conv_out = nn.Conv2d(ch, cfg.out_channels, 3, padding=1)

    def content_features(self, y0: torch.Tensor) -> list[torch.Tensor]:
        if self.ccm is None:
            raise ConfigError("content compensation is disabled in this configuration")
        return self.ccm(y0)

    def forward(self, xt, t, y0, diff=None):
        cfg = self.cfg
        if xt.shape != y0.shape:
            raise ValueError(f"shape mismatch: x_t {tuple(xt.shape)} vs y0 {tuple(y0.shape)}")
        factor = 2 ** (cfg.levels - 1)
        if xt.shape[-1] % factor or xt.shape[-2] % factor:
            raise ValueError(f"spatial size {tuple(xt.shape[-2:])} must be divisible by {factor}")
        inputs = [xt, y0]
        if cfg.use_difference_condition:
            if diff is None:
                raise MissingConditionError("model expects the difference condition y0 - x_t")
            if diff.shape != xt.shape:
                raise ValueError("difference condition shape mismatch")
            inputs.append(diff)

        temb = self.time_mlp(timestep_embedding(t, cfg.time_embed_dim).to(xt.dtype))
        feats = self.ccm(y0) if self.ccm is not None else None

        h = self.conv_in(torch.cat(inputs, dim=1))
        skips = []
        for k, blocks in enumerate(self.down):
            for b, block in enumerate(blocks):
                if feats is not None and b == len(blocks) - 1:
                    h = h + feats[k]
                h = block(h, temb)
            skips.append(h)
            if k < len(self.downsample):
                h = self.downsample[k](h)

        for block in self.mid:
            h = block(h, temb)

        for i, blocks in enumerate(self.up):
            h = torch.cat([h, skips.pop()], dim=1)
            for block in blocks:
                h = block(h, temb)
            if i < len(self.upsample):
                h = self.upsample[i](F.interpolate(h, scale_factor=2, mode="nearest"))

        return self.conv_out(F.silu(self.norm_out(h)))


def init_parameters(cfg: ModelConfig, seed: int) -> CPDMNet:
    """Build a network with seeded fan-in-scaled weights and a zeroed output conv."""
    with torch.random.fork_rng(devices=[]):
        model = CPDMNet(cfg)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.startswith("conv_out."):
                p.zero_()
            elif name.startswith("norm") or ".norm" in name:
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            else:
                fan_in = _fan_in(model, name, p)
                bound = 1.0 / math.sqrt(fan_in)
                p.copy_(torch.rand(p.shape, generator=gen, dtype=p.dtype) * 2 * bound - bound)
    return model


def _fan_in(model: nn.Module, name: str, p: torch.Tensor) -> int:
    if p.dim() > 1:
        return p[0].numel()
    # bias: fan-in of the matching weight
    weight = model.get_parameter(name.rsplit(".", 1)[0] + ".weight")
    return weight[0].numel()


def predict_noise(model: CPDMNet, xt, t, y0, diff=None) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if t.numel() == 1:
        t = t.expand(xt.shape[0])
    return model(xt, t, y0, diff)


def ccm_extract(model: CPDMNet, y0: torch.Tensor) -> list[torch.Tensor]:
    return model.content_features(y0)


def has_ccm_parameters(model: nn.Module) -> bool:
    return any(name.startswith("ccm.") for name, _ in model.named_parameters())
