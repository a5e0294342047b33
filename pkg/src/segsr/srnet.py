"""SR network: shallow conv, k pluggable SR units with semantic modulation, pixel-shuffle tail."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import SemanticEncoder
from .localization import DescriptorBank
from .modulation import LearnableModulation

UNIT_STYLES = ("residual", "channel_attention", "hybrid_attention")
# ablation ladder: no semantics, encoder features added to unit outputs, features through modulation, full model
SEMANTIC_MODES = ("none", "sfem_add", "sfem_lmm", "full")
RGB_MEAN = (0.4488, 0.4371, 0.4040)


def pixel_shuffle(x: torch.Tensor, s: int) -> torch.Tensor:
    """Depth-to-space: out[c, h*s+dy, w*s+dx] = in[c*s*s + dy*s + dx, h, w]."""
    unbatched = x.dim() == 3
    if unbatched:
        x = x.unsqueeze(0)
    b, c, h, w = x.shape
    if c % (s * s):
        raise ValueError(f"channel count {c} is not divisible by scale^2 = {s * s}")
    out = x.reshape(b, c // (s * s), s, s, h, w).permute(0, 1, 4, 2, 5, 3)
    out = out.reshape(b, c // (s * s), h * s, w * s)
    return out[0] if unbatched else out


class PixelShuffle(nn.Module):
    def __init__(self, s):
        super().__init__()
        self.s = s

    def forward(self, x):
        return pixel_shuffle(x, self.s)


def l1_loss(pred, target):
    if pred.shape != target.shape:
        raise ValueError(f"l1_loss shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean()


# ---------------------------------------------------------------- residual style

class ResBlock(nn.Module):
    """EDSR block: conv-ReLU-conv with identity skip, no normalization."""

    def __init__(self, channels, res_scale=1.0):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.res_scale = res_scale

    def forward(self, x):
        return x + self.res_scale * self.conv2(F.relu(self.conv1(x)))


# ---------------------------------------------------------------- channel attention style

class CALayer(nn.Module):
    def __init__(self, channels, reduction=16):
        super().__init__()
        # floor of 4 keeps narrow test models from collapsing to a single (possibly dead) ReLU unit
        hidden = min(channels, max(4, channels // reduction))
        self.body = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(channels, hidden, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1),
            nn.Sigmoid(),
        )

    def forward(self, x):
        return x * self.body(x)


class RCAB(nn.Module):
    def __init__(self, channels, reduction=16):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1),
            CALayer(channels, reduction),
        )

    def forward(self, x):
        return x + self.body(x)


class ResidualGroup(nn.Module):
    """RCAN residual group: RCABs, trailing conv, group-level skip."""

    def __init__(self, channels, n_blocks=2, reduction=16):
        super().__init__()
        self.body = nn.Sequential(
            *[RCAB(channels, reduction) for _ in range(n_blocks)],
            nn.Conv2d(channels, channels, 3, padding=1),
        )

    def forward(self, x):
        return x + self.body(x)


# ---------------------------------------------------------------- hybrid attention style

def window_partition(x, ws):
    b, h, w, c = x.shape
    x = x.view(b, h // ws, ws, w // ws, ws, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, c)


def window_reverse(windows, ws, h, w):
    c = windows.shape[-1]
    b = windows.shape[0] // ((h // ws) * (w // ws))
    x = windows.view(b, h // ws, w // ws, ws, ws, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)


class WindowAttention(nn.Module):
    """Multi-head self-attention inside non-overlapping windows, with relative position bias."""

    def __init__(self, channels, window_size=8, heads=4):
        super().__init__()
        if channels % heads:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        self.ws = window_size
        self.heads = heads
        self.qkv = nn.Linear(channels, channels * 3)
        self.proj = nn.Linear(channels, channels)
        self.rel_bias = nn.Parameter(torch.zeros((2 * window_size - 1) ** 2, heads))
        nn.init.trunc_normal_(self.rel_bias, std=0.02)
        coords = torch.stack(torch.meshgrid(torch.arange(window_size), torch.arange(window_size), indexing="ij"))
        coords = coords.flatten(1)
        rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (window_size - 1)
        self.register_buffer("rel_index", rel[..., 0] * (2 * window_size - 1) + rel[..., 1], persistent=False)

    def forward(self, windows, mask=None):
        n_win, n, c = windows.shape
        hd = c // self.heads
        qkv = self.qkv(windows).reshape(n_win, n, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        bias = self.rel_bias[self.rel_index.reshape(-1)].reshape(n, n, -1).permute(2, 0, 1)
        attn = attn + bias.unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(n_win // nw, nw, self.heads, n, n) + mask[None, :, None]
            attn = attn.view(n_win, self.heads, n, n)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(n_win, n, c)
        return self.proj(out)


def shifted_window_mask(h, w, ws, shift, device=None):
    img = torch.zeros(1, h, w, 1, device=device)
    cnt = 0
    for hs in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
        for wsl in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
            img[:, hs, wsl, :] = cnt
            cnt += 1
    win = window_partition(img, ws).squeeze(-1)
    mask = win.unsqueeze(1) - win.unsqueeze(2)
    return mask.masked_fill(mask != 0, -100.0).masked_fill(mask == 0, 0.0)


class ChannelAttentionBlock(nn.Module):
    def __init__(self, channels, compress=3, squeeze=30):
        super().__init__()
        mid = max(1, channels // compress)
        self.body = nn.Sequential(
            nn.Conv2d(channels, mid, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(mid, channels, 3, padding=1),
            CALayer(channels, squeeze),
        )

    def forward(self, x):
        return self.body(x)


class HybridBlock(nn.Module):
    """Window self-attention in parallel with a channel-attention conv branch, then an MLP."""

    def __init__(self, channels, window_size=8, heads=4, mlp_ratio=2.0, shift=0, conv_scale=0.01):
        super().__init__()
        self.ws = window_size
        self.shift = shift
        self.conv_scale = conv_scale
        self.norm1 = nn.LayerNorm(channels)
        self.attn = WindowAttention(channels, window_size, heads)
        self.cab = ChannelAttentionBlock(channels)
        self.norm2 = nn.LayerNorm(channels)
        hidden = int(channels * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(channels, hidden), nn.GELU(), nn.Linear(hidden, channels))

    def forward(self, x):
        b, c, h, w = x.shape
        ws = self.ws
        ph, pw = (-h) % ws, (-w) % ws
        tokens = x.permute(0, 2, 3, 1)
        y = self.norm1(tokens)
        conv = self.cab(y.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)

        yp = F.pad(y, (0, 0, 0, pw, 0, ph)) if ph or pw else y
        hp, wp = h + ph, w + pw
        shift = self.shift if min(hp, wp) > ws else 0
        if shift:
            yp = torch.roll(yp, (-shift, -shift), dims=(1, 2))
            mask = shifted_window_mask(hp, wp, ws, shift, x.device).to(x.dtype)
        else:
            mask = None
        attn = window_reverse(self.attn(window_partition(yp, ws), mask), ws, hp, wp)
        if shift:
            attn = torch.roll(attn, (shift, shift), dims=(1, 2))
        attn = attn[:, :h, :w]

        tokens = tokens + attn + self.conv_scale * conv
        tokens = tokens + self.mlp(self.norm2(tokens))
        return tokens.permute(0, 3, 1, 2)


class HybridGroup(nn.Module):
    """Simplified residual hybrid attention group: hybrid blocks, trailing conv, group skip."""

    def __init__(self, channels, depth=2, window_size=8, heads=4, mlp_ratio=2.0, shift=True):
        super().__init__()
        self.blocks = nn.Sequential(*[
            HybridBlock(channels, window_size, heads, mlp_ratio,
                        shift=(window_size // 2 if shift and i % 2 else 0))
            for i in range(depth)
        ])
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv(self.blocks(x))


def build_units(style, total_blocks, k, channels, inner_depth=2, window_size=8, heads=4,
                mlp_ratio=2.0, shift=True, reduction=16, res_scale=1.0):
    """Group ``total_blocks`` base blocks of ``style`` into ``k`` SR units.

    Base blocks are EDSR residual blocks, RCAN residual groups (``inner_depth``
    RCABs each) or hybrid attention groups (``inner_depth`` hybrid blocks each).
    """
    if style not in UNIT_STYLES:
        raise ValueError(f"unknown SR unit style {style!r}; choose from {UNIT_STYLES}")
    if k < 1 or total_blocks % k:
        raise ValueError(f"{total_blocks} {style} blocks cannot be split evenly into {k} units")
    per_unit = total_blocks // k

    def base():
        if style == "residual":
            return ResBlock(channels, res_scale)
        if style == "channel_attention":
            return ResidualGroup(channels, inner_depth, reduction)
        return HybridGroup(channels, inner_depth, window_size, heads, mlp_ratio, shift)

    return nn.ModuleList(nn.Sequential(*[base() for _ in range(per_unit)]) for _ in range(k))


class Upsampler(nn.Sequential):
    """Conv + pixel shuffle stages (x2 per stage for powers of two, one x3 stage), then conv to RGB."""

    def __init__(self, scale, channels, out_channels=3):
        layers = []
        if scale & (scale - 1) == 0:
            for _ in range(int(math.log2(scale))):
                layers += [nn.Conv2d(channels, 4 * channels, 3, padding=1), PixelShuffle(2)]
        elif scale == 3:
            layers += [nn.Conv2d(channels, 9 * channels, 3, padding=1), PixelShuffle(3)]
        else:
            raise ValueError(f"unsupported scale {scale}")
        layers.append(nn.Conv2d(channels, out_channels, 3, padding=1))
        super().__init__(*layers)


class SegSrModel(nn.Module):
    """Semantic-guided SR network.

    ``semantics`` picks the ablation variant: ``none`` builds no encoder,
    ``sfem_add`` adds per-unit projections of the local features to the unit
    outputs, ``sfem_lmm`` feeds those projections into modulation modules, and
    ``full`` derives one guidance map per unit through the descriptor bank.
    """

    def __init__(self, scale=4, channels=60, k=6, style="hybrid_attention", total_blocks=6,
                 unit_opts=None, semantics="full", encoder: SemanticEncoder | None = None,
                 slm_variant="full", slm_heads=1, modulation_kernel=3, shared_modulation=True):
        super().__init__()
        if semantics not in SEMANTIC_MODES:
            raise ValueError(f"unknown semantics mode {semantics!r}; choose from {SEMANTIC_MODES}")
        if semantics != "none" and encoder is None:
            raise ValueError(f"semantics mode {semantics!r} needs an encoder")
        self.scale = scale
        self.k = k
        self.semantics = semantics
        self.shallow = nn.Conv2d(3, channels, 3, padding=1)
        self.units = build_units(style, total_blocks, k, channels, **(unit_opts or {}))
        self.encoder = encoder if semantics != "none" else None
        self.bank = None
        self.projections = None
        self.modulators = None
        if semantics in ("sfem_add", "sfem_lmm"):
            width = encoder.width
            self.projections = nn.ModuleList(nn.Conv2d(width, channels, 1) for _ in range(k))
        if semantics == "sfem_lmm":
            self.modulators = nn.ModuleList(
                LearnableModulation(channels, guide_channels=channels, kernel_size=modulation_kernel,
                                    shared=shared_modulation)
                for _ in range(k)
            )
        if semantics == "full":
            self.bank = DescriptorBank(encoder.width, k, heads=slm_heads, variant=slm_variant)
            self.modulators = nn.ModuleList(
                LearnableModulation(channels, guide_channels=1, kernel_size=modulation_kernel,
                                    shared=shared_modulation)
                for _ in range(k)
            )
        self.upsampler = Upsampler(scale, channels)
        # input mean shift as in EDSR/RCAN/HAT; added back after reconstruction
        self.register_buffer("rgb_mean", torch.tensor(RGB_MEAN).view(1, 3, 1, 1))

    def check_input(self, lr):
        if lr.dim() != 4 or lr.shape[1] != 3:
            raise ValueError(f"expected a B x 3 x H x W batch, got {tuple(lr.shape)}")
        h, w = lr.shape[-2:]
        if h < 8 or w < 8:
            raise ValueError(f"input {h}x{w} is smaller than the 8x8 minimum")
        if self.encoder is not None:
            p = self.encoder.patch_size
            for name, size in (("height", h), ("width", w)):
                if (size * self.scale) % p:
                    raise ValueError(
                        f"input {name} {size} x scale {self.scale} = {size * self.scale} "
                        f"is not divisible by encoder patch size {p}"
                    )

    def semantic_features(self, lr):
        h, w = lr.shape[-2:]
        up = F.interpolate(lr, size=(h * self.scale, w * self.scale), mode="bilinear", align_corners=False)
        return self.encoder(up)

    def guidance(self, lr):
        """Guidance maps (``B x k x H x W``) for an LR batch; full mode only."""
        if self.bank is None:
            raise ValueError(f"guidance maps need semantics='full', model has {self.semantics!r}")
        self.check_input(lr)
        return self.bank(self.semantic_features(lr), lr.shape[-2:])

    def _guides(self, lr):
        if self.semantics == "none":
            return None
        feats = self.semantic_features(lr)
        if self.semantics == "full":
            return self.bank(feats, lr.shape[-2:]).maps.split(1, dim=1)
        grid = feats.local_feat.permute(0, 3, 1, 2)
        return [
            F.interpolate(proj(grid), size=lr.shape[-2:], mode="bilinear", align_corners=False)
            for proj in self.projections
        ]

    def body(self, x, guides):
        for i, unit in enumerate(self.units):
            x = unit(x)
            if self.semantics == "sfem_add":
                x = x + guides[i]
            elif self.modulators is not None:
                x = self.modulators[i](x, guides[i])
        return x

    def forward(self, lr):
        self.check_input(lr)
        guides = self._guides(lr)
        shallow = self.shallow(lr - self.rgb_mean)
        return self.upsampler(self.body(shallow, guides) + shallow) + self.rgb_mean

    def parameter_counts(self):
        total = sum(p.numel() for p in self.parameters())
        trainable = sum(p.numel() for p in self.parameters() if p.requires_grad)
        return {"total": total, "trainable": trainable}


class BicubicBaseline(nn.Module):
    """Parameter-free model that returns the bicubic upsample of its input."""

    def __init__(self, scale=4):
        super().__init__()
        self.scale = scale

    def forward(self, lr):
        from .data import bicubic_resize

        h, w = lr.shape[-2:]
        out = [torch.from_numpy(bicubic_resize(img.detach().cpu().numpy(), (h * self.scale, w * self.scale)))
               for img in lr]
        return torch.stack(out).to(lr.dtype)

    def parameter_counts(self):
        return {"total": 0, "trainable": 0}


def build_encoder(cfg, load_weights=True) -> SemanticEncoder:
    """Encoder from an ``EncoderConfig``; ``kind=pretrained`` loads the weight container."""
    enc = SemanticEncoder(
        width=cfg.width, depth=cfg.depth, heads=cfg.heads, patch_size=cfg.patch_size, grid=cfg.grid,
        mlp_ratio=cfg.mlp_ratio, lora_rank=cfg.lora.rank, lora_targets=cfg.lora.targets,
        proj_dim=cfg.proj_dim, seed=cfg.seed,
    )
    if cfg.kind == "pretrained" and load_weights:
        from .config import resolve_weights
        from .encoder import load_pretrained

        load_pretrained(enc, resolve_weights(cfg.weights))
    return enc


def build_model(cfg, load_weights=True) -> nn.Module:
    """Model from a ``ModelConfig``; parameters are drawn from ``cfg.seed`` without touching global RNG state."""
    if cfg.arch == "bicubic":
        return BicubicBaseline(cfg.scale)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        encoder = build_encoder(cfg.encoder, load_weights) if cfg.semantics != "none" else None
        unit_opts = dict(
            inner_depth=cfg.inner_depth, window_size=cfg.window_size, heads=cfg.heads,
            mlp_ratio=cfg.mlp_ratio, shift=cfg.shift, reduction=cfg.reduction, res_scale=cfg.res_scale,
        )
        return SegSrModel(
            scale=cfg.scale, channels=cfg.channels, k=cfg.units, style=cfg.style,
            total_blocks=cfg.total_blocks, unit_opts=unit_opts, semantics=cfg.semantics,
            encoder=encoder, slm_variant=cfg.slm_variant, slm_heads=cfg.slm_heads,
            modulation_kernel=cfg.modulation_kernel, shared_modulation=cfg.shared_modulation,
        )
