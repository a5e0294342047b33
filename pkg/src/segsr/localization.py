"""Semantic localization: per-unit descriptors -> localization embeddings -> guidance maps."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

COSINE_EPS = 1e-8

# Descriptor-bank variants (which of p_i, p_g, I_g participate).
SLM_VARIANTS = ("full", "unit_only", "unit_global", "unit_clip", "global_clip")


def _check_width(a, b, what):
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"{what}: width mismatch {a.shape[-1]} vs {b.shape[-1]}")


class MetaNet(nn.Module):
    """Fuses the image's global feature with the learnable global descriptor."""

    def __init__(self, width, hidden=None):
        super().__init__()
        hidden = hidden or width
        self.mlp_in = nn.Linear(width, hidden)
        self.mlp_out = nn.Linear(hidden, width)
        self.mul_head = nn.Linear(width, width)
        self.add_head = nn.Linear(width, width)
        self.out_head = nn.Linear(width, width)

    def forward(self, global_feat, global_descriptor):
        _check_width(global_feat, global_descriptor, "metanet_fuse")
        ig = self.mlp_out(F.relu(self.mlp_in(global_feat)))
        return self.out_head(self.mul_head(ig) * global_descriptor + self.add_head(ig))


def metanet_fuse(metanet: MetaNet, global_feat, global_descriptor):
    return metanet(global_feat, global_descriptor)


class TokenAttention(nn.Module):
    """Single self-attention layer over descriptor tokens, no positional encoding."""

    def __init__(self, width, heads=1):
        super().__init__()
        if width % heads:
            raise ValueError(f"width {width} not divisible by heads {heads}")
        self.heads = heads
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(width, width)
        self.v = nn.Linear(width, width)

    def forward(self, tokens):
        *lead, n, c = tokens.shape
        hd = c // self.heads

        def split(t):
            return t.reshape(*lead, n, self.heads, hd).transpose(-3, -2)

        q, k, v = split(self.q(tokens)), split(self.k(tokens)), split(self.v(tokens))
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(hd), dim=-1)
        return (attn @ v).transpose(-3, -2).reshape(*lead, n, c)


def interact(attention: TokenAttention, global_fused, unit_descriptors):
    """Returns ``(p_g*, p_i*)`` from attention over ``[p_g', p_1 .. p_k]``.

    ``global_fused`` is ``(..., C)``; ``unit_descriptors`` is ``(..., k, C)``.
    """
    if unit_descriptors.shape[-2] == 0:
        raise ValueError("interact needs at least one unit descriptor (k >= 1)")
    _check_width(global_fused, unit_descriptors, "interact")
    units = unit_descriptors.expand(*global_fused.shape[:-1], *unit_descriptors.shape[-2:])
    out = attention(torch.cat([global_fused.unsqueeze(-2), units], dim=-2))
    return out[..., 0, :], out[..., 1:, :]


class GatedFusion(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.gate = nn.Linear(width, width)
        self.value = nn.Linear(width, width)
        self.out = nn.Linear(width, width)

    def forward(self, unit_refined, global_refined):
        _check_width(unit_refined, global_refined, "gated_fuse")
        return self.out(torch.sigmoid(self.gate(unit_refined)) * self.value(global_refined))


def gated_fuse(fusion: GatedFusion, unit_refined, global_refined):
    return fusion(unit_refined, global_refined)


@dataclass
class GuidanceMapSet:
    """``maps`` is ``B x k x H x W`` with values in [-1, 1]; ``grid`` is the source (H_c, W_c)."""

    maps: torch.Tensor
    grid: tuple

    def __len__(self):
        return self.maps.shape[1]


def cosine_grid(embeddings, local_feat, eps=COSINE_EPS):
    """Cosine similarity of each embedding with each grid cell: ``B x k x H_c x W_c``."""
    _check_width(embeddings, local_feat, "guidance_maps")
    e_norm = embeddings.norm(dim=-1, keepdim=True)
    l_norm = local_feat.norm(dim=-1, keepdim=True)
    if eps <= 0:
        if (e_norm == 0).any() or (l_norm == 0).any():
            raise ValueError("zero-norm vector in cosine similarity with the epsilon guard disabled")
    else:
        e_norm = e_norm.clamp_min(eps)
        l_norm = l_norm.clamp_min(eps)
    e = embeddings / e_norm
    loc = local_feat / l_norm
    return torch.einsum("bkc,bhwc->bkhw", e, loc)


def guidance_maps(embeddings, local_feat, target, eps=COSINE_EPS) -> GuidanceMapSet:
    """Cosine maps at grid size, bilinearly upsampled to ``target``.

    ``embeddings`` is ``B x k x C`` (or ``k x C``), ``local_feat`` is
    ``B x H_c x W_c x C`` (or unbatched).
    """
    if embeddings.dim() == 2:
        embeddings = embeddings.unsqueeze(0)
    if local_feat.dim() == 3:
        local_feat = local_feat.unsqueeze(0)
    grid = tuple(local_feat.shape[1:3])
    if target[0] < grid[0] or target[1] < grid[1]:
        raise ValueError(f"target {tuple(target)} smaller than source grid {grid}")
    low = cosine_grid(embeddings, local_feat, eps)
    maps = F.interpolate(low, size=tuple(target), mode="bilinear", align_corners=False)
    return GuidanceMapSet(maps=maps, grid=grid)


class DescriptorBank(nn.Module):
    """Learnable unit/global descriptors and the heads that turn them into embeddings.

    ``variant`` selects which inputs participate:

    - ``full``: p_i, p_g and I_g (MetaNet fuses p_g with I_g)
    - ``unit_only``: p_i only; attention among the unit tokens
    - ``unit_global``: p_i with a random p_g, no image feature
    - ``unit_clip``: p_i with I_g in place of p_g
    - ``global_clip``: p_g fused with I_g, no per-unit descriptors (all maps equal)
    """

    def __init__(self, width, k, heads=1, variant="full", descriptor_std=0.02):
        super().__init__()
        if k < 1:
            raise ValueError(f"descriptor bank needs k >= 1, got {k}")
        if variant not in SLM_VARIANTS:
            raise ValueError(f"unknown SLM variant {variant!r}; choose from {SLM_VARIANTS}")
        self.width = width
        self.k = k
        self.variant = variant
        uses_units = variant != "global_clip"
        uses_pg = variant in ("full", "unit_global", "global_clip")
        uses_metanet = variant in ("full", "global_clip")
        uses_fusion = variant in ("full", "unit_global", "unit_clip")

        self.unit_descriptors = nn.Parameter(torch.randn(k, width) * descriptor_std) if uses_units else None
        self.global_descriptor = nn.Parameter(torch.randn(width) * descriptor_std) if uses_pg else None
        self.metanet = MetaNet(width) if uses_metanet else None
        self.attention = TokenAttention(width, heads) if uses_units else None
        self.fusion = GatedFusion(width) if uses_fusion else None

    def embeddings(self, global_feat):
        """Localization embeddings ``B x k x C`` for a batch of global features ``B x C``."""
        if global_feat.shape[-1] != self.width:
            raise ValueError(f"bank width {self.width} != feature width {global_feat.shape[-1]}")
        b = global_feat.shape[0]
        v = self.variant
        if v == "unit_only":
            units = self.unit_descriptors.expand(b, -1, -1)
            return self.attention(units)
        if v == "global_clip":
            pg = metanet_fuse(self.metanet, global_feat, self.global_descriptor)
            return pg.unsqueeze(1).expand(-1, self.k, -1)
        if v == "full":
            pg = metanet_fuse(self.metanet, global_feat, self.global_descriptor)
        elif v == "unit_global":
            pg = self.global_descriptor.expand(b, -1)
        else:
            pg = global_feat
        g_star, u_star = interact(self.attention, pg, self.unit_descriptors)
        return gated_fuse(self.fusion, u_star, g_star.unsqueeze(1))

    def forward(self, features, target) -> GuidanceMapSet:
        return guidance_maps(self.embeddings(features.global_feat), features.local_feat, target)


def localize(bank: DescriptorBank, features, target) -> GuidanceMapSet:
    return bank(features, target)
