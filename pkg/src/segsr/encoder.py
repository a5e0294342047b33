"""Semantic feature extraction: a ViT image encoder with low-rank adapters.

The encoder mirrors the layout of the CLIP ViT visual tower (patch conv,
class token, learned positional grid, pre/post LayerNorm, pre-norm blocks)
so that published ViT-B/16 weights can be converted into the weight
container. Every pretrained tensor is frozen; only the adapter factors
``lora_a`` / ``lora_b`` are trainable.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors import SafetensorError
from safetensors.torch import load_file, save_file

ATTN_TARGETS = ("q_proj", "k_proj", "v_proj")
FFN_TARGETS = ("fc1", "fc2")
TARGET_SETS = {
    "none": (),
    "attn": ATTN_TARGETS,
    "attn+ffn": ATTN_TARGETS + FFN_TARGETS,
}

ADAPTER_INIT_STD = 0.02


class LoraLinear(nn.Module):
    """Frozen linear map plus a trainable low-rank update ``A @ B.T``.

    ``weight`` has shape ``(d_out, d_in)``, ``lora_a`` is ``(d_out, r)`` and
    ``lora_b`` is ``(d_in, r)``. ``rank=0`` builds the plain frozen layer
    (same tensor names, no adapter).
    """

    def __init__(self, in_features, out_features, rank=0, bias=True):
        super().__init__()
        if rank < 0:
            raise ValueError(f"rank must be >= 0, got {rank}")
        if rank and rank >= min(in_features, out_features):
            raise ValueError(
                f"rank {rank} must be smaller than min(d_out, d_in) = "
                f"{min(in_features, out_features)}"
            )
        self.in_features = in_features
        self.out_features = out_features
        self.rank = rank
        self.weight = nn.Parameter(torch.empty(out_features, in_features), requires_grad=False)
        self.bias = nn.Parameter(torch.zeros(out_features), requires_grad=False) if bias else None
        if rank:
            self.lora_a = nn.Parameter(torch.empty(out_features, rank))
            self.lora_b = nn.Parameter(torch.zeros(in_features, rank))
            self.reset_adapter()
        else:
            self.lora_a = None
            self.lora_b = None

    def reset_adapter(self, generator=None):
        if not self.rank:
            return
        with torch.no_grad():
            self.lora_a.normal_(0.0, ADAPTER_INIT_STD, generator=generator)
            self.lora_b.zero_()

    def forward(self, x):
        return lora_forward(self, x)

    def extra_repr(self):
        return f"in={self.in_features}, out={self.out_features}, rank={self.rank}"


def lora_forward(adapter: LoraLinear, x: torch.Tensor) -> torch.Tensor:
    """``(W + A B^T) x + bias`` evaluated as frozen path plus low-rank path."""
    if x.shape[-1] != adapter.in_features:
        raise ValueError(
            f"input has trailing dimension {x.shape[-1]}, adapter expects {adapter.in_features}"
        )
    out = F.linear(x, adapter.weight, adapter.bias)
    if adapter.rank:
        out = out + (x @ adapter.lora_b) @ adapter.lora_a.t()
    return out


def interpolate_positions(table: torch.Tensor, target: tuple[int, int]) -> torch.Tensor:
    """Bilinearly resample a ``P x P x C`` positional grid to ``H_c x W_c x C``."""
    h, w = target
    if h < 1 or w < 1:
        raise ValueError(f"target grid must be positive, got {target}")
    if tuple(table.shape[:2]) == (h, w):
        return table
    grid = table.permute(2, 0, 1).unsqueeze(0)
    grid = F.interpolate(grid, size=(h, w), mode="bilinear", align_corners=False)
    return grid[0].permute(1, 2, 0)


def quick_gelu(x):
    return x * torch.sigmoid(1.702 * x)


@dataclass
class SemanticFeatures:
    """Encoder output. ``global_feat`` is ``B x C``; ``local_feat`` is ``B x H_c x W_c x C``."""

    global_feat: torch.Tensor
    local_feat: torch.Tensor

    @property
    def grid_size(self):
        return tuple(self.local_feat.shape[1:3])


class FrozenLayerNorm(nn.LayerNorm):
    def __init__(self, width):
        super().__init__(width, eps=1e-5)
        self.weight.requires_grad_(False)
        self.bias.requires_grad_(False)


class EncoderAttention(nn.Module):
    def __init__(self, width, heads, rank, targets):
        super().__init__()
        if width % heads:
            raise ValueError(f"width {width} not divisible by heads {heads}")
        self.heads = heads
        self.q_proj = LoraLinear(width, width, rank if "q_proj" in targets else 0)
        self.k_proj = LoraLinear(width, width, rank if "k_proj" in targets else 0)
        self.v_proj = LoraLinear(width, width, rank if "v_proj" in targets else 0)
        self.out_proj = LoraLinear(width, width, 0)

    def forward(self, x):
        b, n, c = x.shape
        hd = c // self.heads

        def split(t):
            return t.reshape(b, n, self.heads, hd).transpose(1, 2)

        q, k, v = split(self.q_proj(x)), split(self.k_proj(x)), split(self.v_proj(x))
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(hd), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.out_proj(out)


class EncoderMlp(nn.Module):
    def __init__(self, width, hidden, rank, targets):
        super().__init__()
        self.fc1 = LoraLinear(width, hidden, rank if "fc1" in targets else 0)
        self.fc2 = LoraLinear(hidden, width, rank if "fc2" in targets else 0)

    def forward(self, x):
        return self.fc2(quick_gelu(self.fc1(x)))


class EncoderBlock(nn.Module):
    def __init__(self, width, heads, mlp_ratio, rank, targets):
        super().__init__()
        self.ln_1 = FrozenLayerNorm(width)
        self.attn = EncoderAttention(width, heads, rank, targets)
        self.ln_2 = FrozenLayerNorm(width)
        self.mlp = EncoderMlp(width, int(width * mlp_ratio), rank, targets)

    def forward(self, x):
        x = x + self.attn(self.ln_1(x))
        return x + self.mlp(self.ln_2(x))


class SemanticEncoder(nn.Module):
    """ViT encoder returning final-layer class and patch tokens.

    Pixels in ``[0, 1]`` are normalized with the ``pixel_mean`` / ``pixel_std``
    buffers, which travel with the weight file. The positional grid is
    resampled when the input grid differs from ``grid``.
    """

    def __init__(
        self,
        width=64,
        depth=2,
        heads=2,
        patch_size=16,
        grid=14,
        mlp_ratio=4.0,
        lora_rank=4,
        lora_targets="attn+ffn",
        proj_dim=0,
        seed=0,
    ):
        super().__init__()
        if lora_targets not in TARGET_SETS:
            raise ValueError(f"unknown lora_targets {lora_targets!r}; choose from {sorted(TARGET_SETS)}")
        targets = TARGET_SETS[lora_targets]
        rank = lora_rank if targets else 0
        self.arch = dict(
            width=width, depth=depth, heads=heads, patch_size=patch_size, grid=grid,
            mlp_ratio=mlp_ratio, proj_dim=proj_dim,
        )
        self.lora_rank = rank
        self.lora_targets = lora_targets if rank else "none"
        self.seed = seed
        self.width = width
        self.patch_size = patch_size
        self.grid = grid

        self.conv1 = nn.Conv2d(3, width, patch_size, stride=patch_size, bias=False)
        self.conv1.weight.requires_grad_(False)
        self.class_embedding = nn.Parameter(torch.empty(width), requires_grad=False)
        self.positional_embedding = nn.Parameter(torch.empty(grid * grid + 1, width), requires_grad=False)
        self.ln_pre = FrozenLayerNorm(width)
        self.blocks = nn.ModuleList(
            EncoderBlock(width, heads, mlp_ratio, rank, targets) for _ in range(depth)
        )
        self.ln_post = FrozenLayerNorm(width)
        self.proj = nn.Parameter(torch.empty(width, proj_dim), requires_grad=False) if proj_dim else None
        self.register_buffer("pixel_mean", torch.full((3,), 0.5))
        self.register_buffer("pixel_std", torch.full((3,), 0.5))
        self.init_stub(seed)

    def init_stub(self, seed):
        """Deterministic random frozen weights plus freshly initialized adapters."""
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            fan_in = 3 * self.patch_size**2
            self.conv1.weight.copy_(torch.randn(self.conv1.weight.shape, generator=g) / math.sqrt(fan_in))
            self.class_embedding.copy_(torch.randn(self.width, generator=g) * 0.02)
            self.positional_embedding.copy_(torch.randn(self.positional_embedding.shape, generator=g) * 0.02)
            for m in self.modules():
                if isinstance(m, LoraLinear):
                    m.weight.copy_(torch.randn(m.weight.shape, generator=g) / math.sqrt(m.in_features))
                    if m.bias is not None:
                        m.bias.zero_()
            if self.proj is not None:
                self.proj.copy_(torch.randn(self.proj.shape, generator=g) / math.sqrt(self.width))
        self.reset_adapters(seed)

    def reset_adapters(self, seed=None):
        g = torch.Generator().manual_seed(self.seed if seed is None else seed)
        for m in self.adapters():
            m.reset_adapter(g)

    def adapters(self):
        return [m for m in self.modules() if isinstance(m, LoraLinear) and m.rank]

    def frozen_state(self):
        """Every tensor that belongs in the weight container (no adapter factors)."""
        return {k: v for k, v in self.state_dict().items() if "lora_" not in k}

    def _token_grid(self, h, w):
        for name, size in (("height", h), ("width", w)):
            if size % self.patch_size:
                raise ValueError(
                    f"input {name} {size} is not divisible by encoder patch size {self.patch_size}"
                )
        return h // self.patch_size, w // self.patch_size

    def forward(self, image: torch.Tensor) -> SemanticFeatures:
        b, _, h, w = image.shape
        hc, wc = self._token_grid(h, w)
        x = (image - self.pixel_mean.view(1, 3, 1, 1)) / self.pixel_std.view(1, 3, 1, 1)
        x = self.conv1(x).flatten(2).transpose(1, 2)
        cls = self.class_embedding.to(x.dtype).expand(b, 1, -1)
        x = torch.cat([cls, x], dim=1)

        pos_cls = self.positional_embedding[:1]
        table = self.positional_embedding[1:].reshape(self.grid, self.grid, -1)
        pos_grid = interpolate_positions(table, (hc, wc)).reshape(hc * wc, -1)
        x = x + torch.cat([pos_cls, pos_grid], dim=0)

        x = self.ln_pre(x)
        for block in self.blocks:
            x = block(x)
        x = self.ln_post(x)
        return SemanticFeatures(global_feat=x[:, 0], local_feat=x[:, 1:].reshape(b, hc, wc, -1))

    def embed(self, image):
        """Global embedding for CLIPScore: class token, projected when a head is loaded."""
        g = self(image).global_feat
        return g @ self.proj if self.proj is not None else g


def encode(encoder: SemanticEncoder, image_up: torch.Tensor) -> SemanticFeatures:
    return encoder(image_up)


def trainable_parameters(encoder: SemanticEncoder) -> list[nn.Parameter]:
    params = []
    for m in encoder.adapters():
        params += [m.lora_a, m.lora_b]
    return params


def save_weights(encoder: SemanticEncoder, path) -> None:
    """Write the frozen tensors to a safetensors container (float32)."""
    tensors = {k: v.detach().to(torch.float32).contiguous() for k, v in encoder.frozen_state().items()}
    save_file(tensors, str(path), metadata={"arch": json.dumps(encoder.arch)})


def read_arch(path) -> dict:
    from safetensors import safe_open

    with safe_open(str(path), framework="pt") as f:
        meta = f.metadata() or {}
    return json.loads(meta["arch"]) if "arch" in meta else {}


def load_pretrained(encoder: SemanticEncoder, weights) -> SemanticEncoder:
    """Populate frozen weights from ``weights`` and re-initialize the adapters.

    Validation happens before any tensor is copied, so a failed load leaves
    ``encoder`` untouched.
    """
    path = Path(weights)
    if not path.is_file():
        raise FileNotFoundError(f"encoder weights not found: {path}")
    try:
        tensors = load_file(str(path))
    except (SafetensorError, OSError, ValueError) as exc:
        raise ValueError(f"cannot read encoder weights {path}: {exc}") from exc

    expected = encoder.frozen_state()
    missing = sorted(set(expected) - set(tensors))
    unexpected = sorted(set(tensors) - set(expected))
    bad = [
        f"{k}: expected {tuple(expected[k].shape)}, found {tuple(tensors[k].shape)}"
        for k in sorted(set(expected) & set(tensors))
        if tuple(expected[k].shape) != tuple(tensors[k].shape)
    ]
    if missing or unexpected or bad:
        lines = [f"encoder weights {path} do not match the architecture:"]
        lines += [f"  missing tensor {k}" for k in missing]
        lines += [f"  unexpected tensor {k}" for k in unexpected]
        lines += [f"  shape mismatch {s}" for s in bad]
        raise ValueError("\n".join(lines))

    own = encoder.state_dict()
    with torch.no_grad():
        for k, v in tensors.items():
            own[k].copy_(v.to(own[k].dtype))
    encoder.reset_adapters()
    return encoder


def convert_openai_clip_visual(state_dict: dict, prefix="visual.") -> dict:
    """Rename an OpenAI/open_clip visual-tower state dict to container names.

    The fused ``in_proj_weight`` of each attention block is split into
    ``q_proj`` / ``k_proj`` / ``v_proj``.
    """
    out = {}
    sd = {k[len(prefix):]: v for k, v in state_dict.items() if k.startswith(prefix)}
    simple = {
        "conv1.weight": "conv1.weight",
        "class_embedding": "class_embedding",
        "positional_embedding": "positional_embedding",
        "ln_pre.weight": "ln_pre.weight",
        "ln_pre.bias": "ln_pre.bias",
        "ln_post.weight": "ln_post.weight",
        "ln_post.bias": "ln_post.bias",
        "proj": "proj",
    }
    for src, dst in simple.items():
        if src in sd:
            out[dst] = sd[src]
    i = 0
    while f"transformer.resblocks.{i}.ln_1.weight" in sd:
        src = f"transformer.resblocks.{i}."
        dst = f"blocks.{i}."
        w = sd[src + "attn.in_proj_weight"]
        bias = sd[src + "attn.in_proj_bias"]
        for j, name in enumerate(("q_proj", "k_proj", "v_proj")):
            n = w.shape[0] // 3
            out[dst + f"attn.{name}.weight"] = w[j * n:(j + 1) * n]
            out[dst + f"attn.{name}.bias"] = bias[j * n:(j + 1) * n]
        out[dst + "attn.out_proj.weight"] = sd[src + "attn.out_proj.weight"]
        out[dst + "attn.out_proj.bias"] = sd[src + "attn.out_proj.bias"]
        for ln in ("ln_1", "ln_2"):
            out[dst + f"{ln}.weight"] = sd[src + f"{ln}.weight"]
            out[dst + f"{ln}.bias"] = sd[src + f"{ln}.bias"]
        out[dst + "mlp.fc1.weight"] = sd[src + "mlp.c_fc.weight"]
        out[dst + "mlp.fc1.bias"] = sd[src + "mlp.c_fc.bias"]
        out[dst + "mlp.fc2.weight"] = sd[src + "mlp.c_proj.weight"]
        out[dst + "mlp.fc2.bias"] = sd[src + "mlp.c_proj.bias"]
        i += 1
    out["pixel_mean"] = torch.tensor([0.48145466, 0.4578275, 0.40821073])
    out["pixel_std"] = torch.tensor([0.26862954, 0.26130258, 0.27577711])
    return out


VIT_B16 = dict(width=768, depth=12, heads=12, patch_size=16, grid=14, mlp_ratio=4.0, proj_dim=512)
