"""PSNR, SSIM, LPIPS and CLIPScore, plus per-class report aggregation.

All metrics take ``3 x H x W`` or ``B x 3 x H x W`` tensors (numpy arrays
are converted) with values in [0, 1], and compute in float64.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
EPS = 1e-8


def _as_tensor(x):
    if not torch.is_tensor(x):
        x = torch.from_numpy(np.array(x))
    return x.detach().to(torch.float64)


def _pair(pred, target):
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"metric inputs differ in shape: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return pred, target


def rgb_to_y(image):
    """ITU-R BT.601 luma of a ``[..., 3, H, W]`` image in [0, 1] (studio range, as in SR benchmarks)."""
    image = _as_tensor(image)
    coeffs = torch.tensor([65.481, 128.553, 24.966], dtype=image.dtype) / 255.0
    return (image * coeffs.view(3, 1, 1)).sum(dim=-3, keepdim=True) + 16.0 / 255.0


def psnr(pred, target, max_val=1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` when the images are identical."""
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    pred, target = _pair(pred, target)
    mse = torch.mean((pred - target) ** 2).item()
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(max_val**2 / mse)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(pred, target, data_range=1.0) -> float:
    """Mean SSIM over all valid 11x11 Gaussian windows (sigma 1.5), averaged over channels."""
    pred, target = _pair(pred, target)
    if pred.dim() == 3:
        pred, target = pred.unsqueeze(0), target.unsqueeze(0)
    b, c, h, w = pred.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    win = gaussian_window().view(1, 1, SSIM_WINDOW, SSIM_WINDOW).repeat(c, 1, 1, 1)

    def filt(x):
        return F.conv2d(x, win, groups=c)

    mu_x, mu_y = filt(pred), filt(target)
    sxx = filt(pred * pred) - mu_x**2
    syy = filt(target * target) - mu_y**2
    sxy = filt(pred * target) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return (num / den).mean().item()


class FeatureNet(nn.Module):
    """Interface for LPIPS backbones.

    ``forward`` returns a list of ``B x C_l x H_l x W_l`` feature maps and
    ``channel_weights`` holds one non-negative weight vector per layer.
    """

    channel_weights: list


class StubFeatureNet(FeatureNet):
    """Small seeded conv net for offline LPIPS; not comparable to published LPIPS numbers."""

    def __init__(self, channels=(8, 16), seed=0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        layers = []
        c_in = 3
        for i, c_out in enumerate(channels):
            conv = nn.Conv2d(c_in, c_out, 3, stride=1 if i == 0 else 2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) / math.sqrt(9 * c_in))
                conv.bias.copy_(torch.randn(c_out, generator=g) * 0.1)
            layers.append(conv)
            c_in = c_out
        self.layers = nn.ModuleList(layers)
        self.channel_weights = [torch.rand(c, generator=g, dtype=torch.float64) for c in channels]
        self.requires_grad_(False)

    def forward(self, x):
        feats = []
        x = x * 2.0 - 1.0
        for conv in self.layers:
            x = F.relu(conv(x))
            feats.append(x)
        return feats


def _unit_normalize(f, eps=1e-10):
    return f / (f.norm(dim=1, keepdim=True) + eps)


def lpips(pred, target, net: FeatureNet) -> float:
    """Sum over layers of the spatial mean of ``||w_l * (f_hat - f)||^2`` on channel-normalized features."""
    weights = getattr(net, "channel_weights", None)
    if not weights:
        raise ValueError("LPIPS feature net has no channel weights")
    pred, target = _pair(pred, target)
    if pred.dim() == 3:
        pred, target = pred.unsqueeze(0), target.unsqueeze(0)
    net = net.to(torch.float64)
    with torch.no_grad():
        fa, fb = net(pred), net(target)
    if len(weights) != len(fa):
        raise ValueError(f"feature net returned {len(fa)} layers but has {len(weights)} weight vectors")
    total = torch.zeros(pred.shape[0], dtype=torch.float64)
    for w, a, b in zip(weights, fa, fb):
        w = torch.as_tensor(w, dtype=torch.float64).view(1, -1, 1, 1)
        diff = w * (_unit_normalize(a) - _unit_normalize(b))
        total = total + (diff**2).sum(dim=1).mean(dim=(1, 2))
    return total.mean().item()


def cosine(u, v, eps=EPS) -> torch.Tensor:
    u, v = _as_tensor(u), _as_tensor(v)
    # sqrt of the product of squared norms: exactly 1.0 when u and v are the same vector
    nn2 = (u * u).sum(-1) * (v * v).sum(-1)
    return (u * v).sum(-1) / nn2.clamp_min(eps**4).sqrt()


def clipscore(pred, target, embed) -> float:
    """Cosine similarity of the two images' global embeddings.

    ``embed`` maps a ``B x 3 x H x W`` batch to ``B x D`` embeddings, e.g.
    :meth:`SemanticEncoder.embed` of an adapter-free encoder.
    """
    pred, target = _pair(pred, target)
    if pred.dim() == 3:
        pred, target = pred.unsqueeze(0), target.unsqueeze(0)
    owner = getattr(embed, "__self__", None)
    if isinstance(owner, nn.Module):
        dtype = next(owner.parameters()).dtype
        pred, target = pred.to(dtype), target.to(dtype)
    with torch.no_grad():
        return cosine(embed(pred), embed(target)).mean().item()


# ---------------------------------------------------------------- reports

METRIC_NAMES = ("psnr", "ssim", "lpips", "clipscore")


@dataclass
class ImageScore:
    path: str
    class_name: str
    psnr: float
    ssim: float
    lpips: float | None = None
    clipscore: float | None = None


def _mean(values):
    """Mean over finite values and the number of values used."""
    vals = [v for v in values if v is not None and math.isfinite(v)]
    return (sum(vals) / len(vals) if vals else None), len(vals)


@dataclass
class MetricReport:
    per_image: list = field(default_factory=list)
    class_balanced: bool = False

    def add(self, score: ImageScore):
        self.per_image.append(score)

    def classes(self):
        return sorted({s.class_name for s in self.per_image})

    def per_class(self):
        out = {}
        for name in self.classes():
            rows = [s for s in self.per_image if s.class_name == name]
            out[name] = self._aggregate(rows)
        return out

    def _aggregate(self, rows):
        agg = {"count": len(rows)}
        for m in METRIC_NAMES:
            mean, n = _mean([getattr(r, m) for r in rows])
            agg[m] = mean
            if m == "psnr":
                agg["psnr_count"] = n
        return agg

    def overall(self):
        if not self.class_balanced:
            return self._aggregate(self.per_image)
        per = self.per_class()
        agg = {"count": len(self.per_image)}
        for m in METRIC_NAMES:
            agg[m], _ = _mean([c[m] for c in per.values()])
        agg["psnr_count"] = sum(c["psnr_count"] for c in per.values())
        return agg

    def to_dict(self):
        return {"per_class": self.per_class(), "overall": self.overall(), "class_balanced": self.class_balanced}

    def write(self, out_dir, stem="report"):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / f"{stem}.csv", "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["path", "class", *METRIC_NAMES])
            for s in self.per_image:
                writer.writerow([s.path, s.class_name] + [
                    "" if getattr(s, m) is None else repr(float(getattr(s, m))) for m in METRIC_NAMES
                ])
        (out_dir / f"{stem}.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
