"""Learnable modulation of SR-unit features by a guidance map."""
import torch
import torch.nn as nn
import torch.nn.functional as F

LN_EPS = 1e-5


def channel_layer_norm(x, eps=LN_EPS):
    """LayerNorm over channels at each spatial position of a ``B x C x H x W`` tensor, no affine."""
    return F.layer_norm(x.permute(0, 2, 3, 1), x.shape[1:2], eps=eps).permute(0, 3, 1, 2).contiguous()


class BareNorm(nn.Module):
    """Drop-in for :class:`LearnableModulation` that ignores the guide and returns LN(F)."""

    def forward(self, feature, guide=None):
        return channel_layer_norm(feature)


class LearnableModulation(nn.Module):
    """``F_out = g * LN(F) + b`` with ``g``, ``b`` predicted from a guidance map.

    A fresh module is neutral: the gain head outputs 1 and the bias head 0, so
    the output is exactly ``LN(F)`` until training moves the heads.
    """

    def __init__(self, feat_channels, guide_channels=1, hidden_channels=None, kernel_size=3, shared=True):
        super().__init__()
        hidden = hidden_channels or feat_channels
        pad = kernel_size // 2
        self.shared = shared
        self.shared_conv = nn.Conv2d(guide_channels, hidden, kernel_size, padding=pad)
        # separate first convs when the heads are not shared
        self.bias_conv = None if shared else nn.Conv2d(guide_channels, hidden, kernel_size, padding=pad)
        self.gain_head = nn.Conv2d(hidden, feat_channels, kernel_size, padding=pad)
        self.bias_head = nn.Conv2d(hidden, feat_channels, kernel_size, padding=pad)
        self.reset_heads()

    def reset_heads(self):
        with torch.no_grad():
            self.gain_head.weight.zero_()
            self.gain_head.bias.fill_(1.0)
            self.bias_head.weight.zero_()
            self.bias_head.bias.zero_()

    def fields(self, guide):
        h = F.relu(self.shared_conv(guide))
        hb = h if self.shared else F.relu(self.bias_conv(guide))
        return self.gain_head(h), self.bias_head(hb)

    def forward(self, feature, guide):
        if feature.shape[-2:] != guide.shape[-2:]:
            raise ValueError(
                f"feature {tuple(feature.shape)} and guidance map {tuple(guide.shape)} "
                "differ in spatial size"
            )
        gain, bias = self.fields(guide)
        return gain * channel_layer_norm(feature) + bias


def modulate(feature, guide, params: LearnableModulation):
    """Apply ``params`` to one unit output; unbatched ``C x H x W`` inputs are accepted."""
    unbatched = feature.dim() == 3
    if unbatched:
        feature, guide = feature.unsqueeze(0), guide.unsqueeze(0)
    out = params(feature, guide)
    return out[0] if unbatched else out
