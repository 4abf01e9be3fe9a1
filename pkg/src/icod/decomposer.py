"""Feature decomposer: channel weight/bias nets and the bias/causal split.

The bias feature is F_b = w * F + b with w = sigmoid gate from the channel
weight net and b from the channel bias net; the causal feature is
F_c = F - r * F_b with r a per-channel uniform [0,1) draw. All convolutions
are 1x1 so the nets can only reweight channels, not mix space.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .errors import ConfigError


class Decomposer(nn.Module):
    def __init__(self, channels, hidden=None):
        super().__init__()
        hidden = hidden or channels
        self.channels = channels
        self.weight_net = nn.Sequential(
            nn.Conv2d(channels, hidden, 1), nn.ReLU(inplace=True), nn.Conv2d(hidden, channels, 1)
        )
        self.bias_net = nn.Sequential(
            nn.Conv2d(channels, hidden, 1), nn.ReLU(inplace=True), nn.Conv2d(hidden, channels, 1)
        )
        # Start near the identity decomposition (w ~ 0, b ~ 0) so the
        # adversary grows the bias branch gradually instead of destabilizing
        # early detector training.
        with torch.no_grad():
            for net, bias_init in ((self.weight_net, -4.0), (self.bias_net, 0.0)):
                net[-1].weight.mul_(0.01)
                net[-1].bias.fill_(bias_init)

    def _check(self, feat):
        if feat.shape[-3] != self.channels:
            raise ConfigError(f"feature channels {feat.shape[-3]} != decomposer channels {self.channels}")

    def channel_weight(self, feat):
        """Sigmoid-gated channel weight w, elementwise in (0,1)."""
        self._check(feat)
        return torch.sigmoid(self.weight_net(feat))

    def channel_bias(self, feat):
        """Unbounded channel bias b."""
        self._check(feat)
        return self.bias_net(feat)

    def forward(self, feat):
        return self.channel_weight(feat), self.channel_bias(feat)


def bias_feature(feat, w, b):
    """F_b = w * F + b, elementwise."""
    if feat.shape != w.shape or feat.shape != b.shape:
        raise ConfigError(f"shape mismatch: F {tuple(feat.shape)}, w {tuple(w.shape)}, b {tuple(b.shape)}")
    return w * feat + b


def sample_r(generator, channels, analysis_mode=None):
    """Per-channel uniform [0,1) weight, broadcastable over (B, C, H, W).

    analysis_mode "ones" fixes r to 1 (full decomposition F - F_b), "zeros"
    fixes it to 0 (F_c = F); both exist because the stochastic weight is only
    meaningful during training.
    """
    if channels < 1:
        raise ConfigError(f"channels must be >= 1, got {channels}")
    if analysis_mode == "ones":
        return torch.ones(channels, 1, 1)
    if analysis_mode == "zeros":
        return torch.zeros(channels, 1, 1)
    if analysis_mode is not None:
        raise ConfigError(f"unknown analysis mode {analysis_mode!r}")
    return torch.rand((channels, 1, 1), generator=generator)


def causal_feature(feat, f_b, r):
    """F_c = F - r * F_b."""
    if feat.shape != f_b.shape:
        raise ConfigError(f"shape mismatch: F {tuple(feat.shape)}, F_b {tuple(f_b.shape)}")
    return feat - r * f_b


def reg_loss(w, b, alpha, beta, normalize=True):
    """Sparsity/scale regularizer: alpha * ||w||_1 + beta * ||b||_2^2.

    Normalized by element count by default so alpha/beta are scale-free
    across feature-map sizes.
    """
    if alpha < 0 or beta < 0:
        raise ConfigError(f"alpha and beta must be >= 0, got {alpha}, {beta}")
    if normalize:
        return alpha * w.abs().mean() + beta * (b * b).mean()
    return alpha * w.abs().sum() + beta * (b * b).sum()
