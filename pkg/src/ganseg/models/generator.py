"""Style-based dual-branch generator.

Synthesis starts from a learned 4x4 constant and doubles resolution per stage.
Each stage consumes one style vector, applies modulated convolutions with
weight demodulation (no noise inputs, no mixing), and contributes skip outputs
to two accumulators: a 1-channel image branch (tanh-bounded) and a 2-channel
segmentation-logit branch.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


class EqualizedLinear(nn.Module):
    """Linear layer with runtime weight scaling (equalized learning rate)."""

    def __init__(self, in_features, out_features, bias_init: float = 0.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_features, in_features))
        self.bias = nn.Parameter(torch.full((out_features,), float(bias_init)))
        self.scale = 1.0 / math.sqrt(in_features)

    def forward(self, x):
        return F.linear(x, self.weight * self.scale, self.bias)


class MappingNetwork(nn.Module):
    """MLP from latent z to a style vector, broadcast to all synthesis stages."""

    def __init__(self, latent_dim: int, style_dim: int, n_layers: int, n_stages: int):
        super().__init__()
        self.latent_dim = latent_dim
        self.n_stages = n_stages
        dims = [latent_dim] + [style_dim] * n_layers
        self.layers = nn.ModuleList(
            EqualizedLinear(dims[i], dims[i + 1]) for i in range(n_layers))

    def forward(self, z):
        """z: (B, latent_dim) -> style codes (B, n_stages, style_dim)."""
        if z.dim() != 2 or z.shape[1] != self.latent_dim:
            raise ValueError(f"expected z of shape (B, {self.latent_dim}), "
                             f"got {tuple(z.shape)}")
        h = z / torch.sqrt(z.square().mean(dim=1, keepdim=True) + 1e-8)
        for layer in self.layers:
            h = F.leaky_relu(layer(h), 0.2)
        return h.unsqueeze(1).expand(-1, self.n_stages, -1)


class ModulatedConv2d(nn.Module):
    """Per-sample style modulation of conv weights with optional demodulation.

    Implemented in the equivalent input-scaling form: scaling input channel i
    by s_i before a shared conv equals convolving with s_i-scaled kernels, and
    the demodulation divisor depends only on s and the kernel norms. Avoids
    materializing per-sample kernels.
    """

    def __init__(self, in_channels, out_channels, kernel_size, style_dim,
                 demodulate: bool = True):
        super().__init__()
        self.out_channels = out_channels
        self.demodulate = demodulate
        self.padding = kernel_size // 2
        self.weight = nn.Parameter(
            torch.randn(out_channels, in_channels, kernel_size, kernel_size))
        self.scale = 1.0 / math.sqrt(in_channels * kernel_size ** 2)
        self.to_style = EqualizedLinear(style_dim, in_channels, bias_init=1.0)

    def forward(self, x, w):
        s = self.to_style(w)
        h = F.conv2d(x * s[:, :, None, None], self.weight * self.scale,
                     padding=self.padding)
        if self.demodulate:
            kernel_sq = (self.weight * self.scale).square().sum(dim=(2, 3))
            sigma_sq = s.square() @ kernel_sq.t()  # (B, out)
            h = h * torch.rsqrt(sigma_sq + 1e-8)[:, :, None, None]
        return h


class StyleConv(nn.Module):
    def __init__(self, in_channels, out_channels, style_dim):
        super().__init__()
        self.conv = ModulatedConv2d(in_channels, out_channels, 3, style_dim)
        self.bias = nn.Parameter(torch.zeros(out_channels))

    def forward(self, x, w):
        return F.leaky_relu(self.conv(x, w) + self.bias[None, :, None, None], 0.2)


class SkipHead(nn.Module):
    """1x1 modulated conv (no demodulation) emitting a per-stage skip output."""

    def __init__(self, in_channels, out_channels, style_dim):
        super().__init__()
        self.conv = ModulatedConv2d(in_channels, out_channels, 1, style_dim,
                                    demodulate=False)
        self.bias = nn.Parameter(torch.zeros(out_channels))

    def forward(self, x, w):
        return self.conv(x, w) + self.bias[None, :, None, None]


def _upsample2(x):
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


def stage_channels(n_stages, base_channels, max_channels):
    """Per-stage widths, widest at 4x4 and narrowing toward full resolution."""
    return [min(max_channels, base_channels * 2 ** (n_stages - 1 - i))
            for i in range(n_stages)]


class SynthesisStage(nn.Module):
    def __init__(self, in_channels, out_channels, style_dim, first: bool):
        super().__init__()
        self.first = first
        self.conv1 = None if first else StyleConv(in_channels, out_channels, style_dim)
        self.conv2 = StyleConv(out_channels if not first else in_channels,
                               out_channels, style_dim)
        self.to_image = SkipHead(out_channels, 1, style_dim)
        self.to_seg = SkipHead(out_channels, 2, style_dim)

    def forward(self, x, w):
        if not self.first:
            x = _upsample2(x)
            x = self.conv1(x, w)
        x = self.conv2(x, w)
        return x, self.to_image(x, w), self.to_seg(x, w)


class DualBranchGenerator(nn.Module):
    """Joint image/segmentation synthesis network."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.n_stages = config.n_stages
        chans = stage_channels(self.n_stages, config.base_channels, config.max_channels)
        self.constant = nn.Parameter(torch.randn(1, chans[0], 4, 4))
        stages = [SynthesisStage(chans[0], chans[0], config.style_dim, first=True)]
        stages += [SynthesisStage(chans[i - 1], chans[i], config.style_dim, first=False)
                   for i in range(1, self.n_stages)]
        self.stages = nn.ModuleList(stages)

    def forward(self, w_stages):
        """w_stages: (B, n_stages, style_dim) -> (image (B,1,R,R), seg_logits (B,2,R,R))."""
        if w_stages.dim() != 3 or w_stages.shape[1] != self.n_stages:
            raise ValueError(f"expected styles of shape (B, {self.n_stages}, "
                             f"style_dim), got {tuple(w_stages.shape)}")
        x = self.constant.expand(w_stages.shape[0], -1, -1, -1)
        img = seg = None
        for i, stage in enumerate(self.stages):
            x, img_skip, seg_skip = stage(x, w_stages[:, i])
            img = img_skip if img is None else _upsample2(img) + img_skip
            seg = seg_skip if seg is None else _upsample2(seg) + seg_skip
        return torch.tanh(img), seg


class GanBundle(nn.Module):
    """Mapping network plus generator: the full sampling path G(z) = (x, y)."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.mapper = MappingNetwork(config.latent_dim, config.style_dim,
                                     config.mapping_layers, config.n_stages)
        self.generator = DualBranchGenerator(config)

    def map_latent(self, z, per_stage=None):
        """Map noise to style codes; optional per-stage override list."""
        if per_stage is not None:
            if len(per_stage) != self.config.n_stages:
                raise ValueError(f"per-stage override must have "
                                 f"{self.config.n_stages} entries, got {len(per_stage)}")
            return torch.stack(list(per_stage), dim=1)
        return self.mapper(z)

    def sample(self, z):
        return self.generator(self.map_latent(z))

    def sample_z(self, n, device=None, generator=None):
        return torch.randn(n, self.config.latent_dim, device=device,
                           generator=generator)
