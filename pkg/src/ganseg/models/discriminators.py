"""The two adversaries: a global image discriminator and a multi-scale
patch discriminator over (image, segmentation) pairs."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .generator import stage_channels


class ResidualDownBlock(nn.Module):
    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, in_channels, 3, padding=1)
        self.conv2 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.skip = nn.Conv2d(in_channels, out_channels, 1, bias=False)

    def forward(self, x):
        skip = self.skip(F.avg_pool2d(x, 2))
        h = F.leaky_relu(self.conv1(x), 0.2)
        h = F.leaky_relu(self.conv2(h), 0.2)
        h = F.avg_pool2d(h, 2)
        return (h + skip) * (0.5 ** 0.5)


class ImageDiscriminator(nn.Module):
    """Real-vs-generated decision on whole images; one logit per sample."""

    def __init__(self, config, in_channels: int = 1):
        super().__init__()
        chans = stage_channels(config.n_stages, config.base_channels,
                               config.max_channels)[::-1]  # narrow -> wide
        self.from_input = nn.Conv2d(in_channels, chans[0], 1)
        self.blocks = nn.Sequential(*[
            ResidualDownBlock(chans[i], chans[min(i + 1, len(chans) - 1)])
            for i in range(config.n_stages - 1)])
        final_ch = chans[min(config.n_stages - 1, len(chans) - 1)]
        self.conv_out = nn.Conv2d(final_ch, final_ch, 3, padding=1)
        self.fc = nn.Linear(final_ch * 4 * 4, 1)

    def forward(self, x):
        h = F.leaky_relu(self.from_input(x), 0.2)
        h = self.blocks(h)
        h = F.leaky_relu(self.conv_out(h), 0.2)
        return self.fc(h.flatten(1)).squeeze(1)


class PatchDiscriminator(nn.Module):
    """PatchGAN tower: strided convs ending in a 1-channel logit map."""

    def __init__(self, in_channels, ndf=32, n_layers=3):
        super().__init__()
        layers = [nn.Conv2d(in_channels, ndf, 4, stride=2, padding=1),
                  nn.LeakyReLU(0.2)]
        ch = ndf
        for _ in range(1, n_layers):
            layers += [nn.Conv2d(ch, min(ch * 2, 256), 4, stride=2, padding=1),
                       nn.LeakyReLU(0.2)]
            ch = min(ch * 2, 256)
        layers += [nn.Conv2d(ch, 1, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class PatchPairDiscriminator(nn.Module):
    """Multi-scale patch decision on concat(image, 2-channel segmentation).

    Real masks enter one-hot; generated segmentations enter as softmax
    probabilities so the path stays differentiable.
    """

    def __init__(self, config, ndf: int = 32):
        super().__init__()
        self.n_scales = config.dm_scales
        self.towers = nn.ModuleList(
            PatchDiscriminator(1 + 2, ndf=ndf) for _ in range(self.n_scales))

    def forward(self, x, y_two_channel):
        """Returns one patch-logit map per scale, full resolution first."""
        if y_two_channel.shape[1] != 2:
            raise ValueError(f"segmentation input must have 2 channels, "
                             f"got {tuple(y_two_channel.shape)}")
        if y_two_channel.shape[-2:] != x.shape[-2:]:
            raise ValueError("image/segmentation spatial dims differ")
        h = torch.cat([x, y_two_channel], dim=1)
        maps = []
        for i, tower in enumerate(self.towers):
            maps.append(tower(h))
            if i + 1 < self.n_scales:
                h = F.avg_pool2d(h, 3, stride=2, padding=1, count_include_pad=False)
        return maps

    @staticmethod
    def scalar_decision(maps):
        """Per-sample scalar logit: mean over patches within a scale, then scales."""
        per_scale = [m.mean(dim=(1, 2, 3)) for m in maps]
        return torch.stack(per_scale, dim=0).mean(dim=0)


def one_hot_mask(mask):
    """Binary mask (B,H,W) -> 2-channel one-hot float tensor (B,2,H,W)."""
    if mask.dim() == 2:
        mask = mask.unsqueeze(0)
    m = mask.float()
    return torch.stack([1.0 - m, m], dim=1)
