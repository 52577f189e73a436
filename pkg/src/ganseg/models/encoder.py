"""Image-to-style encoder producing one style vector per synthesis stage,
so that reconstruction through the frozen generator has enough freedom."""

from __future__ import annotations

import torch.nn.functional as F
from torch import nn

from .generator import stage_channels


class StyleEncoder(nn.Module):
    def __init__(self, config, in_channels: int = 1):
        super().__init__()
        self.n_stages = config.n_stages
        self.style_dim = config.style_dim
        chans = stage_channels(config.n_stages, config.base_channels,
                               config.max_channels)[::-1]  # narrow -> wide
        layers = [nn.Conv2d(in_channels, chans[0], 3, padding=1), nn.LeakyReLU(0.2)]
        for i in range(config.n_stages - 1):
            nxt = chans[min(i + 1, len(chans) - 1)]
            layers += [nn.Conv2d(chans[i], nxt, 3, stride=2, padding=1),
                       nn.LeakyReLU(0.2),
                       nn.Conv2d(nxt, nxt, 3, padding=1), nn.LeakyReLU(0.2)]
        self.body = nn.Sequential(*layers)
        final_ch = chans[min(config.n_stages - 1, len(chans) - 1)]
        self.head = nn.Linear(final_ch * 4 * 4, self.n_stages * self.style_dim)

    def forward(self, x):
        """x: (B,1,R,R) in [-1,1] -> style codes (B, n_stages, style_dim)."""
        h = self.body(x)
        if h.shape[-1] != 4:
            h = F.adaptive_avg_pool2d(h, 4)
        w = self.head(h.flatten(1))
        return w.reshape(-1, self.n_stages, self.style_dim)
