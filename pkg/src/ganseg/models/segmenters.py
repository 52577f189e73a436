"""Discriminative segmentation backbones and the downstream classifier.

DL: encoder with a parallel dilated-convolution context block (rates 1/2/4/8)
and a bilinear upsampling head. UN: symmetric encoder-decoder with skip
concatenations. Both emit 2-channel logits at input resolution.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

ARCH_TAGS = ("DL", "UN")


def _conv_block(in_ch, out_ch):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1), nn.LeakyReLU(0.2),
        nn.Conv2d(out_ch, out_ch, 3, padding=1), nn.LeakyReLU(0.2),
    )


class DilatedContextSegmenter(nn.Module):
    """Strided encoder + parallel atrous context block + upsample head."""

    def __init__(self, channels: int = 32, in_channels: int = 1,
                 dilations=(1, 2, 4, 8)):
        super().__init__()
        c = channels
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, c, 3, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(c, c * 2, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(c * 2, c * 4, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
        )
        self.context = nn.ModuleList(
            nn.Conv2d(c * 4, c, 3, padding=d, dilation=d) for d in dilations)
        self.fuse = nn.Conv2d(c * len(dilations), c * 2, 1)
        self.head = nn.Conv2d(c * 2, 2, 1)

    def forward(self, x):
        h = self.stem(x)
        ctx = torch.cat([F.leaky_relu(conv(h), 0.2) for conv in self.context], dim=1)
        h = F.leaky_relu(self.fuse(ctx), 0.2)
        logits = self.head(h)
        return F.interpolate(logits, size=x.shape[-2:], mode="bilinear",
                             align_corners=False)


class UNetSegmenter(nn.Module):
    """Three-level encoder-decoder with skip concatenations."""

    def __init__(self, channels: int = 16, in_channels: int = 1):
        super().__init__()
        c = channels
        self.enc1 = _conv_block(in_channels, c)
        self.enc2 = _conv_block(c, c * 2)
        self.enc3 = _conv_block(c * 2, c * 4)
        self.dec2 = _conv_block(c * 4 + c * 2, c * 2)
        self.dec1 = _conv_block(c * 2 + c, c)
        self.head = nn.Conv2d(c, 2, 1)

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(F.avg_pool2d(e1, 2))
        e3 = self.enc3(F.avg_pool2d(e2, 2))
        d2 = self.dec2(torch.cat([_up(e3), e2], dim=1))
        d1 = self.dec1(torch.cat([_up(d2), e1], dim=1))
        return self.head(d1)


def _up(x):
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


def build_segmenter(arch: str, channels: int = 32, in_channels: int = 1):
    if arch == "DL":
        return DilatedContextSegmenter(channels=channels, in_channels=in_channels)
    if arch == "UN":
        return UNetSegmenter(channels=max(8, channels // 2), in_channels=in_channels)
    raise ValueError(f"unknown segmenter arch {arch!r}; expected one of {ARCH_TAGS}")


class ConvClassifier(nn.Module):
    """4-layer convolutional binary classifier for the downstream task."""

    def __init__(self, channels: int = 16, in_channels: int = 1):
        super().__init__()
        c = channels
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, c, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(c, c * 2, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(c * 2, c * 4, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(c * 4, c * 4, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
        )
        self.fc = nn.Linear(c * 4, 1)

    def forward(self, x):
        h = self.net(x)
        return self.fc(h.mean(dim=(2, 3))).squeeze(1)
