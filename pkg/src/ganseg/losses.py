"""Every training objective used by the three paradigms.

GAN terms are implemented in their printed minimax form; generator-side terms
optionally switch to the non-saturating -log D variant via `nonsaturating`
(the form the underlying style-based architecture family normally trains
with). All log arguments are clamped below at 1e-12 so every loss is finite
for finite inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

LOG_EPS = 1e-12
DICE_SMOOTH = 1.0


@dataclass
class LossWeights:
    lambda1: float = 1.0      # L2 weight in the encoder image loss
    r1_gamma: float = 10.0    # discriminator gradient penalty weight; 0 disables

    def __post_init__(self):
        if self.lambda1 < 0 or self.r1_gamma < 0:
            raise ValueError("loss weights must be >= 0")


def _log(x):
    return torch.log(torch.clamp(x, min=LOG_EPS))


def loss_generator(dr_logit, dm_logit, nonsaturating: bool = False):
    """Generator objective over both discriminators, batch-averaged."""
    pr = torch.sigmoid(dr_logit)
    pm = torch.sigmoid(dm_logit)
    if nonsaturating:
        return (-_log(pr) - _log(pm)).mean()
    return (_log(1 - pr) + _log(1 - pm)).mean()


def loss_dr(real_logits, fake_logits):
    """Image discriminator objective: real up, generated down."""
    return (-_log(torch.sigmoid(real_logits))).mean() + \
           (-_log(1 - torch.sigmoid(fake_logits))).mean()


def loss_dm(real_pair_logits, fake_pair_logits):
    """Pair discriminator objective on (image, segmentation) pairs.

    Inputs are the per-sample scalar decisions (already averaged over patches
    and scales).
    """
    return loss_dr(real_pair_logits, fake_pair_logits)


def loss_seg_adv(dm_logit_on_prediction, nonsaturating: bool = False):
    """Adversarial segmenter objective: make (x, prediction) pairs look real."""
    p = torch.sigmoid(dm_logit_on_prediction)
    if nonsaturating:
        return (-_log(p)).mean()
    return _log(1 - p).mean()


def loss_adv(dm_real_pair_logits, dm_pred_pair_logits):
    """Pair-discriminator objective against segmenter predictions.

    Standard discriminator direction; the sign printed on the prediction term
    in the source formulation is treated as a typo.
    """
    return loss_dr(dm_real_pair_logits, dm_pred_pair_logits)


def r1_penalty(inputs, logits):
    """E[||d logits / d inputs||^2] over the batch.

    Training loops add 0.5 * r1_gamma * penalty to the discriminator loss.
    `inputs` must have requires_grad=True.
    """
    grads = torch.autograd.grad(outputs=logits.sum(), inputs=inputs,
                                create_graph=True)[0]
    return grads.reshape(grads.shape[0], -1).square().sum(dim=1).mean()


def _check_seg_inputs(seg_logits, mask):
    if seg_logits.dim() == 3:
        seg_logits = seg_logits.unsqueeze(0)
    if mask.dim() == 2:
        mask = mask.unsqueeze(0)
    if seg_logits.shape[1] != 2:
        raise ValueError(f"expected 2-channel logits, got {tuple(seg_logits.shape)}")
    if seg_logits.shape[-2:] != mask.shape[-2:] or seg_logits.shape[0] != mask.shape[0]:
        raise ValueError("logits and mask shapes do not align")
    uniq = torch.unique(mask)
    if not bool(((uniq == 0) | (uniq == 1)).all()):
        raise ValueError("mask must be binary")
    return seg_logits, mask


def cross_entropy(seg_logits, mask):
    """Mean pixelwise negative log softmax of the true class."""
    seg_logits, mask = _check_seg_inputs(seg_logits, mask)
    logp = F.log_softmax(seg_logits, dim=1)
    target = mask.long()
    nll = -logp.gather(1, target.unsqueeze(1)).squeeze(1)
    return nll.mean()


def dice_loss(seg_logits, mask):
    """1 - smoothed Dice of the foreground softmax channel, per-sample mean."""
    seg_logits, mask = _check_seg_inputs(seg_logits, mask)
    p = F.softmax(seg_logits, dim=1)[:, 1]
    t = mask.to(p.dtype)
    inter = (p * t).sum(dim=(1, 2))
    denom = p.sum(dim=(1, 2)) + t.sum(dim=(1, 2))
    dice = (2 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)
    return (1 - dice).mean()


def loss_encoder_seg(seg_logits, mask):
    """Cross entropy plus Dice loss (segmentation branch reconstruction)."""
    return cross_entropy(seg_logits, mask) + dice_loss(seg_logits, mask)


def loss_suponly(seg_logits, mask):
    """Supervised baseline objective; same formula as loss_encoder_seg."""
    return loss_encoder_seg(seg_logits, mask)


class PerceptualExtractor(nn.Module):
    """Frozen convolutional feature extractor with build-time seeded weights.

    Serves two roles: the LPIPS-style perceptual distance and the feature
    embedding for the generative-quality score. Weights are generated from a
    fixed seed, so the metric is identical across runs and processes.
    """

    SEED = 0x7E57ED

    def __init__(self, in_channels: int = 1, widths=(8, 16, 24), seed: int | None = None):
        super().__init__()
        gen = torch.Generator().manual_seed(self.SEED if seed is None else seed)
        layers = []
        prev = in_channels
        for w in widths:
            conv = nn.Conv2d(prev, w, kernel_size=3, stride=2, padding=1)
            fan_in = prev * 9
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen,
                                              dtype=torch.float64) * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
            layers.append(conv)
            prev = w
        self.convs = nn.ModuleList(layers)
        self.double()
        for p in self.parameters():
            p.requires_grad_(False)

    def features(self, x):
        """List of per-layer activation maps; input (B,1,H,W) in [-1,1]."""
        feats = []
        h = x
        for conv in self.convs:
            w = conv.weight.to(h.dtype)
            b = conv.bias.to(h.dtype)
            h = F.leaky_relu(F.conv2d(h, w, b, stride=2, padding=1), 0.2)
            feats.append(h)
        return feats

    def pooled_features(self, x):
        """Per-layer spatial means concatenated into one vector per image."""
        feats = self.features(x)
        return torch.cat([f.mean(dim=(2, 3)) for f in feats], dim=1)


_default_extractor = None


def default_extractor() -> PerceptualExtractor:
    global _default_extractor
    if _default_extractor is None:
        _default_extractor = PerceptualExtractor()
    return _default_extractor


def _as_batched(x):
    if x.dim() == 2:
        return x.unsqueeze(0).unsqueeze(0)
    if x.dim() == 3:
        return x.unsqueeze(1) if x.shape[0] != 1 else x.unsqueeze(0)
    return x


def perceptual_distance(x1, x2, extractor: PerceptualExtractor | None = None):
    """Sum over layers of mean squared differences of unit-normalized features."""
    if x1.shape != x2.shape:
        raise ValueError(f"shape mismatch: {tuple(x1.shape)} vs {tuple(x2.shape)}")
    ex = extractor or default_extractor()
    a = _as_batched(x1)
    b = _as_batched(x2)
    total = 0.0
    for fa, fb in zip(ex.features(a), ex.features(b)):
        na = fa / torch.sqrt(fa.square().sum(dim=1, keepdim=True) + 1e-10)
        nb = fb / torch.sqrt(fb.square().sum(dim=1, keepdim=True) + 1e-10)
        total = total + (na - nb).square().mean()
    return total


def loss_encoder_image(x, x_rec, weights: LossWeights,
                       extractor: PerceptualExtractor | None = None):
    """Perceptual distance plus lambda1 * mean squared error."""
    lpips = perceptual_distance(x, x_rec, extractor)
    return lpips + weights.lambda1 * (x - x_rec).square().mean()
