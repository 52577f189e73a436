"""Training protocols: two-stage generative training, supervised baseline,
adversarial discriminative ablation, and generator model selection.

Every trainer is deterministic given its TrainConfig seed: data order, latent
draws, and parameter initialization all derive from it. Trainers return
in-memory results; callers persist them via the checkpoint module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import losses
from .losses import LossWeights, PerceptualExtractor, default_extractor
from .models import (GanBundle, ImageDiscriminator, PatchPairDiscriminator,
                     StyleEncoder, build_segmenter, ModelConfig)
from .models.discriminators import one_hot_mask

SELECTION_MODES = ("fid", "val_dice")

# Reference-scale settings from the source protocols, kept for documentation
# and for anyone running this at scale; desk defaults are in TrainConfig.
PAPER_SCALE_PRESETS = {
    "stage1": {"steps": 100_000, "batch_size": 8},
    "stage2": {"steps": 200_000, "batch_size": 4},
    "semantican": {"steps": 50_000, "batch_size": 32, "lr": 2e-4},
    "suponly": {"steps": 10_000, "batch_size": 32, "lr": 1e-5, "weight_decay": 1e-4},
}


class TrainingDivergence(RuntimeError):
    """A loss or gradient went non-finite; carries the offending step."""


@dataclass
class TrainConfig:
    steps_stage1: int = 3000
    steps_stage2: int = 2000
    steps_segmenter: int = 1500    # SupOnly and SemanticAN
    batch_size: int = 16
    lr_generator: float = 2e-3
    lr_discriminator: float = 2e-3
    lr_encoder: float = 1e-3
    lr_segmenter: float = 1e-3
    weight_decay: float = 0.0
    selection: str = "fid"
    seed: int = 0
    eval_every: int = 100
    nonsaturating: bool = True
    lambda1: float = 1.0
    r1_gamma: float = 10.0
    val_fraction: float = 0.15

    def __post_init__(self):
        for name in ("steps_stage1", "steps_stage2", "steps_segmenter",
                     "batch_size", "eval_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("lr_generator", "lr_discriminator", "lr_encoder",
                     "lr_segmenter"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.selection not in SELECTION_MODES:
            raise ValueError(f"selection must be one of {SELECTION_MODES}")

    def loss_weights(self) -> LossWeights:
        return LossWeights(lambda1=self.lambda1, r1_gamma=self.r1_gamma)


@dataclass
class TrainResult:
    """States are numpy state dicts; history is one record per step."""
    states: dict
    history: list
    best_step: int
    best_score: float
    selection: str
    extra: dict = field(default_factory=dict)


def _f(t) -> float:
    return float(t.detach()) if isinstance(t, torch.Tensor) else float(t)


def _snapshot(module: nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def _check_finite_losses(step, **named):
    for name, value in named.items():
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise TrainingDivergence(f"non-finite {name}={v} at step {step}")


def _guarded_step(opt, modules, step):
    """Assert every gradient is finite before applying the optimizer step."""
    for m in modules:
        for name, p in m.named_parameters():
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise TrainingDivergence(f"non-finite gradient in {name} at step {step}")
    opt.step()


class Batcher:
    """Deterministic epoch-shuffled index batches."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1:
            raise ValueError("empty dataset")
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self._order = rng.permutation(n)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > self.n:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        out = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return out


def to_tensor_images(images: np.ndarray) -> torch.Tensor:
    """N x H x W float array -> (N,1,H,W) float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(images)).float().unsqueeze(1)


def split_validation(n: int, val_fraction: float, rng: np.random.Generator):
    """Deterministic train/val index split; at least one val sample."""
    order = rng.permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    return order[n_val:], order[:n_val]


def predict_masks(net_fn, images: torch.Tensor, batch: int = 64) -> np.ndarray:
    """Argmax foreground masks for a 2-channel logit model, batched."""
    outs = []
    with torch.no_grad():
        for i in range(0, len(images), batch):
            logits = net_fn(images[i:i + batch])
            outs.append((logits[:, 1] > logits[:, 0]).to(torch.uint8).numpy())
    return np.concatenate(outs, axis=0)


def mean_dice(pred_masks: np.ndarray, true_masks: np.ndarray) -> float:
    inter = np.logical_and(pred_masks == 1, true_masks == 1).sum(axis=(1, 2))
    sizes = (pred_masks == 1).sum(axis=(1, 2)) + (true_masks == 1).sum(axis=(1, 2))
    dice = np.where(sizes > 0, 2.0 * inter / np.maximum(sizes, 1), 1.0)
    return float(dice.mean())


# ---------------------------------------------------------------------------
# Generative-quality score


def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    """Matrix square root via eigendecomposition, symmetrizing and clipping
    eigenvalues at zero (covariance estimates can be slightly non-PSD)."""
    a = (a + a.T) / 2.0
    vals, vecs = np.linalg.eigh(a)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_gaussian(mu1, sigma1, mu2, sigma2) -> float:
    """Closed-form Fréchet distance between two Gaussians."""
    root1 = _sqrtm_psd(sigma1)
    cross = _sqrtm_psd(root1 @ sigma2 @ root1)
    d = float(np.sum((mu1 - mu2) ** 2) + np.trace(sigma1) + np.trace(sigma2)
              - 2.0 * np.trace(cross))
    return max(d, 0.0)


def fid_like(real_images, generated_images,
             extractor: PerceptualExtractor | None = None) -> float:
    """Fréchet distance between Gaussian fits of frozen-extractor features."""
    if len(real_images) < 32 or len(generated_images) < 32:
        raise ValueError("need at least 32 images per side")
    ex = extractor or default_extractor()

    def feats(imgs):
        if isinstance(imgs, np.ndarray):
            imgs = to_tensor_images(imgs)
        with torch.no_grad():
            f = ex.pooled_features(imgs.double())
        return f.numpy()

    return frechet_from_features(feats(real_images), feats(generated_images))


def frechet_from_features(real_features: np.ndarray,
                          generated_features: np.ndarray) -> float:
    """Fréchet distance between Gaussian fits of two feature-vector sets."""
    mu_r = real_features.mean(axis=0)
    mu_g = generated_features.mean(axis=0)
    s_r = np.cov(real_features, rowvar=False)
    s_g = np.cov(generated_features, rowvar=False)
    return frechet_gaussian(mu_r, s_r, mu_g, s_g)


# ---------------------------------------------------------------------------
# Stage 1: generator + discriminators


def _r1(disc_fn, inputs, step, gamma):
    for t in inputs:
        t.requires_grad_(True)
    logits = disc_fn(*inputs)
    grads = torch.autograd.grad(logits.sum(), inputs, create_graph=True)
    pen = sum(g.reshape(g.shape[0], -1).square().sum(dim=1) for g in grads).mean()
    return logits, 0.5 * gamma * pen


def train_stage1(labelled_images: np.ndarray, labelled_masks: np.ndarray,
                 unlabelled_images: np.ndarray, model_cfg: ModelConfig,
                 cfg: TrainConfig) -> TrainResult:
    """Adversarial training of the joint generator against both discriminators.

    Per step: image discriminator on real unlabelled vs generated images, pair
    discriminator on real labelled pairs vs generated pairs, then the
    generator against both. Tracks the generative-quality score on a fixed
    probe set and returns the generator state at its minimum.
    """
    if len(unlabelled_images) == 0 or len(labelled_images) == 0:
        raise ValueError("stage 1 needs non-empty labelled and unlabelled data")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    gan = GanBundle(model_cfg)
    d_r = ImageDiscriminator(model_cfg)
    d_m = PatchPairDiscriminator(model_cfg)
    opt_g = torch.optim.Adam(gan.parameters(), lr=cfg.lr_generator, betas=(0.0, 0.99),
                             weight_decay=cfg.weight_decay)
    opt_dr = torch.optim.Adam(d_r.parameters(), lr=cfg.lr_discriminator,
                              betas=(0.0, 0.99), weight_decay=cfg.weight_decay)
    opt_dm = torch.optim.Adam(d_m.parameters(), lr=cfg.lr_discriminator,
                              betas=(0.0, 0.99), weight_decay=cfg.weight_decay)

    xu = to_tensor_images(unlabelled_images)
    xl = to_tensor_images(labelled_images)
    yl = torch.from_numpy(np.ascontiguousarray(labelled_masks)).long()
    bu = Batcher(len(xu), cfg.batch_size, rng)
    bl = Batcher(len(xl), cfg.batch_size, rng)

    # Fixed probe set for the quality score; tile tiny datasets up to the
    # 32-image floor the score requires.
    n_probe = max(32, min(64, len(xu)))
    reps = -(-n_probe // len(xu))
    probe_real = xu.repeat(reps, 1, 1, 1)[:n_probe]
    gen_t = torch.Generator().manual_seed(cfg.seed + 1)
    probe_z = torch.randn(n_probe, model_cfg.latent_dim, generator=gen_t)

    def probe_score():
        with torch.no_grad():
            fake, _ = gan.sample(probe_z)
        return fid_like(probe_real.squeeze(1).numpy(), fake.squeeze(1).numpy())

    history = []
    best_step = 0
    best_state = {"gan": _snapshot(gan)}
    score0 = probe_score()
    best_score = score0

    dm_scalar = PatchPairDiscriminator.scalar_decision
    # Lazy regularization: the penalty is applied every R1_INTERVAL steps with
    # its weight scaled up by the interval, as is standard for this family.
    r1_interval = 8
    for step in range(1, cfg.steps_stage1 + 1):
        do_r1 = cfg.r1_gamma > 0 and step % r1_interval == 1
        gamma_eff = cfg.r1_gamma * r1_interval

        # One generated batch serves both discriminator updates.
        z = torch.randn(cfg.batch_size, model_cfg.latent_dim, generator=gen_t)
        with torch.no_grad():
            xg, yg_logits = gan.sample(z)
            yg = torch.softmax(yg_logits, dim=1)

        # (a) image discriminator
        x_real = xu[bu.next()]
        opt_dr.zero_grad(set_to_none=True)
        if do_r1:
            real_logits, pen_r = _r1(d_r, [x_real.clone()], step, gamma_eff)
        else:
            real_logits, pen_r = d_r(x_real), torch.zeros(())
        l_dr = losses.loss_dr(real_logits, d_r(xg)) + pen_r
        l_dr.backward()
        _guarded_step(opt_dr, [d_r], step)

        # (b) pair discriminator
        il = bl.next()
        xp, yp = xl[il], yl[il]
        opt_dm.zero_grad(set_to_none=True)
        if do_r1:
            real_pair, pen_m = _r1(
                lambda a, b: dm_scalar(d_m(a, b)),
                [xp.clone(), one_hot_mask(yp)], step, gamma_eff)
        else:
            real_pair, pen_m = dm_scalar(d_m(xp, one_hot_mask(yp))), torch.zeros(())
        fake_pair = dm_scalar(d_m(xg, yg))
        l_dm = losses.loss_dm(real_pair, fake_pair) + pen_m
        l_dm.backward()
        _guarded_step(opt_dm, [d_m], step)

        # (c) generator
        z = torch.randn(cfg.batch_size, model_cfg.latent_dim, generator=gen_t)
        opt_g.zero_grad(set_to_none=True)
        xg, yg_logits = gan.sample(z)
        l_g = losses.loss_generator(d_r(xg), dm_scalar(d_m(xg, torch.softmax(yg_logits, dim=1))),
                                    nonsaturating=cfg.nonsaturating)
        l_g.backward()
        _guarded_step(opt_g, [gan], step)

        _check_finite_losses(step, loss_dr=l_dr, loss_dm=l_dm, loss_g=l_g)
        rec = {"step": step, "loss_dr": _f(l_dr), "loss_dm": _f(l_dm),
               "loss_g": _f(l_g)}
        if step % cfg.eval_every == 0 or step == cfg.steps_stage1:
            score = probe_score()
            rec["fid"] = score
            if score < best_score:
                best_score, best_step = score, step
                best_state = {"gan": _snapshot(gan)}
        history.append(rec)

    states = {"gan": best_state["gan"], "d_r": _snapshot(d_r), "d_m": _snapshot(d_m)}
    return TrainResult(states=states, history=history, best_step=best_step,
                       best_score=best_score, selection="fid",
                       extra={"fid_step0": score0})


# ---------------------------------------------------------------------------
# Stage 2: encoder against the frozen generator


def train_stage2(gan: GanBundle, labelled_images: np.ndarray,
                 labelled_masks: np.ndarray, unlabelled_images: np.ndarray,
                 model_cfg: ModelConfig, cfg: TrainConfig) -> TrainResult:
    """Encoder training with the generator bitwise-frozen.

    Minimizes the image reconstruction loss on labelled plus unlabelled
    images and the segmentation reconstruction loss on labelled images;
    selects the step with the best validation Dice of the reconstructed
    segmentation.
    """
    torch.manual_seed(cfg.seed + 10)
    rng = np.random.default_rng(cfg.seed + 10)

    gan.eval()
    for p in gan.parameters():
        p.requires_grad_(False)

    encoder = StyleEncoder(model_cfg)
    opt = torch.optim.Adam(encoder.parameters(), lr=cfg.lr_encoder,
                           betas=(0.9, 0.999), weight_decay=cfg.weight_decay)
    weights = cfg.loss_weights()
    extractor = default_extractor()

    tr_idx, val_idx = split_validation(len(labelled_images), cfg.val_fraction, rng)
    xl = to_tensor_images(labelled_images)
    yl = torch.from_numpy(np.ascontiguousarray(labelled_masks)).long()
    x_all = torch.cat([xl[tr_idx], to_tensor_images(unlabelled_images)])
    x_val, y_val = xl[val_idx], labelled_masks[val_idx]

    ba = Batcher(len(x_all), cfg.batch_size, rng)
    bl = Batcher(len(tr_idx), cfg.batch_size, rng)

    def val_dice():
        preds = predict_masks(lambda b: gan.generator(encoder(b))[1], x_val)
        return mean_dice(preds, y_val)

    history = []
    best_step = 0
    best_state = _snapshot(encoder)
    d0 = val_dice()
    best_score = d0

    for step in range(1, cfg.steps_stage2 + 1):
        opt.zero_grad(set_to_none=True)
        xb = x_all[ba.next()]
        x_rec, _ = gan.generator(encoder(xb))
        l_u = losses.loss_encoder_image(xb, x_rec, weights, extractor)
        il = tr_idx[bl.next()]
        _, seg_logits = gan.generator(encoder(xl[il]))
        l_s = losses.loss_encoder_seg(seg_logits, yl[il])
        loss = l_u + l_s
        loss.backward()
        _guarded_step(opt, [encoder], step)
        _check_finite_losses(step, loss_u=l_u, loss_s=l_s)

        rec = {"step": step, "loss_u": _f(l_u), "loss_s": _f(l_s)}
        if step % cfg.eval_every == 0 or step == cfg.steps_stage2:
            d = val_dice()
            rec["val_dice"] = d
            if d > best_score:
                best_score, best_step = d, step
                best_state = _snapshot(encoder)
        history.append(rec)

    return TrainResult(states={"encoder": best_state}, history=history,
                       best_step=best_step, best_score=best_score,
                       selection="val_dice", extra={"val_dice_step0": d0})


# ---------------------------------------------------------------------------
# Supervised baseline


def train_suponly(labelled_images: np.ndarray, labelled_masks: np.ndarray,
                  arch: str, model_cfg: ModelConfig, cfg: TrainConfig) -> TrainResult:
    """Plain supervised training with the combined CE + Dice objective."""
    torch.manual_seed(cfg.seed + 20)
    rng = np.random.default_rng(cfg.seed + 20)

    seg = build_segmenter(arch, channels=model_cfg.segmenter_channels)
    opt = torch.optim.Adam(seg.parameters(), lr=cfg.lr_segmenter,
                           betas=(0.9, 0.999), weight_decay=cfg.weight_decay)

    tr_idx, val_idx = split_validation(len(labelled_images), cfg.val_fraction, rng)
    x = to_tensor_images(labelled_images)
    y = torch.from_numpy(np.ascontiguousarray(labelled_masks)).long()
    x_val, y_val = x[val_idx], labelled_masks[val_idx]
    bl = Batcher(len(tr_idx), cfg.batch_size, rng)

    def val_dice():
        return mean_dice(predict_masks(seg, x_val), y_val)

    history = []
    best_step = 0
    best_state = _snapshot(seg)
    d0 = val_dice()
    best_score = d0

    for step in range(1, cfg.steps_segmenter + 1):
        il = tr_idx[bl.next()]
        opt.zero_grad(set_to_none=True)
        loss = losses.loss_suponly(seg(x[il]), y[il])
        loss.backward()
        _guarded_step(opt, [seg], step)
        _check_finite_losses(step, loss_sup=loss)
        rec = {"step": step, "loss_sup": _f(loss)}
        if step % cfg.eval_every == 0 or step == cfg.steps_segmenter:
            d = val_dice()
            rec["val_dice"] = d
            if d > best_score:
                best_score, best_step = d, step
                best_state = _snapshot(seg)
        history.append(rec)

    return TrainResult(states={"segmenter": best_state}, history=history,
                       best_step=best_step, best_score=best_score,
                       selection="val_dice", extra={"arch": arch,
                                                    "val_dice_step0": d0})


# ---------------------------------------------------------------------------
# Adversarial discriminative ablation


def train_semantican(labelled_images: np.ndarray, labelled_masks: np.ndarray,
                     unlabelled_images: np.ndarray, arch: str,
                     model_cfg: ModelConfig, cfg: TrainConfig) -> TrainResult:
    """Adversarially trained discriminative segmenter.

    Alternates: pair-discriminator update on real labelled pairs vs
    (image, prediction) pairs, then a segmenter update combining the
    adversarial make-pairs-look-real term on all images with the supervised
    loss on labelled batches. Unlabelled and labelled batches alternate as
    the "all images" source.
    """
    torch.manual_seed(cfg.seed + 30)
    rng = np.random.default_rng(cfg.seed + 30)

    seg = build_segmenter(arch, channels=model_cfg.segmenter_channels)
    d_m = PatchPairDiscriminator(model_cfg)
    opt_s = torch.optim.Adam(seg.parameters(), lr=cfg.lr_segmenter,
                             betas=(0.9, 0.999), weight_decay=cfg.weight_decay)
    opt_d = torch.optim.Adam(d_m.parameters(), lr=cfg.lr_discriminator,
                             betas=(0.0, 0.99), weight_decay=cfg.weight_decay)

    tr_idx, val_idx = split_validation(len(labelled_images), cfg.val_fraction, rng)
    x = to_tensor_images(labelled_images)
    y = torch.from_numpy(np.ascontiguousarray(labelled_masks)).long()
    xu = to_tensor_images(unlabelled_images) if len(unlabelled_images) else None
    x_val, y_val = x[val_idx], labelled_masks[val_idx]

    bl = Batcher(len(tr_idx), cfg.batch_size, rng)
    bu = Batcher(len(xu), cfg.batch_size, rng) if xu is not None else None
    dm_scalar = PatchPairDiscriminator.scalar_decision

    def val_dice():
        return mean_dice(predict_masks(seg, x_val), y_val)

    history = []
    best_step = 0
    best_state = _snapshot(seg)
    d0 = val_dice()
    best_score = d0

    r1_interval = 8
    for step in range(1, cfg.steps_segmenter + 1):
        # Alternate the unlabelled/labelled source for the adversarial term.
        use_unlabelled = (bu is not None) and (step % 2 == 1)
        x_any = xu[bu.next()] if use_unlabelled else x[tr_idx[bl.next()]]

        # (a) discriminator on real pairs vs predicted pairs
        il = tr_idx[bl.next()]
        with torch.no_grad():
            pred_probs = torch.softmax(seg(x_any), dim=1)
        opt_d.zero_grad(set_to_none=True)
        if cfg.r1_gamma > 0 and step % r1_interval == 1:
            real_logit, pen = _r1(lambda a, b: dm_scalar(d_m(a, b)),
                                  [x[il].clone(), one_hot_mask(y[il])], step,
                                  cfg.r1_gamma * r1_interval)
        else:
            real_logit, pen = dm_scalar(d_m(x[il], one_hot_mask(y[il]))), torch.zeros(())
        l_adv = losses.loss_adv(real_logit, dm_scalar(d_m(x_any, pred_probs))) + pen
        l_adv.backward()
        _guarded_step(opt_d, [d_m], step)

        # (b) segmenter: adversarial term plus supervised term
        opt_s.zero_grad(set_to_none=True)
        probs_any = torch.softmax(seg(x_any), dim=1)
        l_seg = losses.loss_seg_adv(dm_scalar(d_m(x_any, probs_any)),
                                    nonsaturating=cfg.nonsaturating)
        il2 = tr_idx[bl.next()]
        l_sup = losses.loss_suponly(seg(x[il2]), y[il2])
        (l_seg + l_sup).backward()
        _guarded_step(opt_s, [seg], step)
        _check_finite_losses(step, loss_adv=l_adv, loss_seg=l_seg, loss_sup=l_sup)

        rec = {"step": step, "loss_adv": _f(l_adv), "loss_seg": _f(l_seg),
               "loss_sup": _f(l_sup)}
        if step % cfg.eval_every == 0 or step == cfg.steps_segmenter:
            d = val_dice()
            rec["val_dice"] = d
            if d > best_score:
                best_score, best_step = d, step
                best_state = _snapshot(seg)
        history.append(rec)

    return TrainResult(states={"segmenter": best_state, "d_m": _snapshot(d_m)},
                       history=history, best_step=best_step, best_score=best_score,
                       selection="val_dice", extra={"arch": arch,
                                                    "val_dice_step0": d0})
