"""Loss identities, oracle re-computations, and finite-difference gradient checks."""

import math

import numpy as np
import pytest
import torch

from ganseg.losses import (LossWeights, PerceptualExtractor, cross_entropy,
                           dice_loss, loss_adv, loss_dm, loss_dr,
                           loss_encoder_image, loss_encoder_seg, loss_generator,
                           loss_seg_adv, loss_suponly, perceptual_distance,
                           r1_penalty)

LN2 = math.log(2.0)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


# --- scalar oracles (independent numpy re-implementations) --------------------

def oracle_loss_generator(dr, dm, nonsaturating=False):
    pr, pm = sigmoid(np.asarray(dr)), sigmoid(np.asarray(dm))
    if nonsaturating:
        return float((-np.log(np.maximum(pr, 1e-12))
                      - np.log(np.maximum(pm, 1e-12))).mean())
    return float((np.log(np.maximum(1 - pr, 1e-12))
                  + np.log(np.maximum(1 - pm, 1e-12))).mean())


def oracle_loss_dr(real, fake):
    pr, pf = sigmoid(np.asarray(real)), sigmoid(np.asarray(fake))
    return float(-np.log(np.maximum(pr, 1e-12)).mean()
                 - np.log(np.maximum(1 - pf, 1e-12)).mean())


def oracle_cross_entropy(logits, mask):
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    b = np.arange(logits.shape[0])[:, None, None]
    picked = logp[b, np.asarray(mask), np.arange(logits.shape[2])[None, :, None],
                  np.arange(logits.shape[3])[None, None, :]]
    return float(-picked.mean())


def oracle_dice_loss(logits, mask, smooth=1.0):
    logits = np.asarray(logits, dtype=np.float64)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    p = e[:, 1] / e.sum(axis=1)
    t = np.asarray(mask, dtype=np.float64)
    inter = (p * t).sum(axis=(1, 2))
    denom = p.sum(axis=(1, 2)) + t.sum(axis=(1, 2))
    return float((1 - (2 * inter + smooth) / (denom + smooth)).mean())


# --- fixed-point identities ----------------------------------------------------

def test_generator_loss_at_half():
    z = torch.zeros(8, dtype=torch.float64)
    assert loss_generator(z, z).item() == pytest.approx(2 * math.log(0.5), abs=1e-9)


def test_generator_loss_limit_fooled():
    big = torch.full((4,), -60.0, dtype=torch.float64)
    v = loss_generator(big, big).item()
    assert -1e-6 < v <= 0.0


def test_dr_loss_at_half_and_perfect():
    z = torch.zeros(8, dtype=torch.float64)
    assert loss_dr(z, z).item() == pytest.approx(-2 * math.log(0.5), abs=1e-9)
    big = torch.full((4,), 60.0, dtype=torch.float64)
    assert 0.0 <= loss_dr(big, -big).item() < 1e-6


def test_dm_matches_dr_formula():
    g = torch.Generator().manual_seed(0)
    a = torch.randn(16, generator=g, dtype=torch.float64)
    b = torch.randn(16, generator=g, dtype=torch.float64)
    assert loss_dm(a, b).item() == pytest.approx(loss_dr(a, b).item(), abs=1e-15)


def test_seg_adv_values():
    z = torch.zeros(4, dtype=torch.float64)
    assert loss_seg_adv(z).item() == pytest.approx(math.log(0.5), abs=1e-9)
    big = torch.full((4,), -60.0, dtype=torch.float64)
    assert -1e-6 < loss_seg_adv(big).item() <= 0.0


def test_adv_values():
    z = torch.zeros(4, dtype=torch.float64)
    assert loss_adv(z, z).item() == pytest.approx(-2 * math.log(0.5), abs=1e-9)
    big = torch.full((4,), 60.0, dtype=torch.float64)
    assert 0.0 <= loss_adv(big, -big).item() < 1e-6


def test_all_losses_finite_under_extreme_logits():
    ext = torch.tensor([1e4, -1e4, 0.0], dtype=torch.float64)
    for v in (loss_generator(ext, ext), loss_dr(ext, ext), loss_seg_adv(ext),
              loss_adv(ext, ext)):
        assert math.isfinite(v.item())


# --- oracle equality on random inputs ------------------------------------------

def test_gan_losses_match_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = rng.normal(0, 3, 8)
        b = rng.normal(0, 3, 8)
        ta, tb = torch.as_tensor(a), torch.as_tensor(b)
        assert loss_generator(ta, tb).item() == pytest.approx(
            oracle_loss_generator(a, b), abs=1e-9)
        assert loss_generator(ta, tb, nonsaturating=True).item() == pytest.approx(
            oracle_loss_generator(a, b, nonsaturating=True), abs=1e-9)
        assert loss_dr(ta, tb).item() == pytest.approx(oracle_loss_dr(a, b), abs=1e-9)
        assert loss_seg_adv(ta).item() == pytest.approx(
            float(np.log(np.maximum(1 - sigmoid(a), 1e-12)).mean()), abs=1e-9)
        assert loss_adv(ta, tb).item() == pytest.approx(oracle_loss_dr(a, b), abs=1e-9)


def test_segmentation_losses_match_oracle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        logits = rng.normal(0, 2, (3, 2, 6, 6))
        mask = (rng.random((3, 6, 6)) > 0.5).astype(np.int64)
        tl, tm = torch.as_tensor(logits), torch.as_tensor(mask)
        assert cross_entropy(tl, tm).item() == pytest.approx(
            oracle_cross_entropy(logits, mask), abs=1e-9)
        assert dice_loss(tl, tm).item() == pytest.approx(
            oracle_dice_loss(logits, mask), abs=1e-9)


# --- segmentation loss structure ------------------------------------------------

def test_cross_entropy_uniform_is_ln2():
    logits = torch.zeros(2, 2, 8, 8, dtype=torch.float64)
    mask = (torch.rand(2, 8, 8, generator=torch.Generator().manual_seed(0)) > 0.5).long()
    assert cross_entropy(logits, mask).item() == pytest.approx(LN2, abs=1e-9)


def test_dice_loss_perfect_prediction():
    g = torch.Generator().manual_seed(0)
    mask = (torch.rand(3, 8, 8, generator=g) > 0.4).long()
    logits = torch.stack([(1 - mask) * 10.0, mask * 10.0], dim=1) - 5.0
    assert dice_loss(logits, mask).item() < 0.01


def test_dice_loss_bounds():
    rng = np.random.default_rng(4)
    for _ in range(20):
        logits = torch.as_tensor(rng.normal(0, 5, (2, 2, 8, 8)))
        mask = torch.as_tensor((rng.random((2, 8, 8)) > 0.5).astype(np.int64))
        v = dice_loss(logits, mask).item()
        assert 0.0 <= v <= 1.0 + 1e-9


def test_encoder_seg_is_sum_of_parts():
    g = torch.Generator().manual_seed(1)
    logits = torch.randn(2, 2, 8, 8, generator=g, dtype=torch.float64)
    mask = (torch.rand(2, 8, 8, generator=g) > 0.5).long()
    total = loss_encoder_seg(logits, mask).item()
    parts = cross_entropy(logits, mask).item() + dice_loss(logits, mask).item()
    assert total == pytest.approx(parts, abs=1e-12)
    strong = torch.stack([(1 - mask) * 10.0, mask * 10.0], dim=1) - 5.0
    assert loss_encoder_seg(strong.double(), mask).item() < 0.02


def test_suponly_identical_to_encoder_seg():
    rng = np.random.default_rng(2)
    for _ in range(50):
        logits = torch.as_tensor(rng.normal(0, 2, (2, 2, 5, 5)))
        mask = torch.as_tensor((rng.random((2, 5, 5)) > 0.5).astype(np.int64))
        assert abs(loss_suponly(logits, mask).item()
                   - loss_encoder_seg(logits, mask).item()) < 1e-12


def test_mask_validation():
    logits = torch.zeros(1, 2, 4, 4)
    with pytest.raises(ValueError):
        cross_entropy(logits, torch.full((1, 4, 4), 2))
    with pytest.raises(ValueError):
        dice_loss(logits, torch.full((1, 4, 4), 0.5))
    with pytest.raises(ValueError):
        cross_entropy(torch.zeros(1, 3, 4, 4), torch.zeros(1, 4, 4))


# --- perceptual distance ---------------------------------------------------------

@pytest.fixture(scope="module")
def extractor2():
    return PerceptualExtractor(widths=(4, 8))


def test_perceptual_identity_and_symmetry(extractor2):
    g = torch.Generator().manual_seed(3)
    x = torch.rand(1, 1, 16, 16, generator=g, dtype=torch.float64) * 2 - 1
    y = torch.rand(1, 1, 16, 16, generator=g, dtype=torch.float64) * 2 - 1
    assert perceptual_distance(x, x, extractor2).item() == 0.0
    assert perceptual_distance(x, y, extractor2).item() == pytest.approx(
        perceptual_distance(y, x, extractor2).item(), abs=1e-9)


def test_perceptual_monotone_in_noise(extractor2):
    g = torch.Generator().manual_seed(4)
    x = torch.rand(1, 1, 16, 16, generator=g, dtype=torch.float64) * 2 - 1
    n = torch.randn(1, 1, 16, 16, generator=g, dtype=torch.float64)
    prev = 0.0
    for eps in (0.01, 0.05, 0.1):
        d = perceptual_distance(x, x + eps * n, extractor2).item()
        assert d > prev
        prev = d


def test_perceptual_shape_mismatch(extractor2):
    with pytest.raises(ValueError):
        perceptual_distance(torch.zeros(1, 1, 16, 16), torch.zeros(1, 1, 8, 8),
                            extractor2)


def test_perceptual_weights_stable_across_instances():
    a = PerceptualExtractor(widths=(4, 8))
    b = PerceptualExtractor(widths=(4, 8))
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_encoder_image_loss(extractor2):
    g = torch.Generator().manual_seed(5)
    x = torch.rand(2, 1, 16, 16, generator=g, dtype=torch.float64) * 2 - 1
    w = LossWeights(lambda1=1.0)
    assert loss_encoder_image(x, x.clone(), w, extractor2).item() == 0.0
    y = x + 0.1
    expected = perceptual_distance(x, y, extractor2).item() + 0.1 ** 2
    assert loss_encoder_image(x, y, w, extractor2).item() == pytest.approx(
        expected, rel=1e-9)
    w0 = LossWeights(lambda1=0.0)
    assert loss_encoder_image(x, y, w0, extractor2).item() == pytest.approx(
        perceptual_distance(x, y, extractor2).item(), rel=1e-12)


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda1=-1.0)


# --- gradient checks vs central finite differences -------------------------------

def finite_diff_check(fn, x, h=1e-6, rel_tol=1e-4):
    """Max relative error between autograd and central differences."""
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    grad = x.grad.reshape(-1)
    flat = x.detach().reshape(-1)
    worst = 0.0
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        fp = fn(x.detach()).item()
        flat[i] = orig - h
        fm = fn(x.detach()).item()
        flat[i] = orig
        fd = (fp - fm) / (2 * h)
        denom = max(abs(fd), abs(grad[i].item()), 1e-8)
        worst = max(worst, abs(fd - grad[i].item()) / denom)
    assert worst < rel_tol, f"max relative gradient error {worst}"


def test_grad_dice_loss():
    g = torch.Generator().manual_seed(6)
    mask = (torch.rand(1, 4, 4, generator=g) > 0.5).long()
    x0 = torch.randn(1, 2, 4, 4, generator=g, dtype=torch.float64)
    finite_diff_check(lambda x: dice_loss(x, mask), x0)


def test_grad_cross_entropy():
    g = torch.Generator().manual_seed(7)
    mask = (torch.rand(1, 4, 4, generator=g) > 0.5).long()
    x0 = torch.randn(1, 2, 4, 4, generator=g, dtype=torch.float64)
    finite_diff_check(lambda x: cross_entropy(x, mask), x0)


def test_grad_loss_generator():
    g = torch.Generator().manual_seed(8)
    dm = torch.randn(4, generator=g, dtype=torch.float64)
    x0 = torch.randn(4, generator=g, dtype=torch.float64)
    finite_diff_check(lambda x: loss_generator(x, dm), x0)
    finite_diff_check(lambda x: loss_generator(x, dm, nonsaturating=True), x0)


def test_grad_loss_seg_adv():
    g = torch.Generator().manual_seed(9)
    x0 = torch.randn(6, generator=g, dtype=torch.float64)
    finite_diff_check(lambda x: loss_seg_adv(x), x0)


def test_grad_loss_encoder_image():
    g = torch.Generator().manual_seed(10)
    ex = PerceptualExtractor(widths=(4, 8))
    x = torch.rand(1, 1, 4, 4, generator=g, dtype=torch.float64) * 2 - 1
    w = LossWeights(lambda1=0.7)
    x0 = torch.rand(1, 1, 4, 4, generator=g, dtype=torch.float64) * 2 - 1
    finite_diff_check(lambda xr: loss_encoder_image(x, xr, w, ex), x0)


def test_r1_penalty_positive_and_grad_flow():
    g = torch.Generator().manual_seed(11)
    lin = torch.nn.Linear(8, 1).double()
    x = torch.randn(4, 8, generator=g, dtype=torch.float64, requires_grad=True)
    pen = r1_penalty(x, lin(x).squeeze(1))
    assert pen.item() > 0
    pen.backward()  # second-order path exists
    assert lin.weight.grad is not None
