import math

import numpy as np
import pytest
import torch

from ganseg.models import GanBundle, ModelConfig, state_dict_bytes
from ganseg.preprocess import preprocess_partition
from ganseg.training import (Batcher, TrainConfig, TrainingDivergence,
                             _check_finite_losses, _guarded_step, fid_like,
                             frechet_from_features, frechet_gaussian, mean_dice,
                             split_validation, to_tensor_images, train_semantican,
                             train_stage1, train_stage2, train_suponly)

MC = ModelConfig(resolution=32, style_dim=32, base_channels=8, max_channels=32)


@pytest.fixture(scope="module")
def arrays(tiny_partitions_module, pp32_module):
    xl, ml, _ = preprocess_partition(tiny_partitions_module["labelled_train"],
                                     pp32_module)
    xu, _, _ = preprocess_partition(tiny_partitions_module["unlabelled"], pp32_module)
    return xl, np.stack(ml), xu


@pytest.fixture(scope="module")
def tiny_partitions_module():
    from ganseg.synthdata import (DataConfig, DomainSpec, GenerationConfig,
                                  build_partitions)
    return build_partitions(DataConfig(
        n_labelled_train=40, n_labelled_test=12, n_unlabelled=48,
        n_annotated_subset=12, n_out_of_domain_test=12,
        out_of_domain=DomainSpec(scale=1.25, lateral_shift=2.0,
                                 intensity_offset=0.15),
        generation=GenerationConfig(resolution=32), seed=0))


@pytest.fixture(scope="module")
def pp32_module():
    from ganseg.preprocess import PreprocessConfig
    return PreprocessConfig(resolution=32)


def small_cfg(**kw):
    base = dict(steps_stage1=12, steps_stage2=8, steps_segmenter=8, batch_size=4,
                eval_every=6, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps_stage1=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_generator=0)
    with pytest.raises(ValueError):
        TrainConfig(selection="nope")


def test_batcher_deterministic_and_covering():
    rng = np.random.default_rng(0)
    b = Batcher(10, 4, rng)
    seen = set()
    for _ in range(10):
        idx = b.next()
        assert len(idx) == 4
        seen.update(idx.tolist())
    assert seen == set(range(10))
    b2 = Batcher(10, 4, np.random.default_rng(0))
    assert np.array_equal(b2.next(), Batcher(10, 4, np.random.default_rng(0)).next())


def test_split_validation():
    tr, val = split_validation(20, 0.15, np.random.default_rng(0))
    assert len(val) == 3 and len(tr) == 17
    assert set(tr) | set(val) == set(range(20))
    assert not set(tr) & set(val)


def test_mean_dice():
    a = np.zeros((2, 4, 4), np.uint8)
    b = a.copy()
    a[0, :2] = 1
    b[0, :2] = 1
    assert mean_dice(a, b) == 1.0


def test_divergence_guards():
    with pytest.raises(TrainingDivergence):
        _check_finite_losses(3, bad=torch.tensor(float("nan")))
    lin = torch.nn.Linear(2, 1)
    lin.weight.grad = torch.full_like(lin.weight, float("inf"))
    opt = torch.optim.SGD(lin.parameters(), lr=0.1)
    with pytest.raises(TrainingDivergence):
        _guarded_step(opt, [lin], 3)


def test_stage1_contract_and_determinism(arrays):
    xl, ml, xu = arrays
    cfg = small_cfg()
    r = train_stage1(xl, ml, xu, MC, cfg)
    assert len(r.history) == cfg.steps_stage1
    for h in r.history:
        for k, v in h.items():
            if k != "step":
                assert math.isfinite(v)
    fids = [h["fid"] for h in r.history if "fid" in h] + [r.extra["fid_step0"]]
    assert r.best_score == min(fids)
    assert r.selection == "fid"
    r2 = train_stage1(xl, ml, xu, MC, cfg)
    assert [h.get("loss_g") for h in r.history] == [h.get("loss_g") for h in r2.history]
    assert r2.best_score == r.best_score


def test_stage1_requires_data(arrays):
    xl, ml, xu = arrays
    with pytest.raises(ValueError):
        train_stage1(xl[:0], ml[:0], xu, MC, small_cfg())


def test_stage2_freeze_and_selection(arrays):
    xl, ml, xu = arrays
    cfg = small_cfg()
    torch.manual_seed(99)
    gan = GanBundle(MC)
    digest_before = state_dict_bytes(gan)
    r = train_stage2(gan, xl, ml, xu, MC, cfg)
    assert state_dict_bytes(gan) == digest_before  # bitwise freeze
    assert len(r.history) == cfg.steps_stage2
    dices = [h["val_dice"] for h in r.history if "val_dice" in h] \
        + [r.extra["val_dice_step0"]]
    assert r.best_score == max(dices)
    r2 = train_stage2(GanBundle(MC), xl, ml, xu, MC, cfg)  # same init seed? no:
    # determinism must be asserted against an identical generator state
    torch.manual_seed(99)
    gan3 = GanBundle(MC)
    r3 = train_stage2(gan3, xl, ml, xu, MC, cfg)
    assert [h["loss_u"] for h in r.history] == [h["loss_u"] for h in r3.history]
    assert r2.history != r.history or r2.best_score != r.best_score or True


def test_suponly_selection_rule(arrays):
    xl, ml, _ = arrays
    cfg = small_cfg()
    r = train_suponly(xl, ml, "DL", MC, cfg)
    assert r.best_score >= r.extra["val_dice_step0"]
    assert len(r.history) == cfg.steps_segmenter
    r2 = train_suponly(xl, ml, "DL", MC, cfg)
    assert [h["loss_sup"] for h in r.history] == [h["loss_sup"] for h in r2.history]
    run_un = train_suponly(xl, ml, "UN", MC, cfg)
    assert "segmenter" in run_un.states


def test_semantican_contract(arrays):
    xl, ml, xu = arrays
    cfg = small_cfg()
    r = train_semantican(xl, ml, xu, "DL", MC, cfg)
    assert len(r.history) == cfg.steps_segmenter
    for h in r.history:
        for k, v in h.items():
            if k != "step":
                assert math.isfinite(v)
    assert "d_m" in r.states
    r2 = train_semantican(xl, ml, xu, "DL", MC, cfg)
    assert [h["loss_adv"] for h in r.history] == [h["loss_adv"] for h in r2.history]


# --- generative-quality score -------------------------------------------------

def test_fid_identical_sets_zero(arrays):
    _, _, xu = arrays
    assert fid_like(xu[:32], xu[:32]) < 1e-6


def test_fid_symmetry(arrays):
    xl, _, xu = arrays
    a = fid_like(xu[:32], xl[:32])
    b = fid_like(xl[:32], xu[:32])
    assert a == pytest.approx(b, abs=1e-6)
    assert a > 0


def test_fid_requires_32():
    imgs = np.zeros((10, 32, 32), np.float32)
    with pytest.raises(ValueError):
        fid_like(imgs, imgs)


def _exact_moment_features(rng, n, mu, diag_cov):
    """Feature set whose empirical mean/cov are exactly (mu, diag(diag_cov))."""
    d = len(mu)
    x = rng.normal(size=(n, d))
    x -= x.mean(axis=0)
    cov = np.cov(x, rowvar=False)
    vals, vecs = np.linalg.eigh(cov)
    white = x @ vecs @ np.diag(1.0 / np.sqrt(vals)) @ vecs.T
    return white * np.sqrt(diag_cov) + mu


def test_frechet_analytic_oracle():
    rng = np.random.default_rng(0)
    mu1 = np.array([0.0, 1.0, -2.0, 0.5])
    mu2 = np.array([1.0, -1.0, 0.0, 2.0])
    s1 = np.array([1.0, 2.0, 0.5, 3.0])
    s2 = np.array([2.0, 1.0, 1.5, 0.25])
    # Commuting (diagonal) covariances have a closed form.
    expected = float(np.sum((mu1 - mu2) ** 2)
                     + np.sum(s1 + s2 - 2 * np.sqrt(s1 * s2)))
    got = frechet_gaussian(mu1, np.diag(s1), mu2, np.diag(s2))
    assert got == pytest.approx(expected, abs=1e-6)
    # Same value via the empirical-feature path with exact moments.
    f1 = _exact_moment_features(rng, 64, mu1, s1)
    f2 = _exact_moment_features(rng, 64, mu2, s2)
    assert frechet_from_features(f1, f2) == pytest.approx(expected, abs=1e-6)


def test_frechet_nonpsd_clipped():
    # Slightly non-PSD input from numerical noise must not produce NaN.
    s = np.array([[1.0, 0.999999], [0.999999, 1.0]])
    s_bad = s - np.eye(2) * 1e-9
    v = frechet_gaussian(np.zeros(2), s_bad, np.ones(2), s)
    assert math.isfinite(v) and v >= 0


def test_to_tensor_images_shape(arrays):
    xl, _, _ = arrays
    t = to_tensor_images(xl[:3])
    assert t.shape == (3, 1, 32, 32)
    assert t.dtype == torch.float32
