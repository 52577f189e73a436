import json
import math

import numpy as np
import pytest
import torch

from ganseg import experiments as E
from ganseg.metrics import MetricRecord
from ganseg.models import GanBundle, ModelConfig, StyleEncoder
from ganseg.preprocess import PreprocessConfig
from ganseg.synthdata import DataConfig, DomainSpec, GenerationConfig
from ganseg.training import TrainConfig

MC = ModelConfig(resolution=32, style_dim=32, base_channels=8, max_channels=32)


class ConstantPredictor:
    """Predicts a fixed centered square; cheap stand-in for a trained model."""

    def __init__(self, size=10, empty=False):
        self.size = size
        self.empty = empty

    def predict(self, images):
        n, h, w = images.shape
        masks = np.zeros((n, h, w), np.uint8)
        if not self.empty:
            c = h // 2
            s = self.size // 2
            masks[:, c - s:c + s, c - s:c + s] = 1
        return masks


def test_oracle_predictor_all_dice_one(tiny_partitions, pp32):
    records = E.evaluate_predictor("oracle", "oracle", tiny_partitions, pp32)
    dice_vals = [r.value for r in records if r.metric == "dice"]
    assert dice_vals and all(v == 1.0 for v in dice_vals)
    asd_vals = [r.value for r in records if r.metric == "asd"]
    assert all(v == 0.0 for v in asd_vals)


def test_eval_deterministic_and_complete(tiny_partitions, pp32):
    preds = {"boxy": ConstantPredictor(), "oracle": "oracle"}
    r1 = E.run_generalisation_eval(preds, tiny_partitions, pp32)
    r2 = E.run_generalisation_eval(preds, tiny_partitions, pp32)
    assert [(x.model, x.sample_id, x.metric, x.value) for x in r1] == \
           [(x.model, x.sample_id, x.metric, x.value) for x in r2]
    n_samples = sum(len(tiny_partitions[k]) for k, _ in E.EVAL_DATASETS)
    assert len(r1) == 2 * n_samples * 5  # 2 models x samples x 5 metrics


def test_empty_prediction_records_missing_surface(tiny_partitions, pp32):
    records = E.evaluate_predictor("empty", ConstantPredictor(empty=True),
                                   tiny_partitions, pp32)
    by_metric = {}
    for r in records:
        by_metric.setdefault(r.metric, []).append(r.value)
    assert all(v == 0.0 for v in by_metric["dice"])
    assert all(v == 1.0 for v in by_metric["precision"])  # no false positives
    assert all(math.isnan(v) for v in by_metric["asd"])
    assert all(math.isnan(v) for v in by_metric["hausdorff"])


# --- table / report --------------------------------------------------------------

def _fixture_records():
    rows = []
    for model, d_val in (("a", 0.9), ("b", 0.8)):
        for i in range(3):
            sex = "F" if i % 2 else "M"
            rows.append(MetricRecord(model, "ds1", f"s{i}", sex, "dice",
                                     d_val + 0.01 * i))
            rows.append(MetricRecord(model, "ds1", f"s{i}", sex, "hausdorff",
                                     5.0 - d_val + i))
    return rows


GOLDEN_TABLE = """### ds1

| model | dice | hausdorff |
|---|---|---|
| a | **0.910 ± 0.010** | **5.100 ± 1.000** |
| b | 0.810 ± 0.010 | 5.200 ± 1.000 |
"""


def test_render_table_golden():
    got = E.render_metrics_table(_fixture_records())
    assert got.strip() == GOLDEN_TABLE.strip()


def test_render_table_cell_count(tiny_partitions, pp32):
    records = E.run_generalisation_eval({"m1": ConstantPredictor(),
                                         "m2": "oracle"}, tiny_partitions, pp32)
    table = E.render_metrics_table(records)
    # one row per model per dataset block
    assert table.count("| m1 |") == 3
    assert table.count("| m2 |") == 3
    for metric in ("dice", "precision", "recall", "asd", "hausdorff"):
        assert metric in table


def test_render_report(tmp_path):
    path = E.render_report(_fixture_records(), tmp_path)
    text = path.read_text()
    assert "### ds1" in text
    assert (tmp_path / "figures" / "dice_by_sex.png").exists()
    with pytest.raises(ValueError):
        E.render_report([], tmp_path)


def test_summarize_skips_nan():
    recs = [MetricRecord("m", "d", "1", "F", "asd", math.nan),
            MetricRecord("m", "d", "2", "F", "asd", 2.0)]
    cells = E.summarize_records(recs)
    assert cells[("m", "d", "asd")] == (2.0, 0.0, 1)


# --- downstream -------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_downstream():
    dc = DataConfig(generation=GenerationConfig(resolution=32), seed=0)
    pc = PreprocessConfig(resolution=32)
    return E.make_downstream_data(dc, pc, n_train=40, n_test=30, seed=0)


def test_downstream_data_structure(small_downstream):
    d = small_downstream
    assert d.train_images.shape == (40, 32, 32)
    assert set(np.unique(d.train_labels)) == {0, 1}
    assert set(np.unique(d.test_labels)) == {0, 1}
    # determinism
    dc = DataConfig(generation=GenerationConfig(resolution=32), seed=0)
    pc = PreprocessConfig(resolution=32)
    again = E.make_downstream_data(dc, pc, n_train=40, n_test=30, seed=0)
    assert np.array_equal(again.train_images, d.train_images)
    assert np.array_equal(again.train_labels, d.train_labels)


def test_corrupt_masks(small_downstream):
    m = small_downstream.train_masks
    c = E.corrupt_masks(m, seed=0)
    assert c.shape == m.shape
    assert set(np.unique(c)) <= {0, 1}
    frac_moved = (c != m).mean()
    assert frac_moved > 0.05
    assert np.array_equal(E.corrupt_masks(m, seed=0), c)


def test_downstream_classification_plumbing(small_downstream):
    res = E.run_downstream_classification(
        {"unmasked": "unmasked", "oracle": "oracle"},
        small_downstream, seeds=[0, 1], steps=20)
    for name in ("unmasked", "oracle"):
        assert len(res[name]["per_seed"]) == 2
        assert 0.0 <= res[name]["mean"] <= 1.0
    # deterministic
    res2 = E.run_downstream_classification(
        {"unmasked": "unmasked"}, small_downstream, seeds=[0, 1], steps=20)
    assert res2["unmasked"]["per_seed"] == res["unmasked"]["per_seed"]


# --- bias suite -------------------------------------------------------------------

def test_bias_table_rows():
    # The six configurations: (G Du, G Dl, E Du, E Dl), True = males only.
    assert E.BIAS_CONFIGS["control"] == (False, False, False, False)
    assert E.BIAS_CONFIGS["full_bias"] == (True, True, True, True)
    assert E.BIAS_CONFIGS["biased_G"] == (True, True, False, False)
    assert E.BIAS_CONFIGS["biased_E"] == (False, False, True, True)
    assert E.BIAS_CONFIGS["biased_Dl"] == (False, True, False, True)
    assert E.BIAS_CONFIGS["biased_Du"] == (True, False, True, False)
    assert len(E.BIAS_CONFIGS) == 6


def test_manifest_validation():
    dc = DataConfig(generation=GenerationConfig(resolution=32))
    with pytest.raises(ValueError):
        E.ExperimentManifest("x", "nope", [0], dc, TrainConfig(), MC)
    with pytest.raises(ValueError):
        E.ExperimentManifest("x", "control", [], dc, TrainConfig(), MC)


def test_bias_summary_structure():
    def recs(tag, f_val, m_val):
        out = []
        for i in range(3):
            out.append(MetricRecord(tag, "labelled-in-domain", f"f{i}", "F",
                                    "dice", f_val + 0.01 * i))
            out.append(MetricRecord(tag, "labelled-in-domain", f"m{i}", "M",
                                    "dice", m_val + 0.01 * i))
        return out

    per_config = {"control": recs("control/seed0", 0.95, 0.95),
                  "full_bias": recs("full_bias/seed0", 0.85, 0.94)}
    summary = E.bias_suite_summary(per_config)
    fb = summary["full_bias"]["labelled-in-domain"]
    assert fb["F"]["mean"] < summary["control"]["labelled-in-domain"]["F"]["mean"]
    assert "welch_vs_control" in fb["F"]
    assert fb["F"]["delta_abs"] == pytest.approx(-0.10)
    assert fb["F"]["delta_rel_pct"] == pytest.approx(-10.0 / 0.96 * 0.96, rel=0.2)
    assert "delta_abs" not in summary["control"]["labelled-in-domain"]["F"]


def test_bias_suite_requires_control():
    dc = DataConfig(generation=GenerationConfig(resolution=32))
    m = E.ExperimentManifest("x", "full_bias", [0], dc, TrainConfig(), MC)
    with pytest.raises(ValueError):
        E.run_bias_suite([m], PreprocessConfig(resolution=32))


# --- pca probe --------------------------------------------------------------------

def test_fit_pca_recovers_dominant_direction():
    rng = np.random.default_rng(0)
    base = rng.normal(size=(1, 64)).astype(np.float64)
    direction = np.zeros(64)
    direction[:8] = 1.0 / math.sqrt(8)
    coeffs = rng.normal(0, 5, size=(200, 1))
    data = base + coeffs * direction + rng.normal(0, 0.1, size=(200, 64))
    images = data.reshape(200, 8, 8)
    mean, comps, sigmas, proj = E.fit_pca(images, 3)
    assert abs(np.dot(comps[0], direction)) > 0.99
    assert sigmas[0] > sigmas[1] >= sigmas[2]
    assert np.corrcoef(proj[:, 0], coeffs[:, 0])[0, 1] ** 2 > 0.98


def test_fit_pca_too_few_images():
    with pytest.raises(ValueError):
        E.fit_pca(np.zeros((2, 8, 8)), 3)


@pytest.fixture(scope="module")
def tiny_gan_pair():
    torch.manual_seed(0)
    return GanBundle(MC), StyleEncoder(MC)


def test_pca_probe_contract(tiny_gan_pair, tiny_partitions, pp32):
    from ganseg.preprocess import preprocess_partition
    gan, enc = tiny_gan_pair
    images, _, _ = preprocess_partition(tiny_partitions["unlabelled"], pp32)
    areas = np.array([m.sum() for m in
                      [s.mask for s in tiny_partitions["unlabelled"].samples]])
    results = E.run_pca_probe(enc, gan, images, n_components=3,
                              orient_by=areas)
    assert len(results) == 3
    for r in results:
        assert r.offsets == [-2, -1, 0, 1, 2]
        assert r.area_delta_pct[2] == 0.0  # offset 0 is the mean image
        assert r.probe_images.shape == (5, 32, 32)
        assert r.segmentations.dtype == np.uint8
    again = E.run_pca_probe(enc, gan, images, n_components=3, orient_by=areas)
    for a, b in zip(results, again):
        assert a.area_delta_pct == b.area_delta_pct


def test_scale_component_identification(tiny_partitions, pp32):
    from ganseg.preprocess import preprocess_partition
    images, masks, _ = preprocess_partition(tiny_partitions["unlabelled"], pp32)
    areas = np.array([m.sum() for m in masks])
    k = E.scale_correlated_component(images, areas, 3)
    assert k in (0, 1, 2)


# --- model kind plumbing -----------------------------------------------------------

def test_train_model_validations(tiny_partitions, pp32):
    with pytest.raises(ValueError):
        E.train_model("nope", tiny_partitions, MC, TrainConfig(), pp32)
    no_unlab = {k: v for k, v in tiny_partitions.items() if k != "unlabelled"}
    cfg = TrainConfig(steps_stage1=2, steps_stage2=2, steps_segmenter=2,
                      batch_size=4, eval_every=2)
    with pytest.raises(ValueError):
        E.train_model("semanticgan", no_unlab, MC, cfg, pp32)
    with pytest.raises(ValueError):
        E.train_model("semantican-dl", no_unlab, MC, cfg, pp32)


def test_train_model_suponly_smoke(tiny_partitions, pp32):
    cfg = TrainConfig(steps_stage1=2, steps_stage2=2, steps_segmenter=3,
                      batch_size=4, eval_every=3)
    predictor, results, comps = E.train_model("suponly-un", tiny_partitions, MC,
                                              cfg, pp32)
    assert "UN" in comps
    masks = predictor.predict(np.zeros((2, 32, 32), np.float32))
    assert masks.shape == (2, 32, 32)
    assert len(results["train"].history) == 3
