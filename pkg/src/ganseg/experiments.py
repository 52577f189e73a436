"""The four studies, as manifest-driven pipelines over trained checkpoints:
generalisation metrics across domains, downstream masked classification,
the six-configuration training-bias suite, and the principal-component
consistency probe. Also the table/figure renderer they share.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import metrics as M
from .metrics import MetricRecord, EmptyMaskError
from .models import (ModelConfig, GanBundle, StyleEncoder, build_segmenter,
                     save_checkpoint, load_checkpoint)
from .preprocess import PreprocessConfig, preprocess_partition
from .synthdata import (DataConfig, DomainSpec, GenerationConfig,
                        apply_bias_filter, build_partitions, generate_sample)
from .training import (TrainConfig, TrainResult, train_stage1, train_stage2,
                       train_suponly, train_semantican, predict_masks,
                       to_tensor_images, mean_dice, Batcher)
from .losses import loss_suponly
from .models.segmenters import ConvClassifier

MODEL_KINDS = ("semanticgan", "suponly-dl", "suponly-un", "semantican-dl",
               "semantican-un")

EVAL_DATASETS = (("labelled_test", "labelled-in-domain"),
                 ("annotated_subset", "unlabelled-in-domain"),
                 ("out_of_domain_test", "out-of-domain"))

# Which training phases see bias-filtered data, per configuration:
# (G unlabelled, G labelled, E unlabelled, E labelled); True = males only.
BIAS_CONFIGS = {
    "control":    (False, False, False, False),
    "full_bias":  (True, True, True, True),
    "biased_G":   (True, True, False, False),
    "biased_E":   (False, False, True, True),
    "biased_Dl":  (False, True, False, True),
    "biased_Du":  (True, False, True, False),
}

MASK_SOURCES = ("unmasked", "oracle", "corrupted-oracle", "suponly",
                "semantican", "semanticgan")


@dataclass
class ExperimentManifest:
    name: str
    bias_config: str
    seeds: list
    dataset_config: DataConfig
    train_config: TrainConfig
    model_config: ModelConfig
    outputs_dir: str = "outputs"

    def __post_init__(self):
        if self.bias_config not in BIAS_CONFIGS:
            raise ValueError(f"unknown bias_config {self.bias_config!r}; "
                             f"expected one of {sorted(BIAS_CONFIGS)}")
        if not self.seeds:
            raise ValueError("manifest needs at least one seed")


@dataclass
class PcaProbeResult:
    component_index: int            # 1-based
    offsets: list                   # in units of the component's sigma
    probe_images: np.ndarray        # (n_offsets, H, W)
    reconstructions: np.ndarray
    segmentations: np.ndarray       # (n_offsets, H, W) uint8
    area_delta_pct: list            # relative to the offset-0 segmentation area


# ---------------------------------------------------------------------------
# Trained-model containers


class SemanticGanSegmenter:
    """Inference path of the generative segmenter: argmax of the label branch
    after encoding the image into style space."""

    def __init__(self, gan: GanBundle, encoder: StyleEncoder):
        self.gan = gan
        self.encoder = encoder

    def predict(self, images: np.ndarray) -> np.ndarray:
        x = to_tensor_images(images)
        return predict_masks(lambda b: self.gan.generator(self.encoder(b))[1], x)

    def reconstruct(self, images: np.ndarray) -> np.ndarray:
        x = to_tensor_images(images)
        outs = []
        with torch.no_grad():
            for i in range(0, len(x), 64):
                rec, _ = self.gan.generator(self.encoder(x[i:i + 64]))
                outs.append(rec.squeeze(1).numpy())
        return np.concatenate(outs)


class DiscriminativeSegmenter:
    def __init__(self, net):
        self.net = net

    def predict(self, images: np.ndarray) -> np.ndarray:
        return predict_masks(self.net, to_tensor_images(images))


def train_model(kind: str, partitions: dict, model_cfg: ModelConfig,
                cfg: TrainConfig, preprocess_cfg: PreprocessConfig):
    """Train one of the five model kinds on preprocessed partitions.

    Returns (predictor, results: dict of TrainResult, components: dict of
    modules keyed by checkpoint component tag).
    """
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    xl, ml_list, _ = preprocess_partition(partitions["labelled_train"], preprocess_cfg)
    if any(m is None for m in ml_list):
        raise ValueError("labelled_train contains samples without masks")
    ml = np.stack(ml_list)

    if kind == "semanticgan":
        if "unlabelled" not in partitions:
            raise ValueError("semanticgan requires an unlabelled partition")
        xu, _, _ = preprocess_partition(partitions["unlabelled"], preprocess_cfg)
        r1 = train_stage1(xl, ml, xu, model_cfg, cfg)
        gan = GanBundle(model_cfg)
        gan.load_state_dict({k: torch.as_tensor(v) for k, v in r1.states["gan"].items()})
        r2 = train_stage2(gan, xl, ml, xu, model_cfg, cfg)
        encoder = StyleEncoder(model_cfg)
        encoder.load_state_dict({k: torch.as_tensor(v)
                                 for k, v in r2.states["encoder"].items()})
        predictor = SemanticGanSegmenter(gan, encoder)
        dr = r1.states["d_r"]
        dm = r1.states["d_m"]
        return predictor, {"stage1": r1, "stage2": r2}, {
            "G": gan.state_dict(), "E": encoder.state_dict(),
            "D_r": dr, "D_m": dm}

    arch = "DL" if kind.endswith("-dl") else "UN"
    if kind.startswith("suponly"):
        r = train_suponly(xl, ml, arch, model_cfg, cfg)
        net = build_segmenter(arch, channels=model_cfg.segmenter_channels)
        net.load_state_dict({k: torch.as_tensor(v)
                             for k, v in r.states["segmenter"].items()})
        return DiscriminativeSegmenter(net), {"train": r}, {arch: net.state_dict()}

    if "unlabelled" not in partitions:
        raise ValueError("semantican requires an unlabelled partition")
    xu, _, _ = preprocess_partition(partitions["unlabelled"], preprocess_cfg)
    r = train_semantican(xl, ml, xu, arch, model_cfg, cfg)
    net = build_segmenter(arch, channels=model_cfg.segmenter_channels)
    net.load_state_dict({k: torch.as_tensor(v)
                         for k, v in r.states["segmenter"].items()})
    return DiscriminativeSegmenter(net), {"train": r}, {
        arch: net.state_dict(), "D_m": r.states["d_m"]}


# ---------------------------------------------------------------------------
# Study 1: generalisation metrics


def evaluate_predictor(model_name: str, predictor, partitions: dict,
                       preprocess_cfg: PreprocessConfig) -> list:
    """Per-sample metric records for one model over the three test partitions.

    `predictor` is either an object with .predict(images)->masks or the
    string "oracle", meaning predictions equal ground truth.
    """
    records = []
    for key, dataset_name in EVAL_DATASETS:
        if key not in partitions:
            continue
        images, masks, samples = preprocess_partition(partitions[key], preprocess_cfg)
        true_masks = np.stack(masks)
        if predictor == "oracle":
            preds = true_masks.copy()
        else:
            preds = predictor.predict(images)
        for i, s in enumerate(samples):
            vals = {
                "dice": M.dice(preds[i], true_masks[i]),
                "precision": M.precision(preds[i], true_masks[i]),
                "recall": M.recall(preds[i], true_masks[i]),
            }
            try:
                vals.update(M.surface_distances(preds[i], true_masks[i]))
            except EmptyMaskError:
                vals.update({"asd": math.nan, "hausdorff": math.nan})
            for metric, value in vals.items():
                records.append(MetricRecord(model_name, dataset_name, s.id,
                                            s.sex, metric, value))
    return records


def run_generalisation_eval(predictors: dict, partitions: dict,
                            preprocess_cfg: PreprocessConfig) -> list:
    """Metric records for every model over the three evaluation datasets."""
    records = []
    for name, predictor in predictors.items():
        records.extend(evaluate_predictor(name, predictor, partitions,
                                          preprocess_cfg))
    return records


# ---------------------------------------------------------------------------
# Study 2: downstream masked classification


@dataclass
class DownstreamData:
    train_images: np.ndarray    # preprocessed, (N,H,W)
    train_masks: np.ndarray     # ground-truth masks at model resolution
    train_labels: np.ndarray
    test_images: np.ndarray
    test_masks: np.ndarray
    test_labels: np.ndarray
    test_sexes: list


def make_downstream_data(data_cfg: DataConfig, preprocess_cfg: PreprocessConfig,
                         n_train: int = 240, n_test: int = 120,
                         p_confound_given_pos: float = 0.75,
                         p_confound_given_neg: float = 0.25,
                         seed: int = 0) -> DownstreamData:
    """Dataset where the binary label is a bright blob strictly inside the
    lungs, with a weaker label-correlated blob outside them."""
    from .preprocess import preprocess_image, resize_mask

    rng = np.random.default_rng(np.random.SeedSequence([data_cfg.seed, 5, seed]))
    base = data_cfg.seed * 100_000_000 + 5 * 1_000_000 + seed * 10_000

    def build(n, offset):
        images, masks, labels, sexes = [], [], [], []
        for i in range(n):
            label = int(rng.random() < 0.5)
            confound = int(rng.random() < (p_confound_given_pos if label
                                           else p_confound_given_neg))
            sex = "F" if rng.random() < data_cfg.sex_balance else "M"
            s = generate_sample(data_cfg.in_domain, sex,
                                {"in_mask_signal": bool(label),
                                 "confound_signal": bool(confound)},
                                seed=base + offset + i, gen=data_cfg.generation,
                                domain=data_cfg.in_domain_tag)
            images.append(preprocess_image(s.pixels, preprocess_cfg))
            masks.append(resize_mask(s.mask, preprocess_cfg.resolution))
            labels.append(label)
            sexes.append(sex)
        return (np.stack(images), np.stack(masks),
                np.asarray(labels, dtype=np.int64), sexes)

    xtr, mtr, ytr, _ = build(n_train, 0)
    xte, mte, yte, sex_te = build(n_test, n_train)
    return DownstreamData(xtr, mtr, ytr, xte, mte, yte, sex_te)


def corrupt_masks(masks: np.ndarray, seed: int = 0) -> np.ndarray:
    """Dilate then shift each mask; a deliberately wrong but plausible source."""
    import cv2
    rng = np.random.default_rng(seed)
    out = []
    res = masks.shape[-1]
    for m in masks:
        d = cv2.dilate(m.astype(np.uint8), np.ones((3, 3), np.uint8),
                       iterations=max(1, res // 16))
        dx = int(rng.integers(res // 4, res // 3)) * (1 if rng.random() < 0.5 else -1)
        dy = int(rng.integers(res // 8, res // 4)) * (1 if rng.random() < 0.5 else -1)
        shifted = np.zeros_like(d)
        src = d[max(0, -dy):res - max(0, dy), max(0, -dx):res - max(0, dx)]
        shifted[max(0, dy):max(0, dy) + src.shape[0],
                max(0, dx):max(0, dx) + src.shape[1]] = src
        out.append(shifted)
    return np.stack(out)


def _apply_mask(images: np.ndarray, masks: np.ndarray) -> np.ndarray:
    return images * (masks > 0)


def train_classifier_auroc(train_images, train_labels, test_images, test_labels,
                           seed: int, steps: int = 400, batch_size: int = 32,
                           lr: float = 1e-3, permute_labels: bool = False) -> float:
    """Train the small conv classifier and return test AUROC."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    y_tr = train_labels.copy()
    if permute_labels:
        y_tr = rng.permutation(y_tr)
    if len(np.unique(y_tr)) < 2 or len(np.unique(test_labels)) < 2:
        raise ValueError("both classes must be present in train and test")
    clf = ConvClassifier()
    opt = torch.optim.Adam(clf.parameters(), lr=lr)
    x = to_tensor_images(train_images)
    y = torch.from_numpy(y_tr).float()
    b = Batcher(len(x), batch_size, rng)
    bce = torch.nn.BCEWithLogitsLoss()
    for _ in range(steps):
        idx = b.next()
        opt.zero_grad(set_to_none=True)
        loss = bce(clf(x[idx]), y[idx])
        loss.backward()
        opt.step()
    with torch.no_grad():
        scores = clf(to_tensor_images(test_images)).numpy()
    return M.auroc(scores, test_labels)


def run_downstream_classification(mask_providers: dict, data: DownstreamData,
                                  seeds, steps: int = 400) -> dict:
    """AUROC mean/std per masking source across classifier seeds.

    mask_providers maps source name to a predictor object, or to one of the
    built-in sources "unmasked", "oracle", "corrupted-oracle",
    "permuted-null" (oracle masks, permuted training labels).
    """
    results = {}
    for name, provider in mask_providers.items():
        permute = False
        if provider == "unmasked":
            tr, te = data.train_images, data.test_images
        elif provider in ("oracle", "permuted-null"):
            tr = _apply_mask(data.train_images, data.train_masks)
            te = _apply_mask(data.test_images, data.test_masks)
            permute = provider == "permuted-null"
        elif provider == "corrupted-oracle":
            tr = _apply_mask(data.train_images, corrupt_masks(data.train_masks, 0))
            te = _apply_mask(data.test_images, corrupt_masks(data.test_masks, 1))
        else:
            tr = _apply_mask(data.train_images, provider.predict(data.train_images))
            te = _apply_mask(data.test_images, provider.predict(data.test_images))
        aurocs = [train_classifier_auroc(tr, data.train_labels, te,
                                         data.test_labels, seed=s, steps=steps,
                                         permute_labels=permute)
                  for s in seeds]
        arr = np.asarray(aurocs)
        results[name] = {"mean": float(arr.mean()),
                         "std": float(arr.std(ddof=1)) if len(arr) > 1 else 0.0,
                         "per_seed": aurocs}
    return results


# ---------------------------------------------------------------------------
# Study 3: training-bias suite


def _maybe_filter(partition, biased: bool):
    return apply_bias_filter(partition, keep="M") if biased else partition


def train_biased_semanticgan(bias_config: str, partitions: dict,
                             model_cfg: ModelConfig, cfg: TrainConfig,
                             preprocess_cfg: PreprocessConfig) -> SemanticGanSegmenter:
    """Two-stage training where each phase sees filtered or full data per the
    six-configuration table."""
    g_du, g_dl, e_du, e_dl = BIAS_CONFIGS[bias_config]
    xl_g, ml_g, _ = preprocess_partition(
        _maybe_filter(partitions["labelled_train"], g_dl), preprocess_cfg)
    xu_g, _, _ = preprocess_partition(
        _maybe_filter(partitions["unlabelled"], g_du), preprocess_cfg)
    r1 = train_stage1(xl_g, np.stack(ml_g), xu_g, model_cfg, cfg)
    gan = GanBundle(model_cfg)
    gan.load_state_dict({k: torch.as_tensor(v) for k, v in r1.states["gan"].items()})

    xl_e, ml_e, _ = preprocess_partition(
        _maybe_filter(partitions["labelled_train"], e_dl), preprocess_cfg)
    xu_e, _, _ = preprocess_partition(
        _maybe_filter(partitions["unlabelled"], e_du), preprocess_cfg)
    r2 = train_stage2(gan, xl_e, np.stack(ml_e), xu_e, model_cfg, cfg)
    encoder = StyleEncoder(model_cfg)
    encoder.load_state_dict({k: torch.as_tensor(v)
                             for k, v in r2.states["encoder"].items()})
    return SemanticGanSegmenter(gan, encoder)


def _bias_run(payload):
    """One (configuration, seed) training + evaluation; module-level so the
    parallel path can pickle it."""
    bias_config, data_cfg, model_cfg, train_cfg, pp_cfg, seed, limit_threads = payload
    if limit_threads:
        torch.set_num_threads(1)
    partitions = build_partitions(data_cfg)
    predictor = train_biased_semanticgan(bias_config, partitions, model_cfg,
                                         _with_seed(train_cfg, seed), pp_cfg)
    recs = evaluate_predictor(f"{bias_config}/seed{seed}", predictor, partitions,
                              pp_cfg)
    return bias_config, seed, recs


def run_bias_suite(manifests: list, preprocess_cfg: PreprocessConfig,
                   jobs: int = 1, progress=None) -> dict:
    """Train every manifest configuration and evaluate on the shared unbiased
    test partitions. Returns records plus stratified summaries and
    control-vs-variant tests. jobs > 1 runs (configuration, seed) pairs in
    parallel worker processes."""
    names = [m.bias_config for m in manifests]
    if "control" not in names:
        raise ValueError("bias suite needs a control manifest")
    payloads = [(m.bias_config, m.dataset_config, m.model_config, m.train_config,
                 preprocess_cfg, seed, jobs > 1)
                for m in manifests for seed in m.seeds]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_bias_run, payloads))
    else:
        outcomes = []
        for p in payloads:
            outcomes.append(_bias_run(p))
            if progress:
                progress(p[0], p[5])
    all_records = []
    per_config = {}
    for bias_config, _seed, recs in outcomes:
        all_records.extend(recs)
        per_config.setdefault(bias_config, []).extend(recs)
    summary = bias_suite_summary(per_config)
    return {"records": all_records, "summary": summary}


def bias_suite_summary(per_config: dict) -> dict:
    """Per-sex Dice summaries per configuration/dataset plus Welch tests and
    both delta definitions against control."""
    def sex_values(recs, dataset, sex):
        return [r.value for r in recs
                if r.metric == "dice" and r.dataset == dataset and r.sex == sex]

    datasets = sorted({r.dataset for recs in per_config.values() for r in recs})
    out = {}
    control = per_config.get("control", [])
    for config, recs in sorted(per_config.items()):
        entry = {}
        for dataset in datasets:
            row = {}
            for sex in ("F", "M"):
                vals = np.asarray(sex_values(recs, dataset, sex))
                cvals = np.asarray(sex_values(control, dataset, sex))
                cell = {"mean": float(vals.mean()) if len(vals) else math.nan,
                        "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
                        "n": int(len(vals))}
                if config != "control" and len(vals) >= 2 and len(cvals) >= 2:
                    cell["welch_vs_control"] = M.welch_ttest(vals, cvals)
                    cell["delta_abs"] = float(vals.mean() - cvals.mean())
                    cell["delta_rel_pct"] = (float((vals.mean() - cvals.mean())
                                                   / cvals.mean() * 100.0)
                                             if cvals.mean() else math.nan)
                row[sex] = cell
            entry[dataset] = row
        out[config] = entry
    return out


def _with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    from dataclasses import replace
    return replace(cfg, seed=seed)


# ---------------------------------------------------------------------------
# Study 4: principal-component consistency probe


def fit_pca(images: np.ndarray, n_components: int):
    """Top principal components of flattened pixels. Returns (mean, components,
    sigmas, projections); components are unit rows."""
    n = len(images)
    if n < n_components:
        raise ValueError(f"need at least {n_components} images, got {n}")
    flat = images.reshape(n, -1).astype(np.float64)
    mean = flat.mean(axis=0)
    centered = flat - mean
    # SVD of the data matrix: rows of vt are principal directions.
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:n_components]
    sigmas = s[:n_components] / math.sqrt(n - 1)
    projections = centered @ comps.T
    return mean, comps, sigmas, projections


def run_pca_probe(encoder: StyleEncoder, gan: GanBundle, images: np.ndarray,
                  n_components: int = 3, offsets=(-2, -1, 0, 1, 2),
                  orient_by: np.ndarray | None = None) -> list:
    """Walk each principal component at the given sigma offsets, push every
    probe image through encoder and generator, and record how the predicted
    segmentation area moves relative to the mean image's.

    `orient_by`: optional per-image scalar (e.g. ground-truth lung area); each
    component is sign-flipped so its projections correlate positively with it.
    """
    res = images.shape[-1]
    mean, comps, sigmas, projections = fit_pca(images, n_components)
    if orient_by is not None:
        orient_by = np.asarray(orient_by, dtype=np.float64)
        for k in range(n_components):
            c = np.corrcoef(projections[:, k], orient_by)[0, 1]
            if c < 0:
                comps[k] = -comps[k]
                projections[:, k] = -projections[:, k]

    segmenter = SemanticGanSegmenter(gan, encoder)
    results = []
    for k in range(n_components):
        probes = np.stack([
            np.clip(mean + o * sigmas[k] * comps[k], -1.0, 1.0).reshape(res, res)
            for o in offsets]).astype(np.float32)
        recon = segmenter.reconstruct(probes)
        segs = segmenter.predict(probes)
        areas = segs.reshape(len(offsets), -1).sum(axis=1).astype(np.float64)
        zero_pos = list(offsets).index(0)
        base = areas[zero_pos]
        deltas = [0.0 if i == zero_pos else
                  (float((a - base) / base * 100.0) if base > 0 else math.nan)
                  for i, a in enumerate(areas)]
        results.append(PcaProbeResult(
            component_index=k + 1, offsets=list(offsets), probe_images=probes,
            reconstructions=recon, segmentations=segs, area_delta_pct=deltas))
    return results


def scale_correlated_component(images: np.ndarray, areas: np.ndarray,
                               n_components: int = 3) -> int:
    """Index (0-based) of the component whose projections correlate most with
    the given per-image areas."""
    _, _, _, proj = fit_pca(images, n_components)
    corrs = [abs(np.corrcoef(proj[:, k], areas)[0, 1]) for k in range(n_components)]
    return int(np.argmax(corrs))


# ---------------------------------------------------------------------------
# Reporting


_HIGHER_BETTER = {"dice": True, "precision": True, "recall": True,
                  "asd": False, "hausdorff": False, "auroc": True}


def summarize_records(records):
    """{(model, dataset, metric): (mean, std, n)} over finite values."""
    cells = {}
    for r in records:
        if isinstance(r.value, float) and math.isnan(r.value):
            continue
        cells.setdefault((r.model, r.dataset, r.metric), []).append(r.value)
    return {k: (float(np.mean(v)), float(np.std(v, ddof=1)) if len(v) > 1 else 0.0,
                len(v))
            for k, v in cells.items()}


def render_metrics_table(records, metrics_order=("dice", "precision", "recall",
                                                 "asd", "hausdorff")) -> str:
    """Markdown table: one block per dataset, best cell per column in bold."""
    if not records:
        raise ValueError("no records to render")
    cells = summarize_records(records)
    models = sorted({r.model for r in records})
    datasets = sorted({r.dataset for r in records})
    present = [m for m in metrics_order if any(k[2] == m for k in cells)]
    lines = []
    for ds in datasets:
        lines.append(f"### {ds}")
        lines.append("")
        lines.append("| model | " + " | ".join(present) + " |")
        lines.append("|" + "---|" * (len(present) + 1))
        best = {}
        for metric in present:
            vals = {m: cells[(m, ds, metric)][0] for m in models
                    if (m, ds, metric) in cells}
            if vals:
                pick = max(vals, key=vals.get) if _HIGHER_BETTER.get(metric, True) \
                    else min(vals, key=vals.get)
                best[metric] = pick
        for m in models:
            row = [m]
            for metric in present:
                if (m, ds, metric) not in cells:
                    row.append("-")
                    continue
                mean, std, _ = cells[(m, ds, metric)]
                cell = f"{mean:.3f} ± {std:.3f}"
                if best.get(metric) == m:
                    cell = f"**{cell}**"
                row.append(cell)
            lines.append("| " + " | ".join(row) + " |")
        lines.append("")
    return "\n".join(lines)


def render_report(records, out_dir, title: str = "Evaluation report") -> Path:
    """Markdown report plus figure files, rendered purely from records."""
    if not records:
        raise ValueError("no records to render")
    out = Path(out_dir)
    (out / "figures").mkdir(parents=True, exist_ok=True)
    lines = [f"# {title}", ""]
    lines.append(render_metrics_table(records))

    strat = M.stratify([r for r in records
                        if r.metric == "dice" and not math.isnan(r.value)])
    if strat:
        lines.append("### Dice stratified by sex")
        lines.append("")
        lines.append("| model | dataset | F mean ± std (n) | M mean ± std (n) "
                     "| Welch p |")
        lines.append("|---|---|---|---|---|")
        for (model, dataset, _metric), entry in sorted(strat.items()):
            cols = []
            for sex in ("F", "M"):
                g = entry["groups"].get(sex)
                cols.append(f"{g['mean']:.3f} ± {g['std']:.3f} ({g['n']})"
                            if g else "-")
            p = entry["welch"]["p"] if entry["welch"] else math.nan
            lines.append(f"| {model} | {dataset} | {cols[0]} | {cols[1]} | "
                         f"{p:.4f} |" if not math.isnan(p) else
                         f"| {model} | {dataset} | {cols[0]} | {cols[1]} | - |")
        lines.append("")
        _plot_stratified(strat, out / "figures" / "dice_by_sex.png")
        lines.append("![dice by sex](figures/dice_by_sex.png)")
        lines.append("")

    report_path = out / "report.md"
    report_path.write_text("\n".join(lines))
    return report_path


def _plot_stratified(strat, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    keys = sorted(strat.keys())
    labels = [f"{m}\n{d}" for (m, d, _) in keys]
    f_means = [strat[k]["groups"].get("F", {}).get("mean", math.nan) for k in keys]
    m_means = [strat[k]["groups"].get("M", {}).get("mean", math.nan) for k in keys]
    f_stds = [strat[k]["groups"].get("F", {}).get("std", 0.0) for k in keys]
    m_stds = [strat[k]["groups"].get("M", {}).get("std", 0.0) for k in keys]
    xs = np.arange(len(keys))
    width = 0.38
    fig, ax = plt.subplots(figsize=(max(6, 1.1 * len(keys)), 4))
    ax.bar(xs - width / 2, f_means, width, yerr=f_stds, capsize=3, label="F")
    ax.bar(xs + width / 2, m_means, width, yerr=m_stds, capsize=3, label="M")
    ax.set_xticks(xs)
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel("Dice")
    ax.set_ylim(0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def write_history_jsonl(history, path):
    with open(path, "w") as f:
        for rec in history:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
