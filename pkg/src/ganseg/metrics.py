"""Segmentation, classification, and significance metrics.

All segmentation metrics operate on binary masks in pixel units. Empty-mask
conventions are fixed here once and used everywhere:

  dice/precision/recall: both empty -> 1.0; pred empty only -> precision 1.0,
  dice 0, recall 0; truth empty only -> recall 1.0, dice 0, precision 0.

  surface distances: undefined for an empty mask; raises EmptyMaskError, and
  report code records the value as missing.

Model outputs are binarized by argmax over the two softmax channels
(no threshold parameter); see `binarize_logits`.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.spatial import cKDTree

METRIC_NAMES = ("dice", "precision", "recall", "asd", "hausdorff", "auroc")

CSV_HEADER = ["model", "dataset", "sample_id", "sex", "metric", "value"]


class EmptyMaskError(ValueError):
    """Surface distances are undefined when either mask has no foreground."""


@dataclass
class MetricRecord:
    model: str
    dataset: str
    sample_id: str
    sex: str
    metric: str
    value: float


def _as_binary(mask, name):
    m = np.asarray(mask)
    if not np.all(np.isin(m, (0, 1))):
        raise ValueError(f"{name} must be binary (values in {{0,1}})")
    return m.astype(bool)


def _check_pair(pred, true):
    p = _as_binary(pred, "pred_mask")
    t = _as_binary(true, "true_mask")
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    return p, t


def dice(pred_mask, true_mask) -> float:
    p, t = _check_pair(pred_mask, true_mask)
    np_, nt = p.sum(), t.sum()
    if np_ == 0 and nt == 0:
        return 1.0
    return 2.0 * np.logical_and(p, t).sum() / (np_ + nt)


def precision(pred_mask, true_mask) -> float:
    p, t = _check_pair(pred_mask, true_mask)
    if p.sum() == 0:
        return 1.0  # no positive predictions, no false positives
    return np.logical_and(p, t).sum() / p.sum()


def recall(pred_mask, true_mask) -> float:
    p, t = _check_pair(pred_mask, true_mask)
    if t.sum() == 0:
        return 1.0  # nothing to recover
    return np.logical_and(p, t).sum() / t.sum()


def boundary_points(mask) -> np.ndarray:
    """(row, col) coordinates of mask pixels 4-adjacent to background.

    The image border counts as background, so foreground touching the edge is
    boundary.
    """
    m = _as_binary(mask, "mask")
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] &
                padded[1:-1, :-2] & padded[1:-1, 2:])
    boundary = m & ~interior
    return np.argwhere(boundary).astype(np.float64)


def surface_distances(pred_mask, true_mask) -> dict:
    """Average symmetric surface distance and Hausdorff distance in pixels."""
    p, t = _check_pair(pred_mask, true_mask)
    if p.sum() == 0 or t.sum() == 0:
        raise EmptyMaskError("surface distances undefined for an empty mask")
    bp = boundary_points(p)
    bt = boundary_points(t)
    d_p_to_t, _ = cKDTree(bt).query(bp)
    d_t_to_p, _ = cKDTree(bp).query(bt)
    return {
        "asd": float(0.5 * (d_p_to_t.mean() + d_t_to_p.mean())),
        "hausdorff": float(max(d_p_to_t.max(), d_t_to_p.max())),
    }


def binarize_logits(seg_logits) -> np.ndarray:
    """Argmax over the 2 channels; channel 1 is foreground."""
    logits = np.asarray(seg_logits)
    if logits.shape[-3] != 2:
        raise ValueError(f"expected 2-channel logits, got shape {logits.shape}")
    return (logits[..., 1, :, :] > logits[..., 0, :, :]).astype(np.uint8)


def auroc(scores, labels) -> float:
    """Mann-Whitney U formulation; ties contribute 1/2 via average ranks."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if not np.all(np.isin(y, (0, 1))):
        raise ValueError("labels must be 0/1")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes must be present")
    ranks = stats.rankdata(s)  # average ranks for ties
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _t_pvalue(t, df):
    return float(2.0 * stats.t.sf(abs(t), df))


def paired_ttest(a, b) -> dict:
    """Dependent two-sided t-test on paired samples."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired test needs equal-length 1-d samples")
    if len(a) < 2:
        raise ValueError("need at least 2 pairs")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0:
        # Zero variance: degenerate; p by convention.
        if d.mean() == 0:
            return {"t": 0.0, "p": 1.0}
        return {"t": math.copysign(math.inf, d.mean()), "p": 0.0}
    t = d.mean() / (sd / math.sqrt(len(d)))
    return {"t": float(t), "p": _t_pvalue(t, len(d) - 1)}


def welch_ttest(a, b) -> dict:
    """Independent two-sided Welch's t-test (Welch-Satterthwaite df)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or len(a) < 2 or len(b) < 2:
        raise ValueError("each sample needs length >= 2")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    na, nb = len(a), len(b)
    denom_sq = va / na + vb / nb
    if denom_sq == 0:
        if a.mean() == b.mean():
            return {"t": 0.0, "p": 1.0}
        return {"t": math.copysign(math.inf, a.mean() - b.mean()), "p": 0.0}
    t = (a.mean() - b.mean()) / math.sqrt(denom_sq)
    df = denom_sq ** 2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    return {"t": float(t), "p": _t_pvalue(t, df)}


def stratify(records, by: str = "sex") -> dict:
    """Per-group summaries and between-group Welch tests.

    Returns {(model, dataset, metric): {"groups": {sex: {mean, std, n}},
    "welch": {t, p} or None}}. The Welch entry is present when exactly two
    groups each have n >= 2.
    """
    if by != "sex":
        raise ValueError(f"unsupported stratification attribute {by!r}")
    values = {}
    for r in records:
        values.setdefault((r.model, r.dataset, r.metric), {}).setdefault(
            r.sex, []).append(r.value)
    out = {}
    for key, groups in sorted(values.items()):
        summary = {}
        for sex, vals in sorted(groups.items()):
            v = np.asarray(vals, dtype=np.float64)
            summary[sex] = {"mean": float(v.mean()),
                            "std": float(v.std(ddof=1)) if len(v) > 1 else 0.0,
                            "n": len(v)}
        test = None
        if len(groups) == 2:
            (ga, gb) = sorted(groups)
            if len(groups[ga]) >= 2 and len(groups[gb]) >= 2:
                test = welch_ttest(groups[ga], groups[gb])
        out[key] = {"groups": summary, "welch": test}
    return out


def write_records_csv(records, path):
    """Stream MetricRecords to CSV with the fixed header; deterministic bytes."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow([r.model, r.dataset, r.sample_id, r.sex, r.metric,
                        format_value(r.value)])


def read_records_csv(path):
    records = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"bad metrics csv header: {reader.fieldnames}")
        for row in reader:
            records.append(MetricRecord(row["model"], row["dataset"],
                                        row["sample_id"], row["sex"], row["metric"],
                                        float(row["value"]) if row["value"] != "" else math.nan))
    return records


def format_value(v) -> str:
    """Fixed float formatting so identical runs produce identical CSV bytes."""
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return f"{float(v):.10g}"
