"""Procedural chest-scan-like data with controllable domain shift and subgroup structure.

Each sample is a grayscale "torso" on a dark background with two bright-bordered
elliptical lung fields; the segmentation mask marks the lung interiors. Domain
knobs (size, position, intensity, noise) are explicit so that train/test shift
and subgroup bias are fully controlled, and every sample is a pure function of
its generation arguments.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import cv2
import numpy as np

SEX_VALUES = ("F", "M")
ROLE_VALUES = ("labelled", "unlabelled", "test")

# Width multiplier applied to the lung ellipses for sex=F. This is the single
# geometric attribute the bias experiments key on, so it is deliberately large.
FEMALE_ASPECT_FACTOR = 0.72


class DataError(Exception):
    """Invalid dataset inputs (bad directory layout, malformed metadata, ...)."""


@dataclass(frozen=True)
class DomainSpec:
    """Domain-level generation knobs; per-sample variation comes from the seed."""

    scale: float = 1.0            # lung size factor
    lateral_shift: float = 0.0    # horizontal shift, pixels (at the generated resolution)
    intensity_offset: float = 0.0
    noise_std: float = 0.02
    texture_seed: int = 0

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"scale must be > 0, got {self.scale}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")


@dataclass(frozen=True)
class GenerationConfig:
    """Per-sample jitter ranges and fixed scene constants.

    Kept separate from DomainSpec: the spec fields there are domain means, the
    jitters here set how much individual samples vary around them.
    """

    resolution: int = 64
    scale_jitter: float = 0.08       # relative, uniform in [-j, +j]
    shift_jitter: float = 0.03       # fraction of width, horizontal + vertical
    intensity_jitter: float = 0.03
    noise_jitter: float = 0.0        # added to DomainSpec.noise_std per sample
    blob_radius_range: tuple = (0.06, 0.10)  # fraction of image width
    blob_contrast: float = 0.3

    def __post_init__(self):
        if self.resolution < 8:
            raise ValueError("resolution too small")


@dataclass
class ImageSample:
    id: str
    pixels: np.ndarray           # H x W float32 in [0, 1]
    mask: np.ndarray | None      # H x W uint8 in {0, 1}, or None
    sex: str
    domain: str
    pathology: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.sex not in SEX_VALUES:
            raise ValueError(f"sex must be one of {SEX_VALUES}, got {self.sex!r}")
        if self.mask is not None:
            if self.mask.shape != self.pixels.shape:
                raise ValueError(
                    f"mask shape {self.mask.shape} != pixels shape {self.pixels.shape}")
            vals = np.unique(self.mask)
            if not np.all(np.isin(vals, (0, 1))):
                raise ValueError("mask must be binary")


@dataclass
class DatasetPartition:
    role: str
    domain: str
    samples: list

    def __post_init__(self):
        if self.role not in ROLE_VALUES:
            raise ValueError(f"role must be one of {ROLE_VALUES}, got {self.role!r}")

    def __len__(self):
        return len(self.samples)


@dataclass
class DataConfig:
    """Counts and domains for the five-partition layout."""

    n_labelled_train: int = 200
    n_labelled_test: int = 60
    n_unlabelled: int = 400
    n_annotated_subset: int = 60
    n_out_of_domain_test: int = 60
    sex_balance: float = 0.5     # fraction of F samples
    in_domain: DomainSpec = field(default_factory=DomainSpec)
    out_of_domain: DomainSpec = field(
        default_factory=lambda: DomainSpec(scale=1.25, lateral_shift=4.0,
                                           intensity_offset=0.15))
    in_domain_tag: str = "synth-in"
    out_of_domain_tag: str = "synth-ood"
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    # The unlabelled corpus is deliberately more diverse than the labelled
    # slice (large public archive vs one curated dataset); None = same as
    # `generation`.
    generation_unlabelled: GenerationConfig | None = None
    seed: int = 0

    def unlabelled_generation(self) -> GenerationConfig:
        return self.generation_unlabelled or self.generation


def _ellipse_mask(cy, cx, ry, rx, yy, xx):
    return ((yy - cy) / max(ry, 1e-6)) ** 2 + ((xx - cx) / max(rx, 1e-6)) ** 2 <= 1.0


def generate_sample(spec: DomainSpec, sex: str, pathology_flags=None, seed: int = 0,
                    gen: GenerationConfig | None = None, sample_id: str | None = None,
                    domain: str = "synth") -> ImageSample:
    """Render one image/mask pair. Deterministic in (spec, sex, flags, seed, gen).

    The seed fixes the underlying anatomy (jitters, texture); the DomainSpec
    knobs transform it, so the same seed under two specs is the "same patient"
    imaged under different conditions.
    """
    if sex not in SEX_VALUES:
        raise ValueError(f"sex must be one of {SEX_VALUES}, got {sex!r}")
    if seed < 0:
        raise ValueError("seed must be >= 0")
    gen = gen or GenerationConfig()
    flags = dict(pathology_flags or {})
    in_mask_signal = bool(flags.get("in_mask_signal", False))
    confound_signal = bool(flags.get("confound_signal", False))

    res = gen.resolution
    root = np.random.default_rng(
        np.random.SeedSequence([int(seed), int(spec.texture_seed) & 0xFFFFFFFF]))
    # Separate streams so pathology flags change only blob pixels, never the
    # anatomy or the noise field.
    rng, rng_path, rng_noise = root.spawn(3)

    # Per-sample anatomy jitters, independent of the domain knobs.
    scale_j = 1.0 + rng.uniform(-gen.scale_jitter, gen.scale_jitter)
    dx_j = rng.uniform(-gen.shift_jitter, gen.shift_jitter)
    dy_j = rng.uniform(-gen.shift_jitter, gen.shift_jitter)
    intensity_j = rng.uniform(-gen.intensity_jitter, gen.intensity_jitter)
    noise_j = rng.uniform(-gen.noise_jitter, gen.noise_jitter)
    lobe_j = rng.uniform(0.9, 1.1)

    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64) / res
    shift_x = spec.lateral_shift / res + dx_j
    cx0 = 0.5 + shift_x
    cy0 = 0.50 + dy_j

    scale = spec.scale * scale_j
    aspect = FEMALE_ASPECT_FACTOR if sex == "F" else 1.0
    lung_ry = 0.27 * scale
    lung_rx = 0.12 * scale * aspect
    lung_dx = 0.175 * scale
    lung_cy = cy0 - 0.02

    # Lung fields: each lung is a union of two vertically offset ellipses,
    # which gives the outline a lobed look rather than a pure ellipse.
    mask = np.zeros((res, res), dtype=bool)
    for side in (-1.0, 1.0):
        cx = cx0 + side * lung_dx
        mask |= _ellipse_mask(lung_cy - 0.04, cx, lung_ry * 0.80 * lobe_j,
                              lung_rx, yy, xx)
        mask |= _ellipse_mask(lung_cy + 0.07, cx + side * 0.012,
                              lung_ry * 0.70, lung_rx * 0.92, yy, xx)

    # Bright rim around the lungs: the dilated band just outside the mask.
    rim_px = max(1, int(round(0.035 * res * scale)))
    kernel = np.ones((3, 3), np.uint8)
    dilated = cv2.dilate(mask.astype(np.uint8), kernel, iterations=rim_px).astype(bool)
    rim = dilated & ~mask

    torso = _ellipse_mask(0.52 + dy_j, cx0, 0.45, 0.40 + 0.02 * scale, yy, xx)

    img = np.full((res, res), 0.04, dtype=np.float64)
    img[torso] = 0.48 + intensity_j + 0.10 * (yy[torso] - 0.5)  # mild vertical gradient
    img[mask] = 0.18 + intensity_j
    img[rim] = 0.78 + intensity_j

    if in_mask_signal:
        img = _add_blob(img, mask, rng_path, gen)
    if confound_signal:
        confound_region = torso & ~dilated
        img = _add_blob(img, confound_region, rng_path, gen)

    img += spec.intensity_offset
    noise_std = max(0.0, spec.noise_std + noise_j)
    if noise_std > 0:
        img += rng_noise.normal(0.0, noise_std, size=img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)

    return ImageSample(
        id=sample_id or f"{domain}-{seed:08d}",
        pixels=img,
        mask=mask.astype(np.uint8),
        sex=sex,
        domain=domain,
        pathology={"in_mask_signal": in_mask_signal, "confound_signal": confound_signal},
        seed=seed,
    )


def _add_blob(img, region, rng, gen):
    """Add one bright blob whose pixels lie strictly inside `region`."""
    res = img.shape[0]
    r_px = rng.uniform(*gen.blob_radius_range) * res
    # Erode the region by the radius so the whole disc fits inside it.
    er = max(1, int(math.ceil(r_px)))
    interior = cv2.erode(region.astype(np.uint8), np.ones((3, 3), np.uint8),
                         iterations=er).astype(bool)
    while not interior.any() and r_px > 1.5:
        r_px *= 0.8
        er = max(1, int(math.ceil(r_px)))
        interior = cv2.erode(region.astype(np.uint8), np.ones((3, 3), np.uint8),
                             iterations=er).astype(bool)
    if not interior.any():
        # Region too small for any blob; degenerate but keeps determinism.
        return img
    ys, xs = np.nonzero(interior)
    k = rng.integers(0, len(ys))
    cy, cx = ys[k], xs[k]
    yy, xx = np.mgrid[0:res, 0:res]
    disc = ((yy - cy) ** 2 + (xx - cx) ** 2) <= r_px ** 2
    disc &= region  # strict containment even if erosion was conservative
    out = img.copy()
    out[disc] += gen.blob_contrast
    return out


# Seed blocks keep sample ids/seeds disjoint across partitions for one DataConfig.
_SEED_BLOCK = {
    "labelled_train": 0,
    "labelled_test": 1,
    "unlabelled": 2,
    "annotated_subset": 3,
    "out_of_domain_test": 4,
    "downstream": 5,
}
_BLOCK_SIZE = 1_000_000


def _sex_sequence(n, balance, rng):
    """Exact-count sex assignment: round(n*balance) F, rest M, shuffled."""
    n_f = int(round(n * balance))
    seq = ["F"] * n_f + ["M"] * (n - n_f)
    rng.shuffle(seq)
    return seq


def _make_partition(name, role, n, spec, domain_tag, config, gen=None):
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, _SEED_BLOCK[name]]))
    sexes = _sex_sequence(n, config.sex_balance, rng)
    base = config.seed * 100_000_000 + _SEED_BLOCK[name] * _BLOCK_SIZE
    samples = []
    for i in range(n):
        s = generate_sample(spec, sexes[i], None, seed=base + i,
                            gen=gen or config.generation,
                            sample_id=f"{domain_tag}-{name}-{i:04d}", domain=domain_tag)
        samples.append(s)
    return DatasetPartition(role=role, domain=domain_tag, samples=samples)


def build_partitions(config: DataConfig) -> dict:
    """Build the five-role dataset layout.

    Returns a dict with keys labelled_train, labelled_test, unlabelled,
    annotated_subset, out_of_domain_test. The annotated subset is drawn fresh
    from the unlabelled domain distribution (its own ids) and carries masks;
    unlabelled samples keep their masks in memory for audits, but their role
    marks them as mask-withheld for training consumers.
    """
    for name in ("n_labelled_train", "n_labelled_test", "n_unlabelled",
                 "n_annotated_subset", "n_out_of_domain_test"):
        if getattr(config, name) < 1:
            raise ValueError(f"{name} must be >= 1")
    if config.out_of_domain == config.in_domain:
        warnings.warn("out-of-domain spec equals in-domain spec; shift experiments "
                      "will have no signal", stacklevel=2)

    return {
        "labelled_train": _make_partition("labelled_train", "labelled",
                                          config.n_labelled_train, config.in_domain,
                                          config.in_domain_tag, config),
        "labelled_test": _make_partition("labelled_test", "test",
                                         config.n_labelled_test, config.in_domain,
                                         config.in_domain_tag, config),
        "unlabelled": _make_partition("unlabelled", "unlabelled",
                                      config.n_unlabelled, config.in_domain,
                                      config.in_domain_tag, config,
                                      gen=config.unlabelled_generation()),
        "annotated_subset": _make_partition("annotated_subset", "test",
                                            config.n_annotated_subset, config.in_domain,
                                            config.in_domain_tag, config,
                                            gen=config.unlabelled_generation()),
        "out_of_domain_test": _make_partition("out_of_domain_test", "test",
                                              config.n_out_of_domain_test,
                                              config.out_of_domain,
                                              config.out_of_domain_tag, config),
    }


def apply_bias_filter(partition: DatasetPartition, attribute: str = "sex",
                      keep: str = "M") -> DatasetPartition:
    """Keep only samples whose `attribute` equals `keep`; order preserved."""
    if attribute != "sex":
        raise ValueError(f"unsupported bias attribute {attribute!r}")
    if not partition.samples:
        raise DataError("cannot filter an empty partition")
    kept = [s for s in partition.samples if s.sex == keep]
    if not kept:
        raise DataError(f"bias filter keep={keep!r} left an empty partition")
    return DatasetPartition(role=partition.role, domain=partition.domain, samples=kept)


def write_partition(partition: DatasetPartition, out_dir, generation_info=None):
    """Write one partition in the exchange layout (images/, masks/, metadata.csv)."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    has_masks = any(s.mask is not None for s in partition.samples)
    if has_masks:
        (out / "masks").mkdir(exist_ok=True)
    rows = []
    for s in partition.samples:
        img8 = np.round(np.clip(s.pixels, 0, 1) * 255).astype(np.uint8)
        cv2.imwrite(str(out / "images" / f"{s.id}.png"), img8)
        if s.mask is not None:
            cv2.imwrite(str(out / "masks" / f"{s.id}.png"),
                        (s.mask * 255).astype(np.uint8))
        rows.append((s.id, s.sex, s.domain))
    with open(out / "metadata.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "sex", "domain"])
        w.writerows(rows)
    if generation_info is not None:
        with open(out / "generation.json", "w") as f:
            json.dump(generation_info, f, indent=2, sort_keys=True)


def ingest_directory(path, role: str | None = None) -> DatasetPartition:
    """Load a partition from the exchange layout.

    Role defaults to "labelled" when every sample has a mask, else "unlabelled".
    """
    root = Path(path)
    meta_path = root / "metadata.csv"
    if not meta_path.exists():
        raise DataError(f"missing metadata.csv in {root}")
    samples = []
    with open(meta_path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ["id", "sex", "domain"]:
            raise DataError(f"metadata.csv header must be id,sex,domain, "
                            f"got {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            sid, sex, domain = row["id"], row["sex"], row["domain"]
            if sex not in SEX_VALUES:
                raise DataError(f"metadata.csv line {lineno} (id={sid!r}): "
                                f"sex must be F or M, got {sex!r}")
            img_path = root / "images" / f"{sid}.png"
            img8 = cv2.imread(str(img_path), cv2.IMREAD_GRAYSCALE)
            if img8 is None:
                raise DataError(f"unreadable or missing image {img_path}")
            pixels = img8.astype(np.float32) / 255.0
            mask_path = root / "masks" / f"{sid}.png"
            mask = None
            if mask_path.exists():
                m8 = cv2.imread(str(mask_path), cv2.IMREAD_GRAYSCALE)
                if m8 is None:
                    raise DataError(f"unreadable mask {mask_path}")
                if m8.shape != pixels.shape:
                    raise DataError(f"mask {mask_path} shape {m8.shape} does not match "
                                    f"image shape {pixels.shape}")
                mask = (m8 > 127).astype(np.uint8)
            samples.append(ImageSample(id=sid, pixels=pixels, mask=mask, sex=sex,
                                       domain=domain))
    if role is None:
        role = "labelled" if samples and all(s.mask is not None for s in samples) \
            else "unlabelled"
    domain = samples[0].domain if samples else "unknown"
    return DatasetPartition(role=role, domain=domain, samples=samples)


def mask_aspect_ratio(mask: np.ndarray) -> float:
    """Height/width ratio of the mask bounding box (per-lung shape proxy)."""
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return 0.0
    h = ys.max() - ys.min() + 1
    w = xs.max() - xs.min() + 1
    return h / w
