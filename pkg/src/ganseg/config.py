"""Run configuration: YAML document with sections, strict key checking,
dotted --set overrides, and constructors for the typed config objects.

Every run archives its fully resolved config next to its outputs, and a
resolved config plus seed reproduces the run exactly.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import yaml

from .synthdata import DataConfig, DomainSpec, GenerationConfig
from .preprocess import PreprocessConfig
from .models import ModelConfig
from .training import TrainConfig


class ConfigError(Exception):
    """Malformed configuration (unknown key, bad type, inconsistent values)."""


DEFAULTS = {
    "seed": 0,
    "data": {
        "resolution": 64,
        "n_labelled_train": 200,
        "n_labelled_test": 60,
        "n_unlabelled": 400,
        "n_annotated_subset": 60,
        "n_out_of_domain_test": 60,
        "sex_balance": 0.5,
        "in_domain_tag": "synth-in",
        "out_of_domain_tag": "synth-ood",
        "in_domain": {"scale": 1.0, "lateral_shift": 0.0, "intensity_offset": 0.0,
                      "noise_std": 0.02, "texture_seed": 0},
        "out_of_domain": {"scale": 1.25, "lateral_shift": 4.0,
                          "intensity_offset": 0.15, "noise_std": 0.02,
                          "texture_seed": 0},
        "generation": {"scale_jitter": 0.05, "shift_jitter": 0.02,
                       "intensity_jitter": 0.02, "noise_jitter": 0.005,
                       "blob_radius_min": 0.06, "blob_radius_max": 0.10,
                       "blob_contrast": 0.3},
        # The unlabelled corpus is broader than the labelled slice, like a
        # large public archive next to one curated dataset; its envelope
        # covers the out-of-domain test parameters.
        "generation_unlabelled": {"scale_jitter": 0.30, "shift_jitter": 0.08,
                                  "intensity_jitter": 0.18, "noise_jitter": 0.06,
                                  "blob_radius_min": 0.06,
                                  "blob_radius_max": 0.10, "blob_contrast": 0.3},
    },
    "preprocess": {"resolution": 64, "gamma": 0.5, "equalize": True},
    "model": {
        "resolution": 64,
        "latent_dim": 64,
        "style_dim": 128,
        "base_channels": 32,
        "max_channels": 256,
        "mapping_layers": 3,
        "dm_scales": 2,
        "segmenter_channels": 32,
    },
    "train": {
        "steps_stage1": 3000,
        "steps_stage2": 2000,
        "steps_segmenter": 1500,
        "batch_size": 16,
        "lr_generator": 2e-3,
        "lr_discriminator": 2e-3,
        "lr_encoder": 1e-3,
        "lr_segmenter": 1e-3,
        "weight_decay": 0.0,
        "selection": "fid",
        "eval_every": 100,
        "nonsaturating": True,
        "lambda1": 1.0,
        "r1_gamma": 10.0,
        "val_fraction": 0.15,
    },
    "experiment": {
        "seeds": [0, 1, 2],
        "bias_configs": ["control", "full_bias", "biased_G", "biased_E",
                         "biased_Dl", "biased_Du"],
        "downstream": {
            "n_train": 240,
            "n_test": 120,
            "p_confound_given_pos": 0.75,
            "p_confound_given_neg": 0.25,
            "classifier_steps": 400,
            "classifier_seeds": [0, 1, 2, 3, 4],
            "sources": ["unmasked", "oracle", "corrupted-oracle", "permuted-null"],
        },
        "pca": {"n_images": 300, "n_components": 3},
    },
}


def _merge(base, override, path=""):
    if not isinstance(override, dict):
        raise ConfigError(f"section {path or '<root>'} must be a mapping")
    out = copy.deepcopy(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(base[key], dict):
            out[key] = _merge(base[key], value, here)
        else:
            out[key] = value
    return out


def _apply_override(cfg, dotted: str):
    if "=" not in dotted:
        raise ConfigError(f"--set expects key.path=value, got {dotted!r}")
    key_path, raw = dotted.split("=", 1)
    keys = key_path.strip().split(".")
    value = yaml.safe_load(raw)
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node, dict) or k not in node:
            raise ConfigError(f"unknown config key: {key_path}")
        node = node[k]
    leaf = keys[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ConfigError(f"unknown config key: {key_path}")
    if isinstance(node[leaf], dict):
        raise ConfigError(f"cannot --set a whole section: {key_path}")
    node[leaf] = value


def load_config(path=None, overrides=()) -> dict:
    """Resolve defaults <- file <- --set overrides; strict unknown-key checks."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        try:
            user = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"invalid YAML in {path}: {e}") from e
        cfg = _merge(cfg, user)
    for item in overrides:
        _apply_override(cfg, item)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict):
    if cfg["model"]["resolution"] != cfg["preprocess"]["resolution"]:
        raise ConfigError("model.resolution must equal preprocess.resolution")
    for bc in cfg["experiment"]["bias_configs"]:
        from .experiments import BIAS_CONFIGS
        if bc not in BIAS_CONFIGS:
            raise ConfigError(f"unknown bias config {bc!r}")
    try:
        to_data_config(cfg)
        to_preprocess_config(cfg)
        to_model_config(cfg)
        to_train_config(cfg)
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e


def _generation_config(section: dict, resolution: int) -> GenerationConfig:
    return GenerationConfig(
        resolution=resolution,
        scale_jitter=section["scale_jitter"],
        shift_jitter=section["shift_jitter"],
        intensity_jitter=section["intensity_jitter"],
        noise_jitter=section["noise_jitter"],
        blob_radius_range=(section["blob_radius_min"], section["blob_radius_max"]),
        blob_contrast=section["blob_contrast"])


def to_data_config(cfg: dict) -> DataConfig:
    d = cfg["data"]
    return DataConfig(
        n_labelled_train=d["n_labelled_train"],
        n_labelled_test=d["n_labelled_test"],
        n_unlabelled=d["n_unlabelled"],
        n_annotated_subset=d["n_annotated_subset"],
        n_out_of_domain_test=d["n_out_of_domain_test"],
        sex_balance=d["sex_balance"],
        in_domain=DomainSpec(**d["in_domain"]),
        out_of_domain=DomainSpec(**d["out_of_domain"]),
        in_domain_tag=d["in_domain_tag"],
        out_of_domain_tag=d["out_of_domain_tag"],
        generation=_generation_config(d["generation"], d["resolution"]),
        generation_unlabelled=_generation_config(d["generation_unlabelled"],
                                                 d["resolution"]),
        seed=cfg["seed"],
    )


def to_preprocess_config(cfg: dict) -> PreprocessConfig:
    return PreprocessConfig(**cfg["preprocess"])


def to_model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(**cfg["model"])


def to_train_config(cfg: dict, seed=None) -> TrainConfig:
    return TrainConfig(seed=cfg["seed"] if seed is None else seed, **cfg["train"])


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def archive_config(cfg: dict, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.resolved.json", "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
