"""Command-line entry point.

Subcommands: generate | train | eval | bias-suite | downstream | pca-probe |
report. Every command takes --config/--set and archives its resolved
configuration; --dry-run prints the resolved plan without side effects.

Exit codes: 0 success, 2 config error, 3 data error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import config as C
from . import experiments as E
from . import metrics as M
from .config import ConfigError
from .models import (GanBundle, StyleEncoder, build_segmenter, load_checkpoint,
                     save_checkpoint)
from .preprocess import preprocess_partition
from .synthdata import DataError, build_partitions, ingest_directory, write_partition
from .training import TrainingDivergence

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4

PARTITION_DIRS = ("labelled_train", "labelled_test", "unlabelled",
                  "annotated_subset", "out_of_domain_test")

TRAIN_ROLE_HINTS = {"labelled_train": "labelled", "labelled_test": "test",
                    "unlabelled": "unlabelled", "annotated_subset": "test",
                    "out_of_domain_test": "test"}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ganseg",
                                description="Synthetic benchmark for generative "
                                            "vs discriminative lung segmentation")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="YAML config file")
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY.PATH=VALUE", help="override one config value")
        sp.add_argument("--dry-run", action="store_true",
                        help="print the resolved plan and exit")

    sp = sub.add_parser("generate", help="write synthetic dataset directories")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true",
                    help="overwrite an existing non-empty output directory")

    sp = sub.add_parser("train", help="train one model")
    common(sp)
    sp.add_argument("--model", required=True, choices=E.MODEL_KINDS)
    sp.add_argument("--data", required=True, help="dataset directory from generate")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("eval", help="evaluate checkpoints on test partitions")
    common(sp)
    sp.add_argument("--checkpoints", required=True, action="append",
                    help="training output directory (repeatable)")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--with-oracle", action="store_true",
                    help="include the ground-truth oracle row")

    sp = sub.add_parser("bias-suite", help="run the six-configuration bias suite")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--jobs", type=int, default=1)

    sp = sub.add_parser("downstream", help="masked downstream classification study")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--checkpoints", action="append", default=[],
                    help="optional training output dirs to add as mask sources")

    sp = sub.add_parser("pca-probe", help="principal-component consistency probe")
    common(sp)
    sp.add_argument("--checkpoints", required=True,
                    help="semanticgan training output directory")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("report", help="render a report from a metrics.csv")
    common(sp)
    sp.add_argument("--records", required=True)
    sp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = C.load_config(args.config, args.overrides)
        if args.dry_run:
            plan = {"command": args.command, "config": cfg,
                    "args": {k: v for k, v in vars(args).items()
                             if k not in ("config", "overrides", "dry_run")}}
            print(json.dumps(plan, indent=2, sort_keys=True))
            return EXIT_OK
        handler = {
            "generate": cmd_generate,
            "train": cmd_train,
            "eval": cmd_eval,
            "bias-suite": cmd_bias_suite,
            "downstream": cmd_downstream,
            "pca-probe": cmd_pca_probe,
            "report": cmd_report,
        }[args.command]
        return handler(args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergence as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE


def cmd_generate(args, cfg) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise DataError(f"output directory {out} is not empty; "
                            f"use --force to overwrite")
        shutil.rmtree(out)
    data_cfg = C.to_data_config(cfg)
    partitions = build_partitions(data_cfg)
    manifest = {
        "seed": cfg["seed"],
        "in_domain": asdict(data_cfg.in_domain),
        "out_of_domain": asdict(data_cfg.out_of_domain),
        "generation": asdict(data_cfg.generation),
        "partitions": {},
    }
    for name, part in partitions.items():
        manifest["partitions"][name] = {
            "role": part.role, "domain": part.domain, "n": len(part),
            "seeds": [s.seed for s in part.samples],
        }
        write_partition(part, out / name, generation_info=manifest["partitions"][name])
    with open(out / "generation.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    C.archive_config(cfg, out)
    print(f"wrote {len(partitions)} partitions under {out}")
    return EXIT_OK


def _load_data_dir(path, need=PARTITION_DIRS):
    root = Path(path)
    if not root.exists():
        raise DataError(f"data directory {root} does not exist")
    partitions = {}
    for name in need:
        sub = root / name
        if sub.exists():
            partitions[name] = ingest_directory(sub, role=TRAIN_ROLE_HINTS.get(name))
    if not partitions:
        raise DataError(f"no partition directories found under {root}")
    return partitions


def cmd_train(args, cfg) -> int:
    partitions = _load_data_dir(args.data)
    if "labelled_train" not in partitions:
        raise DataError("training requires a labelled_train partition")
    if args.model in ("semanticgan", "semantican-dl", "semantican-un") \
            and "unlabelled" not in partitions:
        raise DataError(f"{args.model} requires an unlabelled partition")
    model_cfg = C.to_model_config(cfg)
    train_cfg = C.to_train_config(cfg)
    pp_cfg = C.to_preprocess_config(cfg)
    chash = C.config_hash(cfg)

    _, results, components = E.train_model(args.model, partitions, model_cfg,
                                           train_cfg, pp_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    C.archive_config(cfg, out)
    history = []
    for phase, res in results.items():
        for rec in res.history:
            history.append({"phase": phase, **rec})
        for comp, state in components.items():
            save_checkpoint(out / f"{comp}.ckpt", comp, state, step=res.best_step,
                            selection_score=res.best_score, config_hash=chash)
    E.write_history_jsonl(history, out / "history.jsonl")
    with open(out / "model.json", "w") as f:
        json.dump({"model": args.model, "config_hash": chash}, f, sort_keys=True)
    print(f"trained {args.model}; checkpoints in {out}")
    return EXIT_OK


def load_predictor(ckpt_dir, cfg):
    """Rebuild a predictor from a training output directory."""
    root = Path(ckpt_dir)
    meta_path = root / "model.json"
    if not meta_path.exists():
        raise DataError(f"{root} has no model.json (not a training output dir)")
    meta = json.loads(meta_path.read_text())
    kind = meta["model"]
    model_cfg = C.to_model_config(cfg)
    if kind == "semanticgan":
        gan = GanBundle(model_cfg)
        load_checkpoint(root / "G.ckpt").load_into(gan)
        enc = StyleEncoder(model_cfg)
        load_checkpoint(root / "E.ckpt").load_into(enc)
        return kind, E.SemanticGanSegmenter(gan, enc)
    arch = "DL" if kind.endswith("-dl") else "UN"
    net = build_segmenter(arch, channels=model_cfg.segmenter_channels)
    load_checkpoint(root / f"{arch}.ckpt").load_into(net)
    return kind, E.DiscriminativeSegmenter(net)


def cmd_eval(args, cfg) -> int:
    partitions = _load_data_dir(args.data)
    pp_cfg = C.to_preprocess_config(cfg)
    predictors = {}
    for d in args.checkpoints:
        kind, predictor = load_predictor(d, cfg)
        predictors[kind] = predictor
    if args.with_oracle:
        predictors["oracle"] = "oracle"
    records = E.run_generalisation_eval(predictors, partitions, pp_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    C.archive_config(cfg, out)
    M.write_records_csv(records, out / "metrics.csv")
    E.render_report(M.read_records_csv(out / "metrics.csv"), out)
    print(f"evaluated {len(predictors)} model(s); records in {out / 'metrics.csv'}")
    return EXIT_OK


def cmd_bias_suite(args, cfg) -> int:
    pp_cfg = C.to_preprocess_config(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    C.archive_config(cfg, out)
    manifests = [
        E.ExperimentManifest(
            name=bc, bias_config=bc, seeds=list(cfg["experiment"]["seeds"]),
            dataset_config=C.to_data_config(cfg),
            train_config=C.to_train_config(cfg),
            model_config=C.to_model_config(cfg), outputs_dir=str(out))
        for bc in cfg["experiment"]["bias_configs"]
    ]
    with open(out / "manifest.json", "w") as f:
        json.dump({"bias_configs": cfg["experiment"]["bias_configs"],
                   "seeds": cfg["experiment"]["seeds"],
                   "config_hash": C.config_hash(cfg)}, f, indent=2, sort_keys=True)
    result = E.run_bias_suite(manifests, pp_cfg, jobs=args.jobs,
                              progress=lambda bc, s: print(f"  done {bc} seed {s}",
                                                           flush=True))
    M.write_records_csv(result["records"], out / "metrics.csv")
    with open(out / "bias_summary.json", "w") as f:
        json.dump(result["summary"], f, indent=2, sort_keys=True)
    E.render_report(M.read_records_csv(out / "metrics.csv"), out,
                    title="Training-bias suite")
    print(f"bias suite complete; outputs in {out}")
    return EXIT_OK


def cmd_downstream(args, cfg) -> int:
    pp_cfg = C.to_preprocess_config(cfg)
    data_cfg = C.to_data_config(cfg)
    ds = cfg["experiment"]["downstream"]
    data = E.make_downstream_data(data_cfg, pp_cfg, n_train=ds["n_train"],
                                  n_test=ds["n_test"],
                                  p_confound_given_pos=ds["p_confound_given_pos"],
                                  p_confound_given_neg=ds["p_confound_given_neg"])
    providers = {}
    for source in ds["sources"]:
        providers[source] = source
    for d in args.checkpoints:
        kind, predictor = load_predictor(d, cfg)
        providers[kind] = predictor
    results = E.run_downstream_classification(providers, data,
                                              seeds=ds["classifier_seeds"],
                                              steps=ds["classifier_steps"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    C.archive_config(cfg, out)
    with open(out / "auroc.json", "w") as f:
        json.dump(results, f, indent=2, sort_keys=True)
    records = [M.MetricRecord(name, "downstream", f"seed{ix}", "", "auroc", v)
               for name, r in sorted(results.items())
               for ix, v in enumerate(r["per_seed"])]
    M.write_records_csv(records, out / "metrics.csv")
    lines = ["# Downstream masked classification", "",
             "| source | AUROC mean ± std |", "|---|---|"]
    for name, r in sorted(results.items()):
        lines.append(f"| {name} | {r['mean']:.3f} ± {r['std']:.3f} |")
    (out / "report.md").write_text("\n".join(lines) + "\n")
    print(f"downstream study complete; outputs in {out}")
    return EXIT_OK


def cmd_pca_probe(args, cfg) -> int:
    kind, predictor = load_predictor(args.checkpoints, cfg)
    if kind != "semanticgan":
        raise DataError("pca-probe requires a semanticgan checkpoint directory")
    partitions = _load_data_dir(args.data)
    pp_cfg = C.to_preprocess_config(cfg)
    pca_cfg = cfg["experiment"]["pca"]
    pool_names = [n for n in ("unlabelled", "labelled_train") if n in partitions]
    if not pool_names:
        raise DataError("pca-probe needs unlabelled or labelled_train data")
    images = np.concatenate([
        preprocess_partition(partitions[n], pp_cfg)[0] for n in pool_names])
    images = images[:pca_cfg["n_images"]]
    results = E.run_pca_probe(predictor.encoder, predictor.gan, images,
                              n_components=pca_cfg["n_components"])
    out = Path(args.out)
    (out / "figures").mkdir(parents=True, exist_ok=True)
    C.archive_config(cfg, out)
    summary = [{"component": r.component_index, "offsets": r.offsets,
                "area_delta_pct": r.area_delta_pct} for r in results]
    with open(out / "pca_probe.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    _plot_pca_probe(results, out / "figures")
    print(f"pca probe complete; outputs in {out}")
    return EXIT_OK


def _plot_pca_probe(results, fig_dir):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for r in results:
        n = len(r.offsets)
        fig, axes = plt.subplots(3, n, figsize=(2 * n, 6))
        for j in range(n):
            axes[0, j].imshow(r.probe_images[j], cmap="gray", vmin=-1, vmax=1)
            axes[0, j].set_title(f"{r.offsets[j]:+d}σ", fontsize=8)
            axes[1, j].imshow(r.reconstructions[j], cmap="gray", vmin=-1, vmax=1)
            axes[2, j].imshow(r.segmentations[j], cmap="gray", vmin=0, vmax=1)
            axes[2, j].set_xlabel(f"{r.area_delta_pct[j]:+.1f}%", fontsize=8)
            for row in range(3):
                axes[row, j].set_xticks([])
                axes[row, j].set_yticks([])
        axes[0, 0].set_ylabel("probe", fontsize=8)
        axes[1, 0].set_ylabel("reconstruction", fontsize=8)
        axes[2, 0].set_ylabel("segmentation", fontsize=8)
        fig.tight_layout()
        fig.savefig(Path(fig_dir) / f"component_{r.component_index}.png", dpi=110)
        plt.close(fig)


def cmd_report(args, cfg) -> int:
    records = M.read_records_csv(args.records)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    E.render_report(records, out)
    print(f"report rendered in {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
