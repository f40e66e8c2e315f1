"""Command-line entry point: ``glaucoma-attn {split,train,evaluate,ablate,heatmap}``.

Exit codes: 0 when every requested artifact was written, 2 for usage or
configuration errors, 1 for runtime failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import torch
import torchvision
from PIL import Image, UnidentifiedImageError

from . import __version__
from .checkpoint import checkpoint_config, load_checkpoint
from .config import TrainConfig, dump_config, load_config
from .data import (
    DatasetManifest,
    PreprocessConfig,
    ingest,
    preprocess,
    read_folds,
    stratified_kfold,
    write_folds,
    write_manifest,
)
from .errors import ConfigurationError, PretrainedWeightsError, ValidationError
from .explain import crm_heatmap, render_confusion, save_heatmap
from .metrics import CrossValReport, rows_csv, render_table
from .model import VARIANTS, WEIGHTS_ENV
from .training import cross_validate, evaluate, fold_datasets, model_from_config, set_determinism, write_reports

log = logging.getLogger("glaucoma_attn")

TABLE1_BACKBONES = ("mobilenetv2", "resnet50", "inceptionv3", "densenet121")


class UsageError(Exception):
    """Bad invocation; maps to exit code 2."""


def _prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _provenance(out: Path, command: str, cfg: TrainConfig | None, manifest: DatasetManifest | None, **extra) -> None:
    record = {
        "command": command,
        "versions": {
            "glaucoma_attn": __version__,
            "python": platform.python_version(),
            "torch": torch.__version__,
            "torchvision": torchvision.__version__,
            "numpy": np.__version__,
        },
    }
    if cfg is not None:
        record.update(config=cfg.to_dict(), config_hash=cfg.hash(), seed=cfg.seed)
    if manifest is not None:
        normal, glaucoma = manifest.class_counts
        record["dataset"] = {"name": manifest.name, "size": len(manifest), "normal": normal, "glaucoma": glaucoma}
    record.update(extra)
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_folds(path):
    if not Path(path).is_file():
        raise UsageError(f"fold file {path} not found (create one with `glaucoma-attn split`)")
    return read_folds(path)


def _resolve_config(args) -> TrainConfig:
    if args.config is not None and not Path(args.config).is_file():
        raise UsageError(f"config file {args.config} not found")
    return load_config(args.config, args.set)


def cmd_split(args) -> int:
    if not Path(args.root).is_dir():
        raise UsageError(f"dataset root {args.root} does not exist")
    manifest = ingest(args.root, args.layout, args.name)
    split = stratified_kfold(manifest.labels, args.k, args.seed)
    out = _prepare_out(args.out, args.force)
    write_manifest(manifest, out / "manifest.csv")
    write_folds(manifest, split, out / "folds.csv")
    _provenance(out, "split", None, manifest, seed=args.seed, k=args.k, layout=args.layout)
    log.info("wrote %d entries in %d folds to %s", len(manifest), args.k, out)
    return 0


def _confusions(report: CrossValReport, out: Path, name: str) -> None:
    for i, r in enumerate(report.per_fold):
        render_confusion(r, out / f"{name}_{i}_confusion.png", title=f"{name} fold {i}")


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    manifest, split = _load_folds(args.folds)
    out = _prepare_out(args.out, args.force)
    (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    report = cross_validate(manifest, split, cfg, out, label=cfg.variant)
    _confusions(report, out, cfg.dataset_name)
    _provenance(out, "train", cfg, manifest, folds=str(args.folds), best_fold=report.best_fold)
    print((out / "report.txt").read_text(encoding="utf-8"), end="")
    return 0


def cmd_evaluate(args) -> int:
    manifest, split = _load_folds(args.folds)
    run_dir = Path(args.run_dir)
    ckpts = [run_dir / f"fold{i}" / f"{args.which}.ckpt" for i in range(split.k)]
    missing = [str(p) for p in ckpts if not p.is_file()]
    if missing:
        raise UsageError(f"missing checkpoint(s): {', '.join(missing)}")
    out = _prepare_out(args.out, args.force)
    reports = []
    cfg = None
    for fold, path in enumerate(ckpts):
        cfg = load_config(None, args.set, base=checkpoint_config(path))
        set_determinism(cfg)
        model = load_checkpoint(path)
        _, test_set = fold_datasets(manifest, split, fold, cfg)
        reports.append(evaluate(model, test_set, cfg))
    report = CrossValReport(reports)
    write_reports(report, out, cfg.variant)
    _confusions(report, out, cfg.dataset_name)
    _provenance(out, "evaluate", cfg, manifest, run_dir=str(run_dir), checkpoint=args.which)
    print((out / "report.txt").read_text(encoding="utf-8"), end="")
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    manifest, split = _load_folds(args.folds)
    out = _prepare_out(args.out, args.force)
    rows = []
    for variant in VARIANTS:
        vcfg = cfg.replace(variant=variant)
        log.info("ablation: %s", variant)
        report = cross_validate(manifest, split, vcfg, out / variant, lambda c=vcfg: model_from_config(c))
        rows.append((variant, report.aggregate))
    text = render_table(rows, "Attention configuration")
    if args.backbones:
        brows = []
        for name in TABLE1_BACKBONES:
            bcfg = cfg.replace(backbone=name, variant="baseline")
            log.info("backbone ablation: %s", name)
            report = cross_validate(manifest, split, bcfg, out / f"backbone_{name}")
            brows.append((name, report.aggregate))
        (out / "backbones.csv").write_text(rows_csv(brows), encoding="utf-8")
        text += "\n" + render_table(brows, "Backbone (no attention)")
    (out / "ablation.csv").write_text(rows_csv(rows), encoding="utf-8")
    (out / "ablation.txt").write_text(text, encoding="utf-8")
    _provenance(out, "ablate", cfg, manifest, folds=str(args.folds), backbones=bool(args.backbones))
    print(text, end="")
    return 0


def cmd_heatmap(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint {args.checkpoint} not found")
    cfg = checkpoint_config(args.checkpoint)
    model = load_checkpoint(args.checkpoint)
    pcfg = PreprocessConfig(normalization=cfg.normalization)
    out = _prepare_out(args.out, args.force)
    written = 0
    for path in map(Path, args.images):
        try:
            with Image.open(path) as im:
                arr = preprocess(im, pcfg)
        except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
            log.warning("skipping %s: %s", path, exc)
            continue
        heat = crm_heatmap(model, torch.from_numpy(arr).permute(2, 0, 1).contiguous())
        save_heatmap(heat, out / f"{path.stem}_crm_heatmap.png")
        log.info("%s: p(glaucoma)=%.4f", path.name, heat.predicted_prob)
        written += 1
    _provenance(out, "heatmap", cfg, None, checkpoint=str(args.checkpoint), written=written)
    if written < len(args.images):
        log.error("%d of %d image(s) could not be processed", len(args.images) - written, len(args.images))
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="glaucoma-attn",
        description="Dual-attention fundus classifier: folds, training, ablation, heatmaps.",
        epilog=f"Pretrained backbone weights are read from ${WEIGHTS_ENV}/<backbone>.pth.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    def with_out(p):
        p.add_argument("--out", required=True, help="output directory (created if absent)")
        p.add_argument("--force", action="store_true", help="allow writing into a non-empty output directory")

    def with_config(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable; beats the config file)")

    p = sub.add_parser("split", help="ingest a dataset tree and write a stratified fold file")
    p.add_argument("--root", required=True)
    p.add_argument("--layout", choices=("class_folders", "acrima_filename"), default="class_folders")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", help="dataset name (default: root directory name)")
    with_out(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="k-fold cross-validated training")
    p.add_argument("--folds", required=True)
    with_config(p)
    with_out(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="re-evaluate the per-fold checkpoints of a training run")
    p.add_argument("--folds", required=True)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--which", choices=("final", "best"), default="final")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    with_out(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="cross-validate every attention configuration")
    p.add_argument("--folds", required=True)
    p.add_argument("--backbones", action="store_true",
                   help=f"also compare backbones without attention: {', '.join(TABLE1_BACKBONES)}")
    with_config(p)
    with_out(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("heatmap", help="render attention-output heatmaps for images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("images", nargs="+")
    with_out(p)
    p.set_defaults(func=cmd_heatmap)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError, ValidationError, PretrainedWeightsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("run failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
