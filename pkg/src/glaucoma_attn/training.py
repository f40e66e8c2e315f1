"""Per-fold training with Adam/BCE, evaluation and k-fold cross-validation."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from .checkpoint import save_checkpoint
from .config import TrainConfig
from .data import DatasetManifest, FoldSplit, FundusDataset, PreprocessConfig
from .errors import TrainingDivergedError, ValidationError
from .metrics import CrossValReport, MetricsReport, fold_csv, render_table
from .model import BackboneSpec, ClassifierModel, build_model

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


def bce_loss(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy on probabilities clamped to [1e-7, 1 - 1e-7]."""
    if p.shape != y.shape:
        raise ValidationError(f"probabilities {tuple(p.shape)} and labels {tuple(y.shape)} differ in shape")
    p = p.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    y = y.to(p.dtype)
    return -(y * torch.log(p) + (1 - y) * torch.log1p(-p)).mean()


def preprocess_config(cfg: TrainConfig) -> PreprocessConfig:
    return PreprocessConfig(
        normalization=cfg.normalization,
        horizontal_flip=cfg.horizontal_flip,
        flip_prob=0.5 if cfg.augment else 0.0,
        rotation_degrees=cfg.rotation_degrees if cfg.augment else 0.0,
        zoom=cfg.zoom if cfg.augment else 0.0,
    )


def model_from_config(cfg: TrainConfig, variant: str | None = None) -> ClassifierModel:
    spec = BackboneSpec(cfg.backbone, pretrained=cfg.pretrained, trainable=cfg.trainable)
    return build_model(
        spec, cfg.seed, reduction=cfg.cam_reduction, sam_kernel=cfg.sam_kernel, variant=variant or cfg.variant
    )


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Adam:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.Adam(params, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_epsilon)


@dataclass
class TrainResult:
    model: ClassifierModel
    losses: list[float]
    best_epoch: int


def train_fold(
    model: ClassifierModel,
    train_set: Dataset,
    cfg: TrainConfig,
    out_dir: Path | None = None,
) -> TrainResult:
    """Train ``model`` in place for ``cfg.epochs`` epochs.

    Returns the per-epoch mean loss. When ``out_dir`` is given, ``final.ckpt``
    and ``best.ckpt`` (lowest training loss) are written there.
    """
    generator = torch.Generator().manual_seed(cfg.seed)
    loader = DataLoader(train_set, batch_size=cfg.batch_size, shuffle=True, generator=generator)
    optimizer = make_optimizer(model, cfg)
    losses: list[float] = []
    best_loss, best_epoch, best_state = math.inf, -1, None

    for epoch in range(cfg.epochs):
        if hasattr(train_set, "set_epoch"):
            train_set.set_epoch(epoch)
        model.train()
        total, seen = 0.0, 0
        for batch, (x, y) in enumerate(loader):
            loss = bce_loss(model(x), y)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {batch} (lr={cfg.learning_rate})"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(y)
            seen += len(y)
        epoch_loss = total / max(seen, 1)
        losses.append(epoch_loss)
        log.info("epoch %d/%d loss %.6f", epoch + 1, cfg.epochs, epoch_loss)
        if out_dir is not None and epoch_loss < best_loss:
            best_loss, best_epoch = epoch_loss, epoch
            best_state = copy.deepcopy(model.state_dict())

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, out_dir / "final.ckpt", cfg)
        if best_state is not None:
            best = copy.deepcopy(model)
            best.load_state_dict(best_state)
            save_checkpoint(best, out_dir / "best.ckpt", cfg)
    return TrainResult(model, losses, best_epoch)


@torch.no_grad()
def predict(model: ClassifierModel, dataset: Dataset, batch_size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode probabilities and labels over ``dataset`` in order."""
    model.eval()
    probs, labels = [], []
    for x, y in DataLoader(dataset, batch_size=batch_size, shuffle=False):
        probs.append(model(x).double().numpy())
        labels.append(y.numpy())
    return np.concatenate(probs), np.concatenate(labels).astype(np.int64)


def evaluate(model: ClassifierModel, dataset: Dataset, cfg: TrainConfig) -> MetricsReport:
    if len(dataset) == 0:
        raise ValidationError("cannot evaluate on an empty test set")
    probs, labels = predict(model, dataset, cfg.batch_size)
    preds = (probs >= cfg.threshold).astype(np.int64)
    return MetricsReport.from_predictions(labels, preds, cfg.metrics_averaging)


def fold_datasets(manifest: DatasetManifest, split: FoldSplit, fold: int, cfg: TrainConfig):
    train_idx, test_idx = split.train_test(fold)
    train_m, test_m = manifest.subset(train_idx), manifest.subset(test_idx)
    leaked = set(train_m.paths) & set(test_m.paths)
    if leaked:
        raise ValidationError(f"fold {fold}: {len(leaked)} test path(s) also in training set")
    pcfg = preprocess_config(cfg)
    train_set = FundusDataset(train_m, pcfg, train=cfg.augment, seed=cfg.seed, cache=cfg.cache_images)
    test_set = FundusDataset(test_m, pcfg, train=False, cache=cfg.cache_images)
    return train_set, test_set


def set_determinism(cfg: TrainConfig) -> None:
    torch.use_deterministic_algorithms(cfg.deterministic)


def cross_validate(
    manifest: DatasetManifest,
    split: FoldSplit,
    cfg: TrainConfig,
    out_dir: Path | None = None,
    model_factory: Callable[[], ClassifierModel] | None = None,
    label: str | None = None,
) -> CrossValReport:
    """Train one model per fold from identical initial parameters and evaluate on the held-out fold.

    With ``out_dir`` each fold's checkpoints land in ``fold<i>/`` and the
    reports in ``metrics.csv`` / ``report.txt``.
    """
    set_determinism(cfg)
    factory = model_factory or (lambda: model_from_config(cfg))
    reports, losses = [], []
    for fold in range(split.k):
        train_set, test_set = fold_datasets(manifest, split, fold, cfg)
        log.info("fold %d: %d train / %d test", fold, len(train_set), len(test_set))
        fold_dir = Path(out_dir) / f"fold{fold}" if out_dir is not None else None
        result = train_fold(factory(), train_set, cfg, fold_dir)
        reports.append(evaluate(result.model, test_set, cfg))
        losses.append(result.losses)
    report = CrossValReport(reports, losses)
    if out_dir is not None:
        write_reports(report, Path(out_dir), label or cfg.variant)
    return report


def write_reports(report: CrossValReport, out_dir: Path, label: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.csv").write_text(fold_csv(report), encoding="utf-8")
    rows = [(f"fold {i}", r) for i, r in enumerate(report.per_fold)] + [(label, report.aggregate)]
    best = report.best_fold
    text = render_table(rows) + f"best fold: {best} (Acc {report.per_fold[best].acc:.2f})\n"
    (out_dir / "report.txt").write_text(text, encoding="utf-8")
