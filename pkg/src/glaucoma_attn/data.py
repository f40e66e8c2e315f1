"""Dataset manifests, stratified k-fold splits, preprocessing and augmentation."""
from __future__ import annotations

import csv
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from torch.utils.data import Dataset
from torchvision.transforms import InterpolationMode
from torchvision.transforms import functional as TF

from .errors import IngestError, ValidationError

log = logging.getLogger(__name__)

NORMAL, GLAUCOMA = 0, 1
IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png"}
LAYOUTS = ("class_folders", "acrima_filename")
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
TARGET_SIZE = (256, 256)


@dataclass
class DatasetManifest:
    entries: list[tuple[str, int]]
    name: str = "dataset"

    @property
    def class_counts(self) -> tuple[int, int]:
        counts = Counter(label for _, label in self.entries)
        return counts[NORMAL], counts[GLAUCOMA]

    @property
    def paths(self) -> list[str]:
        return [p for p, _ in self.entries]

    @property
    def labels(self) -> np.ndarray:
        return np.array([label for _, label in self.entries], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.entries)

    def subset(self, indices) -> "DatasetManifest":
        return DatasetManifest([self.entries[i] for i in indices], self.name)


@dataclass
class FoldSplit:
    folds: list[list[int]]
    seed: int

    @property
    def k(self) -> int:
        return len(self.folds)

    def fold_of(self) -> dict[int, int]:
        return {i: f for f, idx in enumerate(self.folds) for i in idx}

    def train_test(self, fold: int) -> tuple[list[int], list[int]]:
        test = sorted(self.folds[fold])
        train = sorted(i for f, idx in enumerate(self.folds) if f != fold for i in idx)
        return train, test


@dataclass
class PreprocessConfig:
    target_size: tuple[int, int] = TARGET_SIZE
    # "imagenet" for torchvision backbones, "none" keeps values in [0, 1]
    normalization: str = "imagenet"
    horizontal_flip: bool = True
    flip_prob: float = 0.5
    rotation_degrees: float = 15.0
    zoom: float = 0.10

    def __post_init__(self):
        if tuple(self.target_size) != TARGET_SIZE:
            raise ValidationError(f"target_size is fixed at {TARGET_SIZE}, got {self.target_size}")
        if self.normalization not in ("imagenet", "none"):
            raise ValidationError(f"unknown normalization {self.normalization!r}")


def _check_decodable(path: Path) -> None:
    with Image.open(path) as im:
        im.verify()


def ingest(root, layout: str = "class_folders", name: str | None = None) -> DatasetManifest:
    """Scan an image tree into a manifest sorted by path.

    ``class_folders`` reads ``root/glaucoma/*`` and ``root/normal/*``;
    ``acrima_filename`` labels every image under ``root`` whose file name
    contains ``_g_`` as glaucoma and the rest as normal.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    if layout == "class_folders":
        candidates = [(p, NORMAL) for p in (root / "normal").glob("*")]
        candidates += [(p, GLAUCOMA) for p in (root / "glaucoma").glob("*")]
    elif layout == "acrima_filename":
        candidates = [(p, GLAUCOMA if "_g_" in p.name else NORMAL) for p in root.rglob("*")]
    else:
        raise ValidationError(f"unknown layout {layout!r}; choose from {LAYOUTS}")

    candidates = [(p, y) for p, y in candidates if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES]
    failures = []
    for p, _ in candidates:
        try:
            _check_decodable(p)
        except (UnidentifiedImageError, OSError, SyntaxError) as exc:
            failures.append(f"{p}: {exc}")
    if failures:
        raise IngestError(f"{len(failures)} unreadable image(s) under {root}", failures)

    manifest = DatasetManifest(
        sorted((str(p), y) for p, y in candidates), name or root.name
    )
    normal, glaucoma = manifest.class_counts
    if normal == 0 or glaucoma == 0:
        raise IngestError(f"empty class under {root}: normal={normal}, glaucoma={glaucoma}")
    return manifest


def stratified_kfold(labels: Sequence[int], k: int = 5, seed: int = 0) -> FoldSplit:
    """Stratified k-fold assignment.

    Items are shuffled within each class, laid out class after class, and
    dealt round-robin into the folds. Each class therefore differs from a
    perfect split by at most one item per fold, and so do the fold totals.
    """
    if isinstance(labels, DatasetManifest):
        labels = labels.labels
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    order = []
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        if len(members) < k:
            raise ValidationError(f"class {cls} has {len(members)} members, fewer than k={k}")
        order.extend(rng.permutation(members).tolist())
    folds = [sorted(order[f::k]) for f in range(k)]
    return FoldSplit(folds, seed)


def write_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label"])
        w.writerows(manifest.entries)


def read_manifest(path, name: str | None = None) -> DatasetManifest:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return DatasetManifest([(r["path"], int(r["label"])) for r in rows], name or Path(path).stem)


def write_folds(manifest: DatasetManifest, split: FoldSplit, path) -> None:
    fold_of = split.fold_of()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label", "fold_index"])
        for i, (p, y) in enumerate(manifest.entries):
            w.writerow([p, y, fold_of[i]])


def read_folds(path) -> tuple[DatasetManifest, FoldSplit]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["path", "label", "fold_index"]:
            raise ValidationError(f"{path}: expected header path,label,fold_index, got {reader.fieldnames}")
        rows = list(reader)
    entries = [(r["path"], int(r["label"])) for r in rows]
    fold_ids = [int(r["fold_index"]) for r in rows]
    k = max(fold_ids) + 1
    folds = [[i for i, f in enumerate(fold_ids) if f == j] for j in range(k)]
    return DatasetManifest(entries, Path(path).stem), FoldSplit(folds, seed=-1)


def to_rgb(image: Image.Image) -> Image.Image:
    if image.mode != "RGB":
        log.info("converting %s image to RGB", image.mode)
        image = image.convert("RGB")
    return image


def preprocess(image: Image.Image, cfg: PreprocessConfig | None = None) -> np.ndarray:
    """Resize to 256x256 (bilinear), scale to [0, 1] and normalise; returns (256, 256, 3) float32."""
    cfg = cfg or PreprocessConfig()
    image = to_rgb(image)
    w, h = cfg.target_size[1], cfg.target_size[0]
    if image.size != (w, h):
        image = image.resize((w, h), Image.BILINEAR)
    arr = np.asarray(image, dtype=np.float32) / 255.0
    if cfg.normalization == "imagenet":
        arr = (arr - np.array(IMAGENET_MEAN, np.float32)) / np.array(IMAGENET_STD, np.float32)
    return arr


def hflip(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[:, ::-1])


def augment(image: np.ndarray, cfg: PreprocessConfig, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip, rotation in +-rotation_degrees and zoom in +-zoom.

    Every draw is taken from ``rng`` whether or not the transform is enabled,
    so enabling one augmentation never shifts the random stream of another.
    """
    flip = rng.random() < cfg.flip_prob
    angle = float(rng.uniform(-1.0, 1.0)) * cfg.rotation_degrees
    scale = 1.0 + float(rng.uniform(-1.0, 1.0)) * cfg.zoom
    out = hflip(image) if cfg.horizontal_flip and flip else image
    if angle != 0.0 or scale != 1.0:
        t = torch.from_numpy(np.ascontiguousarray(out)).permute(2, 0, 1)
        t = TF.affine(
            t, angle=angle, translate=[0, 0], scale=scale, shear=[0.0],
            interpolation=InterpolationMode.BILINEAR,
        )
        out = t.permute(1, 2, 0).contiguous().numpy()
    return out


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


@dataclass
class FundusDataset(Dataset):
    """Torch dataset over manifest entries yielding ``(image CHW float32, label float32)``.

    With ``train=True`` each item is augmented from a stream seeded by
    ``(seed, epoch, index)``; call :meth:`set_epoch` before every epoch.
    """

    manifest: DatasetManifest
    cfg: PreprocessConfig = field(default_factory=PreprocessConfig)
    train: bool = False
    seed: int = 0
    cache: bool = True
    epoch: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.manifest)

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def load(self, index: int) -> np.ndarray:
        if index in self._cache:
            return self._cache[index]
        with Image.open(self.manifest.entries[index][0]) as im:
            arr = preprocess(im, self.cfg)
        if self.cache:
            self._cache[index] = arr
        return arr

    def __getitem__(self, index):
        arr = self.load(index)
        if self.train:
            arr = augment(arr, self.cfg, sample_rng(self.seed, self.epoch, index))
        label = self.manifest.entries[index][1]
        return torch.from_numpy(np.ascontiguousarray(arr)).permute(2, 0, 1).contiguous(), torch.tensor(
            float(label)
        )
