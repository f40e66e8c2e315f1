"""Activation heatmaps of the attention output and confusion-matrix figures."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
import torch.nn.functional as F  # noqa: E402
from PIL import Image  # noqa: E402

from .model import ClassifierModel, probability  # noqa: E402

log = logging.getLogger(__name__)

ALPHA = 0.4
COLORMAP = "viridis"


@dataclass
class Heatmap:
    values: np.ndarray  # (H, W) in [0, 1]
    overlay: np.ndarray  # (H, W, 3) uint8
    predicted_prob: float | None = None
    source_label: int | None = None


def activation_map(features: torch.Tensor, size: tuple[int, int]) -> np.ndarray:
    """Channel mean of |features| for one item, bilinearly upsampled and min-max normalised.

    A constant map has no meaningful normalisation and yields zeros.
    """
    if features.dim() == 3:
        features = features.unsqueeze(0)
    m = features.detach().abs().mean(dim=1, keepdim=True).double()
    m = F.interpolate(m, size=size, mode="bilinear", align_corners=False)[0, 0].numpy()
    lo, hi = float(m.min()), float(m.max())
    if not hi > lo:
        log.warning("constant activation map; heatmap set to zeros")
        return np.zeros(size)
    return (m - lo) / (hi - lo)


def _display_image(image: np.ndarray) -> np.ndarray:
    lo, hi = float(image.min()), float(image.max())
    return (image - lo) / (hi - lo) if hi > lo else np.zeros_like(image)


def overlay(values: np.ndarray, image: np.ndarray, alpha: float = ALPHA) -> np.ndarray:
    """Blend the colourised map over an (H, W, 3) image; returns uint8 RGB."""
    color = plt.get_cmap(COLORMAP)(values)[..., :3]
    blend = (1 - alpha) * _display_image(np.asarray(image, dtype=np.float64)) + alpha * color
    return np.round(np.clip(blend, 0, 1) * 255).astype(np.uint8)


@torch.no_grad()
def crm_heatmap(model: ClassifierModel, image: torch.Tensor, label: int | None = None) -> Heatmap:
    """Heatmap of the attention output (F_CRM for the full model) for a preprocessed (3, H, W) image."""
    model.eval()
    batch = image.unsqueeze(0)
    feats = model.attention_features(batch)
    prob = float(probability(model.head(feats.mean(dim=(2, 3))).squeeze(1)).item())
    size = tuple(image.shape[1:])
    values = activation_map(feats, size)
    return Heatmap(values, overlay(values, image.permute(1, 2, 0).numpy()), prob, label)


def save_heatmap(heatmap: Heatmap, path) -> Path:
    path = Path(path)
    Image.fromarray(heatmap.overlay).save(path, format="PNG")
    return path


def confusion_figure(confusion, labels=("G", "N"), title: str | None = None):
    """Annotated confusion-matrix figure.

    ``confusion`` uses the ``[[TN, FP], [FN, TP]]`` layout; rows are true and
    columns predicted classes, shown in the order of ``labels`` where "G"
    (glaucoma) is class 1 and "N" (normal) is class 0.
    """
    cm = np.asarray(getattr(confusion, "confusion", confusion), dtype=np.int64)
    order = [1 if lab.upper().startswith("G") else 0 for lab in labels]
    shown = cm[np.ix_(order, order)]
    fig, ax = plt.subplots(figsize=(3.2, 3.0), dpi=100)
    ax.imshow(shown, cmap="Blues", vmin=0, vmax=max(int(shown.max()), 1))
    for i in range(2):
        for j in range(2):
            dark = shown[i, j] > shown.max() / 2
            ax.text(j, i, str(shown[i, j]), ha="center", va="center", color="white" if dark else "black")
    ax.set_xticks([0, 1], labels)
    ax.set_yticks([0, 1], labels)
    ax.set_xlabel("Predicted")
    ax.set_ylabel("True")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return fig


def render_confusion(confusion, path, labels=("G", "N"), title: str | None = None) -> Path:
    fig = confusion_figure(confusion, labels, title)
    path = Path(path)
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path
