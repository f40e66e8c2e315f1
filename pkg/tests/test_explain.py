import logging

import numpy as np
import pytest
import torch
from PIL import Image

from glaucoma_attn.explain import activation_map, confusion_figure, crm_heatmap, overlay, render_confusion, save_heatmap
from glaucoma_attn.model import BackboneSpec, build_model


def test_zero_features_give_zero_map(caplog):
    with caplog.at_level(logging.WARNING):
        m = activation_map(torch.zeros(1, 16, 8, 8), (256, 256))
    assert m.shape == (256, 256) and not m.any()
    assert "constant" in caplog.text


def test_map_range(rng):
    m = activation_map(torch.from_numpy(rng.normal(size=(1, 16, 8, 8))), (256, 256))
    assert m.shape == (256, 256)
    assert m.min() == pytest.approx(0.0) and m.max() == pytest.approx(1.0)


@pytest.mark.parametrize("cell", [(0, 0), (3, 5), (7, 2)])
def test_hot_cell_stays_in_its_region(cell):
    f = torch.zeros(1, 4, 8, 8)
    f[0, :, cell[0], cell[1]] = 1.0
    m = activation_map(f, (256, 256))
    r, c = np.unravel_index(np.argmax(m), m.shape)
    assert 32 * cell[0] <= r < 32 * (cell[0] + 1)
    assert 32 * cell[1] <= c < 32 * (cell[1] + 1)


def test_overlay_is_rgb_uint8(rng):
    out = overlay(rng.random((32, 32)), rng.normal(size=(32, 32, 3)))
    assert out.shape == (32, 32, 3) and out.dtype == np.uint8


def test_crm_heatmap_on_tiny_model(tmp_path):
    model = build_model(BackboneSpec("tiny", pretrained=False))
    image = torch.randn(3, 256, 256, generator=torch.Generator().manual_seed(0))
    h = crm_heatmap(model, image, label=1)
    assert h.values.shape == (256, 256)
    assert 0 <= h.values.min() and h.values.max() <= 1
    assert 0 < h.predicted_prob < 1 and h.source_label == 1
    path = save_heatmap(h, tmp_path / "h.png")
    with Image.open(path) as img:
        assert img.size == (256, 256) and img.mode == "RGB"
    again = save_heatmap(crm_heatmap(model, image, label=1), tmp_path / "h2.png")
    assert path.read_bytes() == again.read_bytes()


def _texts(fig):
    return [t.get_text() for t in fig.axes[0].texts]


def test_confusion_figure_cells():
    fig = confusion_figure([[40, 10], [5, 45]], labels=("N", "G"))
    assert _texts(fig) == ["40", "10", "5", "45"]
    # glaucoma-first ordering puts TP top-left
    fig = confusion_figure([[40, 10], [5, 45]])
    assert _texts(fig) == ["45", "5", "10", "40"]


def test_confusion_figure_empty_row():
    assert _texts(confusion_figure([[0, 0], [3, 7]], labels=("N", "G"))) == ["0", "0", "3", "7"]


def test_render_confusion_png_is_deterministic(tmp_path):
    a = render_confusion([[40, 10], [5, 45]], tmp_path / "a.png", title="fold 0")
    b = render_confusion([[40, 10], [5, 45]], tmp_path / "b.png", title="fold 0")
    with Image.open(a) as img:
        img.verify()
    assert a.read_bytes() == b.read_bytes()
