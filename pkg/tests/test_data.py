import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from glaucoma_attn.data import (
    FundusDataset,
    PreprocessConfig,
    augment,
    hflip,
    ingest,
    preprocess,
    read_folds,
    read_manifest,
    sample_rng,
    stratified_kfold,
    write_folds,
    write_manifest,
)
from glaucoma_attn.errors import IngestError, ValidationError


def save_img(path, size=(20, 16), color=(120, 60, 30), mode="RGB"):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.new(mode, size, color if mode == "RGB" else color[0]).save(path)
    return path


def make_tree(root, n_glaucoma, n_normal):
    for i in range(n_glaucoma):
        save_img(root / "glaucoma" / f"g{i}.png")
    for i in range(n_normal):
        save_img(root / "normal" / f"n{i}.jpg")
    return root


def check_partition(split, labels, k):
    labels = np.asarray(labels)
    flat = [i for f in split.folds for i in f]
    assert sorted(flat) == list(range(len(labels)))  # coverage + disjointness
    for cls in np.unique(labels):
        n = int((labels == cls).sum())
        for fold in split.folds:
            count = int((labels[fold] == cls).sum())
            assert abs(count - n / k) < 1, (cls, count, n / k)


# ---------------------------------------------------------------- ingest

def test_ingest_class_folders(tmp_path):
    m = ingest(make_tree(tmp_path, 3, 2))
    assert len(m) == 5
    assert m.class_counts == (2, 3)
    assert m.paths == sorted(m.paths)
    assert sum(m.class_counts) == len(m.entries)


def test_ingest_acrima_filenames(tmp_path):
    for name in ("Im001_g_ACRIMA.jpg", "Im002_g_ACRIMA.jpg", "Im003_ACRIMA.jpg"):
        save_img(tmp_path / name)
    m = ingest(tmp_path, "acrima_filename")
    assert m.class_counts == (1, 2)
    labels = dict((p.split("/")[-1], y) for p, y in m.entries)
    assert labels == {"Im001_g_ACRIMA.jpg": 1, "Im002_g_ACRIMA.jpg": 1, "Im003_ACRIMA.jpg": 0}


def test_ingest_empty_class(tmp_path):
    make_tree(tmp_path, 3, 0)
    with pytest.raises(IngestError, match="empty class"):
        ingest(tmp_path)


def test_ingest_unreadable_image_reported(tmp_path):
    make_tree(tmp_path, 2, 2)
    (tmp_path / "normal" / "broken.png").write_bytes(b"not an image")
    with pytest.raises(IngestError) as info:
        ingest(tmp_path)
    assert any("broken.png" in f for f in info.value.failures)


def test_ingest_missing_root(tmp_path):
    with pytest.raises(FileNotFoundError):
        ingest(tmp_path / "nope")


def test_ingest_is_order_independent(tmp_path, monkeypatch):
    make_tree(tmp_path, 4, 4)
    first = ingest(tmp_path)
    from pathlib import Path

    real_glob = Path.glob

    def shuffled(self, pattern):
        items = list(real_glob(self, pattern))
        random.Random(7).shuffle(items)
        return iter(items)

    monkeypatch.setattr(Path, "glob", shuffled)
    assert ingest(tmp_path).entries == first.entries


def test_manifest_and_fold_files_roundtrip(tmp_path):
    m = ingest(make_tree(tmp_path / "data", 5, 5))
    write_manifest(m, tmp_path / "manifest.csv")
    assert read_manifest(tmp_path / "manifest.csv").entries == m.entries
    text = (tmp_path / "manifest.csv").read_text()
    assert text.startswith("path,label\n") and "\r" not in text

    split = stratified_kfold(m.labels, 5, seed=1)
    write_folds(m, split, tmp_path / "folds.csv")
    m2, split2 = read_folds(tmp_path / "folds.csv")
    assert m2.entries == m.entries
    assert [sorted(f) for f in split2.folds] == [sorted(f) for f in split.folds]


# ---------------------------------------------------------------- folds

def test_rim_one_fold_sizes():
    labels = [0] * 313 + [1] * 172
    split = stratified_kfold(labels, 5, seed=0)
    labels = np.array(labels)
    assert [len(f) for f in split.folds] == [97] * 5
    for f in split.folds:
        assert int((labels[f] == 0).sum()) in (62, 63)
        assert int((labels[f] == 1).sum()) in (34, 35)


def test_exactly_divisible_folds():
    split = stratified_kfold([0] * 5 + [1] * 5, 5, seed=3)
    labels = np.array([0] * 5 + [1] * 5)
    for f in split.folds:
        assert sorted(labels[f].tolist()) == [0, 1]


def test_fold_determinism():
    labels = [0] * 30 + [1] * 20
    assert stratified_kfold(labels, 5, 9).folds == stratified_kfold(labels, 5, 9).folds
    assert stratified_kfold(labels, 5, 9).folds != stratified_kfold(labels, 5, 10).folds


def test_fold_needs_k_members_per_class():
    with pytest.raises(ValidationError):
        stratified_kfold([0] * 10 + [1] * 4, 5)


@settings(max_examples=100, deadline=None)
@given(n0=st.integers(5, 80), n1=st.integers(5, 80), k=st.integers(2, 5), seed=st.integers(0, 10**6))
def test_fold_partition_property(n0, n1, k, seed):
    labels = [0] * n0 + [1] * n1
    random.Random(seed).shuffle(labels)
    check_partition(stratified_kfold(labels, k, seed), labels, k)


def test_train_test_split_is_disjoint():
    split = stratified_kfold([0] * 12 + [1] * 8, 4, 0)
    for f in range(4):
        train, test = split.train_test(f)
        assert not set(train) & set(test)
        assert len(train) + len(test) == 20


# ---------------------------------------------------------------- preprocess

def test_preprocess_constant_gray():
    img = Image.new("RGB", (512, 512), (128, 128, 128))
    out = preprocess(img, PreprocessConfig(normalization="none"))
    assert out.shape == (256, 256, 3)
    np.testing.assert_allclose(out, 128 / 255, atol=1e-6)
    norm = preprocess(img)
    for c, (mu, sd) in enumerate(zip((0.485, 0.456, 0.406), (0.229, 0.224, 0.225))):
        np.testing.assert_allclose(norm[..., c], (128 / 255 - mu) / sd, atol=1e-5)


def test_preprocess_smallest_acrima_size():
    img = Image.fromarray(np.random.default_rng(0).integers(0, 255, (178, 178, 3), dtype=np.uint8))
    assert preprocess(img).shape == (256, 256, 3)


def test_preprocess_random_sizes(rng):
    for _ in range(50):
        w, h = rng.integers(20, 700, 2)
        img = Image.fromarray(rng.integers(0, 255, (h, w, 3), dtype=np.uint8))
        assert preprocess(img).shape == (256, 256, 3)


def test_preprocess_converts_grayscale_and_alpha():
    gray = Image.new("L", (64, 64), 200)
    rgba = Image.new("RGBA", (64, 64), (10, 20, 30, 40))
    assert preprocess(gray).shape == (256, 256, 3)
    out = preprocess(rgba, PreprocessConfig(normalization="none"))
    np.testing.assert_allclose(out[0, 0], np.array([10, 20, 30]) / 255, atol=1e-6)


def test_target_size_fixed():
    with pytest.raises(ValidationError):
        PreprocessConfig(target_size=(224, 224))


# ---------------------------------------------------------------- augment

def test_augment_disabled_is_identity(rng):
    img = rng.normal(size=(256, 256, 3)).astype(np.float32)
    cfg = PreprocessConfig(horizontal_flip=False, flip_prob=0.0, rotation_degrees=0.0, zoom=0.0)
    assert np.array_equal(augment(img, cfg, np.random.default_rng(0)), img)


def test_forced_flip_is_an_involution(rng):
    img = rng.normal(size=(256, 256, 3)).astype(np.float32)
    cfg = PreprocessConfig(flip_prob=1.0, rotation_degrees=0.0, zoom=0.0)
    once = augment(img, cfg, np.random.default_rng(0))
    assert np.array_equal(once, hflip(img))
    assert np.array_equal(augment(once, cfg, np.random.default_rng(1)), img)


def test_augment_deterministic_per_stream(rng):
    img = rng.normal(size=(256, 256, 3)).astype(np.float32)
    cfg = PreprocessConfig()
    a = augment(img, cfg, sample_rng(3, 1, 17))
    b = augment(img, cfg, sample_rng(3, 1, 17))
    c = augment(img, cfg, sample_rng(3, 2, 17))
    assert a.tobytes() == b.tobytes()
    assert a.shape == img.shape
    assert not np.array_equal(a, c)


def test_dataset_labels_and_shapes(tmp_path):
    m = ingest(make_tree(tmp_path, 3, 3))
    ds = FundusDataset(m, PreprocessConfig(), train=True, seed=0)
    for epoch in range(2):
        ds.set_epoch(epoch)
        for i in range(len(ds)):
            x, y = ds[i]
            assert x.shape == (3, 256, 256)
            assert y.item() == m.entries[i][1]
