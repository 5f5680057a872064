import numpy as np
import pytest

from muca.data import (DatasetManifest, SceneSpec, generate, labeled_count, load_batch,
                       read_pnm, render_scene, split_counts, write_pnm)
from muca.errors import DataError


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_same_seed_same_bytes(tmp_path):
    a = generate(SceneSpec(seed=9), 10, tmp_path / "a")
    b = generate(SceneSpec(seed=9), 10, tmp_path / "b")
    assert _tree_bytes(a.root) == _tree_bytes(b.root)


def test_split_sizes():
    assert split_counts(100) == (60, 20, 20)
    assert split_counts(200) == (120, 40, 40)


def test_labeled_count_rule():
    assert labeled_count(0.05, 200) == 10
    assert labeled_count(0.01, 120) == 1
    assert labeled_count(0.001, 50) == 1


def test_labels_in_range(tiny_dataset):
    m = tiny_dataset
    for _, lab in m.pool("train") + m.pool("val"):
        assert read_pnm(m.root / lab).max() < 5


def test_class_presence_floor(tiny_dataset):
    m = tiny_dataset
    labs = np.concatenate([read_pnm(m.root / l).ravel() for _, l in m.pool("train")])
    frac = np.bincount(labs, minlength=5) / labs.size
    assert frac.min() >= 0.01


def test_render_scene_shapes():
    img, lab = render_scene(SceneSpec(), np.random.default_rng(0))
    assert img.shape == (64, 64, 3) and img.dtype == np.uint8
    assert lab.shape == (64, 64) and set(np.unique(lab)) <= set(range(5))


def test_pnm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    rgb = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    gray = rng.integers(0, 256, size=(5, 7), dtype=np.uint8)
    write_pnm(tmp_path / "a.ppm", rgb)
    write_pnm(tmp_path / "b.pgm", gray)
    assert np.array_equal(read_pnm(tmp_path / "a.ppm"), rgb)
    assert np.array_equal(read_pnm(tmp_path / "b.pgm"), gray)


def test_truncated_pnm_is_data_error(tmp_path):
    (tmp_path / "bad.pgm").write_bytes(b"P5\n4 4\n255\n\x00\x01")
    with pytest.raises(DataError):
        read_pnm(tmp_path / "bad.pgm")


def test_manifest_round_trip(tiny_dataset, tmp_path):
    text = tiny_dataset.to_text()
    path = tmp_path / "m.tsv"
    path.write_text(text)
    back = DatasetManifest.read(path)
    assert back.entries == tiny_dataset.entries
    assert back.labeled_ratio == tiny_dataset.labeled_ratio


def test_manifest_bad_header(tmp_path):
    (tmp_path / "m.tsv").write_text("labeled\ta\tb\n")
    with pytest.raises(DataError):
        DatasetManifest.read(tmp_path / "m.tsv")


def test_with_ratio_partitions_train(tiny_dataset):
    m = tiny_dataset.with_ratio(0.5)
    assert len(m.entries["labeled"]) == 6
    assert sorted(m.entries["labeled"] + m.entries["unlabeled"]) == tiny_dataset.pool("train")


def test_unlabeled_batch_has_no_labels(tiny_dataset):
    b = load_batch(tiny_dataset, [0, 1], labeled=False)
    assert b.labels is None and b.images.shape == (2, 3, 64, 64)
    lb = load_batch(tiny_dataset, [0], labeled=True)
    assert lb.labels.shape == (1, 64, 64)
    assert lb.images.min() >= 0 and lb.images.max() <= 1


def test_bad_index_is_data_error(tiny_dataset):
    with pytest.raises(DataError):
        load_batch(tiny_dataset, [999], labeled=True)
