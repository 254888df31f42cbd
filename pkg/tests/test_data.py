import pytest
import torch

from sparseadv.data import (
    DatasetError,
    export_folder,
    iterate_minibatches,
    load_dataset,
    load_digits,
    load_folder,
    save_png,
)


@pytest.fixture
def folder(tmp_path):
    g = torch.Generator().manual_seed(0)
    for c in range(10):
        for i in range(5):
            d = tmp_path / "train" / f"class{c}"
            d.mkdir(parents=True, exist_ok=True)
            save_png(torch.rand(3, 8, 8, generator=g), d / f"{i}.png")
    return tmp_path


def test_folder_counts(folder):
    h = load_folder(folder, "train")
    assert len(h) == 50 and h.num_classes == 10 and h.resolution == (8, 8)
    assert h.labels.min() == 0 and h.labels.max() == 9
    assert 0 <= h.images.min() and h.images.max() <= 1


def test_folder_ordering_is_deterministic(folder):
    a, b = load_folder(folder, "train"), load_folder(folder, "train")
    assert a.paths == b.paths == sorted(a.paths)
    assert torch.equal(a.images, b.images)


def test_missing_split(folder):
    with pytest.raises(DatasetError, match="split"):
        load_folder(folder, "test")


def test_empty_class_folder(folder):
    (folder / "train" / "zzz").mkdir()
    with pytest.raises(DatasetError, match="zzz"):
        load_folder(folder, "train")


def test_unreadable_file_is_named(folder):
    bad = folder / "train" / "class3" / "broken.png"
    bad.write_bytes(b"not an image")
    with pytest.raises(DatasetError, match="broken.png"):
        load_folder(folder, "train")


def test_png_round_trip_is_lossless(tmp_path):
    h = load_digits("test").subset(range(20))
    loaded = load_folder(export_folder(h, tmp_path), "test")
    # export groups images by class folder; compare per class name
    for label, name in enumerate(loaded.class_names):
        a = h.images[h.labels == h.class_names.index(name)]
        b = loaded.images[loaded.labels == label]
        assert len(b) and torch.equal(a, b)


def test_builtin_digits():
    tr, te = load_dataset("builtin:digits", "train"), load_dataset("builtin:digits", "test")
    assert len(te) == 400 and len(tr) + len(te) == 1797
    assert te.images.shape[1:] == (3, 16, 16)
    assert te.fingerprint() == load_digits("test").fingerprint()
    gray = load_dataset("builtin:digits-gray", "test")
    assert torch.equal(gray.images[:, 0], gray.images[:, 1])
    with pytest.raises(DatasetError):
        load_dataset("builtin:cifar", "test")


def test_minibatches_cover_each_index_once():
    batches = iterate_minibatches(50, 16, seed=1, epoch=2)
    assert sorted(torch.cat(batches).tolist()) == list(range(50))
    assert [len(b) for b in batches] == [16, 16, 16, 2]
    assert all(torch.equal(a, b) for a, b in zip(batches, iterate_minibatches(50, 16, 1, 2)))
