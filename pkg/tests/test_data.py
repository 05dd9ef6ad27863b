import csv

import numpy as np
import pytest
from PIL import Image

from magnet.data import load_dataset, save_dataset, split, synthetic_dataset
from magnet.errors import ConfigError, DataError, FormatError


@pytest.fixture(scope="module")
def small():
    return synthetic_dataset(30, 32, 32, seed=5)


def test_synthetic_is_deterministic(small):
    again = synthetic_dataset(30, 32, 32, seed=5)
    for a, b in zip(small, again):
        assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask) and a.label == b.label


def test_synthetic_seed_matters(small):
    other = synthetic_dataset(30, 32, 32, seed=6)
    assert not np.array_equal(small.images(), other.images())


def test_synthetic_masks_and_balance(small):
    assert sorted(np.bincount(small.labels()).tolist()) == [10, 10, 10]
    for s in small:
        assert s.mask.any() and set(np.unique(s.mask)) <= {0, 1}
        assert s.image.shape == (32, 32, 1) and 0 <= s.image.min() and s.image.max() <= 1


@pytest.mark.parametrize("n", [10, 11, 31, 100])
def test_balance_within_one(n):
    counts = np.bincount(synthetic_dataset(n, 16, 16, seed=n).labels(), minlength=3)
    assert np.all(np.abs(counts - n / 3) <= 1)


def test_shape_intensity_marks_the_mask(small):
    for s in small:
        inside, outside = s.image[s.mask == 1], s.image[s.mask == 0]
        assert inside.min() >= 0.5 and outside.max() <= 0.2


def test_synthetic_too_small():
    with pytest.raises(ConfigError):
        synthetic_dataset(9, 32, 32)


class TestSplit:
    def test_counts(self, small):
        train, val = split(small.subset(range(10)), 0.8, seed=0)
        assert (len(train), len(val)) == (8, 2)

    def test_published_split_size(self):
        n = 3064
        n_train = int(round(0.8 * n))
        assert (n_train, n - n_train) == (2451, 613)

    def test_partition_and_determinism(self, small):
        a_train, a_val = split(small, 0.8, seed=3)
        b_train, b_val = split(small, 0.8, seed=3)
        assert a_train.indices == b_train.indices and a_val.indices == b_val.indices
        assert sorted(a_train.indices + a_val.indices) == list(range(len(small)))

    def test_bad_ratio(self, small):
        with pytest.raises(ConfigError):
            split(small, 1.0)


class TestDirectoryFormat:
    def test_round_trip(self, small, tmp_path):
        save_dataset(small, tmp_path)
        loaded = load_dataset(tmp_path)
        assert len(loaded) == 30
        by_name = {s.name: s for s in loaded}
        for s in small:
            got = by_name[s.name]
            assert got.label == s.label
            assert np.array_equal(got.mask, s.mask)
            assert np.max(np.abs(got.image - s.image)) <= 0.5 / 255 + 1e-12

    def test_labels_csv(self, small, tmp_path):
        save_dataset(small, tmp_path)
        rows = list(csv.reader(open(tmp_path / "labels.csv")))
        assert rows[0] == ["filename", "label"] and len(rows) == 31

    def test_mask_threshold(self, tmp_path):
        self._write(tmp_path, "a.png", np.full((4, 4), 50), np.array([[200, 100, 128, 127]] * 4), "glioma")
        s = load_dataset(tmp_path)[0]
        assert s.mask[0, :, 0].tolist() == [1, 0, 1, 0] and s.label == 1
        assert s.image.max() == pytest.approx(50 / 255)

    def test_empty_directory(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path)

    def test_missing_mask_is_named(self, tmp_path):
        self._write(tmp_path, "a.png", np.zeros((4, 4)), np.zeros((4, 4)), "glioma")
        (tmp_path / "masks" / "a.png").unlink()
        with pytest.raises(DataError, match="a.png"):
            load_dataset(tmp_path)

    def test_missing_label_row_is_named(self, tmp_path):
        self._write(tmp_path, "a.png", np.zeros((4, 4)), np.zeros((4, 4)), "glioma")
        Image.fromarray(np.zeros((4, 4), np.uint8), "L").save(tmp_path / "images" / "b.png")
        Image.fromarray(np.zeros((4, 4), np.uint8), "L").save(tmp_path / "masks" / "b.png")
        with pytest.raises(DataError, match="b.png"):
            load_dataset(tmp_path)

    def test_rgb_rejected(self, tmp_path):
        self._write(tmp_path, "a.png", np.zeros((4, 4)), np.zeros((4, 4)), "pituitary")
        Image.fromarray(np.zeros((4, 4, 3), np.uint8), "RGB").save(tmp_path / "images" / "a.png")
        with pytest.raises(FormatError):
            load_dataset(tmp_path)

    def test_unknown_label(self, tmp_path):
        self._write(tmp_path, "a.png", np.zeros((4, 4)), np.zeros((4, 4)), "astrocytoma")
        with pytest.raises(DataError, match="astrocytoma"):
            load_dataset(tmp_path)

    @staticmethod
    def _write(root, name, image, mask, label):
        (root / "images").mkdir(exist_ok=True)
        (root / "masks").mkdir(exist_ok=True)
        Image.fromarray(np.asarray(image, np.uint8), "L").save(root / "images" / name)
        Image.fromarray(np.asarray(mask, np.uint8), "L").save(root / "masks" / name)
        with open(root / "labels.csv", "w") as fh:
            fh.write(f"filename,label\n{name},{label}\n")
