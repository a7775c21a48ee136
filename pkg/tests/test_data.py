import numpy as np
import pytest
from PIL import Image

from reldistill.data import (
    Dataset,
    augment_rotations,
    load_dataset,
    make_synthetic,
    split_categories,
    write_packed,
)
from reldistill.errors import ConfigError, DataError

from oracles import rotate90_ccw_ref


def _write_class_folders(root, n_classes=3, per_class=10, size=8):
    rng = np.random.default_rng(0)
    for c in range(n_classes):
        class_dir = root / f"class{c}"
        class_dir.mkdir(parents=True)
        for i in range(per_class):
            arr = rng.integers(0, 256, size=(size, size), dtype=np.uint8)
            Image.fromarray(arr, mode="L").save(class_dir / f"img{i:02d}.png")


class TestLoadClassFolders:
    def test_counts(self, tmp_path):
        _write_class_folders(tmp_path)
        ds = load_dataset(tmp_path, "class_folders")
        assert len(ds.images) == 30
        assert ds.n_categories == 3
        assert ds.images.shape == (30, 8, 8, 1)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0

    def test_deterministic(self, tmp_path):
        _write_class_folders(tmp_path)
        a = load_dataset(tmp_path, "class_folders")
        b = load_dataset(tmp_path, "class_folders")
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)
        assert a.category_names == b.category_names

    def test_missing_path(self, tmp_path):
        with pytest.raises(DataError, match="does not exist"):
            load_dataset(tmp_path / "nope", "class_folders")

    def test_empty_category(self, tmp_path):
        _write_class_folders(tmp_path, n_classes=2)
        (tmp_path / "empty_class").mkdir()
        with pytest.raises(DataError, match="empty_class"):
            load_dataset(tmp_path, "class_folders")

    def test_unreadable_image(self, tmp_path):
        _write_class_folders(tmp_path, n_classes=2)
        bad = tmp_path / "class0" / "broken.png"
        bad.write_bytes(b"not an image")
        with pytest.raises(DataError, match="broken.png"):
            load_dataset(tmp_path, "class_folders")

    def test_inconsistent_shapes(self, tmp_path):
        _write_class_folders(tmp_path, n_classes=2, size=8)
        odd = np.zeros((9, 9), dtype=np.uint8)
        Image.fromarray(odd, mode="L").save(tmp_path / "class1" / "odd.png")
        with pytest.raises(DataError, match="odd.png"):
            load_dataset(tmp_path, "class_folders")

    def test_unknown_format(self, tmp_path):
        _write_class_folders(tmp_path, n_classes=2)
        with pytest.raises(ConfigError, match="format"):
            load_dataset(tmp_path, "zip")


class TestPackedBinary:
    def test_round_trip(self, tmp_path):
        ds = make_synthetic(3, 4, 8, 0.1, seed=5)
        path = write_packed(ds, tmp_path / "data.bin")
        loaded = load_dataset(path, "packed_binary")
        assert np.array_equal(loaded.images, ds.images)
        assert np.array_equal(loaded.labels, ds.labels)

    def test_header_shapes(self, tmp_path):
        # n=2 4x4x1 images: header + 2*16 floats + 2 labels
        images = np.arange(32, dtype=np.float32).reshape(2, 4, 4, 1) / 32.0
        ds = Dataset(images, np.array([0, 1]), ["a", "b"], {0: "train", 1: "train"})
        path = write_packed(ds, tmp_path / "two.bin")
        assert path.stat().st_size == 16 + 2 * 16 * 4 + 2 * 4
        loaded = load_dataset(path, "packed_binary")
        assert loaded.images.shape == (2, 4, 4, 1)
        assert np.array_equal(loaded.images, images)

    def test_truncated_file(self, tmp_path):
        ds = make_synthetic(2, 3, 8, 0.1, seed=5)
        path = write_packed(ds, tmp_path / "data.bin")
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(DataError, match="bytes"):
            load_dataset(path, "packed_binary")

    def test_min_per_category(self, tmp_path):
        ds = make_synthetic(2, 3, 8, 0.1, seed=5)
        path = write_packed(ds, tmp_path / "data.bin")
        with pytest.raises(DataError, match="need >= 4"):
            load_dataset(path, "packed_binary", min_per_category=4)


class TestMakeSynthetic:
    def test_zero_noise_identical_within_category(self):
        ds = make_synthetic(3, 5, 8, noise_sigma=0.0, seed=1)
        for cat in range(3):
            imgs = ds.images[ds.labels == cat]
            assert np.array_equal(imgs, np.broadcast_to(imgs[0], imgs.shape))

    def test_deterministic(self):
        a = make_synthetic(8, 50, 16, 0.05, seed=7)
        b = make_synthetic(8, 50, 16, 0.05, seed=7)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_inter_exceeds_intra_distance(self):
        ds = make_synthetic(2, 20, 16, 0.05, seed=3)
        a = ds.images[ds.labels == 0].reshape(20, -1)
        b = ds.images[ds.labels == 1].reshape(20, -1)
        intra = np.mean([np.abs(x - y).mean() for x in a for y in a])
        inter = np.mean([np.abs(x - y).mean() for x in a for y in b])
        assert inter > intra

    def test_intra_distance_monotone_in_sigma(self):
        previous = -1.0
        for sigma in (0.0, 0.02, 0.05, 0.1, 0.2):
            ds = make_synthetic(3, 12, 16, sigma, seed=9)
            dists = []
            for cat in range(3):
                imgs = ds.images[ds.labels == cat].reshape(12, -1)
                dists.extend(np.abs(x - y).mean() for x in imgs for y in imgs)
            mean_intra = float(np.mean(dists))
            assert mean_intra >= previous
            previous = mean_intra

    def test_invalid_sizes(self):
        with pytest.raises(ConfigError):
            make_synthetic(1, 5, 8, 0.1, seed=0)
        with pytest.raises(ConfigError):
            make_synthetic(3, 1, 8, 0.1, seed=0)
        with pytest.raises(ConfigError):
            make_synthetic(3, 5, 3, 0.1, seed=0)
        with pytest.raises(ConfigError):
            make_synthetic(3, 5, 8, -0.1, seed=0)

    def test_pixel_range(self):
        ds = make_synthetic(3, 5, 8, noise_sigma=2.0, seed=1)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0


class TestSplitCategories:
    def test_benchmark_ratio(self):
        ds = make_synthetic(100, 2, 4, 0.0, seed=0)
        split = split_categories(ds, 64, 16, 20, seed=1)
        sizes = {s: len(split.categories_in_split(s)) for s in ("train", "val", "test")}
        assert sizes == {"train": 64, "val": 16, "test": 20}

    def test_all_train(self):
        ds = make_synthetic(3, 2, 4, 0.0, seed=0)
        split = split_categories(ds, 3, 0, 0, seed=1)
        assert split.categories_in_split("train") == [0, 1, 2]

    def test_deterministic(self):
        ds = make_synthetic(10, 2, 4, 0.0, seed=0)
        a = split_categories(ds, 5, 2, 3, seed=42)
        b = split_categories(ds, 5, 2, 3, seed=42)
        assert a.split_assignment == b.split_assignment

    def test_disjoint_over_seeds(self):
        ds = make_synthetic(12, 2, 4, 0.0, seed=0)
        for seed in range(20):
            split = split_categories(ds, 5, 3, 4, seed=seed)
            train = set(split.categories_in_split("train"))
            val = set(split.categories_in_split("val"))
            test = set(split.categories_in_split("test"))
            assert not (train & val) and not (train & test) and not (val & test)
            assert train | val | test == set(range(12))

    def test_bad_counts(self):
        ds = make_synthetic(10, 2, 4, 0.0, seed=0)
        with pytest.raises(ConfigError, match="sum"):
            split_categories(ds, 5, 2, 2, seed=0)


class TestAugmentRotations:
    def test_single_image(self):
        images = np.random.default_rng(0).uniform(size=(1, 6, 6, 1)).astype(np.float32)
        batch = augment_rotations(images, np.array([3]))
        assert batch.images.shape == (4, 6, 6, 1)
        assert batch.rotation_labels.tolist() == [0, 1, 2, 3]
        assert batch.category_labels.tolist() == [3, 3, 3, 3]

    def test_rotation_matches_index_oracle(self):
        img = np.zeros((3, 3, 1), dtype=np.float32)
        img[0, 0, 0] = 1.0
        batch = augment_rotations(img[None], np.array([0]))
        assert batch.images[1][2, 0, 0] == 1.0  # (0,0) -> (H-1, 0) under 90 deg ccw
        rng = np.random.default_rng(4)
        arr = rng.uniform(size=(3, 3, 1)).astype(np.float32)
        batch = augment_rotations(arr[None], np.array([0]))
        assert np.array_equal(batch.images[1], rotate90_ccw_ref(arr))

    def test_rotation_label_distribution_uniform(self):
        images = np.zeros((5, 4, 4, 1), dtype=np.float32)
        batch = augment_rotations(images, np.zeros(5, dtype=np.int64))
        counts = np.bincount(batch.rotation_labels, minlength=4)
        assert counts.tolist() == [5, 5, 5, 5]

    def test_four_rotations_identity(self):
        rng = np.random.default_rng(1)
        img = rng.uniform(size=(8, 8, 3)).astype(np.float32)
        out = img
        for _ in range(4):
            out = augment_rotations(out[None], np.array([0])).images[1]
        assert np.array_equal(out, img)

    def test_180_slice_equals_two_90s(self):
        rng = np.random.default_rng(2)
        images = rng.uniform(size=(3, 5, 5, 2)).astype(np.float32)
        batch = augment_rotations(images, np.arange(3))
        once = augment_rotations(images, np.arange(3)).images[3:6]
        twice = augment_rotations(once, np.arange(3)).images[3:6]
        assert np.array_equal(batch.images[6:9], twice)

    def test_non_square_rejected(self):
        with pytest.raises(DataError, match="square"):
            augment_rotations(np.zeros((2, 4, 6, 1), dtype=np.float32), np.zeros(2))


class TestDatasetValidate:
    def test_label_without_split(self):
        images = np.zeros((4, 4, 4, 1), dtype=np.float32)
        ds = Dataset(images, np.array([0, 0, 1, 1]), ["a", "b"], {0: "train"})
        with pytest.raises(DataError, match="split"):
            ds.validate()

    def test_invalid_split_name(self):
        images = np.zeros((2, 4, 4, 1), dtype=np.float32)
        ds = Dataset(images, np.array([0, 0]), ["a"], {0: "holdout"})
        with pytest.raises(DataError, match="holdout"):
            ds.validate()
