import numpy as np
import pytest
from PIL import Image

from twostage_anomaly.data import (build_one_class_protocol, load_class_folder_dataset,
                                   load_digits_dataset, load_folder_dataset, preprocess,
                                   read_image, synth_defect_dataset, write_folder_dataset)
from twostage_anomaly.errors import (DatasetNotFoundError, DecodeError, InvalidCountError,
                                     LayoutViolationError, UnknownClassError)


class TestFolderDataset:
    def test_train_split(self, folder_dataset):
        handle = load_folder_dataset(folder_dataset, "train", image_size=16)
        assert len(handle) == 10
        assert all(not it.has_mask and not it.is_anomalous for it in handle)
        paths = [it.path for it in handle]
        assert paths == sorted(paths)

    def test_test_split_masks(self, folder_dataset):
        handle = load_folder_dataset(folder_dataset, "test", image_size=16)
        crack = [it for it in handle if it.label == "crack"]
        assert len(crack) == 3
        assert all(it.has_mask and it.is_anomalous for it in crack)
        for it in crack:
            mask = handle.load_mask(it)
            assert mask.shape == (16, 16)
            assert set(np.unique(mask)) <= {0, 1}
        good = [it for it in handle if it.label == "good"]
        assert len(good) == 2 and not any(it.has_mask for it in good)

    def test_missing_mask_is_layout_violation(self, folder_dataset):
        (folder_dataset / "ground_truth" / "crack" / "001_mask.png").unlink()
        with pytest.raises(LayoutViolationError):
            load_folder_dataset(folder_dataset, "test")

    def test_missing_root(self, tmp_path):
        with pytest.raises(DatasetNotFoundError):
            load_folder_dataset(tmp_path / "nope", "train")

    def test_reload_is_identical(self, folder_dataset):
        a = load_folder_dataset(folder_dataset, "test").manifest_lines()
        b = load_folder_dataset(folder_dataset, "test").manifest_lines()
        assert a == b

    def test_manifest(self, folder_dataset, tmp_path):
        handle = load_folder_dataset(folder_dataset, "test")
        handle.write_manifest(tmp_path / "index.txt")
        lines = (tmp_path / "index.txt").read_text().splitlines()
        assert len(lines) == 5
        path, label, mask = lines[0].split("\t")
        assert label == "crack" and mask.endswith("_mask.png")

    def test_antialiased_mask_binarized(self, folder_dataset):
        mask = np.zeros((20, 20), np.uint8)
        mask[:, :10] = 200
        mask[:, 10:12] = 100
        Image.fromarray(mask).save(folder_dataset / "ground_truth" / "crack" / "000_mask.png")
        handle = load_folder_dataset(folder_dataset, "test", image_size=20)
        m = handle.load_mask(handle.items[0])
        assert m[:, :10].all() and not m[:, 10:].any()


class TestPreprocess:
    def test_large_rgb_to_256(self, rng):
        img = rng.integers(0, 256, (900, 900, 3), dtype=np.uint8)
        out = preprocess(img, 256)
        assert out.shape == (256, 256, 3)
        assert out.min() >= 0 and out.max() <= 1

    def test_grayscale_digit_replicated(self, rng):
        img = rng.integers(0, 256, (28, 28), dtype=np.uint8)
        out = preprocess(img, 64)
        assert out.shape == (64, 64, 3)
        np.testing.assert_array_equal(out[..., 0], out[..., 1])
        np.testing.assert_array_equal(out[..., 0], out[..., 2])

    def test_zero_image(self):
        out = preprocess(np.zeros((30, 40, 3), np.uint8), 16)
        assert not out.any()

    def test_idempotent_at_target(self, rng):
        img = rng.integers(0, 256, (50, 70, 3), dtype=np.uint8)
        once = preprocess(img, 32)
        np.testing.assert_allclose(preprocess(once, 32), once, atol=1e-6)

    def test_decode_error(self, tmp_path):
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"not an image")
        with pytest.raises(DecodeError):
            read_image(bad)

    def test_rejects_nonpositive_size(self):
        with pytest.raises(ValueError):
            preprocess(np.zeros((4, 4)), 0)


class TestOneClass:
    def _grid(self, n_per_class=10):
        return load_digits_dataset(image_size=16, train_fraction=0.5)

    def test_train_holds_only_normal(self):
        train, test = build_one_class_protocol(self._grid(), 0)
        assert len(train) > 0
        assert {it.label for it in train} == {"0"}
        assert all(it.split == "train" for it in train)

    def test_binary_labels_count(self, tmp_path):
        rng = np.random.default_rng(0)
        for split, n in (("train", 3), ("test", 10)):
            for cls in range(10):
                d = tmp_path / "grid" / split / str(cls)
                d.mkdir(parents=True)
                for i in range(n):
                    Image.fromarray(rng.integers(0, 256, (8, 8), dtype=np.uint8)).save(
                        d / f"{i}.png")
        data = load_class_folder_dataset(tmp_path / "grid", image_size=8)
        train, test = build_one_class_protocol(data, 3)
        assert len(test) == 100
        assert sum(not it.is_anomalous for it in test) == 10
        assert sum(it.is_anomalous for it in test) == 90
        assert len(train) == 3

    def test_partition(self):
        train, test = build_one_class_protocol(self._grid(), 5)
        assert not {it.key for it in train} & {it.key for it in test}
        assert not any(it.is_anomalous for it in train)

    def test_unknown_class(self):
        with pytest.raises(UnknownClassError):
            build_one_class_protocol(self._grid(), 12)


class TestSynthetic:
    def test_clean_only_deterministic(self):
        a = synth_defect_dataset(200, 0, 64, 7)
        b = synth_defect_dataset(200, 0, 64, 7)
        assert len(a.select("train")) == 200
        assert len(a.select("test")) == 0
        np.testing.assert_array_equal(a.stack_images(), b.stack_images())

    def test_invalid_count(self):
        with pytest.raises(InvalidCountError):
            synth_defect_dataset(0, 10, 64, 7)

    def test_mask_matches_painted_tally(self):
        ds = synth_defect_dataset(200, 50, 64, 7)
        defects = [it for it in ds if it.is_anomalous]
        assert len(defects) == 50
        for it in defects:
            assert int(it.mask.sum()) == it.painted_pixels

    def test_values_in_range_and_defects_visible(self):
        ds = synth_defect_dataset(5, 5, 32, 1)
        x = ds.stack_images()
        assert x.min() >= 0 and x.max() <= 1
        clean = ds.select("train").stack_images().mean(0)
        for it in ds.select("test"):
            img = ds.load_image(it)
            inside = np.abs(img - clean).mean(-1)[it.mask.astype(bool)].mean()
            outside = np.abs(img - clean).mean(-1)[~it.mask.astype(bool)].mean()
            assert inside > outside

    def test_write_and_reload(self, tmp_path):
        ds = synth_defect_dataset(4, 3, 32, 2, n_test_clean=2)
        write_folder_dataset(ds, tmp_path / "synthetic")
        train = load_folder_dataset(tmp_path / "synthetic", "train", image_size=32)
        test = load_folder_dataset(tmp_path / "synthetic", "test", image_size=32)
        assert len(train) == 4 and len(test) == 5
        reloaded = {it.key.rsplit("/", 1)[-1].split(".")[0]: test.load_mask(it)
                    for it in test if it.is_anomalous}
        for it in ds.select("test"):
            if it.is_anomalous:
                name = it.key.rsplit("/", 1)[-1]
                np.testing.assert_array_equal(reloaded[name], it.mask)
