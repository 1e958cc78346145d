import struct

import numpy as np
import pytest

from dauconv import data


def write_cifar_batch(path, n, rng):
    labels = rng.integers(0, 10, n, dtype=np.uint8)
    pixels = rng.integers(0, 256, (n, 3072), dtype=np.uint8)
    with open(path, "wb") as fh:
        for i in range(n):
            fh.write(bytes([labels[i]]))
            fh.write(pixels[i].tobytes())
    return labels, pixels


def write_idx_images(path, arr):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">BBBB", 0, 0, 0x08, arr.ndim))
        for d in arr.shape:
            fh.write(struct.pack(">I", d))
        fh.write(arr.astype(np.uint8).tobytes())


class TestCifar:
    def test_round_trip(self, tmp_path, rng):
        labels, pixels = write_cifar_batch(tmp_path / "data_batch_1.bin", 20, rng)
        images, got = data.read_cifar_batch(tmp_path / "data_batch_1.bin")
        assert images.shape == (20, 3, 32, 32)
        np.testing.assert_array_equal(got, labels)
        # channel-major R,G,B then row-major 32x32
        np.testing.assert_allclose(images[0, 1, 0, 5], pixels[0, 1024 + 5] / 255.0)

    def test_full_bundle_normalized(self, tmp_path, rng):
        for name in data.CIFAR_TRAIN_FILES:
            write_cifar_batch(tmp_path / name, 10, rng)
        write_cifar_batch(tmp_path / data.CIFAR_TEST_FILE, 10, rng)
        bundle = data.load_cifar10(str(tmp_path))
        assert len(bundle.train) == 50 and len(bundle.test) == 10
        assert np.abs(bundle.train.images.mean(axis=(0, 2, 3))).max() < 1e-10
        assert np.abs(bundle.train.images.std(axis=(0, 2, 3)) - 1.0).max() < 1e-10

    def test_truncated_record_reports_offset(self, tmp_path, rng):
        write_cifar_batch(tmp_path / "data_batch_1.bin", 3, rng)
        raw = (tmp_path / "data_batch_1.bin").read_bytes()
        (tmp_path / "data_batch_1.bin").write_bytes(raw[:-10])
        with pytest.raises(data.FormatError, match="byte 6146"):
            data.read_cifar_batch(tmp_path / "data_batch_1.bin")

    def test_bad_label_rejected(self, tmp_path):
        rec = bytes([11]) + bytes(3072)
        (tmp_path / "data_batch_1.bin").write_bytes(rec)
        with pytest.raises(data.FormatError, match="label"):
            data.read_cifar_batch(tmp_path / "data_batch_1.bin")

    def test_missing_file(self, tmp_path):
        with pytest.raises(data.FormatError, match="missing"):
            data.load_cifar10(str(tmp_path))


class TestIdx:
    def test_round_trip(self, tmp_path, rng):
        imgs = rng.integers(0, 256, (6, 5, 4), dtype=np.uint8)
        lbls = rng.integers(0, 3, (6,), dtype=np.uint8)
        write_idx_images(tmp_path / "im.idx", imgs)
        write_idx_images(tmp_path / "lb.idx", lbls)
        ds = data.load_idx(tmp_path / "im.idx", tmp_path / "lb.idx")
        assert ds.images.shape == (6, 1, 5, 4)
        np.testing.assert_allclose(ds.images[:, 0] * 255.0, imgs)
        np.testing.assert_array_equal(ds.labels, lbls)

    def test_magic_has_dims_count(self, tmp_path, rng):
        imgs = rng.integers(0, 256, (2, 3, 3), dtype=np.uint8)
        write_idx_images(tmp_path / "im.idx", imgs)
        raw = (tmp_path / "im.idx").read_bytes()
        assert raw[:4] == b"\x00\x00\x08\x03"

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad.idx").write_bytes(b"\x01\x00\x08\x01" + bytes(8))
        with pytest.raises(data.FormatError, match="byte 0"):
            data.read_idx(tmp_path / "bad.idx")

    def test_truncated_payload_reports_offset(self, tmp_path, rng):
        imgs = rng.integers(0, 256, (4, 3, 3), dtype=np.uint8)
        write_idx_images(tmp_path / "im.idx", imgs)
        raw = (tmp_path / "im.idx").read_bytes()
        (tmp_path / "im.idx").write_bytes(raw[:-5])
        with pytest.raises(data.FormatError, match="at byte 16"):
            data.read_idx(tmp_path / "im.idx")

    def test_wrong_dtype_byte(self, tmp_path):
        (tmp_path / "f.idx").write_bytes(b"\x00\x00\x0d\x01" + struct.pack(">I", 1) + b"\x00")
        with pytest.raises(data.FormatError, match="dtype"):
            data.read_idx(tmp_path / "f.idx")


class TestSynthetic:
    def test_shapes_and_balance(self):
        bundle = data.make_synthetic_displacement(400, seed=1)
        assert bundle.train.images.shape == (400, 1, 16, 16)
        assert set(np.unique(bundle.train.labels)) == {0, 1}
        frac = bundle.train.labels.mean()
        assert 0.4 < frac < 0.6

    def test_normalized_over_train(self):
        bundle = data.make_synthetic_displacement(300, seed=2)
        assert abs(bundle.train.images.mean()) < 1e-12
        assert abs(bundle.train.images.std() - 1.0) < 1e-12

    def test_deterministic_in_seed(self):
        a = data.make_synthetic_displacement(64, seed=5)
        b = data.make_synthetic_displacement(64, seed=5)
        np.testing.assert_array_equal(a.train.images, b.train.images)
        np.testing.assert_array_equal(a.train.labels, b.train.labels)

    def test_classes_are_mirrors_in_distribution(self):
        # flipping an image left-right turns its class evidence around; the
        # blob-pair arrangement is the only difference between the classes
        bundle = data.make_synthetic_displacement(200, seed=3, noise=0.0)
        imgs = bundle.train.images
        labels = bundle.train.labels
        # a simple oriented detector: weak blob right of strong blob
        col = imgs.mean(axis=2)[:, 0, :]          # column profiles
        peak = col.argmax(axis=1)
        right = np.arange(200)
        side = np.zeros(200)
        for i in range(200):
            p = peak[i]
            lo = col[i, max(p - 4, 0):p].sum()
            hi = col[i, p + 1:p + 5].sum()
            side[i] = hi - lo
        acc = ((side > 0).astype(int) == labels).mean()
        assert acc > 0.9  # the relative arrangement carries the class
