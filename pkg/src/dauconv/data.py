"""Dataset loading: CIFAR-10 binary batches, IDX files, and a synthetic
two-class task whose classes differ only in the relative offset of an
otherwise identical blob pair, so solving it requires off-center receptive
fields.

Bundles normalize pixels to zero mean and unit variance per channel, with the
statistics taken over the training split only.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np


class FormatError(ValueError):
    """A data file violates its binary format; the message carries the byte
    offset where parsing failed."""


@dataclass
class Dataset:
    images: np.ndarray        # (n, C, H, W) float64
    labels: np.ndarray        # (n,) int64
    split: str

    def __len__(self):
        return self.images.shape[0]


@dataclass
class Bundle:
    train: Dataset
    test: Dataset
    mean: np.ndarray          # per-channel, from the training split
    std: np.ndarray

    @property
    def classes(self):
        return int(max(self.train.labels.max(), self.test.labels.max())) + 1

    @property
    def image_shape(self):
        return self.train.images.shape[1:]


def make_bundle(train_images, train_labels, test_images, test_labels):
    """Normalize both splits with the training split's per-channel statistics."""
    mean = train_images.mean(axis=(0, 2, 3))
    std = train_images.std(axis=(0, 2, 3))
    std = np.maximum(std, 1e-8)
    def norm(im):
        return (im - mean[None, :, None, None]) / std[None, :, None, None]
    return Bundle(Dataset(norm(train_images), train_labels.astype(np.int64), "train"),
                  Dataset(norm(test_images), test_labels.astype(np.int64), "test"),
                  mean, std)


# ---------------------------------------------------------------------------
# CIFAR-10 binary format: records of 3073 bytes, 1 label byte then 3072 pixel
# bytes channel-major R,G,B, each channel 32x32 row-major
# ---------------------------------------------------------------------------

CIFAR_RECORD = 3073
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"


def read_cifar_batch(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD != 0:
        offset = (len(raw) // CIFAR_RECORD) * CIFAR_RECORD
        raise FormatError(
            f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD} "
            f"(truncated record at byte {offset})")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise FormatError(
            f"{path}: label byte {labels[bad[0]]} out of range at byte "
            f"{int(bad[0]) * CIFAR_RECORD}")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return images, labels


def load_cifar10(directory):
    """Bundle of the standard 50000/10000 split (or whatever record counts the
    batch files hold)."""
    trains = []
    for name in CIFAR_TRAIN_FILES:
        path = os.path.join(directory, name)
        if not os.path.exists(path):
            raise FormatError(f"missing CIFAR-10 batch file {path}")
        trains.append(read_cifar_batch(path))
    test_path = os.path.join(directory, CIFAR_TEST_FILE)
    if not os.path.exists(test_path):
        raise FormatError(f"missing CIFAR-10 batch file {test_path}")
    test_images, test_labels = read_cifar_batch(test_path)
    train_images = np.concatenate([t[0] for t in trains])
    train_labels = np.concatenate([t[1] for t in trains])
    return make_bundle(train_images, train_labels, test_images, test_labels)


# ---------------------------------------------------------------------------
# IDX: big-endian, magic 0x00 0x00 <dtype> <ndim>, u32 dims, raw payload
# ---------------------------------------------------------------------------

IDX_UBYTE = 0x08


def read_idx(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated magic at byte {len(raw)}")
    if raw[0] != 0 or raw[1] != 0:
        raise FormatError(f"{path}: bad magic bytes at byte 0")
    if raw[2] != IDX_UBYTE:
        raise FormatError(f"{path}: unsupported dtype 0x{raw[2]:02x} at byte 2")
    ndim = raw[3]
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(f"{path}: truncated dimension header at byte {len(raw)}")
    dims = np.frombuffer(raw, dtype=">u4", count=ndim, offset=4).astype(np.int64)
    expected = int(np.prod(dims))
    if len(raw) != header_end + expected:
        raise FormatError(
            f"{path}: payload has {len(raw) - header_end} bytes, header promises "
            f"{expected} (at byte {header_end})")
    data = np.frombuffer(raw, dtype=np.uint8, offset=header_end)
    return data.reshape(dims)


def load_idx(images_path, labels_path, split="train"):
    """One split from an IDX image/label file pair; pixels scaled to [0, 1],
    not yet normalized (bundle assembly normalizes with train statistics)."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise FormatError(f"{images_path}: expected 3-D image tensor, got {images.ndim}-D")
    if labels.ndim != 1:
        raise FormatError(f"{labels_path}: expected 1-D label vector, got {labels.ndim}-D")
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"{images_path}: {images.shape[0]} images but {labels.shape[0]} labels")
    imgs = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(imgs, labels.astype(np.int64), split)


def load_idx_bundle(train_images_path, train_labels_path,
                    test_images_path, test_labels_path):
    tr = load_idx(train_images_path, train_labels_path, "train")
    te = load_idx(test_images_path, test_labels_path, "test")
    return make_bundle(tr.images, tr.labels, te.images, te.labels)


# ---------------------------------------------------------------------------
# synthetic displacement task
# ---------------------------------------------------------------------------

def _render_blobs(height, width, centers, amps, blob_sigma):
    """Sum of Gaussian bumps; centers (n, blobs, 2), amps (blobs,)."""
    yy = np.arange(height, dtype=np.float64)
    xx = np.arange(width, dtype=np.float64)
    img = np.zeros((centers.shape[0], height, width))
    for b in range(centers.shape[1]):
        dy = yy[None, :, None] - centers[:, b, 0, None, None]
        dx = xx[None, None, :] - centers[:, b, 1, None, None]
        img += amps[b] * np.exp(-(dy * dy + dx * dx) / (2.0 * blob_sigma * blob_sigma))
    return img


def make_synthetic_displacement(n, seed, height=16, width=16, offset=3,
                                blob_sigma=1.1, weak_amp=0.6, noise=0.05,
                                n_test=None):
    """Two classes told apart only by the arrangement of an identical blob
    pair: a strong and a weak blob `offset` pixels apart, the weak one sitting
    right of the strong one for class 1 and left of it for class 0.

    The pair center is placed uniformly at random (symmetrically around the
    image center), so class 0 images are distributed as left-right mirrors of
    class 1 images. Any feature pipeline that is mirror-insensitive, such as
    isotropic center-only filters pooled globally, is stuck near chance; only
    off-center receptive fields can read out which side the weak blob is on.
    """
    if n_test is None:
        n_test = max(64, n // 4)
    rng = np.random.Generator(np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, 9]))
    half = offset / 2.0

    def split(count):
        labels = rng.integers(0, 2, size=count)
        margin_y = 2.0
        margin_x = half + 2.0
        cy = rng.uniform(margin_y, height - margin_y, size=count)
        cx = rng.uniform(margin_x, width - margin_x, size=count)
        side = np.where(labels == 1, 1.0, -1.0)
        strong = np.stack([cy, cx - side * half], axis=1)
        weak = np.stack([cy, cx + side * half], axis=1)
        centers = np.stack([strong, weak], axis=1)
        img = _render_blobs(height, width, centers, (1.0, weak_amp), blob_sigma)
        img += noise * rng.standard_normal(img.shape)
        return img[:, None, :, :], labels

    tr_i, tr_l = split(n)
    te_i, te_l = split(n_test)
    return make_bundle(tr_i, tr_l, te_i, te_l)
