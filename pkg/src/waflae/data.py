"""Image sets: IDX ingestion, Non-IID partitioning, anomaly generators.

Images are stored as ``(n, 28, 28)`` float64 arrays with pixels in [0, 1].
Labels are carried along for bookkeeping and evaluation only; training never
reads them.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FormatError, ShapeError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

LEGITIMATE = "mnist"
NOISY = "noisy"
OCCLUDED = "occluded"
FASHION = "fashion"
KUZUSHIJI = "kuzushiji"
BLOBS = "blobs"


@dataclass
class ImageSet:
    images: np.ndarray
    labels: np.ndarray
    category_tag: str = LEGITIMATE
    legitimate: Optional[bool] = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 3:
            raise ShapeError(f"images must be (n, rows, cols), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ShapeError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.legitimate is None:
            self.legitimate = self.category_tag == LEGITIMATE

    def __len__(self):
        return len(self.labels)

    @property
    def vectors(self) -> np.ndarray:
        """Images flattened to ``(n, rows*cols)``."""
        return self.images.reshape(len(self), int(np.prod(self.images.shape[1:])))

    def subset(self, idx) -> "ImageSet":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, images=self.images[idx], labels=self.labels[idx])

    def with_images(self, images, category_tag=None) -> "ImageSet":
        tag = self.category_tag if category_tag is None else category_tag
        return ImageSet(images, self.labels.copy(), tag)

    @classmethod
    def concat(cls, parts, category_tag=None) -> "ImageSet":
        parts = list(parts)
        tag = category_tag or parts[0].category_tag
        return cls(np.concatenate([p.images for p in parts]),
                   np.concatenate([p.labels for p in parts]), tag)


@dataclass
class DevicePartition:
    device_id: int
    train: ImageSet
    validation: ImageSet
    # number of leading anomaly samples swapped in, per split
    dirty_train: int = field(default=0)
    dirty_validation: int = field(default=0)


# ---------------------------------------------------------------- IDX format

def _read_header(buf: bytes, magic: int, ndims: int, what: str):
    need = 4 + 4 * ndims
    if len(buf) < need:
        raise FormatError(f"{what}: truncated header ({len(buf)} bytes)")
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise FormatError(f"{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(">" + "I" * ndims, buf[4:need])
    return dims, need


def parse_idx(image_bytes: bytes, label_bytes: bytes, category_tag: str = LEGITIMATE) -> ImageSet:
    """Decode an IDX image/label pair; pixels are divided by 255."""
    (n, rows, cols), off = _read_header(image_bytes, IMAGE_MAGIC, 3, "image stream")
    if len(image_bytes) - off != n * rows * cols:
        raise FormatError(
            f"image stream: header declares {n}x{rows}x{cols} pixels, "
            f"payload has {len(image_bytes) - off} bytes")
    (m,), loff = _read_header(label_bytes, LABEL_MAGIC, 1, "label stream")
    if len(label_bytes) - loff != m:
        raise FormatError(
            f"label stream: header declares {m} labels, payload has {len(label_bytes) - loff} bytes")
    if m != n:
        raise FormatError(f"image count {n} does not match label count {m}")
    pixels = np.frombuffer(image_bytes, dtype=np.uint8, offset=off).reshape(n, rows, cols)
    labels = np.frombuffer(label_bytes, dtype=np.uint8, offset=loff)
    return ImageSet(pixels / 255.0, labels.astype(np.int64), category_tag)


def _read_maybe_gz(path) -> bytes:
    path = Path(path)
    data = path.read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def read_idx(image_path, label_path, category_tag: str = LEGITIMATE) -> ImageSet:
    """Load an IDX pair from disk; gzip-compressed files are accepted."""
    return parse_idx(_read_maybe_gz(image_path), _read_maybe_gz(label_path), category_tag)


def encode_idx(data: ImageSet) -> tuple[bytes, bytes]:
    """Inverse of :func:`parse_idx`, quantizing pixels with round(p*255)."""
    n, rows, cols = data.images.shape
    pix = np.clip(np.rint(data.images * 255.0), 0, 255).astype(np.uint8)
    img = struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols) + pix.tobytes()
    lab = struct.pack(">II", LABEL_MAGIC, n) + data.labels.astype(np.uint8).tobytes()
    return img, lab


def write_idx(data: ImageSet, image_path, label_path) -> None:
    img, lab = encode_idx(data)
    for path, payload in ((image_path, img), (label_path, lab)):
        path = Path(path)
        if path.suffix == ".gz":
            # mtime=0 keeps the output byte-identical across runs
            payload = gzip.compress(payload, mtime=0)
        path.write_bytes(payload)


# ------------------------------------------------------------ partitioning

def partition_non_iid(data: ImageSet, num_devices: int = 10, p: float = 0.9995,
                      seed: int = 0) -> list[ImageSet]:
    """Send each label-n sample to device n with probability ``p``, otherwise
    to one of the remaining devices uniformly at random."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    if num_devices < 2:
        raise ValueError("need at least two devices")
    if len(data) and (data.labels.min() < 0 or data.labels.max() >= num_devices):
        raise ValueError("labels must index devices (0 <= label < num_devices)")
    rng = np.random.default_rng(seed)
    n = len(data)
    stay = rng.random(n) < p
    # offset in 1..num_devices-1 picks uniformly among the other devices
    offset = rng.integers(1, num_devices, size=n)
    owner = np.where(stay, data.labels, (data.labels + offset) % num_devices)
    return [data.subset(np.flatnonzero(owner == d)) for d in range(num_devices)]


def split_train_val(data: ImageSet, ratio=(4, 1), seed: int = 0) -> tuple[ImageSet, ImageSet]:
    """Shuffle, then hold out floor(n * val / (train + val)) samples."""
    if len(data) == 0:
        raise ValueError("cannot split an empty image set")
    n_train_part, n_val_part = ratio
    n_val = (len(data) * n_val_part) // (n_train_part + n_val_part)
    perm = np.random.default_rng(seed).permutation(len(data))
    return data.subset(perm[n_val:]), data.subset(perm[:n_val])


# --------------------------------------------------------------- generators

def _check_28(data: ImageSet):
    if data.images.shape[1:] != (28, 28):
        raise ShapeError(f"expected 28x28 images, got {data.images.shape[1:]}")


def noise_mask(shape=(28, 28), period: int = 10, phase=(0, 0)) -> np.ndarray:
    rows = np.arange(shape[0])
    cols = np.arange(shape[1])
    r_hit = (rows - phase[0]) % period == 0
    c_hit = (cols - phase[1]) % period == 0
    return r_hit[:, None] & c_hit[None, :]


def occlusion_mask(shape=(28, 28), center=(14, 20), radius: float = 2.5) -> np.ndarray:
    """Closed disc; ``center`` is (column, row)."""
    r, c = np.mgrid[0:shape[0], 0:shape[1]]
    cx, cy = center
    return (c - cx) ** 2 + (r - cy) ** 2 <= radius ** 2


def make_noisy(data: ImageSet, period: int = 10, phase=(0, 0)) -> ImageSet:
    """White spots on a period-``period`` grid anchored at ``phase`` (row, col)."""
    _check_28(data)
    images = data.images.copy()
    images[:, noise_mask(images.shape[1:], period, phase)] = 1.0
    return data.with_images(images, NOISY)


def make_occluded(data: ImageSet, center=(14, 20), radius: float = 2.5) -> ImageSet:
    """Black disc at ``center`` (column, row)."""
    _check_28(data)
    images = data.images.copy()
    images[:, occlusion_mask(images.shape[1:], center, radius)] = 0.0
    return data.with_images(images, OCCLUDED)


def make_blobs(count: int, seed: int = 0, shape=(28, 28)) -> ImageSet:
    """Synthetic stand-in for an unseen anomaly category.

    Each image is the clipped sum of 2-5 anisotropic gaussian blobs placed
    anywhere in the frame.  Labels are all zero.
    """
    rng = np.random.default_rng(seed)
    r, c = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    images = np.zeros((count,) + tuple(shape))
    for k in range(count):
        img = images[k]
        for _ in range(rng.integers(2, 6)):
            cy, cx = rng.uniform(2, shape[0] - 2), rng.uniform(2, shape[1] - 2)
            sy, sx = rng.uniform(1.5, 5.0, size=2)
            amp = rng.uniform(0.5, 1.0)
            img += amp * np.exp(-0.5 * (((r - cy) / sy) ** 2 + ((c - cx) / sx) ** 2))
        np.clip(img, 0.0, 1.0, out=img)
    return ImageSet(images, np.zeros(count, dtype=np.int64), BLOBS)


# ----------------------------------------------------------- dirty injection

def inject_dirty(partition: DevicePartition, anomalies: ImageSet, count: int,
                 seed: int = 0, include_validation: bool = True) -> DevicePartition:
    """Replace ``count`` random local samples with random anomaly samples.

    With ``include_validation`` the swaps are spread over train and
    validation in proportion to their sizes; otherwise only train is touched.
    """
    n_train, n_val = len(partition.train), len(partition.validation)
    pool = n_train + n_val if include_validation else n_train
    if count < 0 or count > min(pool, len(anomalies)):
        raise ValueError(
            f"cannot swap {count} samples (local pool {pool}, anomalies {len(anomalies)})")
    if count == 0:
        return partition
    rng = np.random.default_rng(seed)
    victims = rng.choice(pool, size=count, replace=False)
    donors = rng.choice(len(anomalies), size=count, replace=False)
    in_train = victims < n_train

    def swap(split: ImageSet, local_idx, donor_idx):
        images = split.images.copy()
        labels = split.labels.copy()
        images[local_idx] = anomalies.images[donor_idx]
        labels[local_idx] = anomalies.labels[donor_idx]
        return ImageSet(images, labels, split.category_tag)

    train = swap(partition.train, victims[in_train], donors[in_train])
    validation = swap(partition.validation, victims[~in_train] - n_train, donors[~in_train])
    return DevicePartition(partition.device_id, train, validation,
                           partition.dirty_train + int(in_train.sum()),
                           partition.dirty_validation + int((~in_train).sum()))


def make_partitions(data: ImageSet, num_devices: int = 10, p: float = 0.9995,
                    ratio=(4, 1), seed: int = 0) -> list[DevicePartition]:
    """Non-IID scatter followed by a per-device train/validation split."""
    shards = partition_non_iid(data, num_devices, p, seed)
    ss = np.random.SeedSequence(seed)
    out = []
    for d, (shard, child) in enumerate(zip(shards, ss.spawn(num_devices))):
        train, val = split_train_val(shard, ratio, seed=child)
        out.append(DevicePartition(d, train, val))
    return out
