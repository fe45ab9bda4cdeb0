"""MNIST IDX ingestion, normalization, and the train/support/test split.

Images are parsed bit-exactly from the standard IDX files (optionally
gzipped, never downloaded), scaled to [0,1], then normalized with the usual
MNIST constants. The support pools are carved out of the train split so the
query environment never serves an image that training gradients touched.
"""

import gzip
import struct
from dataclasses import dataclass

import numpy as np

NORM_MEAN = 0.1307
NORM_STD = 0.3081

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

NUM_CLASSES = 10


def normalize(raw):
    """uint8 pixels -> float32 images on the normalized scale."""
    return ((np.asarray(raw, dtype=np.float32) / 255.0) - NORM_MEAN) / NORM_STD


def denormalize(images):
    """Invert :func:`normalize` back to uint8 pixel bytes."""
    raw = (np.asarray(images, dtype=np.float64) * NORM_STD + NORM_MEAN) * 255.0
    return np.rint(raw).astype(np.uint8)


@dataclass
class Dataset:
    """Normalized images (n, 28, 28) paired with integer labels (n,)."""

    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    def take(self, indices):
        return Dataset(self.images[indices], self.labels[indices])


@dataclass
class DatasetSplit:
    train: Dataset
    support: list  # per-class arrays (m, 28, 28), index = class
    test: Dataset


def parse_idx(image_bytes, label_bytes):
    """Decode an IDX image/label file pair into a :class:`Dataset`."""
    if len(image_bytes) < 16:
        raise ValueError(f"image file: header truncated at offset {len(image_bytes)} (need 16 bytes)")
    magic, count, rows, cols = struct.unpack(">IIII", image_bytes[:16])
    if magic != IMAGE_MAGIC:
        raise ValueError(f"image file: bad magic 0x{magic:08x} at offset 0 (expected 0x{IMAGE_MAGIC:08x})")
    if rows != 28 or cols != 28:
        raise ValueError(f"image file: expected 28x28 images, got {rows}x{cols} at offsets 8/12")

    if len(label_bytes) < 8:
        raise ValueError(f"label file: header truncated at offset {len(label_bytes)} (need 8 bytes)")
    lmagic, lcount = struct.unpack(">II", label_bytes[:8])
    if lmagic != LABEL_MAGIC:
        raise ValueError(f"label file: bad magic 0x{lmagic:08x} at offset 0 (expected 0x{LABEL_MAGIC:08x})")
    if count != lcount:
        raise ValueError(f"count mismatch: {count} images vs {lcount} labels (offsets 4 of each file)")

    need = count * 28 * 28
    pixels = image_bytes[16:]
    if len(pixels) < need:
        raise ValueError(f"image file: payload truncated, {need} bytes needed from offset 16, got {len(pixels)}")
    if len(label_bytes) - 8 < count:
        raise ValueError(f"label file: payload truncated, {count} bytes needed from offset 8, got {len(label_bytes) - 8}")

    raw = np.frombuffer(pixels[:need], dtype=np.uint8).reshape(count, 28, 28)
    labels = np.frombuffer(label_bytes[8 : 8 + count], dtype=np.uint8).astype(np.int64)
    if len(labels) and (labels.min() < 0 or labels.max() > 9):
        raise ValueError(f"label file: labels outside 0..9 (first bad at offset {8 + int((labels > 9).argmax())})")
    return Dataset(normalize(raw), labels)


def serialize_idx(dataset):
    """Re-encode a dataset as raw IDX (image_bytes, label_bytes)."""
    raw = denormalize(dataset.images)
    n = len(dataset)
    image_bytes = struct.pack(">IIII", IMAGE_MAGIC, n, 28, 28) + raw.tobytes()
    label_bytes = struct.pack(">II", LABEL_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes()
    return image_bytes, label_bytes


def _read_file(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:2] == b"\x1f\x8b":
        return gzip.decompress(blob)
    return blob


def _find(data_dir, stem):
    for suffix in ("", ".gz"):
        candidate = data_dir / f"{stem}{suffix}"
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{stem}[.gz] not found in {data_dir} (offline loader; files must be staged)")


def load_mnist(data_dir):
    """Read the four standard IDX files from data_dir -> (train, test)."""
    from pathlib import Path

    data_dir = Path(data_dir)
    train = parse_idx(
        _read_file(_find(data_dir, "train-images-idx3-ubyte")),
        _read_file(_find(data_dir, "train-labels-idx1-ubyte")),
    )
    test = parse_idx(
        _read_file(_find(data_dir, "t10k-images-idx3-ubyte")),
        _read_file(_find(data_dir, "t10k-labels-idx1-ubyte")),
    )
    return train, test


def make_split(all_train, support_per_class=100, seed=0):
    """Carve per-class support pools out of the train set.

    Returns (remainder: Dataset, pools: list of 10 image arrays). The pools
    take the first support_per_class of each class under a seeded shuffle;
    remaining images keep their original order.
    """
    if support_per_class < 1:
        raise ValueError(f"support_per_class must be >= 1 (every class needs a pool), got {support_per_class}")
    rng = np.random.default_rng(seed)
    support_idx = []
    pools = []
    for c in range(NUM_CLASSES):
        members = np.flatnonzero(all_train.labels == c)
        if len(members) < support_per_class + 1:
            raise ValueError(
                f"class {c} has {len(members)} images; need > support_per_class = {support_per_class}"
            )
        chosen = rng.permutation(members)[:support_per_class]
        support_idx.append(chosen)
        pools.append(all_train.images[np.sort(chosen)])
    support_idx = np.concatenate(support_idx)
    mask = np.ones(len(all_train), dtype=bool)
    mask[support_idx] = False
    return all_train.take(np.flatnonzero(mask)), pools


def subset(train, fraction, seed=0):
    """Stratified fraction of the train set, round-to-nearest per class."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return train
    rng = np.random.default_rng(seed)
    keep = []
    for c in range(NUM_CLASSES):
        members = np.flatnonzero(train.labels == c)
        k = int(np.floor(fraction * len(members) + 0.5))
        if k < 1:
            raise ValueError(f"fraction {fraction} leaves class {c} empty ({len(members)} members)")
        keep.append(rng.permutation(members)[:k])
    return train.take(np.sort(np.concatenate(keep)))
