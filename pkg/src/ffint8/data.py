"""MNIST IDX ingestion, label embedding, and positive/negative synthesis.

Images are kept as raw uint8 and scaled to [0, 1] on access, so the
loader stays bit-faithful (re-serializing the raw payload reproduces
the input file). Label embedding overwrites the first ``label_slots``
pixels with a one-hot vector, which keeps the input width fixed.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagic, CountMismatch, InvalidTensor, TruncatedFile

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
TEST_LABELS = "t10k-labels-idx1-ubyte"


@dataclass
class LabeledImages:
    """Flattened images (uint8) with integer labels in [0, 10)."""

    raw: np.ndarray  # (N, width) uint8
    labels: np.ndarray  # (N,) int64

    def __len__(self) -> int:
        return self.raw.shape[0]

    @property
    def width(self) -> int:
        return self.raw.shape[1]

    def pixels(self, idx: np.ndarray | None = None) -> np.ndarray:
        """Pixel rows scaled to [0, 1] as float64."""
        rows = self.raw if idx is None else self.raw[idx]
        return rows.astype(np.float64) / 255.0


@dataclass
class Dataset:
    train: LabeledImages
    test: LabeledImages


@dataclass
class PolarBatch:
    """Embedded sample batch of a single polarity."""

    vectors: np.ndarray  # (B, width) float64, label slots overwritten
    polarity: str  # "positive" | "negative"
    true_labels: np.ndarray
    embedded_labels: np.ndarray


def _read_file(path: str | Path) -> bytes:
    blob = Path(path).read_bytes()
    if blob[:2] == b"\x1f\x8b":
        blob = gzip.decompress(blob)
    return blob


def _parse_idx(blob: bytes, expected_magic: int, path: str | Path) -> np.ndarray:
    if len(blob) < 4:
        raise TruncatedFile(f"{path}: shorter than an IDX header")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != expected_magic:
        raise BadMagic(f"{path}: magic {magic:#010x}, expected {expected_magic:#010x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise TruncatedFile(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    count = int(np.prod(dims))
    if len(blob) < header + count:
        raise TruncatedFile(f"{path}: payload holds {len(blob) - header} of {count} bytes")
    return np.frombuffer(blob, dtype=np.uint8, offset=header, count=count).reshape(dims)


def load_mnist(images_path: str | Path, labels_path: str | Path) -> LabeledImages:
    """Parse an IDX image/label pair (gzip detected by magic bytes)."""
    images = _parse_idx(_read_file(images_path), IMAGE_MAGIC, images_path)
    labels = _parse_idx(_read_file(labels_path), LABEL_MAGIC, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatch(
            f"{images.shape[0]} images vs {labels.shape[0]} labels"
        )
    if labels.size and labels.max() > 9:
        raise InvalidTensor(f"label {labels.max()} out of range 0..9")
    flat = images.reshape(images.shape[0], -1)
    return LabeledImages(raw=flat, labels=labels.astype(np.int64))


def load_mnist_dir(root: str | Path) -> Dataset:
    """Load the standard four-file layout, accepting .gz variants."""

    def find(name: str) -> Path:
        for cand in (Path(root) / name, Path(root) / (name + ".gz")):
            if cand.exists():
                return cand
        raise FileNotFoundError(f"{name}[.gz] not found under {root}")

    return Dataset(
        train=load_mnist(find(TRAIN_IMAGES), find(TRAIN_LABELS)),
        test=load_mnist(find(TEST_IMAGES), find(TEST_LABELS)),
    )


def write_idx_images(path: str | Path, images: np.ndarray) -> None:
    """Serialize uint8 images (N, rows, cols) as an IDX3 file."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols))
        fh.write(images.tobytes())


def write_idx_labels(path: str | Path, labels: np.ndarray) -> None:
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def embed_batch(vectors: np.ndarray, labels: np.ndarray | int, label_slots: int = 10) -> np.ndarray:
    """Copy vectors and overwrite the first slots with one-hot labels."""
    out = np.array(vectors, dtype=np.float64, copy=True)
    labels = np.broadcast_to(np.asarray(labels), (out.shape[0],))
    if labels.size and (labels.min() < 0 or labels.max() >= label_slots):
        raise InvalidTensor(f"label outside 0..{label_slots - 1}")
    out[:, :label_slots] = 0.0
    out[np.arange(out.shape[0]), labels] = 1.0
    return out


def embed_label(pixels: np.ndarray, label: int, label_slots: int = 10) -> np.ndarray:
    """Single-sample embedding; see embed_batch."""
    return embed_batch(pixels[None, :], int(label), label_slots)[0]


def make_pos_neg(
    pixels: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator,
    label_slots: int = 10,
) -> tuple[PolarBatch, PolarBatch]:
    """One positive and one negative sample per image.

    Negative labels are drawn uniformly from the wrong labels, fresh on
    every call, so the negative set's coverage grows across epochs.
    """
    labels = np.asarray(labels)
    offsets = rng.integers(1, label_slots, size=labels.shape[0])
    neg_labels = (labels + offsets) % label_slots
    pos = PolarBatch(
        vectors=embed_batch(pixels, labels, label_slots),
        polarity="positive",
        true_labels=labels.copy(),
        embedded_labels=labels.copy(),
    )
    neg = PolarBatch(
        vectors=embed_batch(pixels, neg_labels, label_slots),
        polarity="negative",
        true_labels=labels.copy(),
        embedded_labels=neg_labels,
    )
    return pos, neg
