"""Datasets, binary loaders, the synthetic desk-scale dataset and seeded RNG.

Images are float64 arrays of shape ``(n, C, H, W)`` with values in [0, 1];
labels are 1-based (``1..K``).  File formats with 0-based labels are shifted
at the boundary.
"""

from __future__ import annotations

import gzip
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import container
from .errors import ConfigError, FormatError

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


class RngStream:
    """Seeded source of independent, named random streams.

    ``substream(name)`` always restarts the same sequence for the same
    ``(seed, name)``, so the selection stream and the label stream can be
    varied independently in ablations.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def substream(self, name: str) -> np.random.Generator:
        key = zlib.crc32(name.encode("utf-8"))
        seq = np.random.SeedSequence([self.seed & 0xFFFFFFFF, (self.seed >> 32) & 0xFFFFFFFF, key])
        return np.random.default_rng(seq)

    def child(self, name: str) -> "RngStream":
        """A derived stream family, e.g. one per sweep point."""
        return RngStream(int(self.substream(name).integers(0, 2**63 - 1)))

    def __repr__(self):
        return f"RngStream(seed={self.seed})"


@dataclass
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    provenance: dict = field(default_factory=lambda: {"kind": "benign"})

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ConfigError(f"images must be (n, C, H, W), got shape {self.images.shape}")
        n = self.images.shape[0]
        if n == 0:
            raise ConfigError("dataset is empty")
        if self.labels.shape != (n,):
            raise ConfigError(f"{n} images but labels have shape {self.labels.shape}")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.labels.min() < 1 or self.labels.max() > self.num_classes:
            raise ConfigError(f"labels must lie in 1..{self.num_classes}")
        if not np.all(np.isfinite(self.images)) or self.images.min() < 0 or self.images.max() > 1:
            raise ConfigError("image values must lie in [0, 1]")

    def __len__(self):
        return int(self.images.shape[0])

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def class_counts(self) -> np.ndarray:
        """Counts per class, index 0 holds class 1."""
        return np.bincount(self.labels - 1, minlength=self.num_classes)

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes, dict(self.provenance))

    def of_class(self, label: int) -> "LabeledDataset":
        return self.subset(np.flatnonzero(self.labels == label))

    def replace(self, images=None, labels=None, provenance=None) -> "LabeledDataset":
        return LabeledDataset(
            self.images if images is None else images,
            self.labels if labels is None else labels,
            self.num_classes,
            dict(self.provenance) if provenance is None else provenance,
        )

    def digest(self) -> str:
        head = {"num_classes": self.num_classes, "provenance": self.provenance}
        return container.sha256_hex(
            container.canonical_json(head), self.images.tobytes(), self.labels.tobytes()
        )


def save_dataset(data: LabeledDataset, path, config_digest: str | None = None) -> str:
    header = {
        "num_classes": int(data.num_classes),
        "provenance": data.provenance,
        "config_digest": config_digest,
    }
    return container.write(path, "dataset", header, {"images": data.images, "labels": data.labels})


def load_dataset(path) -> LabeledDataset:
    _, header, arrays = container.read(path, expect_kind="dataset")
    return LabeledDataset(arrays["images"], arrays["labels"], header["num_classes"], header["provenance"])


def dataset_header(path) -> dict:
    return container.read(path, expect_kind="dataset", verify=False)[1]


# ---------------------------------------------------------------------------
# IDX (MNIST-style) files
# ---------------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def load_idx(images_path, labels_path, num_classes: int | None = None) -> LabeledDataset:
    """Load a pair of IDX files (uint8 images, uint8 labels).

    Raises:
        FormatError: bad magic, truncated payload or mismatching counts; the
            message names the byte offset where the problem was detected.
    """
    img = _read_bytes(images_path)
    lab = _read_bytes(labels_path)
    if len(img) < 16:
        raise FormatError("truncated image header", offset=len(img), path=str(images_path))
    magic, n, rows, cols = struct.unpack(">IIII", img[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"bad image magic 0x{magic:08x}", offset=0, path=str(images_path))
    if len(lab) < 8:
        raise FormatError("truncated label header", offset=len(lab), path=str(labels_path))
    lmagic, ln = struct.unpack(">II", lab[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise FormatError(f"bad label magic 0x{lmagic:08x}", offset=0, path=str(labels_path))
    if ln != n:
        raise FormatError(f"count mismatch: {n} images vs {ln} labels", offset=4, path=str(labels_path))
    need = 16 + n * rows * cols
    if len(img) < need:
        raise FormatError(f"truncated image payload, expected {need} bytes", offset=len(img), path=str(images_path))
    if len(lab) < 8 + n:
        raise FormatError(f"truncated label payload, expected {8 + n} bytes", offset=len(lab), path=str(labels_path))
    pixels = np.frombuffer(img, dtype=np.uint8, count=n * rows * cols, offset=16)
    labels = np.frombuffer(lab, dtype=np.uint8, count=n, offset=8).astype(np.int64) + 1
    k = num_classes if num_classes is not None else max(10, int(labels.max()))
    images = pixels.reshape(n, 1, rows, cols).astype(np.float64) / 255.0
    return LabeledDataset(images, labels, k, {"kind": "benign", "source": "idx"})


def write_idx(data: LabeledDataset, images_path, labels_path) -> None:
    """Write single-channel images as IDX (pixels rounded to uint8)."""
    n, c, h, w = data.images.shape
    if c != 1:
        raise ConfigError(f"IDX holds single-channel images, got {c} channels")
    pixels = np.rint(data.images * 255.0).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + pixels.tobytes())
    labels = (data.labels - 1).astype(np.uint8)
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n) + labels.tobytes())


# ---------------------------------------------------------------------------
# CIFAR-10 binary batches
# ---------------------------------------------------------------------------


def load_cifar_binary(path) -> LabeledDataset:
    """Read a CIFAR-10 binary batch: 1 label byte + 3072 pixel bytes (R, G, B planes)."""
    raw = _read_bytes(path)
    if len(raw) == 0:
        raise FormatError("empty CIFAR batch", offset=0, path=str(path))
    if len(raw) % CIFAR_RECORD:
        raise FormatError(
            f"size {len(raw)} is not a multiple of the {CIFAR_RECORD}-byte record",
            offset=len(raw) - len(raw) % CIFAR_RECORD,
            path=str(path),
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64) + 1
    if labels.max() > 10:
        bad = int(np.argmax(labels > 10))
        raise FormatError(f"label byte {labels[bad] - 1} out of range", offset=bad * CIFAR_RECORD, path=str(path))
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return LabeledDataset(images, labels, 10, {"kind": "benign", "source": "cifar-bin"})


def write_cifar_binary(data: LabeledDataset, path) -> None:
    if data.image_shape != (3, 32, 32):
        raise ConfigError(f"CIFAR records are 3x32x32, got {data.image_shape}")
    pixels = np.rint(data.images * 255.0).astype(np.uint8).reshape(len(data), -1)
    labels = (data.labels - 1).astype(np.uint8)[:, None]
    Path(path).write_bytes(np.concatenate([labels, pixels], axis=1).tobytes())


# ---------------------------------------------------------------------------
# synthetic dataset
# ---------------------------------------------------------------------------


def synth_templates(num_classes: int, seed: int, image_size: int = 14, channels: int = 1) -> np.ndarray:
    rng = RngStream(seed).substream("synth/templates")
    return rng.uniform(0.2, 0.8, size=(num_classes, channels, image_size, image_size))


def synth_patterns(
    num_classes: int,
    per_class: int,
    seed: int,
    image_size: int = 14,
    channels: int = 1,
    sigma: float = 0.25,
    split: str = "train",
) -> LabeledDataset:
    """K random class templates plus clipped Gaussian pixel noise.

    Templates are drawn from ``U(0.2, 0.8)`` per pixel, so two templates differ
    by roughly ``0.35 * sqrt(C*H*W)`` in L2 while the noise projected on the
    line between them has standard deviation ``sigma``.  The defaults (14x14,
    ``sigma=0.25``) leave a small CNN a few percent short of perfect test
    accuracy; 14 is also the size at which two valid 3x3 convs with 2x2
    pooling tile the image exactly, so corner pixels reach the classifier.
    Train and test splits share templates and use different noise streams.
    """
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")
    if per_class < 1:
        raise ConfigError(f"per_class must be >= 1, got {per_class}")
    if sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    templates = synth_templates(num_classes, seed, image_size, channels)
    rng = RngStream(seed).substream(f"synth/{split}")
    labels = np.repeat(np.arange(1, num_classes + 1), per_class)
    labels = labels[rng.permutation(labels.size)]
    noise = rng.standard_normal((labels.size, channels, image_size, image_size))
    images = np.clip(templates[labels - 1] + sigma * noise, 0.0, 1.0)
    prov = {"kind": "benign", "source": "synth", "seed": int(seed), "split": split, "sigma": float(sigma)}
    return LabeledDataset(images, labels, num_classes, prov)


# ---------------------------------------------------------------------------
# subset selection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitPlan:
    indices: tuple
    n: int
    fraction: float | None = None
    seed: int | None = None

    def __len__(self):
        return len(self.indices)

    def mask(self) -> np.ndarray:
        m = np.zeros(self.n, dtype=bool)
        m[list(self.indices)] = True
        return m


def poison_count(gamma: float, n: int) -> int:
    """``floor(gamma * n)``, robust to binary round-off such as 0.29 * 100."""
    return int(math.floor(gamma * n + 1e-9))


def select_subset(data, gamma_or_indices, rng: np.random.Generator | None = None, seed=None) -> SplitPlan:
    """Pick the subset to be modified.

    Args:
        data: a dataset or its length.
        gamma_or_indices: poisoning rate in (0, 1) or an explicit index list.
        rng: generator used for a random draw (required for a rate).

    Returns:
        SplitPlan with sorted unique indices; for a rate exactly
        ``floor(gamma * n)`` of them.
    """
    n = data if isinstance(data, int) else len(data)
    if isinstance(gamma_or_indices, (Sequence, np.ndarray)) and not isinstance(gamma_or_indices, str):
        idx = np.asarray(gamma_or_indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise ConfigError(f"subset indices must lie in [0, {n})")
        if np.unique(idx).size != idx.size:
            raise ConfigError("subset indices must be unique")
        return SplitPlan(tuple(int(i) for i in np.sort(idx)), n, idx.size / n, seed)
    gamma = float(gamma_or_indices)
    if not 0.0 < gamma < 1.0:
        raise ConfigError(f"poisoning rate must lie in (0, 1), got {gamma}")
    if rng is None:
        raise ConfigError("a random generator is required to draw a subset by rate")
    k = poison_count(gamma, n)
    if k == 0:
        logger.warning("poisoning rate %s on %d samples selects nothing", gamma, n)
    idx = np.sort(rng.choice(n, size=k, replace=False))
    return SplitPlan(tuple(int(i) for i in idx), n, gamma, seed)


def horizontal_flip(images: np.ndarray, rng: np.random.Generator, p: float = 0.5) -> np.ndarray:
    flip = rng.random(images.shape[0]) < p
    out = images.copy()
    out[flip] = out[flip][..., ::-1]
    return out
