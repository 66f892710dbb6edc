"""Datasets: Gaussian mixtures, IDX image files, and device sharding."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


class IdxFormatError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ValueError("features must be (n, d) with one label per row")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("labels outside [0, class_count)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dims(self) -> int:
        return self.features.shape[1]

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.class_count)


def gen_gaussian_mixture(
    classes: int,
    dims: int,
    samples_per_class: int,
    spread: float,
    seed: int,
    modes_per_class: int = 1,
    center_scale: float = 1.0,
) -> Dataset:
    """Isotropic Gaussian clusters, ``modes_per_class`` of them per class.

    Centres are drawn once from N(0, center_scale^2 I); each sample picks one
    of its class's centres uniformly and adds N(0, spread^2 I) noise. Rows
    come out shuffled.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if modes_per_class < 1:
        raise ValueError("modes_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    centres = rng.normal(0.0, center_scale, size=(classes, modes_per_class, dims))
    labels = np.repeat(np.arange(classes), samples_per_class)
    modes = rng.integers(0, modes_per_class, size=labels.size)
    x = centres[labels, modes] + spread * rng.normal(size=(labels.size, dims))
    order = rng.permutation(labels.size)
    return Dataset(x[order], labels[order], classes)


def train_test_split(ds: Dataset, n_test: int, seed: int) -> tuple[Dataset, Dataset]:
    if not 0 <= n_test <= len(ds):
        raise ValueError("n_test out of range")
    order = np.random.default_rng(seed).permutation(len(ds))
    return ds.subset(np.sort(order[n_test:])), ds.subset(np.sort(order[:n_test]))


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def _read_idx(raw: bytes, magic: int, what: str) -> tuple[tuple[int, ...], bytes]:
    if len(raw) < 4:
        raise IdxTruncatedError(f"{what}: file shorter than its magic number")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IdxFormatError(f"{what}: magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise IdxTruncatedError(f"{what}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    n = int(np.prod(dims))
    body = raw[head:]
    if len(body) < n:
        raise IdxTruncatedError(f"{what}: expected {n} data bytes, found {len(body)}")
    return dims, body[:n]


def load_idx(images_path: str | Path, labels_path: str | Path, class_count: int | None = None) -> Dataset:
    """Read an unsigned-byte IDX image/label pair; pixels scaled to [0, 1]."""
    img_dims, img = _read_idx(Path(images_path).read_bytes(), IDX_IMAGES_MAGIC, "images")
    lab_dims, lab = _read_idx(Path(labels_path).read_bytes(), IDX_LABELS_MAGIC, "labels")
    if img_dims[0] != lab_dims[0]:
        raise IdxCountMismatchError(f"{img_dims[0]} images but {lab_dims[0]} labels")
    n, rows, cols = img_dims
    x = np.frombuffer(img, dtype=np.uint8).reshape(n, rows * cols).astype(np.float64) / 255.0
    y = np.frombuffer(lab, dtype=np.uint8).astype(np.int64)
    if class_count is None:
        class_count = int(y.max()) + 1 if n else 1
    return Dataset(x, y, class_count)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path: str | Path, labels_path: str | Path) -> None:
    """Write uint8 images ``(n, rows, cols)`` and labels ``(n,)`` as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


# ---------------------------------------------------------------------------
# Sharding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PartitionSpec:
    n_shards: int
    alpha: float | None = None  # None -> IID
    seed: int = 0

    def __post_init__(self):
        if self.n_shards < 1:
            raise ValueError("n_shards must be >= 1")
        if self.alpha is not None and not self.alpha > 0:
            raise ValueError("alpha must be positive")


def partition(ds: Dataset, spec: PartitionSpec) -> list[np.ndarray]:
    """Disjoint, exhaustive, non-empty index shards (sorted within each)."""
    n, N = len(ds), spec.n_shards
    if N > n:
        raise ValueError(f"{N} shards requested for {n} samples")
    rng = np.random.default_rng(spec.seed)
    if spec.alpha is None:
        shards = [list(s) for s in np.array_split(rng.permutation(n), N)]
    else:
        shards = [[] for _ in range(N)]
        for c in range(ds.class_count):
            idx = rng.permutation(np.flatnonzero(ds.labels == c))
            p = rng.dirichlet(np.full(N, spec.alpha))
            cuts = (np.cumsum(p)[:-1] * idx.size).astype(int)
            for shard, part in zip(shards, np.split(idx, cuts)):
                shard.extend(part.tolist())
        for i in range(N):
            if not shards[i]:
                donor = max(range(N), key=lambda j: len(shards[j]))
                shards[i].append(shards[donor].pop())
                log.info("shard %d was empty; moved one sample from shard %d", i, donor)
    return [np.sort(np.asarray(s, dtype=np.int64)) for s in shards]
