"""Dataset ingestion, non-IID partitioning and mini-batch sampling.

Supported sources: idx-ubyte image/label pairs (big-endian magic headers),
header-row CSV with a trailing integer label column, and a seeded
Gaussian-mixture synthetic generator. Features are stored column-major:
one example per column.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MIN_PARTITION_COVERAGE = 0.95


class DataFormatError(ValueError):
    """A data source could not be parsed."""


@dataclass
class Dataset:
    examples: np.ndarray  # (feature_dim, n) float64
    labels: np.ndarray  # (n,) int64
    num_classes: int

    def __post_init__(self) -> None:
        if self.examples.ndim != 2 or self.examples.shape[1] == 0:
            raise DataFormatError(f"examples must be (dim, n) with n > 0, got {self.examples.shape}")
        if self.labels.shape != (self.examples.shape[1],):
            raise DataFormatError(
                f"{self.examples.shape[1]} examples but {self.labels.shape[0]} labels"
            )
        if not np.isfinite(self.examples).all():
            raise DataFormatError("non-finite feature values")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataFormatError(
                f"labels outside [0, {self.num_classes}): "
                f"{int(self.labels.min())}..{int(self.labels.max())}"
            )

    @property
    def size(self) -> int:
        return self.examples.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.examples.shape[0]


@dataclass
class ClientShard:
    """One client's slice of the parent dataset."""

    client_id: int
    indices: np.ndarray
    label_dist: np.ndarray  # empirical class frequencies, sums to 1

    @property
    def size(self) -> int:
        return self.indices.shape[0]


@dataclass
class ClientBatch:
    client_id: int
    examples: np.ndarray  # (feature_dim, n_c)
    labels: np.ndarray
    n_c: int = field(init=False)

    def __post_init__(self) -> None:
        self.n_c = self.examples.shape[1]
        if self.n_c < 1:
            raise ValueError("batch must contain at least one example")


def _read_exact(buf: bytes, offset: int, count: int, what: str) -> bytes:
    if offset + count > len(buf):
        raise DataFormatError(
            f"truncated idx file: needed {count} bytes for {what} at offset {offset}, "
            f"file has {len(buf)}"
        )
    return buf[offset : offset + count]


def load_idx_images(path) -> np.ndarray:
    """Images from an idx-ubyte file as (rows*cols, n) floats in [0, 1]."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, n, rows, cols = struct.unpack(">IIII", _read_exact(buf, 0, 16, "image header"))
    if magic != IDX_IMAGES_MAGIC:
        raise DataFormatError(
            f"bad image magic 0x{magic:08x} at offset 0 (expected 0x{IDX_IMAGES_MAGIC:08x})"
        )
    raw = _read_exact(buf, 16, n * rows * cols, f"{n} images of {rows}x{cols}")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(n, rows * cols)
    return pixels.T.astype(np.float64) / 255.0


def load_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, n = struct.unpack(">II", _read_exact(buf, 0, 8, "label header"))
    if magic != IDX_LABELS_MAGIC:
        raise DataFormatError(
            f"bad label magic 0x{magic:08x} at offset 0 (expected 0x{IDX_LABELS_MAGIC:08x})"
        )
    raw = _read_exact(buf, 8, n, f"{n} labels")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def load_idx_pair(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    examples = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if examples.shape[1] != labels.shape[0]:
        raise DataFormatError(
            f"image count {examples.shape[1]} != label count {labels.shape[0]}"
        )
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    return Dataset(examples, labels, num_classes)


def load_csv(path, num_classes: int | None = None) -> Dataset:
    """CSV with a header row, numeric feature columns, trailing integer label."""
    rows = []
    labels = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.strip():
            raise DataFormatError(f"{path}: empty file")
        width = len(header.split(","))
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.strip().split(",")
            if len(parts) != width:
                raise DataFormatError(f"{path}:{lineno}: expected {width} columns, got {len(parts)}")
            try:
                rows.append([float(v) for v in parts[:-1]])
                labels.append(int(parts[-1]))
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    examples = np.asarray(rows, dtype=np.float64).T
    labels_arr = np.asarray(labels, dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels_arr.max()) + 1
    return Dataset(examples, labels_arr, num_classes)


def make_synthetic(
    classes: int, points: int, dim: int, cluster_std: float, seed: int, split: int = 0
) -> Dataset:
    """Seeded Gaussian-mixture classification set with balanced labels.

    The mixture means depend only on `seed`, so different splits (train=0,
    test=1, ...) of the same seed draw fresh points from one distribution.
    """
    if classes < 2 or points < classes or dim < 1:
        raise DataFormatError(
            f"invalid synthetic spec: classes={classes} points={points} dim={dim}"
        )
    means = np.random.default_rng([seed, 0x5D, 0]).normal(size=(classes, dim))
    rng = np.random.default_rng([seed, 0x5D, 1 + split])
    labels = np.arange(points, dtype=np.int64) % classes
    noise = rng.normal(scale=cluster_std, size=(points, dim))
    examples = (means[labels] + noise).T
    return Dataset(examples, labels, classes)


def load_dataset(source, fmt: str) -> Dataset:
    """Dispatch on format: 'idx-ubyte' (dict of paths), 'csv' (path), 'synthetic-spec' (dict)."""
    if fmt == "idx-ubyte":
        return load_idx_pair(source["images"], source["labels"])
    if fmt == "csv":
        return load_csv(source)
    if fmt == "synthetic-spec":
        return make_synthetic(
            classes=int(source["classes"]),
            points=int(source["points"]),
            dim=int(source["dim"]),
            cluster_std=float(source["cluster_std"]),
            seed=int(source["seed"]),
            split=int(source.get("split", 0)),
        )
    raise DataFormatError(f"unknown dataset format {fmt!r}")


def label_distribution(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("cannot estimate a distribution from an empty shard")
    counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
    return counts / counts.sum()


def partition_noniid(
    ds: Dataset, num_clients: int, classes_per_client: int, seed: int
) -> list[ClientShard]:
    """Sort-by-label sharding: each client draws classes_per_client within-class shards.

    Shards are disjoint; per-class remainders that break equal shard sizes are
    dropped. Raises if the retained examples would fall below 95% coverage or
    if some class cannot fill its shards.
    """
    if classes_per_client < 1 or classes_per_client > ds.num_classes:
        raise ValueError(
            f"classes_per_client={classes_per_client} outside [1, {ds.num_classes}]"
        )
    if num_clients < 1:
        raise ValueError(f"num_clients must be >= 1, got {num_clients}")
    rng = np.random.default_rng([seed, 0x9A])

    total_shards = num_clients * classes_per_client
    class_counts = np.bincount(ds.labels, minlength=ds.num_classes)
    # Largest-remainder allocation of shard counts, biased toward big classes.
    quota = total_shards * class_counts / ds.size
    shards_per_class = np.floor(quota).astype(int)
    remainder = total_shards - int(shards_per_class.sum())
    order = np.lexsort((np.arange(ds.num_classes), -(quota - shards_per_class)))
    for cls in order[:remainder]:
        shards_per_class[cls] += 1

    pool: list[np.ndarray] = []
    for cls in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == cls)
        k = shards_per_class[cls]
        if k == 0:
            continue
        if idx.size < k:
            raise ValueError(
                f"class {cls} has {idx.size} examples but needs {k} non-empty shards"
            )
        idx = rng.permutation(idx)
        size = idx.size // k
        for j in range(k):
            pool.append(idx[j * size : (j + 1) * size])

    retained = sum(len(s) for s in pool)
    if retained < MIN_PARTITION_COVERAGE * ds.size:
        raise ValueError(
            f"partition would retain {retained}/{ds.size} examples "
            f"({retained / ds.size:.1%} < {MIN_PARTITION_COVERAGE:.0%}); "
            "request is infeasible for this dataset"
        )

    deal = rng.permutation(len(pool))
    shards = []
    for cid in range(num_clients):
        picked = deal[cid * classes_per_client : (cid + 1) * classes_per_client]
        indices = np.sort(np.concatenate([pool[j] for j in picked]))
        shards.append(
            ClientShard(
                client_id=cid,
                indices=indices,
                label_dist=label_distribution(ds.labels[indices], ds.num_classes),
            )
        )
    return shards


def partition_dirichlet(
    ds: Dataset, num_clients: int, alpha: float, seed: int
) -> list[ClientShard]:
    """Per-class Dirichlet(alpha) proportions across clients (config-switch alternative)."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    rng = np.random.default_rng([seed, 0x9B])
    per_client: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    for cls in range(ds.num_classes):
        idx = rng.permutation(np.flatnonzero(ds.labels == cls))
        props = rng.dirichlet(np.full(num_clients, alpha))
        cuts = np.floor(np.cumsum(props) * idx.size).astype(int)
        start = 0
        for cid, stop in enumerate(cuts):
            per_client[cid].append(idx[start:stop])
            start = stop
    shards = []
    for cid in range(num_clients):
        indices = np.sort(np.concatenate(per_client[cid])) if per_client[cid] else np.array([], dtype=np.int64)
        if indices.size == 0:
            raise ValueError(f"dirichlet partition left client {cid} empty; try larger alpha")
        shards.append(
            ClientShard(
                client_id=cid,
                indices=indices,
                label_dist=label_distribution(ds.labels[indices], ds.num_classes),
            )
        )
    return shards


def partition_hash(shards: list[ClientShard]) -> str:
    """Stable digest of the exact client index sets."""
    h = hashlib.sha256()
    for shard in shards:
        h.update(struct.pack("<II", shard.client_id, shard.size))
        h.update(np.ascontiguousarray(shard.indices, dtype=np.int64).tobytes())
    return h.hexdigest()


def sample_minibatch(
    ds: Dataset, shard: ClientShard, s: float, rng: np.random.Generator
) -> ClientBatch:
    """Seeded without-replacement batch of size max(1, round(s * shard size))."""
    if not 0.0 < s <= 1.0:
        raise ValueError(f"sampling probability must be in (0, 1], got {s}")
    if shard.size == 0:
        raise ValueError(f"client {shard.client_id} has an empty shard")
    n = max(1, int(round(s * shard.size)))
    picked = shard.indices[rng.permutation(shard.size)[:n]]
    return ClientBatch(
        client_id=shard.client_id,
        examples=ds.examples[:, picked],
        labels=ds.labels[picked],
    )
