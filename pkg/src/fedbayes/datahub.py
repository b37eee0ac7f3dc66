"""Datasets, non-IID client partitions, corruption knobs and client shards."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numkernel import SeedPath, derive_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _stream(seed: "int | SeedPath", tag: int):
    """Stream for one datahub operation; ``seed`` is a master seed or a full path."""
    if isinstance(seed, SeedPath):
        return derive_rng(seed.child(tag))
    return derive_rng(SeedPath(seed, (tag,)))


class DataFormatError(ValueError):
    """Malformed IDX/CSV input."""


class CapacityError(ValueError):
    """A partition asked for more samples of a class than exist."""


class ShardError(ValueError):
    """Too few samples to cut train/meta/test shards."""


@dataclass(frozen=True, eq=False)
class Dataset:
    """Labeled samples. ``ids`` are stable sample identifiers in the source data."""

    X: np.ndarray
    y: np.ndarray
    n_classes: int
    name: str = "data"
    ids: np.ndarray | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if X.ndim != 2:
            X = X.reshape(len(X), -1)
        if len(X) != len(y):
            raise ValueError(f"{len(X)} feature rows but {len(y)} labels")
        if len(y) and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        ids = np.arange(len(y)) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx, name: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], self.n_classes, name or self.name, self.ids[idx])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.n_classes)

    def class_indices(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.y == c) for c in range(self.n_classes)]

    def same_as(self, other: "Dataset") -> bool:
        return (self.n_classes == other.n_classes and np.array_equal(self.X, other.X)
                and np.array_equal(self.y, other.y) and np.array_equal(self.ids, other.ids))


@dataclass
class Partition:
    assignments: list[np.ndarray]
    scheme: str
    params: dict = field(default_factory=dict)

    @property
    def n_clients(self) -> int:
        return len(self.assignments)

    def sizes(self) -> list[int]:
        return [len(a) for a in self.assignments]

    def client_data(self, ds: Dataset, n: int) -> Dataset:
        return ds.subset(self.assignments[n], name=f"{ds.name}/client{n}")

    def histogram(self, ds: Dataset) -> np.ndarray:
        return np.stack([np.bincount(ds.y[a], minlength=ds.n_classes) for a in self.assignments])

    def manifest(self, ds: Dataset | None = None) -> str:
        """Textual (client_id, sample_index) table; indices are source ids if ``ds`` is given."""
        lines = ["client_id\tsample_index"]
        for n, a in enumerate(self.assignments):
            ids = ds.ids[a] if ds is not None else a
            lines.extend(f"{n}\t{int(i)}" for i in ids)
        return "\n".join(lines) + "\n"


@dataclass(frozen=True, eq=False)
class ClientShards:
    train: Dataset
    meta: Dataset
    test: Dataset


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

def _read_idx_header(raw: bytes, expected_magic: int, what: str) -> tuple[list[int], int]:
    if len(raw) < 4:
        raise DataFormatError(f"{what}: truncated header at byte 0")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataFormatError(f"{what}: bad magic 0x{magic:08X} at byte 0, expected 0x{expected_magic:08X}")
    ndim = expected_magic & 0xFF
    end = 4 + 4 * ndim
    if len(raw) < end:
        raise DataFormatError(f"{what}: truncated dimension header at byte {len(raw)}")
    dims = list(struct.unpack(f">{ndim}I", raw[4:end]))
    return dims, end


def load_idx(images_path, labels_path, n_classes: int | None = None) -> Dataset:
    """Read MNIST-style IDX image/label files; pixels are scaled to [0, 1]."""
    img_raw = Path(images_path).read_bytes()
    lab_raw = Path(labels_path).read_bytes()
    dims, off = _read_idx_header(img_raw, IDX_IMAGES_MAGIC, str(images_path))
    n, rows, cols = dims
    need = off + n * rows * cols
    if len(img_raw) != need:
        raise DataFormatError(f"{images_path}: expected {need} bytes, file ends at byte {len(img_raw)}")
    (n_lab,), loff = _read_idx_header(lab_raw, IDX_LABELS_MAGIC, str(labels_path))
    if n_lab != n:
        raise DataFormatError(f"{labels_path}: label count {n_lab} at byte 4 does not match image count {n}")
    if len(lab_raw) != loff + n:
        raise DataFormatError(f"{labels_path}: expected {loff + n} bytes, file ends at byte {len(lab_raw)}")
    X = np.frombuffer(img_raw, dtype=np.uint8, offset=off).reshape(n, rows * cols) / 255.0
    y = np.frombuffer(lab_raw, dtype=np.uint8, offset=loff).astype(np.int64)
    k = n_classes if n_classes is not None else (int(y.max()) + 1 if n else 1)
    if n and y.max() >= k:
        raise DataFormatError(f"{labels_path}: label {int(y.max())} >= n_classes {k}")
    return Dataset(X, y, k, name=Path(images_path).stem)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images ``(n, rows, cols)`` and labels as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def load_csv(path, n_classes: int) -> Dataset:
    """Rows are ``label,f1,...,fd``. Features are kept as given."""
    X, y, dim = [], [], None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise DataFormatError(f"{path}: line {lineno}: non-numeric cell") from None
            label = vals[0]
            if not math.isfinite(label) or label != int(label) or not 0 <= label < n_classes:
                raise DataFormatError(f"{path}: line {lineno}: label {row[0]!r} not in [0, {n_classes})")
            if dim is None:
                dim = len(vals) - 1
            elif len(vals) - 1 != dim:
                raise DataFormatError(f"{path}: line {lineno}: expected {dim} features, got {len(vals) - 1}")
            if not all(math.isfinite(v) for v in vals[1:]):
                raise DataFormatError(f"{path}: line {lineno}: non-finite feature")
            y.append(int(label))
            X.append(vals[1:])
    if not y:
        raise DataFormatError(f"{path}: empty dataset")
    return Dataset(np.array(X), np.array(y), n_classes, name=Path(path).stem)


def _sphere_centers(n_classes: int, dim: int) -> np.ndarray:
    # fixed, seed-independent directions; the stream is keyed on the shape only
    g = derive_rng(SeedPath(0, (n_classes, dim, 0xC3)))
    c = g.normal((n_classes, dim))
    return c / np.linalg.norm(c, axis=1, keepdims=True)


def synth_blobs(n_classes: int, dim: int, per_class: int, spread: float, seed) -> Dataset:
    """Gaussian blobs around unit-sphere centers, min-max scaled to [0, 1] per feature."""
    if min(n_classes, dim, per_class) < 1 or not spread > 0:
        raise ValueError("blob counts must be >= 1 and spread > 0")
    centers = _sphere_centers(n_classes, dim)
    rng = _stream(seed, 0xB1)
    y = np.repeat(np.arange(n_classes), per_class)
    X = centers[y] + spread * rng.normal((len(y), dim))
    lo, hi = X.min(axis=0), X.max(axis=0)
    X = (X - lo) / np.where(hi > lo, hi - lo, 1.0)
    return Dataset(X, y, n_classes, name="blobs")


# ---------------------------------------------------------------------------
# partitions
# ---------------------------------------------------------------------------

def _largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    """Integer split of ``total`` proportional to ``weights``; ties go to the lower index."""
    w = np.asarray(weights, dtype=np.float64)
    exact = total * w / w.sum()
    counts = np.floor(exact).astype(np.int64)
    left = total - int(counts.sum())
    order = sorted(range(len(w)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[:left]:
        counts[i] += 1
    return counts


def partition_dirichlet(ds: Dataset, n_clients: int, alpha: float, seed, min_size: int = 1) -> Partition:
    """Per-class Dirichlet(alpha) proportions over clients.

    Clients left with fewer than ``min_size`` samples take one sample at a
    time from the currently largest client.
    """
    if n_clients < 2:
        raise ValueError("dirichlet partition needs at least 2 clients")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if len(ds) < n_clients * min_size:
        raise ValueError(f"dataset of {len(ds)} samples cannot supply {n_clients} clients")
    rng = _stream(seed, 0xD1)
    buckets: list[list[int]] = [[] for _ in range(n_clients)]
    for c, idx in enumerate(ds.class_indices()):
        q = rng.dirichlet([alpha] * n_clients)
        idx = idx[rng.permutation(len(idx))]
        counts = _largest_remainder(len(idx), q)
        start = 0
        for n, k in enumerate(counts):
            buckets[n].extend(int(i) for i in idx[start:start + k])
            start += k
    moved = 0
    for n in range(n_clients):
        while len(buckets[n]) < min_size:
            donor = max(range(n_clients), key=lambda m: (len(buckets[m]), -m))
            buckets[n].append(buckets[donor].pop())
            moved += 1
    return Partition([np.array(sorted(b), dtype=np.int64) for b in buckets], "dirichlet",
                     {"alpha": alpha, "min_size": min_size, "repair_moves": moved})


def partition_step(ds: Dataset, n_clients: int, n_major: int, major_per: int, minor_per: int,
                   seed, allow_replacement: bool = False) -> Partition:
    """Each client gets ``major_per`` samples of its major classes and ``minor_per`` of the rest.

    Client ``n`` has majors ``{n*n_major, ..., n*n_major + n_major - 1} mod C``.
    """
    C = ds.n_classes
    if not 0 < n_major < C:
        raise ValueError("n_major must be in [1, n_classes)")
    majors = [[(n * n_major + j) % C for j in range(n_major)] for n in range(n_clients)]
    demand = np.zeros(C, dtype=np.int64)
    for n in range(n_clients):
        for c in range(C):
            demand[c] += major_per if c in majors[n] else minor_per
    supply = ds.class_counts()
    short = [c for c in range(C) if demand[c] > supply[c]]
    if short and not allow_replacement:
        detail = ", ".join(f"class {c} needs {demand[c]} has {supply[c]}" for c in short)
        raise CapacityError(f"step partition exceeds supply: {detail}")
    rng = _stream(seed, 0x51)
    pools = [idx[rng.permutation(len(idx))] for idx in ds.class_indices()]
    cursor = np.zeros(C, dtype=np.int64)
    buckets: list[list[int]] = [[] for _ in range(n_clients)]
    for n in range(n_clients):
        for c in range(C):
            k = major_per if c in majors[n] else minor_per
            take = min(k, len(pools[c]) - cursor[c])
            buckets[n].extend(int(i) for i in pools[c][cursor[c]:cursor[c] + take])
            cursor[c] += take
            if k > take:
                if len(pools[c]) == 0:
                    raise CapacityError(f"class {c} has no samples to draw with replacement")
                buckets[n].extend(int(i) for i in pools[c][rng.integers(0, len(pools[c]), k - take)])
    return Partition([np.array(b, dtype=np.int64) for b in buckets], "step", {
        "n_major": n_major, "major_per": major_per, "minor_per": minor_per,
        "majors": majors, "with_replacement": sorted(short),
    })


def partition_iid(ds: Dataset, n_clients: int, seed) -> Partition:
    perm = _stream(seed, 0x11).permutation(len(ds))
    return Partition([np.sort(p) for p in np.array_split(perm, n_clients)], "iid", {})


# ---------------------------------------------------------------------------
# corruption and subsampling
# ---------------------------------------------------------------------------

FEATURE_GAUSS = "feature_gauss"
LABEL_FLIP = "label_flip"


def inject_noise(ds: Dataset, epsilon: float, mode: str = FEATURE_GAUSS, seed=0) -> Dataset:
    if epsilon < 0:
        raise ValueError("noise level must be non-negative")
    if mode not in (FEATURE_GAUSS, LABEL_FLIP):
        raise ValueError(f"unknown noise mode {mode!r}")
    if epsilon == 0:
        return ds
    rng = _stream(seed, 0xE5)
    if mode == FEATURE_GAUSS:
        X = np.clip(ds.X + epsilon * rng.normal(ds.X.shape), 0.0, 1.0)
        return Dataset(X, ds.y, ds.n_classes, ds.name, ds.ids)
    if epsilon > 1:
        raise ValueError("label flip probability must be <= 1")
    if ds.n_classes < 2:
        return ds
    flip = rng.uniform(len(ds)) < epsilon
    # offset in [1, C-1] guarantees a different label
    offset = rng.integers(1, ds.n_classes, len(ds))
    y = np.where(flip, (ds.y + offset) % ds.n_classes, ds.y)
    return Dataset(ds.X, y, ds.n_classes, ds.name, ds.ids)


def subsample(ds: Dataset, fraction: float, seed) -> Dataset:
    """Per-class stratified sample of ceil(fraction * class count) items."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    if fraction == 1:
        return ds
    rng = _stream(seed, 0x5B)
    keep = []
    for idx in ds.class_indices():
        k = math.ceil(fraction * len(idx))
        keep.append(idx[rng.permutation(len(idx))[:k]])
    return ds.subset(np.sort(np.concatenate(keep)))


def _stratified_split(ds: Dataset, fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Split indices into (rest, carved) with ``round(fraction*n)`` carved, each class within 1 of its share."""
    counts = ds.class_counts()
    total = int(round(fraction * len(ds)))
    exact = fraction * counts
    per = np.floor(exact).astype(np.int64)
    order = sorted(range(len(counts)), key=lambda c: (-(exact[c] - per[c]), c))
    for c in order[: total - int(per.sum())]:
        per[c] += 1
    rest, carved = [], []
    for c, idx in enumerate(ds.class_indices()):
        idx = idx[rng.permutation(len(idx))]
        carved.append(idx[:per[c]])
        rest.append(idx[per[c]:])
    return np.sort(np.concatenate(rest)), np.sort(np.concatenate(carved))


def make_shards(client: Dataset, seed, test_fraction: float = 0.2, meta_fraction: float = 0.2,
                meta_overlap: bool = False) -> ClientShards:
    """80/20 train/test split, then 20% of train carved off as the meta shard.

    With ``meta_overlap`` the meta shard is still drawn from the training
    portion but is not removed from ``train``.
    """
    if len(client) < 10:
        raise ShardError(f"{client.name}: {len(client)} samples, need at least 10 for shards")
    rng = _stream(seed, 0x5D)
    train_idx, test_idx = _stratified_split(client, test_fraction, rng)
    train_all = client.subset(train_idx)
    rest, meta = _stratified_split(train_all, meta_fraction, rng)
    shards = ClientShards(
        train=train_all if meta_overlap else train_all.subset(rest, name=f"{client.name}/train"),
        meta=train_all.subset(meta, name=f"{client.name}/meta"),
        test=client.subset(test_idx, name=f"{client.name}/test"),
    )
    if min(len(shards.train), len(shards.meta), len(shards.test)) < 1:
        raise ShardError(f"{client.name}: a shard came out empty")
    return shards
