"""Datasets, non-iid partitioning, and exemplar-set construction.

The Dirichlet partitioner follows the usual label-skew protocol: every
client draws class proportions from Dirichlet(alpha) and fills its quota
from per-class pools without replacement. alpha=0 degenerates to
one-class clients.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .seeding import SeedKey, stream, PHASE_DATA

CIFAR_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass(frozen=True)
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "inputs", np.ascontiguousarray(self.inputs, dtype=np.float64)
        )
        object.__setattr__(
            self, "labels", np.ascontiguousarray(self.labels, dtype=np.int64)
        )
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs and labels disagree on sample count")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels outside [0, num_classes)")
        if self.inputs.shape[0] < self.num_classes:
            raise ValueError("need at least one sample per class slot")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]


@dataclass(frozen=True)
class ClientPartition:
    """Per-client index lists into one dataset."""

    indices: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        frozen = tuple(np.ascontiguousarray(ix, dtype=np.int64) for ix in self.indices)
        object.__setattr__(self, "indices", frozen)
        seen: set[int] = set()
        for k, ix in enumerate(frozen):
            if ix.size < 1:
                raise ValueError(f"client {k} is empty")
            as_set = set(int(i) for i in ix)
            if len(as_set) != ix.size or seen & as_set:
                raise ValueError("client index lists overlap")
            seen |= as_set

    @property
    def num_clients(self) -> int:
        return len(self.indices)

    def sizes(self) -> np.ndarray:
        return np.array([ix.size for ix in self.indices], dtype=np.int64)

    def to_json(self) -> str:
        return json.dumps({str(k): ix.tolist() for k, ix in enumerate(self.indices)})

    @staticmethod
    def from_json(text: str) -> "ClientPartition":
        raw = json.loads(text)
        return ClientPartition(
            tuple(np.array(raw[str(k)], dtype=np.int64) for k in range(len(raw)))
        )


@dataclass(frozen=True)
class ExemplarSet:
    """J held-out samples per class, probed by confidence approximators."""

    inputs: np.ndarray
    labels: np.ndarray
    per_class: int
    source_indices: np.ndarray
    source: str = "test"

    def __post_init__(self) -> None:
        counts = np.bincount(self.labels)
        if not np.all(counts == self.per_class):
            raise ValueError("exemplar set must hold exactly J samples per class")

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1


def label_histogram(labels: np.ndarray, num_classes: int) -> np.ndarray:
    return np.bincount(labels, minlength=num_classes).astype(np.float64)


def dirichlet_partition(
    dataset: LabeledDataset, num_clients: int, alpha: float, seed: SeedKey
) -> ClientPartition:
    """Label-skewed partition with Dirichlet(alpha) class proportions.

    alpha=0 assigns each client a single class (round-robin over classes,
    samples of a class split evenly among its clients). For alpha>0 each
    client draws proportions from Dirichlet(alpha * 1) and is served that
    mix from per-class pools without replacement, best effort once a pool
    runs dry. A client left empty by exhausted pools is repaired by
    stealing one sample of its most-demanded class from whichever client
    holds the most of it; if no donor can spare one, this fails.
    """
    n = len(dataset)
    nc = dataset.num_classes
    if num_clients < 1 or num_clients > n:
        raise ValueError("num_clients must be in [1, n]")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    counts = label_histogram(dataset.labels, nc)
    if np.any(counts == 0):
        raise ValueError("dataset must cover every class")
    rng = stream(seed, PHASE_DATA)

    if alpha == 0.0:
        return _single_class_partition(dataset, num_clients, rng)

    per_class_pools = [
        rng.permutation(np.flatnonzero(dataset.labels == c)).tolist() for c in range(nc)
    ]
    quota = n // num_clients
    assigned: list[list[int]] = [[] for _ in range(num_clients)]
    held = np.zeros((num_clients, nc), dtype=np.int64)  # class counts per client
    wants = np.zeros((num_clients, nc), dtype=np.int64)

    for k in range(num_clients):
        proportions = rng.dirichlet(np.full(nc, alpha))
        wants[k] = _largest_remainder_counts(proportions, quota)
        for c in range(nc):
            take = min(int(wants[k, c]), len(per_class_pools[c]))
            for _ in range(take):
                assigned[k].append(per_class_pools[c].pop())
            held[k, c] += take

    for k in range(num_clients):
        if assigned[k]:
            continue
        for c in np.argsort(-wants[k], kind="stable"):
            donor = _pick_donor(held, k, int(c))
            if donor >= 0:
                moved = _steal_one(assigned, dataset.labels, donor, int(c))
                assigned[k].append(moved)
                held[donor, c] -= 1
                held[k, c] += 1
                break
        else:
            raise ValueError(
                f"client {k}: demanded classes exhausted and no donor can spare a sample"
            )
    return ClientPartition(tuple(np.array(sorted(ix), dtype=np.int64) for ix in assigned))


def _single_class_partition(
    dataset: LabeledDataset, num_clients: int, rng: np.random.Generator
) -> ClientPartition:
    nc = dataset.num_classes
    class_of_client = rng.permutation(num_clients) % nc
    assigned: list[np.ndarray] = [np.empty(0, dtype=np.int64)] * num_clients
    for c in range(nc):
        members = np.flatnonzero(class_of_client == c)
        if members.size == 0:
            continue
        pool = rng.permutation(np.flatnonzero(dataset.labels == c))
        if pool.size < members.size:
            raise ValueError(f"class {c} has fewer samples than clients assigned to it")
        for j, k in enumerate(members):
            assigned[k] = np.sort(pool[j :: members.size])
    return ClientPartition(tuple(assigned))


def _largest_remainder_counts(proportions: np.ndarray, total: int) -> np.ndarray:
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _pick_donor(held: np.ndarray, requester: int, cls: int) -> int:
    """Client holding the most samples of ``cls`` that can spare one."""
    totals = held.sum(axis=1)
    best, best_count = -1, 0
    for k in range(held.shape[0]):
        if k == requester:
            continue
        if held[k, cls] > best_count and totals[k] > 1:
            best, best_count = k, int(held[k, cls])
    return best


def _steal_one(assigned: list[list[int]], labels: np.ndarray, donor: int, cls: int) -> int:
    for pos in range(len(assigned[donor]) - 1, -1, -1):
        idx = assigned[donor][pos]
        if labels[idx] == cls:
            del assigned[donor][pos]
            return idx
    raise AssertionError("donor bookkeeping out of sync")


def synth_dataset(
    num_classes: int, n_per_class: int, dim: int, separation: float, seed: SeedKey
) -> LabeledDataset:
    """Gaussian blobs: class c centered at separation * e_(c mod dim)."""
    if separation <= 0:
        raise ValueError("separation must be positive")
    rng = stream(seed, PHASE_DATA)
    inputs = np.empty((num_classes * n_per_class, dim), dtype=np.float64)
    labels = np.empty(num_classes * n_per_class, dtype=np.int64)
    for c in range(num_classes):
        mean = np.zeros(dim)
        mean[c % dim] = separation
        sl = slice(c * n_per_class, (c + 1) * n_per_class)
        inputs[sl] = rng.normal(size=(n_per_class, dim)) + mean
        labels[sl] = c
    order = rng.permutation(len(labels))
    return LabeledDataset(inputs[order], labels[order], num_classes)


def build_exemplar_set(test_split: LabeledDataset, per_class: int, seed: SeedKey) -> ExemplarSet:
    """Uniform draw of ``per_class`` samples of every class, no replacement."""
    rng = stream(seed, PHASE_DATA, 1)
    picked: list[np.ndarray] = []
    for c in range(test_split.num_classes):
        pool = np.flatnonzero(test_split.labels == c)
        if pool.size < per_class:
            raise ValueError(f"class {c} has {pool.size} samples, need {per_class}")
        picked.append(rng.choice(pool, size=per_class, replace=False))
    indices = np.sort(np.concatenate(picked))
    return ExemplarSet(
        inputs=test_split.inputs[indices],
        labels=test_split.labels[indices],
        per_class=per_class,
        source_indices=indices,
    )


def load_cifar10(path: str) -> tuple[LabeledDataset, LabeledDataset, dict]:
    """Read the 3073-byte-record binary batches under ``path``.

    Pixels are scaled to [0, 1] and normalized per channel with
    constants computed on the train split; the constants are returned so
    the run manifest can record them.
    """
    train_parts = [_read_cifar_file(os.path.join(path, name)) for name in CIFAR_TRAIN_FILES]
    test_x, test_y = _read_cifar_file(os.path.join(path, CIFAR_TEST_FILE))
    train_x = np.concatenate([p[0] for p in train_parts])
    train_y = np.concatenate([p[1] for p in train_parts])

    channel_view = train_x.reshape(len(train_x), 3, -1)
    mean = channel_view.mean(axis=(0, 2))
    std = channel_view.std(axis=(0, 2))
    std = np.where(std == 0, 1.0, std)

    def norm(x: np.ndarray) -> np.ndarray:
        v = x.reshape(len(x), 3, -1)
        return ((v - mean[None, :, None]) / std[None, :, None]).reshape(len(x), -1)

    constants = {"channel_mean": mean.tolist(), "channel_std": std.tolist()}
    return (
        LabeledDataset(norm(train_x), train_y, 10),
        LabeledDataset(norm(test_x), test_y, 10),
        constants,
    )


def _read_cifar_file(filepath: str) -> tuple[np.ndarray, np.ndarray]:
    if not os.path.exists(filepath):
        raise IOError(f"missing CIFAR-10 batch file: {filepath}")
    raw = np.fromfile(filepath, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD != 0:
        complete = raw.size // CIFAR_RECORD
        raise IOError(
            f"{filepath}: truncated record at byte offset {complete * CIFAR_RECORD} "
            f"(file holds {raw.size} bytes, records are {CIFAR_RECORD})"
        )
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise IOError(f"{filepath}: label byte outside [0, 10)")
    pixels = records[:, 1:].astype(np.float64) / 255.0
    return pixels, labels
