"""Distance metrics and grouping methods that assemble superclients.

The point of every method here is anti-clustering: a superclient should
pool clients whose estimated distributions are far apart, so that its
union dataset looks as class-uniform as possible. Quality is scored by
the balance ratio (min/max class count) and the fraction of covered
classes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .approximator import DistributionEstimate, CONFIDENCE
from .data import ClientPartition, LabeledDataset, label_histogram
from .seeding import SeedKey, stream, PHASE_GROUP

RANDOM = "random"
KMEANS = "kmeans"
GREEDY = "greedy"

COSINE = "cosine"
EUCLIDEAN = "euclidean"
WASSERSTEIN = "wasserstein"
KL = "kl"
GINI = "gini"

METRICS = (COSINE, EUCLIDEAN, WASSERSTEIN, KL, GINI)
_KL_EPS = 1e-9


@dataclass(frozen=True)
class Superclient:
    id: int
    members: tuple[int, ...]
    num_samples: int

    def __post_init__(self) -> None:
        if not self.members:
            raise ValueError("superclient cannot be empty")
        if len(set(self.members)) != len(self.members):
            raise ValueError("superclient has duplicate members")


@dataclass(frozen=True)
class GroupingConfig:
    min_samples: int = 800
    max_clients: int = 11
    method: str = GREEDY
    metric: str = KL
    seed: int = 0

    def __post_init__(self) -> None:
        if self.min_samples < 1 or self.max_clients < 1:
            raise ValueError("min_samples and max_clients must be >= 1")
        if self.method not in (RANDOM, KMEANS, GREEDY):
            raise ValueError(f"unknown grouping method {self.method!r}")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")


def tau(a: np.ndarray, b: np.ndarray, metric: str, kind: str = CONFIDENCE) -> float:
    """Pairwise dissimilarity between two distribution estimates.

    KL and Gini read the vectors as probability distributions and are
    only defined for the confidence kind; Wasserstein moves mass over
    class indices for confidence vectors and between sorted component
    values for embeddings.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("estimates must have the same length")
    if metric == COSINE:
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0.0 or nb == 0.0:
            raise ValueError("cosine distance undefined for zero-norm vectors")
        return float(1.0 - (a @ b) / (na * nb))
    if metric == EUCLIDEAN:
        return float(np.linalg.norm(a - b))
    if metric == WASSERSTEIN:
        if kind == CONFIDENCE:
            return float(np.abs(np.cumsum(a) - np.cumsum(b)).sum())
        return float(np.abs(np.sort(a) - np.sort(b)).mean())
    if metric in (KL, GINI) and kind != CONFIDENCE:
        raise ValueError(f"{metric} requires confidence-kind estimates")
    if metric == KL:
        p = _smooth(a)
        q = _smooth(b)
        return float((p * np.log(p / q)).sum())
    if metric == GINI:
        m = 0.5 * (a + b)
        return float(1.0 - (m * m).sum())
    raise ValueError(f"unknown metric {metric!r}")


def _smooth(p: np.ndarray) -> np.ndarray:
    q = p + _KL_EPS
    return q / q.sum()


def kmeans(
    points: np.ndarray,
    k: int,
    seed: SeedKey,
    max_iter: int = 300,
    sse_trace: list[float] | None = None,
) -> np.ndarray:
    """Lloyd's algorithm with deterministic seeding.

    Centroids start from k distinct sampled points; an emptied cluster is
    repaired by stealing the farthest point from the largest cluster.
    ``sse_trace`` collects the within-cluster SSE after each iteration.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if k > n:
        raise ValueError("k cannot exceed the number of points")
    rng = stream(seed, PHASE_GROUP)
    centroids = points[rng.choice(n, size=k, replace=False)].copy()
    labels = np.full(n, -1, dtype=np.int64)
    for _ in range(max_iter):
        dist = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_labels = np.argmin(dist, axis=1)
        for j in range(k):
            if np.any(new_labels == j):
                continue
            counts = np.bincount(new_labels, minlength=k)
            largest = int(np.argmax(counts))
            pool = np.flatnonzero(new_labels == largest)
            farthest = pool[int(np.argmax(dist[pool, largest]))]
            new_labels[farthest] = j
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            centroids[j] = points[labels == j].mean(axis=0)
        if sse_trace is not None:
            sse_trace.append(
                float(((points - centroids[labels]) ** 2).sum())
            )
    return labels


def phi_random(sample_counts: np.ndarray, config: GroupingConfig) -> list[Superclient]:
    """Consume clients in shuffled order, closing each superclient on the
    min-samples / max-clients criterion."""
    order = stream(config.seed, PHASE_GROUP, 0).permutation(len(sample_counts))
    groups: list[Superclient] = []
    members: list[int] = []
    total = 0
    for k in order:
        members.append(int(k))
        total += int(sample_counts[k])
        if total >= config.min_samples or len(members) >= config.max_clients:
            groups.append(Superclient(len(groups), tuple(members), total))
            members, total = [], 0
    if members:
        groups.append(Superclient(len(groups), tuple(members), total))
    return groups


def phi_kmeans(
    estimates: DistributionEstimate,
    sample_counts: np.ndarray,
    config: GroupingConfig,
    num_classes: int,
) -> list[Superclient]:
    """Cluster clients into ``num_classes`` homogeneous groups, then draw
    superclient members round-robin across the clusters."""
    labels = kmeans(estimates.vectors, num_classes, config.seed)
    rng = stream(config.seed, PHASE_GROUP, 1)
    clusters = [list(np.flatnonzero(labels == c)) for c in range(num_classes)]
    remaining = sum(len(c) for c in clusters)
    groups: list[Superclient] = []
    j = 0
    while remaining > 0:
        members: list[int] = []
        total = 0
        while total < config.min_samples and len(members) < config.max_clients:
            if remaining == 0:
                break
            # skip exhausted clusters in round-robin order
            while not clusters[j]:
                j = (j + 1) % num_classes
            pick = int(rng.integers(len(clusters[j])))
            k = int(clusters[j].pop(pick))
            members.append(k)
            total += int(sample_counts[k])
            remaining -= 1
            j = (j + 1) % num_classes
        groups.append(Superclient(len(groups), tuple(members), total))
    return groups


def phi_greedy(
    estimates: DistributionEstimate,
    sample_counts: np.ndarray,
    config: GroupingConfig,
) -> list[Superclient]:
    """Seed each superclient randomly, then repeatedly add the remaining
    client farthest (under the configured metric) from the running mean
    estimate, which is updated as an equal-weight mix."""
    rng = stream(config.seed, PHASE_GROUP, 2)
    vectors = estimates.vectors
    remaining = list(range(len(vectors)))
    groups: list[Superclient] = []
    while remaining:
        pick = int(rng.integers(len(remaining)))
        first = remaining.pop(pick)
        members = [first]
        running = vectors[first].copy()
        total = int(sample_counts[first])
        while total < config.min_samples and len(members) < config.max_clients and remaining:
            best_j, best_val = remaining[0], -math.inf
            for j in remaining:
                val = tau(vectors[j], running, config.metric, estimates.kind)
                if val > best_val:  # ties keep the lowest client id
                    best_j, best_val = j, val
            running = 0.5 * running + 0.5 * vectors[best_j]
            total += int(sample_counts[best_j])
            members.append(best_j)
            remaining.remove(best_j)
        groups.append(Superclient(len(groups), tuple(members), total))
    return groups


def build_superclients(
    estimates: DistributionEstimate | None,
    sample_counts: np.ndarray,
    config: GroupingConfig,
    num_classes: int,
) -> list[Superclient]:
    if config.method == RANDOM:
        return phi_random(sample_counts, config)
    if estimates is None:
        raise ValueError(f"method {config.method!r} needs distribution estimates")
    if config.method == KMEANS:
        return phi_kmeans(estimates, sample_counts, config, num_classes)
    return phi_greedy(estimates, sample_counts, config)


def pooled_histogram(
    superclient: Superclient, partition: ClientPartition, dataset: LabeledDataset
) -> np.ndarray:
    pooled = np.concatenate([partition.indices[k] for k in superclient.members])
    return label_histogram(dataset.labels[pooled], dataset.num_classes)


def balance_ratio(
    superclient: Superclient, partition: ClientPartition, dataset: LabeledDataset
) -> float:
    """min class count / max class count over the pooled data; zero when
    any class is absent."""
    hist = pooled_histogram(superclient, partition, dataset)
    top = hist.max()
    return float(hist.min() / top) if top > 0 else 0.0


def covered_classes(
    superclient: Superclient, partition: ClientPartition, dataset: LabeledDataset
) -> float:
    hist = pooled_histogram(superclient, partition, dataset)
    return float((hist > 0).mean())


def grouping_report(
    superclients: list[Superclient],
    partition: ClientPartition,
    dataset: LabeledDataset,
    config: GroupingConfig,
    path,
) -> None:
    """CSV: one row per superclient plus a mean summary row."""
    rows = []
    for sc in superclients:
        undersized = sc.num_samples < config.min_samples and len(sc.members) < config.max_clients
        rows.append(
            [
                sc.id,
                " ".join(str(m) for m in sc.members),
                sc.num_samples,
                balance_ratio(sc, partition, dataset),
                covered_classes(sc, partition, dataset),
                int(undersized),
            ]
        )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["superclient_id", "members", "num_samples", "balance_ratio",
             "covered_classes", "undersized"]
        )
        for row in rows:
            writer.writerow(row)
        writer.writerow(
            ["mean", "", np.mean([r[2] for r in rows]),
             np.mean([r[3] for r in rows]), np.mean([r[4] for r in rows]), ""]
        )
