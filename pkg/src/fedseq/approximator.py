"""Client pre-training and privacy-preserving distribution estimates.

Each client trains the shared initial model on its own data for a few
epochs; the resulting models are then summarized either by their
predictions on a server-side exemplar set (confidence vectors) or by a
PCA projection of their classifier weights. Both summaries stand in for
the client's label distribution without exposing its data.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .data import ClientPartition, ExemplarSet, LabeledDataset, label_histogram
from .flcore import PLAIN, LocalObjective, SGDHyper, local_train
from .nn import Batch, ModelSpec, ParamVector, extract_classifier, forward, softmax
from .seeding import SeedKey, stream, PHASE_PRETRAIN

CONFIDENCE = "confidence"
EMBEDDING = "classifier-embedding"

GLOBAL_MEAN = "global-mean"
PER_CLASS_DIAG = "per-class-diag"


@dataclass
class PretrainResult:
    spec: ModelSpec
    theta0: ParamVector
    client_params: list[ParamVector]
    epochs: int

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("pre-training needs at least one epoch")
        for p in self.client_params:
            if p.layout != self.theta0.layout:
                raise ValueError("client parameters do not share theta0's layout")

    @property
    def num_clients(self) -> int:
        return len(self.client_params)


@dataclass
class DistributionEstimate:
    """One row per client; ``kind`` says how to read the rows."""

    vectors: np.ndarray
    kind: str
    degenerate: bool = False

    def __post_init__(self) -> None:
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValueError("estimates must be a (clients x dim) matrix")
        if self.kind not in (CONFIDENCE, EMBEDDING):
            raise ValueError(f"unknown estimate kind {self.kind!r}")
        if self.kind == CONFIDENCE:
            if np.any(self.vectors < 0) or np.max(
                np.abs(self.vectors.sum(axis=1) - 1.0)
            ) > 1e-9:
                raise ValueError("confidence rows must lie on the simplex")

    @property
    def num_clients(self) -> int:
        return self.vectors.shape[0]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["client_id"] + [f"{self.kind}_{i}" for i in range(self.vectors.shape[1])])
            for k, row in enumerate(self.vectors):
                writer.writerow([k] + [repr(v) for v in row])


@dataclass
class SimilarityMatrix:
    matrix: np.ndarray
    epochs: int

    @property
    def frobenius_norm(self) -> float:
        return float(np.linalg.norm(self.matrix))


def pretrain_clients(
    theta0: ParamVector,
    spec: ModelSpec,
    dataset: LabeledDataset,
    partition: ClientPartition,
    epochs: int,
    hyper: SGDHyper,
    seed: SeedKey,
) -> PretrainResult:
    """Independent local training of every client from the shared init.

    Clients draw their batch order from identically keyed streams, so
    two clients holding the same samples end up with the same model.
    """
    results = []
    for k in range(partition.num_clients):
        update = local_train(
            theta0,
            spec,
            dataset,
            partition.indices[k],
            epochs,
            LocalObjective(PLAIN),
            hyper,
            seed=stream(seed, PHASE_PRETRAIN),
            participant_id=k,
        )
        results.append(update.params)
    return PretrainResult(spec, theta0, results, epochs)


def psi_conf(
    pretrain: PretrainResult, exemplars: ExemplarSet, mode: str = GLOBAL_MEAN
) -> DistributionEstimate:
    """Confidence vectors: softmax over per-class mean predicted probabilities.

    ``global-mean`` averages the predicted probability of class c over
    every exemplar; ``per-class-diag`` averages it over class-c exemplars
    only.
    """
    if exemplars.num_classes != pretrain.spec.num_classes:
        raise ValueError("exemplar classes do not match the model's output classes")
    nc = pretrain.spec.num_classes
    rows = np.empty((pretrain.num_clients, nc), dtype=np.float64)
    batch = Batch(exemplars.inputs, exemplars.labels)
    for k, params in enumerate(pretrain.client_params):
        probs = softmax(forward(params, pretrain.spec, batch))
        if mode == GLOBAL_MEAN:
            scores = probs.mean(axis=0)
        elif mode == PER_CLASS_DIAG:
            scores = np.array(
                [probs[exemplars.labels == c, c].mean() for c in range(nc)]
            )
        else:
            raise ValueError(f"unknown confidence mode {mode!r}")
        rows[k] = softmax(scores[None, :])[0]
    return DistributionEstimate(rows, CONFIDENCE)


def psi_clf(
    pretrain: PretrainResult, mode: str = "all", explained_variance: float = 0.9
) -> DistributionEstimate:
    """PCA embedding of the pre-trained classifier weights.

    Keeps the smallest number of principal components whose cumulative
    explained variance reaches the threshold. A degenerate stack (all
    clients identical) collapses to one-dimensional zero embeddings.
    """
    if pretrain.num_clients < 2:
        raise ValueError("need at least two clients for an embedding")
    if not 0.0 < explained_variance <= 1.0:
        raise ValueError("explained_variance must be in (0, 1]")
    rows = np.stack([extract_classifier(p, mode) for p in pretrain.client_params])
    centered = rows - rows.mean(axis=0, keepdims=True)
    if np.max(np.abs(centered)) == 0.0:
        warnings.warn("identical classifier weights across clients; embeddings degenerate")
        return DistributionEstimate(
            np.zeros((pretrain.num_clients, 1)), EMBEDDING, degenerate=True
        )
    eigenvalues, components = _pca_components(centered)
    total = eigenvalues.sum()
    cumulative = np.cumsum(eigenvalues) / total
    keep = int(np.searchsorted(cumulative, explained_variance - 1e-12) + 1)
    keep = min(keep, components.shape[1])
    return DistributionEstimate(centered @ components[:, :keep], EMBEDDING)


def _pca_components(centered: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of the covariance, via the Gram matrix when the
    feature dimension exceeds the number of clients."""
    n, p = centered.shape
    if p <= n:
        cov = centered.T @ centered / (n - 1)
        eigenvalues, vectors = np.linalg.eigh(cov)
    else:
        gram = centered @ centered.T / (n - 1)
        eigenvalues, gram_vectors = np.linalg.eigh(gram)
        scale = np.sqrt(np.maximum(eigenvalues, 1e-300) * (n - 1))
        vectors = centered.T @ gram_vectors / scale
    order = np.argsort(eigenvalues, kind="stable")[::-1]
    eigenvalues = np.maximum(eigenvalues[order], 0.0)
    vectors = vectors[:, order]
    # drop numerically null directions so rank matches the centered matrix
    positive = eigenvalues > eigenvalues[0] * 1e-12
    eigenvalues, vectors = eigenvalues[positive], vectors[:, positive]
    for j in range(vectors.shape[1]):
        col = vectors[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0:
            vectors[:, j] = -col
    return eigenvalues, vectors


def similarity_matrix(pretrain: PretrainResult) -> SimilarityMatrix:
    """Pairwise cosine similarity of the full flattened parameters."""
    stack = np.stack([p.values for p in pretrain.client_params])
    norms = np.linalg.norm(stack, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-norm parameter vector has no direction")
    unit = stack / norms[:, None]
    matrix = unit @ unit.T
    return SimilarityMatrix(matrix, pretrain.epochs)


def oracle_estimate(partition: ClientPartition, dataset: LabeledDataset) -> DistributionEstimate:
    """Ground-truth label histograms, normalized; for testing grouping
    independently of pre-training."""
    rows = np.stack(
        [
            label_histogram(dataset.labels[ix], dataset.num_classes)
            for ix in partition.indices
        ]
    )
    return DistributionEstimate(rows / rows.sum(axis=1, keepdims=True), CONFIDENCE)
