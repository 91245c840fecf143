"""Partition agreement and cluster quality: ARI, Davies-Bouldin, silhouette."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import IdenticalCentroids, LengthMismatch, SingleCluster


def _comb2(x):
    x = np.asarray(x, dtype=float)
    return x * (x - 1.0) / 2.0


@dataclass(frozen=True, eq=False)
class ContingencyTable:
    counts: np.ndarray
    row_sums: np.ndarray
    col_sums: np.ndarray
    total: int


def contingency_table(labels_a, labels_b) -> ContingencyTable:
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatch(f"label vectors differ in shape: {a.shape} vs {b.shape}")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    counts = np.zeros((ia.max() + 1 if len(ia) else 0, ib.max() + 1 if len(ib) else 0), dtype=np.int64)
    np.add.at(counts, (ia, ib), 1)
    return ContingencyTable(counts, counts.sum(axis=1), counts.sum(axis=0), int(len(a)))


def adjusted_rand_index(labels_a, labels_b):
    """Hubert-Arabie adjusted Rand index from pair counts.

    When both partitions are trivial in the same way (the expected index equals
    its maximum) the score is 1.0 for identical partitions and 0.0 otherwise.
    """
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape:
        raise LengthMismatch(f"label vectors have lengths {len(a)} and {len(b)}")
    if len(a) < 2:
        raise LengthMismatch("need at least two labelled items")
    table = contingency_table(a, b)
    index = _comb2(table.counts).sum()
    sum_a = _comb2(table.row_sums).sum()
    sum_b = _comb2(table.col_sums).sum()
    expected = sum_a * sum_b / _comb2(table.total)
    maximum = 0.5 * (sum_a + sum_b)
    if maximum == expected:
        return 1.0 if index == maximum else 0.0
    return float((index - expected) / (maximum - expected))


def davies_bouldin(features, labels):
    """Davies-Bouldin index with Euclidean centroid scatter.

    Singleton clusters have zero scatter.  Raises IdenticalCentroids when two
    centroids coincide.
    """
    X = np.asarray(features, dtype=float)
    labels = np.asarray(labels)
    if X.ndim != 2 or len(X) != len(labels):
        raise LengthMismatch(f"{len(labels)} labels for feature matrix of shape {X.shape}")
    ids = np.unique(labels)
    m = len(ids)
    if m < 2:
        raise SingleCluster("Davies-Bouldin index needs at least two clusters")
    centroids = np.empty((m, X.shape[1]))
    scatter = np.empty(m)
    for k, lab in enumerate(ids):
        members = X[labels == lab]
        centroids[k] = members.mean(axis=0)
        scatter[k] = np.mean(np.linalg.norm(members - centroids[k], axis=1))
    diff = centroids[:, None, :] - centroids[None, :, :]
    sep = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    off = ~np.eye(m, dtype=bool)
    if np.any(sep[off] == 0):
        i, j = np.argwhere((sep == 0) & off)[0]
        raise IdenticalCentroids(f"clusters {ids[i]!r} and {ids[j]!r} have identical centroids")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = (scatter[:, None] + scatter[None, :]) / sep
    ratio[~off] = -np.inf
    return float(np.mean(ratio.max(axis=1)))


def silhouette_samples(D, labels, singleton_value=0.0):
    """Per-item silhouette ``(b - a) / max(a, b)`` from a distance matrix."""
    D = np.asarray(getattr(D, "values", D), dtype=float)
    labels = np.asarray(labels)
    n = len(labels)
    if D.shape != (n, n):
        raise LengthMismatch(f"distance matrix {D.shape} does not match {n} labels")
    ids, inv = np.unique(labels, return_inverse=True)
    m = len(ids)
    if m < 2:
        raise SingleCluster("silhouette needs at least two clusters")
    onehot = np.zeros((n, m))
    onehot[np.arange(n), inv] = 1.0
    sizes = onehot.sum(axis=0)
    sums = D @ onehot  # distance from each item to each cluster, summed
    own = sizes[inv]
    a = np.where(own > 1, sums[np.arange(n), inv] / np.maximum(own - 1, 1), 0.0)
    mean_other = sums / sizes[None, :]
    mean_other[np.arange(n), inv] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    with np.errstate(invalid="ignore", divide="ignore"):
        sil = np.where(denom > 0, (b - a) / denom, 0.0)
    sil[own == 1] = singleton_value
    return sil


def mean_silhouette(D, labels, singleton_value=0.0):
    return float(np.mean(silhouette_samples(D, labels, singleton_value)))
