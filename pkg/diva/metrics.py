"""Clustering accuracy, kNN error on latents and a finite-mixture EM used as a cross-check."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, NamedTuple, Optional

import numpy as np

from diva.errors import ContractError, ShapeError
from diva.numerics import LOG_2PI, kmeanspp_centers, log_sum_exp


# -----------------------------
#  Clustering accuracy
# -----------------------------
@dataclass
class LabeledAssignment:
    """Cluster identifiers paired with ground-truth labels."""
    assignments: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.assignments = np.asarray(self.assignments, dtype=int).ravel()
        self.labels = np.asarray(self.labels, dtype=int).ravel()
        if self.assignments.shape != self.labels.shape:
            raise ShapeError(
                f"{self.assignments.size} assignments but {self.labels.size} labels"
            )
        if np.any(self.assignments < 0) or np.any(self.labels < 0):
            raise ContractError("cluster and label identifiers must be non-negative")


def contingency(la: LabeledAssignment):
    """Cluster x label count matrix plus the cluster and label values it indexes."""
    clusters, c_idx = np.unique(la.assignments, return_inverse=True)
    labels, l_idx = np.unique(la.labels, return_inverse=True)
    counts = np.zeros((clusters.size, labels.size), dtype=np.int64)
    np.add.at(counts, (c_idx, l_idx), 1)
    return counts, clusters, labels


def cluster_label_map(la: LabeledAssignment) -> dict:
    """Majority label of every cluster (ties go to the smaller label)."""
    counts, clusters, labels = contingency(la)
    return {int(c): int(labels[np.argmax(row)]) for c, row in zip(clusters, counts)}


def clustering_accuracy(la: LabeledAssignment) -> float:
    """
    Unsupervised clustering accuracy with a many-to-one cluster-to-label map.

    With an unconstrained mapping the optimum sends every cluster to its
    majority label, so ACC is the summed majority count over N.
    """
    if la.labels.size == 0:
        raise ContractError("clustering accuracy needs at least one point")
    counts, _, _ = contingency(la)
    return float(counts.max(axis=1).sum()) / la.labels.size


# -----------------------------
#  kNN error
# -----------------------------
def _squared_distances(a, b):
    out = np.empty((a.shape[0], b.shape[0]))
    # Keep each broadcast block around 2**22 elements
    step = max(1, (1 << 22) // max(1, b.shape[0] * b.shape[1]))
    for start in range(0, a.shape[0], step):
        diff = a[start:start + step, None, :] - b[None, :, :]
        out[start:start + step] = np.sum(diff * diff, axis=2)
    return out


def knn_predict(train_latents, train_labels, test_latents, k: int) -> np.ndarray:
    """Majority vote of the k nearest training points (Euclidean)."""
    train = np.asarray(train_latents, dtype=float)
    test = np.asarray(test_latents, dtype=float)
    y = np.asarray(train_labels, dtype=int)
    if k < 1:
        raise ContractError("k must be >= 1")
    if train.shape[0] == 0:
        raise ContractError("kNN needs a non-empty training set")
    if k > train.shape[0]:
        raise ContractError(f"k={k} exceeds the training set size {train.shape[0]}")
    if train.shape[0] != y.shape[0]:
        raise ShapeError("training latents and labels differ in length")
    if test.ndim != 2 or test.shape[1] != train.shape[1]:
        raise ShapeError("test latents do not match the training dimensionality")

    dist = np.sqrt(_squared_distances(test, train))
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]

    predictions = np.empty(test.shape[0], dtype=int)
    for i in range(test.shape[0]):
        votes = y[nearest[i]]
        d = dist[i, nearest[i]]
        candidates = np.unique(votes)
        counts = np.array([np.sum(votes == c) for c in candidates])
        tied = candidates[counts == counts.max()]
        if tied.size == 1:
            predictions[i] = tied[0]
            continue
        # Tie: smallest mean distance, then lowest label id
        mean_d = np.array([d[votes == c].mean() for c in tied])
        predictions[i] = tied[np.flatnonzero(mean_d == mean_d.min())[0]]
    return predictions


def knn_error(train_latents, train_labels, test_latents, test_labels, k: int) -> float:
    """Fraction of test points misclassified by a k-nearest-neighbour vote."""
    truth = np.asarray(test_labels, dtype=int)
    predictions = knn_predict(train_latents, train_labels, test_latents, k)
    if truth.shape[0] != predictions.shape[0]:
        raise ShapeError("test latents and labels differ in length")
    if truth.size == 0:
        return 0.0
    return float(np.mean(predictions != truth))


# -----------------------------
#  Finite diagonal GMM (EM)
# -----------------------------
class EmResult(NamedTuple):
    means: np.ndarray
    variances: np.ndarray
    responsibilities: np.ndarray
    weights: np.ndarray
    log_likelihoods: List[float]


def _log_joint(x, weights, means, variances):
    diff = x[:, None, :] - means[None, :, :]
    log_pdf = -0.5 * np.sum(LOG_2PI + np.log(variances)[None] + diff * diff / variances[None], axis=2)
    return np.log(weights)[None, :] + log_pdf


def em_oracle(data, K: int, iters: int = 100, seed: int = 0, init_means: Optional[np.ndarray] = None,
              min_var: float = 1e-10) -> EmResult:
    """
    Expectation-maximisation for a K-component diagonal Gaussian mixture.

    Mixing weights start uniform; initial means are k-means++ seeded rows
    drawn with `seed` unless given, and each component starts from the
    variance of the rows nearest to its mean. The returned responsibilities
    come from a closing E-step under the returned parameters.
    Deterministic for fixed inputs.
    """
    x = np.asarray(data, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] == 0:
        raise ContractError("EM needs at least one data row")
    if K < 1:
        raise ContractError("K must be >= 1")

    if init_means is None:
        means = kmeanspp_centers(x, K, np.random.default_rng(seed))
    else:
        means = np.asarray(init_means, dtype=float).reshape(K, x.shape[1]).copy()
    variances = _nearest_variances(x, means, min_var)
    weights = np.full(K, 1.0 / K)

    history: List[float] = []
    for _ in range(max(1, iters)):
        resp, ll = _e_step(x, weights, means, variances)
        history.append(ll)

        # M-step
        mass = np.maximum(resp.sum(axis=0), 1e-300)
        weights = mass / mass.sum()
        means = (resp.T @ x) / mass[:, None]
        second = (resp.T @ (x * x)) / mass[:, None]
        variances = np.maximum(second - means * means, min_var)

    resp, ll = _e_step(x, weights, means, variances)
    history.append(ll)
    return EmResult(means, variances, resp, weights, history)


def _e_step(x, weights, means, variances):
    log_p = _log_joint(x, weights, means, variances)
    norm = log_sum_exp(log_p, axis=1)
    return np.exp(log_p - norm[:, None]), float(np.sum(norm))


def _nearest_variances(x, means, min_var):
    # components with fewer than two nearest rows fall back to the data variance
    overall = np.maximum(x.var(axis=0), min_var)
    nearest = np.argmin(((x[:, None, :] - means[None, :, :]) ** 2).sum(axis=2), axis=1)
    out = np.tile(overall, (means.shape[0], 1))
    for k in range(means.shape[0]):
        rows = x[nearest == k]
        if rows.shape[0] >= 2:
            out[k] = np.maximum(rows.var(axis=0), min_var)
    return out
