"""Spectral clustering of learned weights and its evaluation metrics.

The learned weight rows are compared with squared Euclidean distance, a
binary k-nearest-neighbour graph is symmetrized by union, and K-means
runs on the lowest eigenvectors of the symmetric normalized Laplacian.
Cluster labels are aligned to ground truth with the Hungarian algorithm
before scoring; label 0 always means "no ground truth" and is excluded
from metrics.  In-painting extends labels from a scored subset to the
rest of a scene by an l1 nearest-neighbour majority vote.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigh
from scipy.optimize import linear_sum_assignment
from sklearn.cluster import KMeans


@dataclass
class ClusterResult:
    labels: np.ndarray  # raw cluster labels, 1..c
    matched_labels: np.ndarray  # after Hungarian alignment, 0 = unmatched
    mapping: np.ndarray  # cluster -> class (0 where cluster got a dummy)
    confusion: np.ndarray  # (clusters, classes) counts over scored pixels


def knn_graph(Lambda, nn: int) -> sp.csr_matrix:
    """Binary symmetric k-nearest-neighbour graph of weight rows.

    Distances are squared Euclidean; each vertex points to its ``nn``
    nearest others (ties broken by ascending index), and the directed
    edge set is symmetrized by union.
    """
    Lambda = np.asarray(Lambda, dtype=np.float64)
    n = Lambda.shape[0]
    if not 0 < nn < n:
        raise ValueError(f"need 0 < nn < {n}, got {nn}")
    sq = (Lambda * Lambda).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (Lambda @ Lambda.T)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")[:, :nn]
    rows = np.repeat(np.arange(n), nn)
    W = sp.csr_matrix(
        (np.ones(n * nn), (rows, order.ravel())), shape=(n, n)
    )
    W = W.maximum(W.T)
    W.data[:] = 1.0
    return W


def normalized_laplacian(W) -> np.ndarray:
    """Dense symmetric normalized Laplacian ``I - D^-1/2 W D^-1/2``."""
    if sp.issparse(W):
        Wd = np.asarray(W.todense(), dtype=np.float64)
    else:
        Wd = np.asarray(W, dtype=np.float64)
    if Wd.shape[0] != Wd.shape[1] or np.any(Wd < 0):
        raise ValueError("adjacency must be square and nonnegative")
    if not np.allclose(Wd, Wd.T):
        raise ValueError("adjacency must be symmetric")
    deg = Wd.sum(axis=1)
    dead = np.flatnonzero(deg == 0)
    if dead.size:
        raise ValueError(f"isolated vertex {int(dead[0])} has degree 0")
    inv_sqrt = 1.0 / np.sqrt(deg)
    L = -Wd * inv_sqrt[:, None] * inv_sqrt[None, :]
    np.fill_diagonal(L, 1.0 + L.diagonal())
    return L


def spectral_embedding(Lambda, nn: int, K: int) -> np.ndarray:
    """Eigenvectors of the K smallest Laplacian eigenvalues, (n, K)."""
    L = normalized_laplacian(knn_graph(Lambda, nn))
    _, vecs = eigh(L, subset_by_index=[0, K - 1])
    return vecs


def spectral_cluster(Lambda, nn: int, K: int, seed: int) -> np.ndarray:
    """K-means labels (1..K) on the low-frequency Laplacian embedding.

    K-means uses k-means++ initialization, 10 restarts keeping the best
    inertia, a 300-iteration cap, and is deterministic per seed.
    """
    Lambda = np.asarray(Lambda, dtype=np.float64)
    if K < 2:
        raise ValueError("need at least 2 clusters")
    if K > Lambda.shape[0]:
        raise ValueError("more clusters than points")
    vecs = spectral_embedding(Lambda, nn, K)
    km = KMeans(n_clusters=K, init="k-means++", n_init=10, max_iter=300,
                random_state=seed)
    return km.fit_predict(vecs) + 1


def confusion_counts(pred, truth) -> np.ndarray:
    """(clusters, classes) agreement counts over pixels with ground truth.

    Predictions of 0 ("no cluster", possible on in-painted maps whose
    clusters fell on padding) contribute to no row.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    mask = (truth > 0) & (pred > 0)
    c = int(pred.max(initial=0))
    K = int(truth.max(initial=0))
    counts = np.zeros((c, K), dtype=np.int64)
    np.add.at(counts, (pred[mask] - 1, truth[mask] - 1), 1)
    return counts


def hungarian_match(pred, truth) -> np.ndarray:
    """Cluster-to-class mapping maximizing total agreement.

    Works on a zero-padded square matrix so cluster and class counts may
    differ; clusters assigned to padding map to 0 ("no class") and score
    nothing.  Ties between equal-agreement assignments are broken
    deterministically in favour of low (cluster, class) index pairs by
    subtracting a sub-unit penalty from each pairing.
    """
    counts = confusion_counts(pred, truth)
    c, K = counts.shape
    q = max(c, K)
    padded = np.zeros((q, q), dtype=np.int64)
    padded[:c, :K] = counts
    big = q**3 + 1
    idx = np.arange(q)
    score = padded * big - (idx[:, None] * q + idx[None, :])
    _, cols = linear_sum_assignment(score, maximize=True)
    mapping = np.where(cols[:c] < K, cols[:c] + 1, 0)
    return mapping


def apply_mapping(pred, mapping) -> np.ndarray:
    pred = np.asarray(pred)
    return np.asarray(mapping)[pred - 1]


def match_to_truth(pred, truth) -> ClusterResult:
    """Bundle raw labels, the Hungarian alignment and the confusion."""
    mapping = hungarian_match(pred, truth)
    return ClusterResult(
        labels=np.asarray(pred),
        matched_labels=apply_mapping(pred, mapping),
        mapping=mapping,
        confusion=confusion_counts(pred, truth),
    )


def accuracy(matched_pred, truth) -> float:
    """Fraction of ground-truth pixels whose aligned label is correct."""
    matched_pred = np.asarray(matched_pred)
    truth = np.asarray(truth)
    mask = truth > 0
    if not np.any(mask):
        raise ValueError("no pixels with ground truth")
    return float(np.mean(matched_pred[mask] == truth[mask]))


def purity(pred, truth) -> float:
    """Unweighted mean over clusters of the majority-class fraction.

    Pixels without ground truth or without a cluster assignment are
    excluded; clusters left empty after the exclusion are skipped.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    mask = (truth > 0) & (pred > 0)
    pred = pred[mask]
    truth = truth[mask]
    if pred.size == 0:
        raise ValueError("no scored pixels (ground truth and cluster both present)")
    ratios = []
    for cluster in np.unique(pred):
        members = truth[pred == cluster]
        top = np.bincount(members).max()
        ratios.append(top / members.size)
    return float(np.mean(ratios))


def inpaint(spectra, sampled_indices, sampled_labels, neighbors: int = 10,
            chunk: int = 256) -> np.ndarray:
    """Extend subset labels to every pixel by l1 nearest-neighbour vote.

    Each unsampled pixel takes the majority label among its ``neighbors``
    nearest sampled pixels (all of them if fewer exist); a tied vote
    falls to the closest neighbour carrying one of the tied labels.
    Sampled pixels keep their own labels.
    """
    spectra = np.asarray(spectra, dtype=np.float64)
    sampled_indices = np.asarray(sampled_indices)
    sampled_labels = np.asarray(sampled_labels)
    if sampled_indices.size == 0:
        raise ValueError("sampled set is empty")
    n = spectra.shape[0]
    out = np.zeros(n, dtype=np.int64)
    out[sampled_indices] = sampled_labels
    rest = np.setdiff1d(np.arange(n), sampled_indices)
    if rest.size == 0:
        return out
    kq = min(neighbors, sampled_indices.size)
    anchor = spectra[sampled_indices]
    for start in range(0, rest.size, chunk):
        block = rest[start : start + chunk]
        dist = np.abs(spectra[block][:, None, :] - anchor[None, :, :]).sum(axis=2)
        order = np.argsort(dist, axis=1, kind="stable")[:, :kq]
        votes = sampled_labels[order]
        for row, pix in enumerate(block):
            counts = np.bincount(votes[row])
            top = counts.max()
            tied = np.flatnonzero(counts == top)
            if tied.size == 1:
                out[pix] = tied[0]
            else:
                for lab in votes[row]:
                    if counts[lab] == top:
                        out[pix] = lab
                        break
    return out
