"""Distances, complete-linkage agglomeration, cluster-count discovery.

The learned pair classifier supplies the clustering metric: for examples
p and q the distance is 1 minus the symmetrized same-class probability,
so intra-class pairs sit near 0 and inter-class pairs near 1.  A plain
Euclidean distance over encoder embeddings and Lloyd's k-means serve as
baselines.

Agglomeration uses complete linkage (cluster distance = maximum member
pair distance).  The stopping threshold theta is calibrated on held-out
validation classes: cluster them to exactly their true class count and
take the largest surviving inter-cluster distance.  Discovery then merges
while the next merge distance is below theta; the surviving cluster count
is the estimated number of hidden classes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Dendrogram:
    """Full merge history: (cluster_a, cluster_b, distance) triples.

    Leaves are 0..n-1; the i-th merge creates cluster n+i.  Complete
    linkage makes the merge distances non-decreasing.
    """

    n: int
    merges: tuple

    def heights(self):
        return np.array([m[2] for m in self.merges])


@dataclass
class ClusterSet:
    """Flat clustering: contiguous labels 0..k-1 for every example."""

    labels: np.ndarray
    k: int
    theta: float | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        present = np.unique(self.labels)
        if self.k != len(present) or (len(present) and
                                      (present[0] != 0 or present[-1] != self.k - 1)):
            raise ValueError(f"labels must cover 0..k-1 exactly (k={self.k})")


def _check_square(dist):
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
        raise ValueError(f"distance matrix must be square, got {dist.shape}")
    return dist


# ------------------------------------------------------------- distances


def pcn_distance_matrix(model, images, chunk=4096) -> np.ndarray:
    """Symmetric pair-classifier distances: 1 - mean of both branch orders.

    Embeddings are computed once; only the pair head runs per ordered pair.
    """
    emb = model.encode(images)
    n = len(emb)
    dist = np.zeros((n, n), dtype=np.float64)
    if n < 2:
        return dist
    iu, ju = np.triu_indices(n, k=1)
    for lo in range(0, len(iu), chunk):
        i = iu[lo : lo + chunk]
        j = ju[lo : lo + chunk]
        g_ij = model.pcn_prob_embedded(emb[i], emb[j], chunk=chunk)
        g_ji = model.pcn_prob_embedded(emb[j], emb[i], chunk=chunk)
        d = 1.0 - 0.5 * (g_ij.astype(np.float64) + g_ji.astype(np.float64))
        dist[i, j] = d
        dist[j, i] = d
    np.fill_diagonal(dist, 0.0)
    return dist


def pairwise_euclidean(embeddings) -> np.ndarray:
    emb = np.asarray(embeddings, dtype=np.float64)
    sq = (emb**2).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (emb @ emb.T)
    np.maximum(d2, 0.0, out=d2)
    dist = np.sqrt(d2)
    dist = 0.5 * (dist + dist.T)
    np.fill_diagonal(dist, 0.0)
    return dist


def euclidean_distance_matrix(model, images) -> np.ndarray:
    """Baseline metric: Euclidean distance between encoder embeddings."""
    return pairwise_euclidean(model.encode(images))


# ----------------------------------------------------------- aggl. core


def _agglomerate(dist, stop_theta=None):
    """Shared merge loop.  Returns (merges, members) where members maps the
    surviving slots to their example lists.

    At each step the minimum complete-linkage pair merges; ties resolve to
    the lexicographically smallest (id_a, id_b).  With ``stop_theta`` the
    loop stops once the next merge distance is >= theta.
    """
    D = _check_square(dist).copy()
    n = D.shape[0]
    np.fill_diagonal(D, np.inf)
    ids = list(range(n))
    members = {i: [i] for i in range(n)}
    alive = [True] * n
    merges = []
    for step in range(n - 1):
        d = D.min()
        if stop_theta is not None and d >= stop_theta:
            break
        cand = np.argwhere(D == d)
        best = None
        for si, sj in cand:
            if si >= sj:
                continue
            a, b = ids[si], ids[sj]
            key = (a, b) if a < b else (b, a)
            if best is None or key < best[0]:
                best = (key, si, sj)
        (a, b), si, sj = best
        merges.append((a, b, float(d)))
        # complete linkage: new cluster's distance is the max of the parents'
        np.maximum(D[si], D[sj], out=D[si])
        D[:, si] = D[si]
        D[si, si] = np.inf
        D[sj, :] = np.inf
        D[:, sj] = np.inf
        ids[si] = n + step
        alive[sj] = False
        members[n + step] = members.pop(a) + members.pop(b)
    live = {ids[s]: members[ids[s]] for s in range(n) if alive[s]}
    return merges, live


def complete_linkage(dist) -> Dendrogram:
    """Full agglomeration of a symmetric distance matrix."""
    D = _check_square(dist)
    if D.shape[0] < 2:
        raise ValueError("complete linkage needs at least 2 examples")
    merges, _ = _agglomerate(D)
    return Dendrogram(n=D.shape[0], merges=tuple(merges))


def _labels_from_members(member_lists, n) -> np.ndarray:
    # contiguous ids in order of each cluster's smallest example index
    ordered = sorted(member_lists, key=min)
    labels = np.empty(n, dtype=np.int64)
    for cid, members in enumerate(ordered):
        labels[members] = cid
    return labels


def cut_dendrogram(dendrogram: Dendrogram, k=None, theta=None) -> np.ndarray:
    """Flatten a dendrogram either to exactly k clusters or at a distance
    threshold (apply all merges with distance < theta)."""
    if (k is None) == (theta is None):
        raise ValueError("specify exactly one of k or theta")
    n = dendrogram.n
    if k is not None and not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    members = {i: [i] for i in range(n)}
    for step, (a, b, d) in enumerate(dendrogram.merges):
        if k is not None:
            if step >= n - k:
                break
        elif d >= theta:
            break
        members[n + step] = members.pop(a) + members.pop(b)
    return _labels_from_members(list(members.values()), n)


def discover(dist, theta) -> ClusterSet:
    """Agglomerate while the next merge distance is below theta; the
    surviving clusters are the discovered hidden classes."""
    if not theta > 0:
        raise ValueError(f"theta must be positive, got {theta}")
    D = _check_square(dist)
    _, live = _agglomerate(D, stop_theta=theta)
    labels = _labels_from_members(list(live.values()), D.shape[0])
    return ClusterSet(labels=labels, k=len(live), theta=float(theta))


def calibrate_theta(model, images, labels, metric="pcn", max_per_class=200,
                    seed=0) -> float:
    """Stopping threshold from validation classes: cluster them to their
    true class count, then take the largest inter-cluster distance."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    v = len(classes)
    if v < 2:
        raise ValueError(f"theta calibration needs at least 2 validation classes, got {v}")
    rng = np.random.default_rng(seed)
    keep = []
    for c in classes:
        idx = np.flatnonzero(labels == c)
        if len(idx) > max_per_class:
            idx = rng.choice(idx, size=max_per_class, replace=False)
        keep.append(np.sort(idx))
    keep = np.concatenate(keep)
    images = np.asarray(images)[keep]
    n = len(images)
    if n <= v:
        raise ValueError(
            f"{n} validation examples cannot produce {v} clusters with merges to spare"
        )
    if metric == "pcn":
        D = pcn_distance_matrix(model, images)
    elif metric == "euclidean":
        D = euclidean_distance_matrix(model, images)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    dend = complete_linkage(D)
    cut = cut_dendrogram(dend, k=v)
    cross = cut[:, None] != cut[None, :]
    return float(D[cross].max())


# ---------------------------------------------------------------- kmeans


def kmeans(embeddings, k, seed=0, max_iters=100) -> ClusterSet:
    """Lloyd's iterations with seeded random-example initialization; an
    empty cluster is reseeded from the point farthest from its centroid."""
    emb = np.asarray(embeddings, dtype=np.float64)
    n = len(emb)
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    rng = np.random.default_rng(seed)
    centroids = emb[rng.choice(n, size=k, replace=False)].copy()
    assign = None
    for _ in range(max_iters):
        d2 = ((emb[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2) \
            if n * k <= 4_000_000 else _chunked_d2(emb, centroids)
        new_assign = d2.argmin(axis=1)
        own = d2[np.arange(n), new_assign]
        counts = np.bincount(new_assign, minlength=k)
        for j in np.flatnonzero(counts == 0):
            far = int(own.argmax())
            centroids[j] = emb[far]
            new_assign[far] = j
            own[far] = 0.0
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            centroids[j] = emb[assign == j].mean(axis=0)
    return ClusterSet(labels=assign, k=k, theta=None)


def _chunked_d2(emb, centroids, chunk=2048):
    n, k = len(emb), len(centroids)
    out = np.empty((n, k))
    csq = (centroids**2).sum(axis=1)
    for lo in range(0, n, chunk):
        x = emb[lo : lo + chunk]
        out[lo : lo + len(x)] = (
            (x**2).sum(axis=1)[:, None] - 2.0 * (x @ centroids.T) + csq[None, :]
        )
    return out


# ---------------------------------------------------------------- export


def write_cluster_set(txt_path, json_path, clusters: ClusterSet, example_ids,
                      true_labels, method):
    example_ids = np.asarray(example_ids)
    true_labels = np.asarray(true_labels)
    with open(txt_path, "w") as f:
        f.write("example_id cluster_id true_label\n")
        for i in range(len(clusters.labels)):
            f.write(f"{example_ids[i]} {clusters.labels[i]} {true_labels[i]}\n")
    summary = {
        "k": int(clusters.k),
        "theta": None if clusters.theta is None else float(clusters.theta),
        "method": method,
    }
    with open(json_path, "w") as f:
        json.dump(summary, f, indent=2)
        f.write("\n")
