"""Brute-force DPC-kNN reference.

Written as a naive re-derivation for cross-checking ``dyntok.clustering``:
a materialized N x N x C difference tensor, per-row Python sorts and
explicit loops. It shares no code with the fast path; only the float32
arithmetic (channel-ordered squared sums, ascending kNN sums) is the same
by construction, so both routes agree exactly.
"""

from __future__ import annotations

import numpy as np

from .clustering import ClusterResult
from .errors import ClusteringError


def _square_distance_matrix(x):
    diff = x[:, None, :] - x[None, :, :]
    sq = diff * diff
    d2 = sq[:, :, 0].copy()
    for ch in range(1, x.shape[1]):
        d2 = d2 + sq[:, :, ch]
    return d2


def oracle_cluster(features, num_clusters, k):
    x = np.asarray(features, dtype=np.float32)
    n, c = x.shape
    if n < 2:
        raise ClusteringError("need at least 2 tokens")
    if not 1 <= k <= n - 1:
        raise ClusteringError(f"k={k} out of range")
    if not 1 <= num_clusters <= n:
        raise ClusteringError(f"K={num_clusters} out of range")

    d2 = _square_distance_matrix(x)
    dist = np.sqrt(d2)
    d2_rows = d2.tolist()
    dist_rows = dist.tolist()

    # density
    knn_sums = np.zeros(n, dtype=np.float32)
    for i in range(n):
        neighbours = sorted((d2_rows[i][j], j) for j in range(n) if j != i)[:k]
        acc = np.float32(0.0)
        for value, _ in neighbours:
            acc = np.float32(acc + np.float32(value))
        knn_sums[i] = acc
    rho = np.exp(-(knn_sums / np.float32(k)))

    # distance indicator
    rho_list = rho.tolist()

    def is_denser(j, i):
        return rho_list[j] > rho_list[i] or (rho_list[j] == rho_list[i] and j < i)

    delta = np.zeros(n, dtype=np.float32)
    for i in range(n):
        higher = [dist_rows[i][j] for j in range(n) if j != i and is_denser(j, i)]
        if higher:
            delta[i] = min(higher)
        else:
            delta[i] = max(dist_rows[i])

    # centers
    score = rho * delta
    score_list = score.tolist()
    ranked = sorted(range(n), key=lambda i: (-score_list[i], i))
    centers = ranked[:num_clusters]

    # assignment
    assignment = np.zeros(n, dtype=np.int64)
    for i in range(n):
        best = 0
        for pos in range(1, len(centers)):
            if dist_rows[i][centers[pos]] < dist_rows[i][centers[best]]:
                best = pos
        assignment[i] = best
    for pos, centre in enumerate(centers):
        assignment[centre] = pos

    return ClusterResult(
        rho=rho,
        delta=delta,
        score=score,
        centers=np.array(centers, dtype=np.int64),
        assignment=assignment,
        part_label=np.zeros(n, dtype=np.int64),
        dist_ops=n * n * c,
    )
