"""DPC-kNN token clustering, global and spatially partitioned.

Total orders used for every tie:

* kNN: ascending squared distance, then lower token index; the token itself
  is never its own neighbour (duplicates at distance 0 are).
* density: token ``j`` is denser than ``i`` when ``rho[j] > rho[i]``, or the
  densities are equal and ``j < i``. Exactly one token is densest.
* center selection: descending ``rho * delta``, then lower token index.
* assignment: smallest Euclidean distance, then earlier position in the
  center list. A center is always assigned to itself.

Squared distances are accumulated channel by channel in float32 from
``x_i - x_j``; Euclidean distances are their float32 square roots.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .errors import ClusteringError, ShapeError
from .tensor import F32, as_tensor, check_finite

if TYPE_CHECKING:
    from .tokens import TokenSet

DEFAULT_KNN = 5


@dataclass
class ClusterResult:
    rho: np.ndarray
    delta: np.ndarray
    score: np.ndarray
    centers: np.ndarray
    assignment: np.ndarray
    part_label: np.ndarray
    dist_ops: int
    # geometry of the clustered token set, needed to undo the merge
    source_pixel_map: np.ndarray | None = None
    source_grid: tuple[int, int] | None = None
    source_stage: int | None = None

    @property
    def num_tokens(self) -> int:
        return len(self.assignment)

    @property
    def num_clusters(self) -> int:
        return len(self.centers)


def pairwise_sq_dists(features: np.ndarray) -> np.ndarray:
    x = as_tensor(features)
    n, c = x.shape
    d2 = np.zeros((n, n), dtype=F32)
    for ch in range(c):
        diff = x[:, ch, None] - x[None, :, ch]
        d2 += diff * diff
    return d2


def _features(features) -> np.ndarray:
    x = as_tensor(features)
    if x.ndim != 2:
        raise ShapeError(f"expected N x C features, got shape {x.shape}")
    return check_finite(x, "features")


def local_density(features, k: int, d2: np.ndarray | None = None) -> np.ndarray:
    """rho_i = exp(-(1/k) * sum of squared distances to the k nearest tokens)."""
    x = _features(features)
    n = x.shape[0]
    if not 1 <= k <= n - 1:
        raise ClusteringError(f"k={k} out of range [1, {n - 1}]")
    if d2 is None:
        d2 = pairwise_sq_dists(x)
    masked = d2.copy()
    np.fill_diagonal(masked, np.inf)
    nearest = np.sort(masked, axis=1)[:, :k]
    total = np.add.accumulate(nearest, axis=1, dtype=F32)[:, -1]
    return np.exp(-(total / F32(k)))


def density_order(rho: np.ndarray) -> np.ndarray:
    """Token indices from densest to sparsest under the documented tie rule."""
    rho = np.asarray(rho, dtype=F32)
    return np.lexsort((np.arange(len(rho)), -rho))


def distance_indicator(features, rho, d2: np.ndarray | None = None) -> np.ndarray:
    """delta_i = distance to the nearest denser token, or the farthest token for the densest."""
    x = _features(features)
    n = x.shape[0]
    if n < 2:
        raise ClusteringError("distance indicator needs at least 2 tokens")
    if len(rho) != n:
        raise ShapeError(f"rho has {len(rho)} entries for {n} tokens")
    if d2 is None:
        d2 = pairwise_sq_dists(x)
    dist = np.sqrt(d2)
    rank = np.empty(n, dtype=np.int64)
    rank[density_order(rho)] = np.arange(n)
    denser = rank[None, :] < rank[:, None]
    delta = np.where(denser, dist, np.inf).min(axis=1)
    top = int(np.argmin(rank))
    delta[top] = dist[top].max()
    return delta.astype(F32)


def select_centers(rho, delta, num_clusters: int) -> np.ndarray:
    score = np.asarray(rho, dtype=F32) * np.asarray(delta, dtype=F32)
    n = len(score)
    if not 1 <= num_clusters <= n:
        raise ClusteringError(f"K={num_clusters} out of range [1, {n}]")
    order = np.lexsort((np.arange(n), -score))
    return order[:num_clusters].astype(np.int64)


def assign_to_centers(features, centers, d2: np.ndarray | None = None) -> np.ndarray:
    x = _features(features)
    centers = np.asarray(centers, dtype=np.int64)
    if len(centers) == 0 or len(np.unique(centers)) != len(centers):
        raise ClusteringError("centers must be a non-empty list of distinct indices")
    if d2 is None:
        d2 = np.zeros((x.shape[0], len(centers)), dtype=F32)
        for ch in range(x.shape[1]):
            diff = x[:, ch, None] - x[None, centers, ch]
            d2 += diff * diff
    else:
        d2 = d2[:, centers]
    assignment = np.argmin(np.sqrt(d2), axis=1).astype(np.int64)
    assignment[centers] = np.arange(len(centers))
    return assignment


def cluster_global(features, num_clusters: int, k: int = DEFAULT_KNN) -> ClusterResult:
    """DPC-kNN over all tokens at once; costs N*N*C distance MACs."""
    x = _features(features)
    n, c = x.shape
    if not 1 <= num_clusters <= n:
        raise ClusteringError(f"K={num_clusters} out of range [1, {n}]")
    d2 = pairwise_sq_dists(x)
    rho = local_density(x, k, d2)
    delta = distance_indicator(x, rho, d2)
    centers = select_centers(rho, delta, num_clusters)
    return ClusterResult(
        rho=rho,
        delta=delta,
        score=rho * delta,
        centers=centers,
        assignment=assign_to_centers(x, centers, d2),
        part_label=np.zeros(n, dtype=np.int64),
        dist_ops=n * n * c,
    )


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def part_labels(pixel_map: np.ndarray, num_tokens: int, parts: int) -> np.ndarray:
    """Part index of each token's pixel centroid on a sqrt(P) x sqrt(P) grid.

    Integer arithmetic only: with pixel centres at r + 0.5, the part row is
    floor(sum(2r + 1) * side / (2 * H0 * count)).
    """
    side = math.isqrt(parts)
    if parts < 1 or side * side != parts:
        raise ClusteringError(f"part count {parts} is not a perfect square")
    h0, w0 = pixel_map.shape
    flat = pixel_map.ravel()
    rows, cols = np.divmod(np.arange(flat.size, dtype=np.int64), w0)
    count = np.bincount(flat, minlength=num_tokens).astype(np.int64)
    if np.any(count == 0):
        raise ClusteringError("every token must own at least one pixel")
    sum_r = np.zeros(num_tokens, dtype=np.int64)
    sum_c = np.zeros(num_tokens, dtype=np.int64)
    np.add.at(sum_r, flat, 2 * rows + 1)
    np.add.at(sum_c, flat, 2 * cols + 1)
    prow = np.minimum(sum_r * side // (2 * h0 * count), side - 1)
    pcol = np.minimum(sum_c * side // (2 * w0 * count), side - 1)
    return prow * side + pcol


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("TCF_THREADS", "0") or 0))
    except ValueError:
        return 1


def cluster_local(tokens: "TokenSet", parts: int, ratio: float, k: int = DEFAULT_KNN) -> ClusterResult:
    """Cluster each spatial part independently and renumber clusters part-major.

    Part p receives ``max(1, round(N_p * ratio))`` clusters and the kNN size
    is clamped to ``N_p - 1``. ``TCF_THREADS`` > 1 processes parts on a
    thread pool; results do not depend on scheduling.
    """
    x = _features(tokens.features)
    n = x.shape[0]
    if not 0 < ratio <= 1:
        raise ClusteringError(f"cluster ratio {ratio} outside (0, 1]")
    labels = part_labels(tokens.pixel_map, n, parts)
    members = [np.flatnonzero(labels == p) for p in range(parts)]
    for p, idx in enumerate(members):
        if len(idx) == 0:
            raise ClusteringError(f"part {p} is empty")
    for p, idx in enumerate(members):
        if len(idx) < 2:
            raise ClusteringError(f"part {p} holds a single token; at least 2 are required")

    def run(idx):
        kp = max(1, round_half_up(len(idx) * ratio))
        return cluster_global(x[idx], kp, min(k, len(idx) - 1))

    workers = min(_worker_count(), parts)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, members))
    else:
        results = [run(idx) for idx in members]

    rho = np.empty(n, dtype=F32)
    delta = np.empty(n, dtype=F32)
    score = np.empty(n, dtype=F32)
    assignment = np.empty(n, dtype=np.int64)
    centers = []
    offset = 0
    for idx, sub in zip(members, results):
        rho[idx] = sub.rho
        delta[idx] = sub.delta
        score[idx] = sub.score
        assignment[idx] = sub.assignment + offset
        centers.append(idx[sub.centers])
        offset += sub.num_clusters
    return ClusterResult(
        rho=rho,
        delta=delta,
        score=score,
        centers=np.concatenate(centers).astype(np.int64),
        assignment=assignment,
        part_label=labels,
        dist_ops=sum(r.dist_ops for r in results),
        source_pixel_map=tokens.pixel_map,
        source_grid=(tokens.grid_h, tokens.grid_w),
        source_stage=tokens.stage,
    )
