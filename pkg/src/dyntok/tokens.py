"""Token sets and the primitives that move features between them.

A ``TokenSet`` keeps, besides features, the stride-4 ``pixel_map`` that says
which token owns every pixel of the stage-1 grid. Merging relabels that map,
upsampling restores it, and rendering reads from it.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import probe
from .clustering import ClusterResult
from .errors import GeometryError, ShapeError
from .tensor import F32, as_tensor, matmul, softmax_rows, strided_conv


@dataclass
class TokenSet:
    features: np.ndarray
    importance: np.ndarray
    pixel_map: np.ndarray
    grid_h: int
    grid_w: int
    stage: int = 0

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def base_grid(self) -> tuple[int, int]:
        return self.pixel_map.shape

    def areas(self) -> np.ndarray:
        """Number of stage-1 pixels owned by each token."""
        return np.bincount(self.pixel_map.ravel(), minlength=self.n)

    def with_features(self, features) -> "TokenSet":
        return replace(self, features=as_tensor(features))

    def validate(self) -> "TokenSet":
        if self.features.ndim != 2:
            raise ShapeError(f"features must be N x C, got {self.features.shape}")
        if self.importance.shape != (self.n,):
            raise ShapeError(f"importance has shape {self.importance.shape} for {self.n} tokens")
        pm = self.pixel_map
        if pm.ndim != 2 or pm.min() < 0 or pm.max() >= self.n:
            raise GeometryError("pixel_map holds an invalid token index")
        if np.any(self.areas() == 0):
            raise GeometryError("some token owns no pixel")
        return self


def grid_tokens(fmap: np.ndarray) -> TokenSet:
    """One token per pixel of a C x H x W map, in row-major order."""
    c, h, w = fmap.shape
    return TokenSet(
        features=np.ascontiguousarray(fmap.reshape(c, h * w).T),
        importance=np.zeros(h * w, dtype=F32),
        pixel_map=np.arange(h * w, dtype=np.int64).reshape(h, w),
        grid_h=h,
        grid_w=w,
        stage=0,
    )


def predict_importance(features, weight, bias) -> np.ndarray:
    """Per-token score from a single linear unit."""
    w = as_tensor(weight).reshape(-1, 1)
    return matmul(features, w)[:, 0] + F32(np.asarray(bias, dtype=F32).reshape(-1)[0])


def _cluster_logsumexp(p: np.ndarray, assignment: np.ndarray, k: int):
    """Per-cluster max, exp(p - max) weights and logsumexp, all float64."""
    p = p.astype(np.float64)
    pmax = np.full(k, -np.inf)
    np.maximum.at(pmax, assignment, p)
    w = np.exp(p - pmax[assignment])
    total = np.bincount(assignment, weights=w, minlength=k)
    return w, total, pmax + np.log(total)


def _cluster_sum(values: np.ndarray, assignment: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((k, values.shape[1]), dtype=np.float64)
    np.add.at(out, assignment, values)
    return out


def merge_tokens(tokens: TokenSet, clusters: ClusterResult) -> TokenSet:
    """Importance-weighted cluster average: y_i = sum(e^p_j x_j) / sum(e^p_j).

    Sums run in float64 with the per-cluster max importance subtracted before
    exponentiation. The merged importance is the logsumexp of the members'.
    """
    if clusters.num_tokens != tokens.n:
        raise ShapeError(f"cluster record covers {clusters.num_tokens} tokens, set has {tokens.n}")
    a = clusters.assignment
    k = clusters.num_clusters
    w, total, lse = _cluster_logsumexp(tokens.importance, a, k)
    merged = _cluster_sum(tokens.features.astype(np.float64) * w[:, None], a, k) / total[:, None]
    return TokenSet(
        features=merged.astype(F32),
        importance=lse.astype(F32),
        pixel_map=a[tokens.pixel_map],
        grid_h=max(1, tokens.grid_h // 2),
        grid_w=max(1, tokens.grid_w // 2),
        stage=tokens.stage + 1,
    )


def biased_attention(q, k, v, bias, heads: int, name: str = "attention") -> np.ndarray:
    """Multi-head softmax(Q K^T / sqrt(d_head) + bias) V.

    ``bias`` is one additive logit per key, shared by every query and head.
    The output projection is left to the caller.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    m, c = q.shape
    n = k.shape[0]
    if k.shape != (n, c) or v.shape[0] != n or v.shape[1] % heads or c % heads:
        raise ShapeError(f"attention shapes q{q.shape} k{k.shape} v{v.shape} heads={heads}")
    bias = np.zeros(n, dtype=F32) if bias is None else as_tensor(bias)
    if bias.shape != (n,):
        raise ShapeError(f"bias has shape {bias.shape} for {n} keys")
    dh = c // heads
    dv = v.shape[1] // heads
    scale = F32(1.0 / np.sqrt(dh))
    keep = probe.wants_weights()
    outs, kept = [], []
    for h in range(heads):
        logits = matmul(q[:, h * dh:(h + 1) * dh], k[:, h * dh:(h + 1) * dh].T) * scale + bias
        weights = softmax_rows(logits)
        outs.append(matmul(weights, v[:, h * dv:(h + 1) * dv]))
        if keep:
            kept.append(weights)
    probe.record(name, m, n, c, heads, np.stack(kept) if keep else None)
    return np.concatenate(outs, axis=1)


def upsample_tokens(merged: TokenSet, clusters: ClusterResult) -> TokenSet:
    """Copy each merged token back onto its pre-merge members."""
    if merged.n != clusters.num_clusters:
        raise ShapeError(f"token set has {merged.n} tokens but the record has {clusters.num_clusters} clusters")
    if clusters.source_pixel_map is None:
        raise GeometryError("cluster record carries no source geometry")
    a = clusters.assignment
    gh, gw = clusters.source_grid
    return TokenSet(
        features=merged.features[a],
        importance=merged.importance[a],
        pixel_map=clusters.source_pixel_map,
        grid_h=gh,
        grid_w=gw,
        stage=clusters.source_stage,
    )


def _cell_factor(tokens: TokenSet, h: int, w: int) -> tuple[int, int]:
    h0, w0 = tokens.base_grid
    if (h, w) == (h0, w0):
        return 1, 1
    if (h, w) == (tokens.grid_h, tokens.grid_w) and h0 % h == 0 and w0 % w == 0:
        return h0 // h, w0 // w
    raise GeometryError(f"cannot render tokens at {h}x{w}; supported grids are {h0}x{w0} and {tokens.grid_h}x{tokens.grid_w}")


def tokens_to_map(tokens: TokenSet, h: int | None = None, w: int | None = None) -> np.ndarray:
    """Render tokens to a C x h x w map.

    Each cell takes the token that owns its centre pixel (for even cell sizes
    the lower-right of the four central pixels). Defaults to the nominal grid.
    """
    h = tokens.grid_h if h is None else h
    w = tokens.grid_w if w is None else w
    fy, fx = _cell_factor(tokens, h, w)
    owners = tokens.pixel_map[fy // 2::fy, fx // 2::fx]
    return np.ascontiguousarray(tokens.features[owners.ravel()].T.reshape(tokens.dim, h, w))


def map_to_tokens(fmap, tokens: TokenSet) -> np.ndarray:
    """Average a map back onto tokens over the stage-1 pixels each token owns.

    A coarse map is first expanded nearest-neighbour to the stage-1 grid, so
    every token receives a value even when it owns no cell centre.
    """
    fmap = as_tensor(fmap)
    c, h, w = fmap.shape
    fy, fx = _cell_factor(tokens, h, w)
    if (fy, fx) != (1, 1):
        fmap = np.repeat(np.repeat(fmap, fy, axis=1), fx, axis=2)
    pixels = fmap.reshape(c, -1).T.astype(np.float64)
    flat = tokens.pixel_map.ravel()
    sums = _cluster_sum(pixels, flat, tokens.n)
    counts = np.bincount(flat, minlength=tokens.n)
    return (sums / counts[:, None]).astype(F32)


def sr_reduce(tokens: TokenSet, ratio: int, weight, bias=None) -> TokenSet:
    """Spatial reduction: render to the nominal grid, conv with kernel = stride = ratio, flatten.

    Returns the reduced key/value source as a grid-shaped TokenSet; each
    reduced token's importance is the mean importance over the stage-1
    pixels its window covers.
    """
    gh, gw = tokens.grid_h, tokens.grid_w
    if ratio < 1 or gh % ratio or gw % ratio:
        raise GeometryError(f"reduction ratio {ratio} does not divide the {gh}x{gw} grid")
    reduced = strided_conv(tokens_to_map(tokens), weight, stride=ratio, padding=0, bias=bias)
    cout, rh, rw = reduced.shape
    h0, w0 = tokens.base_grid
    rows = np.arange(h0) // (h0 // rh)
    cols = np.arange(w0) // (w0 // rw)
    block_map = rows[:, None] * rw + cols[None, :]
    pixel_importance = tokens.importance[tokens.pixel_map].astype(np.float64)
    imp = np.bincount(block_map.ravel(), weights=pixel_importance.ravel(), minlength=rh * rw)
    imp /= np.bincount(block_map.ravel(), minlength=rh * rw)
    return TokenSet(
        features=np.ascontiguousarray(reduced.reshape(cout, rh * rw).T),
        importance=imp.astype(F32),
        pixel_map=block_map.astype(np.int64),
        grid_h=rh,
        grid_w=rw,
        stage=tokens.stage,
    )


def cr_reduce(tokens: TokenSet, assignment, num_clusters: int | None = None,
              weighted: bool = False, final_grid: tuple[int, int] | None = None) -> TokenSet:
    """Clustering reduction onto the final-stage clusters.

    ``assignment`` maps each token of this set to a final cluster. Features
    are the plain member mean, or the importance-weighted average when
    ``weighted`` is set.
    """
    a = np.asarray(assignment, dtype=np.int64)
    if a.shape != (tokens.n,):
        raise ShapeError(f"assignment has shape {a.shape} for {tokens.n} tokens")
    f = int(a.max()) + 1 if num_clusters is None else num_clusters
    counts = np.bincount(a, minlength=f)
    if a.min() < 0 or len(counts) != f or np.any(counts == 0):
        raise GeometryError(f"assignment does not cover every cluster in [0, {f})")
    w, total, lse = _cluster_logsumexp(tokens.importance, a, f)
    if weighted:
        feats = _cluster_sum(tokens.features.astype(np.float64) * w[:, None], a, f) / total[:, None]
    else:
        feats = _cluster_sum(tokens.features.astype(np.float64), a, f) / counts[:, None]
    if final_grid is None:
        h0, w0 = tokens.base_grid
        final_grid = (max(1, h0 // 8), max(1, w0 // 8))
    return TokenSet(
        features=feats.astype(F32),
        importance=lse.astype(F32),
        pixel_map=a[tokens.pixel_map],
        grid_h=final_grid[0],
        grid_w=final_grid[1],
        stage=3,
    )
