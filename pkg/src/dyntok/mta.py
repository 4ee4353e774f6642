"""Multi-stage token aggregation from the deepest stage back to stride 4."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import probe
from .backbone import ModelConfig, TokenPyramid, transformer_block
from .errors import GeometryError, ShapeError
from .tensor import linear
from .tokens import TokenSet, tokens_to_map, upsample_tokens


@dataclass
class ComposedAssignment:
    """maps[s][t] = final-stage cluster holding stage-s token t."""

    maps: list
    num_final: int


@dataclass
class FeaturePyramid:
    levels: list                                   # C x H/4 x W/4 ... C x H/32 x W/32
    tokens: list = field(default_factory=list)     # aggregated TokenSet per stage
    kv_counts: list = field(default_factory=list)  # key/value tokens per block, in execution order

    @property
    def shapes(self) -> list[tuple]:
        return [lvl.shape for lvl in self.levels]


def compose_assignments(pyramid: TokenPyramid) -> ComposedAssignment:
    if len(pyramid.clusters) != 3 or len(pyramid.stages) != 4:
        raise GeometryError("token pyramid is missing stage or clustering records")
    final = pyramid.stages[3].n
    maps = [None, None, None, np.arange(final, dtype=np.int64)]
    for s in (2, 1, 0):
        maps[s] = maps[s + 1][pyramid.clusters[s].assignment]
    return ComposedAssignment(maps, final)


def aggregation_step(deep: TokenSet, record, lateral: TokenSet, weights, prefix: str, heads: int,
                     mode: str, sr_ratio: int = 1, composed=None, num_final=None,
                     final_grid=None, weighted=False) -> TokenSet:
    """Upsample through the cluster record, add the lateral tokens, run one block."""
    up = upsample_tokens(deep, record)
    if up.n != lateral.n:
        raise ShapeError(f"upsampled {up.n} tokens but the lateral set has {lateral.n}")
    summed = lateral.with_features(up.features + lateral.features)
    return transformer_block(summed, weights, prefix, heads, mode, sr_ratio,
                             composed, num_final, final_grid, weighted)


def mta_forward(pyramid: TokenPyramid, config: ModelConfig, weights, variant: str = "cr") -> FeaturePyramid:
    if variant not in ("sr", "cr"):
        raise ValueError(f"unknown MTA variant {variant!r}")
    composed = compose_assignments(pyramid)
    final = pyramid.stages[3]
    final_grid = (final.grid_h, final.grid_w)
    laterals = [
        t.with_features(linear(t.features, weights[f"mta.lateral{s}.weight"], weights[f"mta.lateral{s}.bias"]))
        for s, t in enumerate(pyramid.stages)
    ]
    levels = [None] * 4
    outs = [None] * 4
    current = laterals[3]
    outs[3] = current
    levels[3] = tokens_to_map(current)
    with probe.AttentionProbe() as local:
        for s in (2, 1, 0):
            current = aggregation_step(
                current, pyramid.clusters[s], laterals[s], weights, f"mta.block{s}", config.mta_heads,
                variant, config.stages[s].sr_ratio, composed.maps[s], composed.num_final,
                final_grid, config.cr_weighted)
            outs[s] = current
            levels[s] = tokens_to_map(current)
    return FeaturePyramid(levels, outs, [e.keys for e in local.events])
