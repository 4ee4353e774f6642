"""Dynamic vision tokens: DPC-kNN clustering, token merging and aggregation."""

from .backbone import (ModelConfig, StageConfig, TokenPyramid, classify, complexity_plan, ctm_module,
                       forward, init_weights, stem, transformer_block)
from .clustering import (ClusterResult, assign_to_centers, cluster_global, cluster_local,
                         distance_indicator, local_density, select_centers)
from .mta import ComposedAssignment, FeaturePyramid, aggregation_step, compose_assignments, mta_forward
from .oracle import oracle_cluster
from .tokens import (TokenSet, biased_attention, cr_reduce, map_to_tokens, merge_tokens,
                     predict_importance, sr_reduce, tokens_to_map, upsample_tokens)

__version__ = "0.1.0"
