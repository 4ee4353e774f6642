"""Four-stage token-clustering backbone over deterministic fixture weights.

Linear weights are stored as [in, out]; conv weights as [out, in, k, k].
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .clustering import DEFAULT_KNN, ClusterResult, cluster_local, round_half_up
from .errors import FormatError, GeometryError, MissingWeightsError
from .tensor import (F32, SplitMix64, as_tensor, depthwise_conv3x3, gelu, layer_norm,
                     linear, seeded_normal, strided_conv)
from .tokens import (TokenSet, biased_attention, cr_reduce, grid_tokens, map_to_tokens,
                     merge_tokens, predict_importance, sr_reduce, tokens_to_map)

LN_EPS = 1e-5


@dataclass(frozen=True)
class StageConfig:
    dim: int
    heads: int
    blocks: int
    sr_ratio: int
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads:
            raise FormatError(f"stage dim {self.dim} is not divisible by {self.heads} heads")
        if self.blocks < 0 or self.sr_ratio < 1 or self.mlp_ratio < 1:
            raise FormatError("blocks, sr_ratio and mlp_ratio must be positive")


TINY_STAGES = (
    StageConfig(32, 1, 2, 8),
    StageConfig(64, 2, 2, 4),
    StageConfig(160, 5, 2, 2),
    StageConfig(256, 8, 2, 1),
)


@dataclass(frozen=True)
class ModelConfig:
    stages: tuple = TINY_STAGES
    ctm_parts: tuple = (16, 4, 1)
    cluster_ratio: float = 0.25
    knn_k: int = DEFAULT_KNN
    num_classes: int = 1000
    seed: int = 0
    mta_dim: int = 64
    mta_heads: int = 1
    ctm_kv_reduction: bool = False
    cr_weighted: bool = False

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(
            s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.stages))
        object.__setattr__(self, "ctm_parts", tuple(int(p) for p in self.ctm_parts))
        if len(self.stages) != 4 or len(self.ctm_parts) != 3:
            raise FormatError("config needs exactly 4 stages and 3 CTM part counts")
        for p in self.ctm_parts:
            if p < 1 or math.isqrt(p) ** 2 != p:
                raise FormatError(f"CTM part count {p} is not a perfect square")
        if any(a < b for a, b in zip(self.ctm_parts, self.ctm_parts[1:])):
            raise FormatError("CTM part counts must be non-increasing")
        if not 0 < self.cluster_ratio <= 1:
            raise FormatError("cluster_ratio must lie in (0, 1]")
        if self.knn_k < 1 or self.num_classes < 1:
            raise FormatError("knn_k and num_classes must be positive")
        if self.mta_dim % self.mta_heads:
            raise FormatError("mta_dim must be divisible by mta_heads")

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise FormatError(f"unknown config fields: {', '.join(sorted(unknown))}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise FormatError(f"bad config: {exc}") from None

    @classmethod
    def from_json(cls, path) -> "ModelConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [asdict(s) for s in self.stages]
        d["ctm_parts"] = list(self.ctm_parts)
        return d

    @property
    def dims(self) -> list[int]:
        return [s.dim for s in self.stages]


# --- weight layout ---------------------------------------------------------

def _linear_spec(name, fan_in, fan_out):
    return [(f"{name}.weight", (fan_in, fan_out), "normal"), (f"{name}.bias", (fan_out,), "zeros")]


def _norm_spec(name, dim):
    return [(f"{name}.weight", (dim,), "ones"), (f"{name}.bias", (dim,), "zeros")]


def _block_spec(prefix, dim, mlp_ratio, sr_ratios):
    spec = _norm_spec(f"{prefix}.norm1", dim)
    for part in ("q", "k", "v"):
        spec += _linear_spec(f"{prefix}.attn.{part}", dim, dim)
    for tag, r in sr_ratios:
        spec += [(f"{prefix}.attn.sr{tag}.weight", (dim, dim, r, r), "normal"),
                 (f"{prefix}.attn.sr{tag}.bias", (dim,), "zeros")]
    spec += _linear_spec(f"{prefix}.attn.proj", dim, dim)
    spec += [(f"{prefix}.dwconv.weight", (dim, 3, 3), "normal"), (f"{prefix}.dwconv.bias", (dim,), "zeros")]
    spec += _norm_spec(f"{prefix}.norm2", dim)
    spec += _linear_spec(f"{prefix}.mlp.fc1", dim, dim * mlp_ratio)
    spec += _linear_spec(f"{prefix}.mlp.fc2", dim * mlp_ratio, dim)
    return spec


def weight_spec(config: ModelConfig) -> list[tuple[str, tuple, str]]:
    """Every tensor the model reads, in initialization order: (name, shape, init)."""
    dims = config.dims
    c_half = max(1, dims[0] // 2)
    spec = [("stem.conv1.weight", (c_half, 3, 3, 3), "normal"), ("stem.conv1.bias", (c_half,), "zeros")]
    spec += _norm_spec("stem.norm1", c_half)
    spec += [("stem.conv2.weight", (dims[0], c_half, 3, 3), "normal"), ("stem.conv2.bias", (dims[0],), "zeros")]
    spec += _norm_spec("stem.norm2", dims[0])
    for s, st in enumerate(config.stages):
        if s > 0:
            c_in, c_out = dims[s - 1], st.dim
            pre = f"ctm{s - 1}"
            spec += _linear_spec(f"{pre}.score", c_in, 1)
            spec += _linear_spec(f"{pre}.proj", c_in, c_out)
            spec += _norm_spec(f"{pre}.norm_q", c_out)
            spec += _norm_spec(f"{pre}.norm_kv", c_in)
            if config.ctm_kv_reduction:
                r = config.stages[s - 1].sr_ratio
                spec += [(f"{pre}.attn.sr.weight", (c_in, c_in, r, r), "normal"),
                         (f"{pre}.attn.sr.bias", (c_in,), "zeros")]
            spec += _linear_spec(f"{pre}.attn.q", c_out, c_out)
            spec += _linear_spec(f"{pre}.attn.k", c_in, c_out)
            spec += _linear_spec(f"{pre}.attn.v", c_in, c_out)
            spec += _linear_spec(f"{pre}.attn.proj", c_out, c_out)
            spec += _norm_spec(f"{pre}.norm2", c_out)
            spec += _linear_spec(f"{pre}.mlp.fc1", c_out, c_out * st.mlp_ratio)
            spec += _linear_spec(f"{pre}.mlp.fc2", c_out * st.mlp_ratio, c_out)
        for b in range(st.blocks):
            spec += _block_spec(f"stage{s}.block{b}", st.dim, st.mlp_ratio, [("", st.sr_ratio)])
    d = config.mta_dim
    for s in range(4):
        spec += _linear_spec(f"mta.lateral{s}", dims[s], d)
    for s in range(3):
        st = config.stages[s]
        spec += _block_spec(f"mta.block{s}", d, st.mlp_ratio, [("", st.sr_ratio)])
    spec += _norm_spec("head.norm", dims[3])
    spec += _linear_spec("head.fc", dims[3], config.num_classes)
    return spec


def init_weights(config: ModelConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    """Fixture weights: N(0, 1/fan_in) for matrices and kernels, ones/zeros for norms and biases.

    A single splitmix64 stream is consumed tensor by tensor in
    ``weight_spec`` order.
    """
    rng = SplitMix64(config.seed if seed is None else seed)
    weights = {}
    for name, shape, init in weight_spec(config):
        if init == "ones":
            weights[name] = np.ones(shape, dtype=F32)
        elif init == "zeros":
            weights[name] = np.zeros(shape, dtype=F32)
        else:
            fan_in = shape[0] if len(shape) == 2 else math.prod(shape[1:])
            weights[name] = seeded_normal(rng, shape, 1.0 / math.sqrt(fan_in))
    return weights


def check_weights(weights: dict, config: ModelConfig) -> None:
    missing = []
    for name, shape, _ in weight_spec(config):
        if name not in weights:
            missing.append(name)
        elif tuple(weights[name].shape) != shape:
            raise FormatError(f"weight {name} has shape {tuple(weights[name].shape)}, expected {shape}")
    if missing:
        raise MissingWeightsError(missing)


# --- layers ----------------------------------------------------------------

def _ln(x, weights, name):
    return layer_norm(x, weights[f"{name}.weight"], weights[f"{name}.bias"], LN_EPS)


def _lin(x, weights, name):
    return linear(x, weights[f"{name}.weight"], weights[f"{name}.bias"])


def _mlp(x, weights, prefix):
    h = _ln(x, weights, f"{prefix}.norm2")
    return x + _lin(gelu(_lin(h, weights, f"{prefix}.mlp.fc1")), weights, f"{prefix}.mlp.fc2")


def _channel_norm(fmap, weights, name):
    c, h, w = fmap.shape
    rows = layer_norm(fmap.reshape(c, h * w).T, weights[f"{name}.weight"], weights[f"{name}.bias"], LN_EPS)
    return np.ascontiguousarray(rows.T.reshape(c, h, w))


def stem(image, weights) -> TokenSet:
    """Two overlapping stride-2 3x3 convs, each followed by a channel layer norm."""
    image = as_tensor(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise GeometryError(f"expected a 3 x H x W image, got {image.shape}")
    _, h, w = image.shape
    if h % 32 or w % 32 or h == 0 or w == 0:
        raise GeometryError(f"image size {h}x{w} is not a multiple of 32")
    x = strided_conv(image, weights["stem.conv1.weight"], 2, 1, weights["stem.conv1.bias"])
    x = gelu(_channel_norm(x, weights, "stem.norm1"))
    x = strided_conv(x, weights["stem.conv2.weight"], 2, 1, weights["stem.conv2.bias"])
    return grid_tokens(_channel_norm(x, weights, "stem.norm2"))


def transformer_block(tokens: TokenSet, weights, prefix: str, heads: int, mode: str = "sr",
                      sr_ratio: int = 1, composed_assignment=None, num_final: int | None = None,
                      final_grid=None, weighted: bool = False) -> TokenSet:
    """Pre-norm attention over reduced keys, a depthwise-conv branch, then a pre-norm MLP.

    ``mode`` selects the key/value reduction: "sr" renders to the nominal grid
    and applies a strided conv; "cr" merges by ``composed_assignment``.
    Importance and pixel_map pass through untouched.
    """
    x = tokens.features
    h = _ln(x, weights, f"{prefix}.norm1")
    normed = tokens.with_features(h)
    if mode == "sr":
        kv = sr_reduce(normed, sr_ratio, weights[f"{prefix}.attn.sr.weight"], weights[f"{prefix}.attn.sr.bias"])
    elif mode == "cr":
        if composed_assignment is None:
            raise ValueError("CR mode needs a composed assignment")
        kv = cr_reduce(normed, composed_assignment, num_final, weighted, final_grid)
    else:
        raise ValueError(f"unknown reduction mode {mode!r}")
    q = _lin(h, weights, f"{prefix}.attn.q")
    k = _lin(kv.features, weights, f"{prefix}.attn.k")
    v = _lin(kv.features, weights, f"{prefix}.attn.v")
    attn = biased_attention(q, k, v, None, heads, name=prefix)
    x = x + _lin(attn, weights, f"{prefix}.attn.proj")

    fmap = tokens_to_map(tokens.with_features(x))
    fmap = depthwise_conv3x3(fmap, weights[f"{prefix}.dwconv.weight"], weights[f"{prefix}.dwconv.bias"])
    x = x + map_to_tokens(fmap, tokens)

    return tokens.with_features(_mlp(x, weights, prefix))


def ctm_module(tokens: TokenSet, parts: int, weights, index: int, config: ModelConfig):
    """Score, cluster per part, merge, then let merged tokens attend to the originals.

    The merged tokens are projected to the next stage's width and act as
    queries; the original tokens are keys and values, with their importance
    added to every attention logit.
    """
    pre = f"ctm{index}"
    nxt = config.stages[index + 1]
    x = tokens.features
    scored = replace(tokens, importance=predict_importance(x, weights[f"{pre}.score.weight"],
                                                           weights[f"{pre}.score.bias"]))
    k = min(config.knn_k, max(1, tokens.n - 1))
    clusters = cluster_local(scored, parts, config.cluster_ratio, k)
    merged = merge_tokens(scored, clusters)

    y = _lin(merged.features, weights, f"{pre}.proj")
    hq = _ln(y, weights, f"{pre}.norm_q")
    hkv = _ln(x, weights, f"{pre}.norm_kv")
    if config.ctm_kv_reduction:
        src = sr_reduce(scored.with_features(hkv), config.stages[index].sr_ratio,
                        weights[f"{pre}.attn.sr.weight"], weights[f"{pre}.attn.sr.bias"])
        kv_feats, bias = src.features, src.importance
    else:
        kv_feats, bias = hkv, scored.importance
    q = _lin(hq, weights, f"{pre}.attn.q")
    kk = _lin(kv_feats, weights, f"{pre}.attn.k")
    v = _lin(kv_feats, weights, f"{pre}.attn.v")
    y = y + _lin(biased_attention(q, kk, v, bias, nxt.heads, name=pre), weights, f"{pre}.attn.proj")
    y = _mlp(y, weights, pre)
    return merged.with_features(y), clusters


@dataclass
class TokenPyramid:
    stages: list = field(default_factory=list)      # TokenSet after each stage
    clusters: list = field(default_factory=list)    # ClusterResult of each CTM
    stem_grid: tuple = (0, 0)
    image_size: tuple = (0, 0)

    @property
    def token_counts(self) -> list[int]:
        return [t.n for t in self.stages]

    def digest(self) -> str:
        h = hashlib.sha256()
        for t in self.stages:
            for arr in (t.features, t.importance, t.pixel_map):
                h.update(np.ascontiguousarray(arr).tobytes())
        for c in self.clusters:
            for arr in (c.rho, c.delta, c.centers, c.assignment, c.part_label):
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def forward(image, config: ModelConfig, weights) -> TokenPyramid:
    """stem -> stage 1 -> CTM -> stage 2 -> CTM -> stage 3 -> CTM -> stage 4."""
    check_weights(weights, config)
    tokens = stem(image, weights)
    pyramid = TokenPyramid(stem_grid=tokens.base_grid, image_size=tuple(np.shape(image)[1:]))
    for s, st in enumerate(config.stages):
        if s > 0:
            tokens, clusters = ctm_module(tokens, config.ctm_parts[s - 1], weights, s - 1, config)
            pyramid.clusters.append(clusters)
        for b in range(st.blocks):
            tokens = transformer_block(tokens, weights, f"stage{s}.block{b}", st.heads, "sr", st.sr_ratio)
        pyramid.stages.append(tokens)
    return pyramid


def classify(pyramid: TokenPyramid, weights) -> np.ndarray:
    """Layer norm, mean over final-stage tokens, linear head."""
    h = _ln(pyramid.stages[-1].features, weights, "head.norm")
    pooled = h.astype(np.float64).mean(axis=0).astype(F32)
    return _lin(pooled[None, :], weights, "head.fc")[0]


# --- analytic cost model ---------------------------------------------------

def _balanced(n: int, parts: int) -> list[int]:
    q, r = divmod(n, parts)
    return [q + (1 if i < r else 0) for i in range(parts)]


def complexity_plan(config: ModelConfig, height: int, width: int, parts=None) -> dict:
    """Distance and attention MAC counts assuming evenly populated parts.

    Stage-1 parts are exact pixel blocks; deeper parts are balanced whenever
    every earlier part count is a multiple of the later one, which holds for
    power-of-four schedules such as (16, 4, 1).
    """
    if height % 32 or width % 32:
        raise GeometryError(f"image size {height}x{width} is not a multiple of 32")
    parts = tuple(config.ctm_parts if parts is None else parts)
    h0, w0 = height // 4, width // 4
    n = h0 * w0
    counts, ctms = [n], []
    attention = 0
    for s, st in enumerate(config.stages):
        gh, gw = h0 >> s, w0 >> s
        if s > 0:
            c_in = config.stages[s - 1].dim
            sizes = _balanced(counts[-1], parts[s - 1])
            dist_ops = sum(p * p * c_in for p in sizes)
            n_out = sum(max(1, round_half_up(p * config.cluster_ratio)) for p in sizes)
            kv = counts[-1]
            if config.ctm_kv_reduction:
                r = config.stages[s - 1].sr_ratio
                kv = ((h0 >> (s - 1)) // r) * ((w0 >> (s - 1)) // r)
            ctm_macs = 2 * n_out * kv * st.dim
            ctms.append({"index": s - 1, "parts": parts[s - 1], "tokens_in": counts[-1],
                         "tokens_out": n_out, "dist_ops": dist_ops, "attention_macs": ctm_macs})
            attention += ctm_macs
            counts.append(n_out)
        kv = (gh // st.sr_ratio) * (gw // st.sr_ratio)
        attention += st.blocks * 2 * counts[-1] * kv * st.dim
    return {
        "parts": list(parts),
        "token_counts": counts,
        "ctm": ctms,
        "dist_ops": sum(c["dist_ops"] for c in ctms),
        "attention_macs": attention,
    }
