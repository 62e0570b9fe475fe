"""Transformer fusion classifier.

Token layout is (B, n, C). A *fusion layer* turns an n-token sequence into
one C-vector. Two variants exist:

``FuseBeforeAttention``
    Per head, a learned m-vector mixes the m query rows into one query
    before the dot product with the keys. The resulting n logits go through
    batch normalization (one feature per head, statistics over batch and
    tokens) and a softmax, and weight the value rows. Heads are concatenated.

``FuseAfterAttention``
    Ordinary multi-head attention over all tokens, followed by a learned
    n-vector that mixes the attended tokens into one.

Both start from uniform mixing weights (1/m and 1/n).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from .core import DimensionError, LayerNorm, Linear, MLP, Module, Parameter, Tensor, UsageError, concat, stack
from .core import functional as F
from .core.nn import BatchNorm
from .core.tensor import get_default_dtype

VARIANTS = ("before", "after")


@dataclass
class FusionConfig:
    embed_dim: int = 256
    heads: int = 8
    attn_depth: int = 2
    mlp_ratio: float = 4.0
    num_classes: int = 3
    fusion_variant: str = "before"
    patch_size: int = 18
    region_size: int = 90
    in_channels: int = 4
    positional: bool = True

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by {self.heads} heads")
        if self.fusion_variant not in VARIANTS:
            raise ValueError(f"fusion_variant must be one of {VARIANTS}, got {self.fusion_variant!r}")
        if self.region_size % self.patch_size:
            raise ValueError(f"region size {self.region_size} is not divisible by patch size {self.patch_size}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def num_patches(self) -> int:
        return (self.region_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_size**2


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, c = x.shape
    return x.reshape(b, n, heads, c // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, c = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * c)


class PatchEmbed(Module):
    """Shared linear map of flattened patches to C dims, plus a learned position table."""

    def __init__(self, patch_dim: int, embed_dim: int, num_tokens: int, rng: np.random.Generator,
                 positional: bool = True):
        self.proj = Linear(patch_dim, embed_dim, rng, gain=1.0)
        self.pos = Parameter((0.02 * rng.standard_normal((num_tokens, embed_dim))).astype(get_default_dtype()))
        self.positional = positional
        self.patch_dim = patch_dim

    def forward(self, patches: Tensor) -> Tensor:
        """(B, N, ...) patches -> (B, N, C) tokens."""
        b, n = patches.shape[:2]
        flat = patches.reshape(b, n, -1)
        if flat.shape[-1] != self.patch_dim:
            raise DimensionError(f"patches of {flat.shape[-1]} values do not match patch_dim {self.patch_dim}")
        if n != self.pos.shape[0]:
            raise DimensionError(f"expected {self.pos.shape[0]} patches, got {n}")
        tokens = self.proj(flat)
        return tokens + self.pos if self.positional else tokens


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng, gain=1.0)
        self.proj = Linear(dim, dim, rng, gain=1.0)
        self.last_weights: Optional[np.ndarray] = None

    def forward(self, x: Tensor) -> Tensor:
        dim = x.shape[-1]
        qkv = self.qkv(x)
        q, k, v = (_split_heads(qkv[..., i * dim:(i + 1) * dim], self.heads) for i in range(3))
        scores = q @ k.transpose(0, 1, 3, 2) * (1.0 / np.sqrt(dim // self.heads))
        weights = F.softmax(scores, axis=-1)
        self.last_weights = weights.data
        return self.proj(_merge_heads(weights @ v))


class TransformerLayer(Module):
    """Pre-norm layer: x + MHA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, int(dim * mlp_ratio), rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class AttnBlock(Module):
    def __init__(self, dim: int, heads: int, depth: int, mlp_ratio: float, rng: np.random.Generator):
        self.layers = [TransformerLayer(dim, heads, mlp_ratio, rng) for _ in range(depth)]

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] < 1:
            raise UsageError("attention block needs a non-empty sequence")
        for layer in self.layers:
            x = layer(x)
        return x


class _FusionLayer(Module):
    def __init__(self, dim: int, heads: int, tokens: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.tokens = tokens
        self.q = Linear(dim, dim, rng, gain=1.0)
        self.k = Linear(dim, dim, rng, gain=1.0)
        self.v = Linear(dim, dim, rng, gain=1.0)
        self.last_weights: Optional[np.ndarray] = None

    def _check(self, x: Tensor) -> None:
        if x.ndim != 3 or x.shape[1] < 1:
            raise UsageError(f"fusion needs a non-empty (B, n, C) sequence, got shape {x.shape}")
        if x.shape[1] != self.tokens:
            raise DimensionError(f"fusion layer built for {self.tokens} tokens, got {x.shape[1]}")

    def project(self, x: Tensor):
        return (_split_heads(self.q(x), self.heads), _split_heads(self.k(x), self.heads),
                _split_heads(self.v(x), self.heads))


class FuseBeforeAttention(_FusionLayer):
    """Query mixing, then one score vector per head (see module docstring)."""

    def __init__(self, dim: int, heads: int, tokens: int, rng: np.random.Generator):
        super().__init__(dim, heads, tokens, rng)
        self.lin = Parameter(np.full((heads, tokens), 1.0 / tokens, dtype=get_default_dtype()))
        self.bn = BatchNorm(heads)

    def forward(self, x: Tensor) -> Tensor:
        self._check(x)
        b, n, _ = x.shape
        q, k, v = self.project(x)  # (B, h, n, c)
        query = self.lin.reshape(1, self.heads, 1, n) @ q  # (B, h, 1, c)
        raw = (query @ k.transpose(0, 1, 3, 2)).reshape(b, self.heads, n)
        weights = F.softmax(self.bn(raw), axis=-1)
        self.last_weights = weights.data
        fused = weights.reshape(b, self.heads, 1, n) @ v  # (B, h, 1, c)
        return fused.reshape(b, -1)

    def mixed_query(self, x: Tensor) -> Tensor:
        """The per-head combined query, (B, h, c)."""
        q, _, _ = self.project(x)
        return (self.lin.reshape(1, self.heads, 1, x.shape[1]) @ q).reshape(x.shape[0], self.heads, -1)


class FuseAfterAttention(_FusionLayer):
    """Full multi-head attention, then a learned mix across tokens."""

    def __init__(self, dim: int, heads: int, tokens: int, rng: np.random.Generator):
        super().__init__(dim, heads, tokens, rng)
        self.merge = Parameter(np.full((1, tokens), 1.0 / tokens, dtype=get_default_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        self._check(x)
        b, n, dim = x.shape
        q, k, v = self.project(x)
        scores = q @ k.transpose(0, 1, 3, 2) * (1.0 / np.sqrt(dim // self.heads))
        weights = F.softmax(scores, axis=-1)
        self.last_weights = weights.data
        attended = _merge_heads(weights @ v)  # (B, n, C)
        return (self.merge @ attended).reshape(b, dim)


def make_fusion_layer(variant: str, dim: int, heads: int, tokens: int, rng: np.random.Generator) -> _FusionLayer:
    if variant == "before":
        return FuseBeforeAttention(dim, heads, tokens, rng)
    if variant == "after":
        return FuseAfterAttention(dim, heads, tokens, rng)
    raise ValueError(f"unknown fusion variant {variant!r}")


def flop_count(embed_dim: int, heads: int, tokens: int, variant: str) -> Dict[str, int]:
    """Multiply-accumulate count of one fusion layer on a single sequence.

    ``tokens`` is n (= m). Softmax, normalization and bias additions are not
    counted; every term below is a matrix product.
    """
    n = m = tokens
    c = embed_dim // heads
    counts = {"projections": 3 * n * embed_dim * embed_dim}
    if variant == "before":
        counts["query_mix"] = heads * m * c
        counts["scores"] = heads * n * c
        counts["weighted_sum"] = heads * n * c
    elif variant == "after":
        counts["scores"] = heads * m * n * c
        counts["weighted_sum"] = heads * m * n * c
        counts["token_mix"] = n * embed_dim
    else:
        raise ValueError(f"unknown fusion variant {variant!r}")
    counts["total"] = sum(counts.values())
    return counts


class FusionModule(Module):
    """Attention block followed by a fusion layer: (B, n, C) -> (B, C)."""

    def __init__(self, config: FusionConfig, tokens: int, rng: np.random.Generator):
        self.attn = AttnBlock(config.embed_dim, config.heads, config.attn_depth, config.mlp_ratio, rng)
        self.fuse = make_fusion_layer(config.fusion_variant, config.embed_dim, config.heads, tokens, rng)

    def forward(self, tokens: Tensor) -> Tensor:
        return self.fuse(self.attn(tokens))


class LocalModule(Module):
    """Patch embedding plus fusion for one region; ``fuse=False`` mean-pools the embeddings instead."""

    def __init__(self, config: FusionConfig, rng: np.random.Generator, fuse: bool = True):
        self.embed = PatchEmbed(config.patch_dim, config.embed_dim, config.num_patches, rng, config.positional)
        self.fusion = FusionModule(config, config.num_patches, rng) if fuse else None

    def forward(self, patches: Tensor) -> Tensor:
        tokens = self.embed(patches)
        return self.fusion(tokens) if self.fusion is not None else tokens.mean(axis=1)


class GlobalModule(Module):
    def __init__(self, config: FusionConfig, regions: int, rng: np.random.Generator):
        self.regions = regions
        self.pos = Parameter((0.02 * rng.standard_normal((regions, config.embed_dim))).astype(get_default_dtype()))
        self.positional = config.positional
        self.fusion = FusionModule(config, regions, rng)

    def forward(self, local_vectors: Tensor) -> Tensor:
        if local_vectors.shape[1] != self.regions:
            raise UsageError(f"global module expects {self.regions} local vectors, got {local_vectors.shape[1]}")
        x = local_vectors + self.pos if self.positional else local_vectors
        return self.fusion(x)


@dataclass
class ClassificationResult:
    logits: np.ndarray
    probabilities: np.ndarray
    labels: np.ndarray


def classify(logits) -> ClassificationResult:
    """Softmax probabilities and argmax labels; ties resolve to the lowest index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    data = np.atleast_2d(data)
    probs = F.softmax(Tensor(data, dtype=data.dtype), axis=-1).data
    return ClassificationResult(data, probs, np.argmax(data, axis=-1))


class TransformerFusion(Module):
    """Local, global and full-face fusion feeding a two-layer classifier.

    ``forward`` takes region patches (B, K + 1, N, M, P, P): K region crops
    followed by the full-face crop. Switches remove a level: without local
    fusion each region is the mean of its patch embeddings, without global
    fusion the local vectors are averaged, without the full-face path the
    classifier sees the global vector alone.
    """

    def __init__(self, config: FusionConfig, rng: np.random.Generator, regions: int = 9, use_local: bool = True,
                 use_global: bool = True, use_fullface: bool = True):
        self.config = config
        self.regions = regions
        self.use_local, self.use_global, self.use_fullface = use_local, use_global, use_fullface
        self.locals = [LocalModule(config, rng, fuse=use_local) for _ in range(regions)]
        self.global_module = GlobalModule(config, regions, rng) if use_global else None
        self.face = LocalModule(config, rng) if use_fullface else None
        width = config.embed_dim * (2 if use_fullface else 1)
        self.fc1 = Linear(width, config.embed_dim, rng)
        self.fc2 = Linear(config.embed_dim, config.num_classes, rng, gain=1.0)

    def embed(self, region_patches: Tensor) -> Tensor:
        b, k = region_patches.shape[:2]
        if k != self.regions + 1:
            raise DimensionError(f"expected {self.regions} regions plus the full face, got {k} crops")
        local = stack([m(region_patches[:, i]) for i, m in enumerate(self.locals)], axis=1)
        fused = self.global_module(local) if self.global_module is not None else local.mean(axis=1)
        if self.face is not None:
            fused = concat([fused, self.face(region_patches[:, self.regions])], axis=1)
        return fused

    def forward(self, region_patches: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(self.embed(region_patches))))

    def fusion_weights(self) -> Dict[str, List]:
        """Last softmax weights of every fusion layer, batch-averaged, keyed by module."""
        out = {}
        for i, m in enumerate(self.locals):
            if m.fusion is not None and m.fusion.fuse.last_weights is not None:
                out[f"local{i}"] = _summarize(m.fusion.fuse.last_weights)
        if self.global_module is not None and self.global_module.fusion.fuse.last_weights is not None:
            out["global"] = _summarize(self.global_module.fusion.fuse.last_weights)
        if self.face is not None and self.face.fusion.fuse.last_weights is not None:
            out["fullface"] = _summarize(self.face.fusion.fuse.last_weights)
        return out


def _summarize(weights: np.ndarray) -> List:
    # before: (B, h, n) -> per-head token weights; after: (B, h, n, n) -> column means
    w = weights.mean(axis=0)
    if w.ndim == 3:
        w = w.mean(axis=1)
    return np.round(w.astype(np.float64), 6).tolist()
