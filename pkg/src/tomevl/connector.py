"""TomeFormer: a pre-norm transformer that merges tokens inside every layer.

Each layer runs self-attention, merges ``r`` token pairs using the attention
keys, then runs the MLP on the shorter sequence. Boundary projections map the
encoder width in and the decoder width out.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .nn import MLP, LayerNorm, Linear, Module, Parameter, SelfAttention
from .tensor import Tensor
from .tokmerge import MergeSchedule, TokenBatch, match_batch, merge_tokens, schedule_counts


@dataclass
class TomeFormerConfig:
    num_layers: int = 12
    model_dim: int = 64
    num_heads: int = 4
    mlp_ratio: int = 4
    r: int = 19
    include_protected_token: bool = False
    partition: str = "alternating"
    partition_seed: int = 0
    proportional_attention: bool = False
    position_embedding: bool = True
    max_tokens: int = 257
    video_r_multiplier: float = 1.0

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")

    @property
    def schedule(self) -> MergeSchedule:
        return MergeSchedule(self.r, self.num_layers)

    def output_tokens(self, L0: int, r: int | None = None) -> int:
        """Soft-prompt length for ``L0`` patch tokens (plus the protected token)."""
        sched = MergeSchedule(self.r if r is None else r, self.num_layers)
        return schedule_counts(L0, sched)[-1] + int(self.include_protected_token)

    def to_dict(self) -> dict:
        return asdict(self)


class ProjectionPair(Module):
    def __init__(self, encoder_dim: int, model_dim: int, decoder_dim: int, rng: np.random.Generator):
        self.proj_in = Linear(encoder_dim, model_dim, rng)
        self.proj_out = Linear(model_dim, decoder_dim, rng)


class TomeFormerLayer(Module):
    def __init__(self, cfg: TomeFormerConfig, rng: np.random.Generator):
        self.ln1 = LayerNorm(cfg.model_dim)
        self.attn = SelfAttention(cfg.model_dim, cfg.num_heads, rng)
        self.ln2 = LayerNorm(cfg.model_dim)
        self.mlp = MLP(cfg.model_dim, cfg.mlp_ratio, rng)
        self.proportional = cfg.proportional_attention
        self.partition = cfg.partition
        self.partition_seed = cfg.partition_seed

    def __call__(self, x: Tensor, sizes: np.ndarray, owner: np.ndarray, r: int, num_protected: int = 0, layer_index: int = 0):
        """``x [B, L, D]``; ``sizes [B, L]``; ``owner [B, L0]`` maps patches to tokens."""
        bias = np.log(sizes)[:, None, None, :] if self.proportional else None
        attn_out, keys = self.attn(self.ln1(x), bias=bias)
        h = x + attn_out
        dest, n_out = match_batch(keys, r, num_protected, self.partition, self.partition_seed + layer_index)
        h, sizes = merge_tokens(h, sizes, dest, n_out)
        owner = np.take_along_axis(dest, owner, axis=-1)
        return h + self.mlp(self.ln2(h)), sizes, owner


class TomeFormer(Module):
    """Connector from encoder tokens ``[B, L, E]`` to soft prompts ``[B, L', Dd]``."""

    def __init__(self, cfg: TomeFormerConfig, encoder_dim: int, decoder_dim: int, rng: np.random.Generator):
        self.config = cfg
        self.projections = ProjectionPair(encoder_dim, cfg.model_dim, decoder_dim, rng)
        self.pos_emb = Parameter(rng.normal(0.0, 0.02, (cfg.max_tokens, cfg.model_dim))) if cfg.position_embedding else None
        self.layers = [TomeFormerLayer(cfg, rng) for _ in range(cfg.num_layers)]
        self.ln_final = LayerNorm(cfg.model_dim)

    def __call__(self, visual: Tensor, r: int | None = None):
        """Returns ``(prompt, sizes, owner)``.

        ``owner[b, i]`` is the output token that original token ``i`` ended in.
        """
        cfg = self.config
        if not isinstance(visual, Tensor):
            visual = Tensor(visual)
        squeeze = visual.ndim == 2
        if squeeze:
            visual = visual.reshape(1, *visual.shape)
        B, L, _ = visual.shape
        r = cfg.r if r is None else r
        n_prot = int(cfg.include_protected_token)
        x = self.projections.proj_in(visual)
        if self.pos_emb is not None:
            if L > cfg.max_tokens:
                raise ValueError(f"{L} tokens exceed max_tokens={cfg.max_tokens}")
            x = x + self.pos_emb[:L]
        sizes = np.ones((B, L), dtype=np.int64)
        owner = np.broadcast_to(np.arange(L), (B, L)).copy()
        for i, layer in enumerate(self.layers):
            x, sizes, owner = layer(x, sizes, owner, r, n_prot, i)
        out = self.projections.proj_out(self.ln_final(x))
        if squeeze:
            return out.reshape(*out.shape[1:]), sizes[0], owner[0]
        return out, sizes, owner


def tomeformer_layer(batch: TokenBatch, layer: TomeFormerLayer, r: int, protected: int = 0) -> TokenBatch:
    """Run one layer on a single ``TokenBatch``; tokens come back as a Tensor."""
    x = batch.tokens if isinstance(batch.tokens, Tensor) else Tensor(batch.tokens)
    L0 = int(np.sum(batch.sizes))
    owner = np.empty(L0, dtype=np.int64)
    for i, g in enumerate(batch.groups):
        owner[g] = i
    y, sizes, owner = layer(x.reshape(1, *x.shape), np.asarray(batch.sizes)[None], owner[None], r, protected)
    groups = groups_from_owner(owner[0], y.shape[1])
    return TokenBatch(y.reshape(*y.shape[1:]), sizes[0], groups)


def groups_from_owner(owner: np.ndarray, n_tokens: int) -> list[list[int]]:
    groups: list[list[int]] = [[] for _ in range(n_tokens)]
    for patch, tok in enumerate(owner):
        groups[int(tok)].append(patch)
    return groups
