"""Tiny ViT encoder and the temporal attentive soft token contextualizing module.

For video, each encoder block attends spatially within every frame, then (in
blocks carrying a temporal module) every patch position attends across the
frames, and finally runs its MLP::

    v'  = block attention over the [(B*N), L, D] view
    k   = v' W_key,  q = v' W_query          on the [(B*L), N, D] view
    v'' = v' + softmax(q k^T) v'

Token counts never change here.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .nn import MLP, LayerNorm, Linear, Module, Parameter, SelfAttention
from .tensor import Tensor, concat, matmul, softmax
from .tokmerge import TokenBatch


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    dim: int = 32
    num_layers: int = 2
    num_heads: int = 2
    mlp_ratio: int = 4

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TemporalConfig:
    enabled: bool = False
    blocks: list[int] | None = None  # None: every encoder block
    scale_logits: bool = False
    position_encoding: bool = False
    max_frames: int = 16

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FrameBatch:
    """Video activations ``[B, N, L, D]`` with the two attention views."""

    activations: Tensor
    frame_rate: float | None = None
    _dims: tuple = field(init=False, repr=False)

    def __post_init__(self):
        if not isinstance(self.activations, Tensor):
            self.activations = Tensor(self.activations)
        if self.activations.ndim != 4:
            raise ValueError(f"FrameBatch expects [B, N, L, D], got {self.activations.shape}")
        self._dims = self.activations.shape

    def spatial_view(self) -> Tensor:
        B, N, L, D = self._dims
        return self.activations.reshape(B * N, L, D)

    def temporal_view(self) -> Tensor:
        B, N, L, D = self._dims
        return self.activations.transpose(0, 2, 1, 3).reshape(B * L, N, D)

    def from_spatial(self, x: Tensor) -> "FrameBatch":
        return FrameBatch(x.reshape(*self._dims), self.frame_rate)

    def from_temporal(self, x: Tensor) -> "FrameBatch":
        B, N, L, D = self._dims
        return FrameBatch(x.reshape(B, L, N, D).transpose(0, 2, 1, 3), self.frame_rate)


class TemporalModule(Module):
    def __init__(self, dim: int, rng: np.random.Generator, cfg: TemporalConfig | None = None):
        cfg = cfg or TemporalConfig()
        self.w_key = Parameter(rng.normal(0.0, 0.02, (dim, dim)))
        self.w_query = Parameter(rng.normal(0.0, 0.02, (dim, dim)))
        self.frame_pos = Parameter(rng.normal(0.0, 0.02, (cfg.max_frames, dim))) if cfg.position_encoding else None
        self.scale = 1.0 / np.sqrt(dim) if cfg.scale_logits else None

    def __call__(self, x: Tensor) -> Tensor:
        """``x`` is the temporal view ``[..., N, D]``."""
        xk = x + self.frame_pos[: x.shape[-2]] if self.frame_pos is not None else x
        k = matmul(xk, self.w_key)
        q = matmul(xk, self.w_query)
        logits = matmul(q, k.swapaxes(-1, -2))
        if self.scale is not None:
            logits = logits * self.scale
        return x + matmul(softmax(logits, axis=-1), x)


def temporal_contextualize(v: FrameBatch, module: TemporalModule) -> FrameBatch:
    return v.from_temporal(module(v.temporal_view()))


class EncoderBlock(Module):
    def __init__(self, dim: int, heads: int, ratio: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP(dim, ratio, rng)

    def attend(self, x: Tensor) -> Tensor:
        return x + self.attn(self.ln1(x))[0]

    def feed(self, x: Tensor, trace: list | None = None) -> Tensor:
        normed = self.ln2(x)
        if trace is not None:
            trace.append(normed.data)
        return x + self.mlp(normed)


def spatial_attend(v: FrameBatch, block: EncoderBlock) -> FrameBatch:
    return v.from_spatial(block.attend(v.spatial_view()))


def patchify(pixels: np.ndarray, patch: int) -> np.ndarray:
    """``[..., H, W, C]`` -> ``[..., (H/p)*(W/p), p*p*C]`` in row-major patch order."""
    *lead, H, W, C = pixels.shape
    if H % patch or W % patch:
        raise ConfigError(f"image {H}x{W} not divisible by patch size {patch}")
    x = pixels.reshape(*lead, H // patch, patch, W // patch, patch, C)
    n = len(lead)
    x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, (H // patch) * (W // patch), patch * patch * C)


def to_float(pixels) -> np.ndarray:
    px = np.asarray(pixels)
    return px.astype(np.float64) / 255.0 if px.dtype == np.uint8 else px.astype(np.float64)


class ViTEncoder(Module):
    """Patch embedding + class token + pre-norm blocks. Output ``[..., 1+P, D]``."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.config = cfg
        self.patch_embed = Linear(cfg.patch_size**2 * cfg.channels, cfg.dim, rng)
        self.cls = Parameter(rng.normal(0.0, 0.02, (1, cfg.dim)))
        self.pos_emb = Parameter(rng.normal(0.0, 0.02, (1 + cfg.num_patches, cfg.dim)))
        self.blocks = [EncoderBlock(cfg.dim, cfg.num_heads, cfg.mlp_ratio, rng) for _ in range(cfg.num_layers)]
        self.ln_final = LayerNorm(cfg.dim)

    def embed(self, pixels) -> Tensor:
        px = to_float(pixels)
        patches = Tensor(patchify(px, self.config.patch_size))
        x = self.patch_embed(patches)
        lead = x.shape[:-2]
        cls = self.cls.reshape(*([1] * len(lead)), 1, self.config.dim) + Tensor(np.zeros((*lead, 1, self.config.dim)))
        return concat([cls, x], axis=-2) + self.pos_emb

    def encode_images(self, pixels, trace: list | None = None) -> Tensor:
        """``[B, H, W, C]`` -> ``[B, 1+P, D]``."""
        x = self.embed(pixels)
        for block in self.blocks:
            x = block.feed(block.attend(x), trace)
        return self.ln_final(x)

    def encode_frames(self, frames, temporal: dict[int, TemporalModule] | None = None, trace: list | None = None) -> Tensor:
        """``[B, N, H, W, C]`` -> ``[B, N, 1+P, D]`` with temporal contextualizing."""
        return self.frames_from(self.frames_prefix(frames, 0), 0, temporal, trace)

    def frames_prefix(self, frames, block: int) -> Tensor:
        """Activations ``[B, N, L, D]`` right after ``block``'s spatial attention.

        Everything up to this point is independent of the temporal modules, so
        with a frozen encoder it can be computed once and reused.
        """
        frames = np.asarray(frames)
        B, N = frames.shape[:2]
        x = self.embed(frames.reshape(B * N, *frames.shape[2:]))
        for blk in self.blocks[:block]:
            x = blk.feed(blk.attend(x))
        x = self.blocks[block].attend(x)
        return x.reshape(B, N, *x.shape[1:])

    def frames_from(self, x: Tensor, block: int, temporal: dict[int, TemporalModule] | None = None, trace: list | None = None) -> Tensor:
        """Resume :meth:`frames_prefix` output at ``block``'s temporal step."""
        temporal = temporal or {}
        B, N, L, D = x.shape
        v = FrameBatch(x)
        for i in range(block, len(self.blocks)):
            blk = self.blocks[i]
            if i > block:
                v = spatial_attend(v, blk)
            if i in temporal:
                v = temporal_contextualize(v, temporal[i])
            v = FrameBatch(blk.feed(v.spatial_view(), trace).reshape(B, N, L, D))
        return self.ln_final(v.activations)


def connector_tokens(encoded: Tensor, include_protected: bool = False) -> Tensor:
    """Patch tokens for the connector, frames concatenated along the sequence.

    ``encoded`` is ``[B, 1+P, D]`` (image) or ``[B, N, 1+P, D]`` (video). The
    protected token is the class token (averaged over frames for video).
    """
    if encoded.ndim == 3:
        return encoded if include_protected else encoded[:, 1:]
    B, N, L, D = encoded.shape
    patches = encoded[:, :, 1:].reshape(B, N * (L - 1), D)
    if not include_protected:
        return patches
    cls = encoded[:, :, :1].mean(axis=1)
    return concat([cls, patches], axis=1)


def encode_video(frames, encoder: ViTEncoder, temporal: dict[int, TemporalModule] | None = None) -> list[TokenBatch]:
    """One ``TokenBatch`` of ``N*P`` concatenated patch tokens per video."""
    tokens = connector_tokens(encoder.encode_frames(np.asarray(frames), temporal))
    return [TokenBatch.from_tokens(t) for t in tokens.data]
