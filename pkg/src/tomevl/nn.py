"""Layers, parameter containers and the AdamW optimizer on top of ``tensor``."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor, gelu, layer_norm, matmul, softmax

INIT_STD = 0.02


class Parameter(Tensor):
    """A leaf tensor owned by a module. Freezing clears ``requires_grad``."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(np.ascontiguousarray(data, dtype=np.float64), requires_grad=True)


class Module:
    """Parameter container; traversal follows attribute declaration order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def unfreeze(self):
        for p in self.parameters():
            p.requires_grad = True
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr


def _param(rng: np.random.Generator, *shape, std: float = INIT_STD) -> Parameter:
    return Parameter(rng.normal(0.0, std, size=shape))


def _zeros(*shape) -> Parameter:
    return Parameter(np.zeros(shape))


def _ones(*shape) -> Parameter:
    return Parameter(np.ones(shape))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = _param(rng, d_in, d_out)
        self.bias = _zeros(d_out) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-15):
        self.gain = _ones(dim)
        self.bias = _zeros(dim)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: np.random.Generator):
        self.weight = _param(rng, num, dim)

    def __call__(self, ids) -> Tensor:
        return self.weight[np.asarray(ids, dtype=np.int64)]


class MLP(Module):
    def __init__(self, dim: int, ratio: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, dim * ratio, rng)
        self.fc2 = Linear(dim * ratio, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class SelfAttention(Module):
    """Multi-head self-attention over ``[..., L, D]``.

    Returns the output and the per-head keys ``[..., H, L, D/H]`` (as arrays),
    which token merging uses as its similarity metric.
    """

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator):
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.query = Linear(dim, dim, rng)
        self.key = Linear(dim, dim, rng)
        self.value = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        *lead, L, D = x.shape
        h = self.num_heads
        x = x.reshape(*lead, L, h, D // h)
        n = x.ndim
        axes = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
        return x.transpose(axes)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None, bias: np.ndarray | None = None):
        *lead, L, D = x.shape
        q, k, v = self._split(self.query(x)), self._split(self.key(x)), self._split(self.value(x))
        scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(D // self.num_heads))
        if bias is not None:
            scores = scores + bias
        if mask is not None:
            scores = scores + mask
        ctx = matmul(softmax(scores, axis=-1), v)
        n = ctx.ndim
        axes = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
        ctx = ctx.transpose(axes).reshape(*lead, L, D)
        return self.out(ctx), k.data


def causal_mask(n: int) -> np.ndarray:
    m = np.zeros((n, n))
    m[np.triu_indices(n, k=1)] = -np.inf
    return m


class AdamW:
    """Adam with decoupled weight decay; state is kept only for given params.

    Decay applies to matrices only (biases, gains and 1-d vectors are exempt).
    """

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.98), eps=1e-8, weight_decay=0.05):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.weight_decay and p.ndim >= 2:
                p.data *= 1 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
