"""Bipartite soft matching: pick the most similar token pairs and fold them.

Layout convention after a merge: protected tokens first (original order), then
set B in original order (destinations updated in place), then the surviving
set-A tokens in original order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, matmul


@dataclass
class TokenBatch:
    tokens: np.ndarray
    sizes: np.ndarray
    groups: list[list[int]]

    @classmethod
    def from_tokens(cls, tokens) -> "TokenBatch":
        tokens = np.asarray(tokens, dtype=np.float64)
        L = tokens.shape[0]
        return cls(tokens, np.ones(L, dtype=np.int64), [[i] for i in range(L)])

    def __len__(self) -> int:
        return len(self.groups)

    def check(self, num_original: int | None = None):
        """Raise AssertionError if sizes/groups stop describing a partition."""
        assert self.tokens.shape[0] == len(self.sizes) == len(self.groups)
        for s, g in zip(self.sizes, self.groups):
            assert s == len(g) and s > 0
        flat = sorted(i for g in self.groups for i in g)
        n = int(self.sizes.sum()) if num_original is None else num_original
        assert flat == list(range(n)), "groups are not a partition of the original indices"


@dataclass(frozen=True)
class MergeSchedule:
    r: int = 19
    num_layers: int = 12

    def quota(self, num_tokens: int) -> int:
        return max(0, min(self.r, num_tokens // 2))


def schedule_counts(L0: int, schedule: MergeSchedule) -> list[int]:
    """Token count entering each layer, followed by the final count."""
    if L0 < 1:
        raise ValueError("L0 must be >= 1")
    counts = [L0]
    for _ in range(schedule.num_layers):
        counts.append(counts[-1] - schedule.quota(counts[-1]))
    return counts


def partition(L: int, policy: str = "alternating", seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    if L < 2:
        raise ValueError(f"cannot partition {L} token(s); need at least 2")
    if policy == "alternating":
        idx = np.arange(L)
        return idx[0::2], idx[1::2]
    if policy == "random":
        perm = np.random.default_rng(seed).permutation(L)
        n_a = (L + 1) // 2
        return np.sort(perm[:n_a]), np.sort(perm[n_a:])
    raise ValueError(f"unknown partition policy {policy!r}")


def _unit(x: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, norm, out=np.zeros_like(x), where=norm > 0)


def key_similarity(keys: np.ndarray, A, B) -> np.ndarray:
    """Cosine similarity of head-averaged keys between A and B tokens.

    ``keys`` is ``[H, L, d_h]`` (or ``[L, d]`` for a single head). Zero-norm
    keys get similarity 0 to everything.
    """
    keys = np.asarray(keys, dtype=np.float64)
    metric = _unit(keys.mean(axis=0) if keys.ndim == 3 else keys)
    return metric[np.asarray(A)] @ metric[np.asarray(B)].T


@dataclass
class MergePlan:
    num_tokens: int
    protected: tuple[int, ...]
    partition: tuple[np.ndarray, np.ndarray]
    links: list[tuple[int, int, float]]
    kept: list[tuple[int, int, float]] = field(default_factory=list)

    def destination_map(self) -> tuple[np.ndarray, int]:
        """New index of every token after merging, and the new token count."""
        return _destinations(
            self.num_tokens,
            np.asarray(self.protected, dtype=np.int64),
            self.partition[0],
            self.partition[1],
            {s: d for s, d, _ in self.kept},
        )


def _destinations(L, protected, A, B, merged: dict[int, int]) -> tuple[np.ndarray, int]:
    dest = np.empty(L, dtype=np.int64)
    n_p = len(protected)
    dest[protected] = np.arange(n_p)
    dest[B] = n_p + np.arange(len(B))
    pos = n_p + len(B)
    for a in A:
        if a not in merged:
            dest[a] = pos
            pos += 1
    for s, d in merged.items():
        dest[s] = dest[d]
    return dest, pos


def bipartite_soft_match(
    keys: np.ndarray,
    r: int,
    protected=(),
    policy: str = "alternating",
    seed: int = 0,
) -> MergePlan:
    """Link each A token to its most similar B token and keep the top-r links.

    Ties on similarity go to the lower source index, then the lower
    destination index. The quota is clamped to half the unprotected count.
    """
    if r < 0:
        raise ValueError(f"merge quota r must be >= 0, got {r}")
    keys = np.asarray(keys, dtype=np.float64)
    L = keys.shape[-2]
    protected = tuple(sorted(int(i) for i in protected))
    free = np.setdiff1d(np.arange(L), protected)
    if len(free) < 2:
        empty = (free, np.array([], dtype=np.int64))
        return MergePlan(L, protected, empty, [], [])
    pa, pb = partition(len(free), policy, seed)
    A, B = free[pa], free[pb]
    sim = key_similarity(keys, A, B)
    best = sim.argmax(axis=1)
    links = [(int(A[i]), int(B[j]), float(sim[i, j])) for i, j in enumerate(best)]
    k = min(r, len(free) // 2)
    order = sorted(range(len(links)), key=lambda i: (-links[i][2], links[i][0], links[i][1]))
    kept = [links[i] for i in order[:k]]
    return MergePlan(L, protected, (A, B), links, kept)


def _merge_weights(sizes: np.ndarray, dest: np.ndarray, n_out: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-stochastic ``[..., n_out, L]`` matrix computing size-weighted means."""
    lead = sizes.shape[:-1]
    L = sizes.shape[-1]
    flat_sizes = sizes.reshape(-1, L)
    flat_dest = dest.reshape(-1, L)
    n = flat_sizes.shape[0]
    rows = np.repeat(np.arange(n), L)
    new_sizes = np.zeros((n, n_out), dtype=sizes.dtype)
    np.add.at(new_sizes, (rows, flat_dest.reshape(-1)), flat_sizes.reshape(-1))
    W = np.zeros((n, n_out, L))
    W[rows, flat_dest.reshape(-1), np.tile(np.arange(L), n)] = flat_sizes.reshape(-1)
    W /= new_sizes[:, :, None]
    return W.reshape(*lead, n_out, L), new_sizes.reshape(*lead, n_out)


def apply_merge(batch: TokenBatch, plan: MergePlan) -> TokenBatch:
    dest, n_out = plan.destination_map()
    W, sizes = _merge_weights(np.asarray(batch.sizes), dest, n_out)
    tokens = W @ np.asarray(batch.tokens, dtype=np.float64)
    groups: list[list[int]] = [[] for _ in range(n_out)]
    for i, g in enumerate(batch.groups):
        groups[dest[i]].extend(g)
    return TokenBatch(tokens, sizes, [sorted(g) for g in groups])


# -- batched path used inside the connector ------------------------------------


def match_batch(
    keys: np.ndarray,
    r: int,
    num_protected: int = 0,
    policy: str = "alternating",
    seed: int = 0,
) -> tuple[np.ndarray, int]:
    """Vectorized bipartite matching over ``keys [B, H, L, d_h]``.

    The first ``num_protected`` tokens are protected. Returns the destination
    map ``[B, L]`` and the merged token count; identical in outcome to running
    ``bipartite_soft_match`` on each sample.
    """
    Bsz, _, L, _ = keys.shape
    free = L - num_protected
    k = min(r, free // 2)
    if k <= 0:
        dest = np.broadcast_to(_identity_layout(L, num_protected, policy, seed), (Bsz, L)).copy()
        return dest, L
    pa, pb = partition(free, policy, seed)
    A, B = pa + num_protected, pb + num_protected
    metric = _unit(keys.mean(axis=1))
    sim = metric[:, A] @ np.swapaxes(metric[:, B], -1, -2)
    best = sim.argmax(axis=-1)
    best_sim = np.take_along_axis(sim, best[..., None], axis=-1)[..., 0]
    order = np.argsort(-best_sim, axis=-1, kind="stable")
    src_pos = order[:, :k]

    dest = np.empty((Bsz, L), dtype=np.int64)
    dest[:, :num_protected] = np.arange(num_protected)
    dest[:, B] = num_protected + np.arange(len(B))
    merged = np.zeros((Bsz, len(A)), dtype=bool)
    np.put_along_axis(merged, src_pos, True, axis=-1)
    survivor_rank = np.cumsum(~merged, axis=-1) - 1
    dest[:, A] = num_protected + len(B) + survivor_rank
    dst_of_src = np.take_along_axis(best, src_pos, axis=-1)
    rows = np.arange(Bsz)[:, None]
    dest[rows, A[src_pos]] = num_protected + dst_of_src
    return dest, L - k


def _identity_layout(L: int, num_protected: int, policy: str, seed: int) -> np.ndarray:
    if L - num_protected < 2:
        return np.arange(L)
    pa, pb = partition(L - num_protected, policy, seed)
    protected = np.arange(num_protected)
    return _destinations(L, protected, pa + num_protected, pb + num_protected, {})[0]


def merge_tokens(x: Tensor, sizes: np.ndarray, dest: np.ndarray, n_out: int) -> tuple[Tensor, np.ndarray]:
    """Differentiable size-weighted merge of ``x [B, L, D]`` per ``dest``."""
    W, new_sizes = _merge_weights(sizes, dest, n_out)
    return matmul(Tensor(W), x), new_sizes
