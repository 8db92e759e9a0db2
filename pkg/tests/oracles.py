"""Independent reference implementations used by the tests.

These are written from the definitions with plain loops and share no code
with the package under test.
"""

from itertools import combinations
import math

import numpy as np


def cosine_matrix(keys, A, B):
    """Head-mean keys, then normalize-then-dot with explicit loops."""
    keys = np.asarray(keys, dtype=np.float64)
    if keys.ndim == 3:
        keys = sum(keys[h] for h in range(keys.shape[0])) / keys.shape[0]
    out = np.zeros((len(A), len(B)))
    for i, a in enumerate(A):
        na = math.sqrt(sum(v * v for v in keys[a]))
        for j, b in enumerate(B):
            nb = math.sqrt(sum(v * v for v in keys[b]))
            if na == 0 or nb == 0:
                continue
            out[i, j] = sum((x / na) * (y / nb) for x, y in zip(keys[a], keys[b]))
    return out


def brute_force_kept(keys, r, protected=()):
    """Kept links by exhaustive enumeration under the documented rules.

    Alternating partition of the unprotected tokens; each A token links to its
    best B token (ties -> lower destination); among all subsets of the links
    of the clamped size, return the unique one in which every kept link beats
    every dropped link (higher similarity, ties -> lower source index).
    """
    L = np.asarray(keys).shape[-2]
    free = [i for i in range(L) if i not in set(protected)]
    A, B = free[0::2], free[1::2]
    if len(free) < 2:
        return []
    sim = cosine_matrix(keys, A, B)
    links = []
    for i, a in enumerate(A):
        best_j = 0
        for j in range(1, len(B)):
            if sim[i, j] > sim[i, best_j]:
                best_j = j
        links.append((a, B[best_j], sim[i, best_j]))
    k = min(r, len(free) // 2)

    def beats(x, y):
        return x[2] > y[2] or (x[2] == y[2] and x[0] < y[0])

    winners = []
    for subset in combinations(range(len(links)), k):
        chosen = set(subset)
        if all(beats(links[s], links[t]) for s in chosen for t in range(len(links)) if t not in chosen):
            winners.append(sorted(links[s] for s in subset))
    assert len(winners) == 1, "documented tie-break must single out one subset"
    return winners[0]


def discrete_keys(rng, L, dim=3, heads=1):
    """Keys drawn from signed axis vectors and zero: cosines are exactly 0, +-1."""
    choices = [np.zeros(dim)] + [s * np.eye(dim)[i] for i in range(dim) for s in (1.0, -1.0)]
    one = np.stack([choices[rng.integers(len(choices))] for _ in range(L)])
    return np.repeat(one[None], heads, axis=0)


def loop_temporal(v, w_key, w_query):
    """Eq.-literal temporal step with explicit loops over batch and position."""
    B, N, L, D = v.shape
    out = np.empty_like(v)
    for b in range(B):
        for l in range(L):
            x = v[b, :, l]  # [N, D]
            q, k = x @ w_query, x @ w_key
            logits = q @ k.T
            for n in range(N):
                row = np.exp(logits[n] - logits[n].max())
                row /= row.sum()
                out[b, n, l] = x[n] + row @ x
    return out


def loop_attention(x, wq, bq, wk, bk, wv, bv, wo, bo, heads):
    """Single-sequence multi-head attention, one head at a time."""
    L, D = x.shape
    dh = D // heads
    q, k, v = x @ wq + bq, x @ wk + bk, x @ wv + bv
    ctx = np.zeros((L, D))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        s = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
        s = np.exp(s - s.max(axis=1, keepdims=True))
        s /= s.sum(axis=1, keepdims=True)
        ctx[:, sl] = s @ v[:, sl]
    return ctx @ wo + bo


def central_differences(loss, params, plan, eps=1e-5, coords=4, floor=1e-6, seed=0):
    """Analytic vs central-difference gradients on a piecewise-smooth loss.

    ``loss()`` returns a scalar Tensor and ``plan()`` a hashable summary of the
    discrete choices made during that evaluation (merge plans). Coordinates
    whose +/- eps evaluations change the plan sit on a piece boundary and are
    skipped. Error is |a - n| / max(|a|, |n|, floor). Returns (worst, checked, skipped).
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss().backward()
    base = plan()
    grads = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst, checked, skipped = 0.0, 0, 0
    for p, g in zip(params, grads):
        picks = rng.choice(p.data.size, size=min(coords, p.data.size), replace=False)
        for i in picks:
            at = np.unravel_index(i, p.shape)
            orig = p.data[at]
            p.data[at] = orig + eps
            up, up_plan = loss().item(), plan()
            p.data[at] = orig - eps
            down, down_plan = loss().item(), plan()
            p.data[at] = orig
            if up_plan != base or down_plan != base:
                skipped += 1
                continue
            num = (up - down) / (2 * eps)
            worst = max(worst, abs(g[at] - num) / max(abs(g[at]), abs(num), floor))
            checked += 1
    for p in params:
        p.grad = None
    return worst, checked, skipped
