"""Codebook quantization, boundary-aware token scoring and sparse selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from . import diffgraph as dg
from .config import STRATEGIES


@dataclass
class QuantizedPool:
    indices: np.ndarray     # (N,) nearest prototype per candidate
    quantized: np.ndarray   # (N, C) codebook rows at ``indices``
    distances: np.ndarray   # (N,) Euclidean distance to the assigned prototype


@dataclass
class ScoreRecord:
    norm: np.ndarray
    boundary: np.ndarray
    diversity: np.ndarray
    total: np.ndarray


@dataclass
class SparseTokenSet:
    indices: np.ndarray     # pool indices, descending score then ascending index
    levels: np.ndarray
    coords: np.ndarray
    cell_sizes: np.ndarray
    codes: np.ndarray
    scores: np.ndarray
    features: dg.Tensor | None = None

    def __len__(self):
        return len(self.indices)


def init_codebook(tokens: np.ndarray, size: int, rng) -> np.ndarray:
    """Gaussian prototypes whose expected norm matches the mean token norm."""
    width = tokens.shape[1]
    mean_norm = float(np.linalg.norm(tokens, axis=1).mean()) or 1.0
    return rng.normal(0.0, mean_norm / np.sqrt(width), size=(size, width))


def quantize(tokens: np.ndarray, codebook: np.ndarray) -> QuantizedPool:
    """Nearest prototype in L2; ties go to the lowest prototype index."""
    tokens = np.asarray(tokens, dtype=np.float64)
    codebook = np.asarray(codebook, dtype=np.float64)
    if tokens.shape[1] != codebook.shape[1]:
        raise ValueError(f"token width {tokens.shape[1]} != codebook width {codebook.shape[1]}")
    d2 = cdist(tokens, codebook, "sqeuclidean")
    idx = np.argmin(d2, axis=1)
    dist = np.sqrt(d2[np.arange(len(idx)), idx])
    return QuantizedPool(idx, codebook[idx].copy(), dist)


def straight_through(tokens: dg.Tensor, value: np.ndarray) -> dg.Tensor:
    """Forward ``value`` (the quantized rows); gradients pass to ``tokens`` unchanged."""
    return dg.make_op(np.array(value, dtype=np.float64), (tokens,), lambda g: (g,))


def vq_loss(tokens: dg.Tensor, codebook: dg.Tensor, indices, beta: float,
            tokens_sg=None, quantized_sg=None) -> dg.Tensor:
    """Mean over candidates of ``|t - sg[c]|^2 + beta |sg[t] - c|^2`` by value.

    Gradients follow the usual VQ contract: prototypes are pulled toward the
    tokens with unit weight, tokens toward their prototypes with weight ``beta``.
    ``tokens_sg`` / ``quantized_sg`` override the stop-gradient constants
    (used to freeze them when finite-differencing).
    """
    idx = np.asarray(indices)
    n = len(idx)
    t = tokens.data
    c = codebook.data[idx]
    t_sg = t if tokens_sg is None else tokens_sg
    c_sg = c if quantized_sg is None else quantized_sg
    embed = ((t_sg - c) ** 2).sum()
    commit = ((t - c_sg) ** 2).sum()
    value = (embed + beta * commit) / n

    def fn(g):
        g = float(g)
        gt = g * 2.0 * beta * (t - c_sg) / n if tokens.requires_grad else None
        gc = None
        if codebook.requires_grad:
            gc = np.zeros_like(codebook.data)
            np.add.at(gc, idx, g * 2.0 * (c - t_sg) / n)
        return gt, gc

    return dg.make_op(np.array(value), (tokens, codebook), fn)


def prototype_freq(indices, size: int) -> np.ndarray:
    return np.bincount(np.asarray(indices), minlength=size)


# -- boundary proximity -------------------------------------------------------


def downsample_to_level(vol: np.ndarray, level: int) -> np.ndarray:
    """Block-average by 2**level per axis, dropping ragged remainders."""
    f = 2 ** level
    d, h, w = (n // f for n in vol.shape)
    v = vol[: d * f, : h * f, : w * f]
    return v.reshape(d, f, h, f, w, f).mean(axis=(1, 3, 5))


def central_gradient_magnitude(x: np.ndarray) -> np.ndarray:
    """|grad x| from central differences with edge replication (zero on size-1 axes)."""
    sq = np.zeros_like(x, dtype=np.float64)
    for axis in range(3):
        p = np.pad(x, [(1, 1) if a == axis else (0, 0) for a in range(3)], mode="edge")
        hi = np.take(p, np.arange(2, x.shape[axis] + 2), axis=axis)
        lo = np.take(p, np.arange(0, x.shape[axis]), axis=axis)
        sq += ((hi - lo) / 2.0) ** 2
    return np.sqrt(sq)


def boundary_proximity_all(volume: np.ndarray, levels, coords, cell_sizes, n_levels) -> np.ndarray:
    """P_b for every candidate: per-level min-max normalized mean |grad| over the cell."""
    levels = np.asarray(levels)
    raw = np.zeros(len(levels))
    for lvl in range(1, n_levels + 1):
        sel = np.flatnonzero(levels == lvl)
        if not len(sel):
            continue
        mag = central_gradient_magnitude(downsample_to_level(volume, lvl))
        # each level's cells form a product grid, so the axis starts recover it
        starts = [np.unique(coords[sel, a]) for a in range(3)]
        means = dg.cell_pool(dg.Tensor(mag[None]), starts).data.reshape(-1)
        if len(means) != len(sel):
            raise ValueError(f"level {lvl} candidates do not form a cell grid")
        lo, hi = means.min(), means.max()
        raw[sel] = 0.0 if hi <= lo else (means - lo) / (hi - lo)
    return raw


def boundary_proximity(volume: np.ndarray, pool, i: int) -> float:
    """P_b of one candidate (normalization still spans its whole level)."""
    pb = boundary_proximity_all(volume, pool.levels, pool.coords, pool.cell_sizes,
                                len(pool.layout))
    return float(pb[i])


# -- scoring and selection --------------------------------------------------------


def score(qnorm, p_b, freq, n):
    """``|t^q| * P_b * ln(N / freq)``; works elementwise on arrays."""
    freq = np.asarray(freq)
    if np.any(freq < 1) or np.any(freq > n):
        raise ValueError("freq must lie in [1, N]")
    return np.asarray(qnorm) * np.asarray(p_b) * np.log(n / freq)


def score_pool(qpool: QuantizedPool, p_b: np.ndarray, codebook_size: int) -> ScoreRecord:
    n = len(qpool.indices)
    freq = prototype_freq(qpool.indices, codebook_size)[qpool.indices]
    norm = np.linalg.norm(qpool.quantized, axis=1)
    diversity = np.log(n / freq)
    return ScoreRecord(norm, p_b, diversity, norm * p_b * diversity)


def rank(keys: np.ndarray) -> np.ndarray:
    """Indices by descending key, ties by ascending index."""
    keys = np.asarray(keys, dtype=np.float64)
    return np.lexsort((np.arange(len(keys)), -keys))


def select_topk(scores: np.ndarray, k: int) -> np.ndarray:
    if not 1 <= k <= len(scores):
        raise ValueError(f"K={k} outside [1, {len(scores)}]")
    return rank(scores)[:k]


def level_quotas(layout, k):
    """Largest-remainder allocation of ``k`` picks proportional to ``layout``."""
    layout = np.asarray(layout)
    n = layout.sum()
    exact = k * layout / n
    quota = np.minimum(np.floor(exact).astype(int), layout)
    frac = exact - np.floor(exact)
    for i in rank(frac):
        if quota.sum() >= k:
            break
        if quota[i] < layout[i]:
            quota[i] += 1
    # saturated levels can leave picks unassigned; hand them to levels with room
    for i in rank(frac):
        while quota.sum() < k and quota[i] < layout[i]:
            quota[i] += 1
    return tuple(int(q) for q in quota)


def select_strategy(strategy, scores: ScoreRecord, layout, k, seed=0) -> np.ndarray:
    """Pool indices chosen by an ablation strategy, ordered like :func:`select_topk`."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown selection strategy {strategy!r}")
    n = len(scores.total)
    if not 1 <= k <= n:
        raise ValueError(f"K={k} outside [1, {n}]")
    if strategy == "combined":
        return select_topk(scores.total, k)
    if strategy == "random":
        chosen = np.random.default_rng(seed).choice(n, size=k, replace=False)
    elif strategy == "uniform-grid":
        chosen = (np.arange(k) * n) // k
    elif strategy == "boundary":
        chosen = select_topk(scores.boundary, k)
    elif strategy == "vq":
        chosen = select_topk(scores.norm * scores.diversity, k)
    else:  # hierarchical
        chosen, start = [], 0
        for count, quota in zip(layout, level_quotas(layout, k)):
            local = scores.total[start:start + count]
            chosen.extend(start + select_topk(local, quota) if quota else [])
            start += count
        chosen = np.asarray(chosen)
    chosen = np.asarray(chosen, dtype=np.intp)
    order = np.lexsort((chosen, -scores.total[chosen]))
    return chosen[order]


def make_sparse_set(pool, qpool: QuantizedPool, record: ScoreRecord, chosen) -> SparseTokenSet:
    chosen = np.asarray(chosen, dtype=np.intp)
    return SparseTokenSet(chosen, pool.levels[chosen], pool.coords[chosen],
                          pool.cell_sizes[chosen], qpool.indices[chosen],
                          record.total[chosen])
