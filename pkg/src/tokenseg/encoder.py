"""Hierarchical encoder: stride-2 feature pyramid and the fixed candidate-token pool."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import diffgraph as dg


class LayoutError(ValueError):
    """The requested per-level token counts cannot tile the level lattices."""


def level_shapes(dims, levels):
    """Spatial dims of each pyramid level, finest first (floor-half per level)."""
    shapes = []
    d, h, w = dims
    for _ in range(levels):
        d, h, w = d // 2, h // 2, w // 2
        shapes.append((d, h, w))
    return shapes


def check_dims(dims, levels):
    if min(dims) < 2 ** levels:
        raise ValueError(f"volume {tuple(dims)} too small for {levels} levels "
                         f"(each dim must be >= {2 ** levels})")


def init_encoder_params(channels, token_dim, rng):
    params = {}
    cin = 1
    for lvl, cout in enumerate(channels, 1):
        name = "stem" if lvl == 1 else f"down{lvl}"
        fan_in = cin * 27
        params[f"{name}.w"] = dg.Parameter(rng.normal(0, np.sqrt(2.0 / fan_in),
                                                      (cout, cin, 3, 3, 3)), f"{name}.w")
        params[f"{name}.b"] = dg.Parameter(np.zeros(cout), f"{name}.b")
        params[f"proj{lvl}.w"] = dg.Parameter(
            rng.normal(0, np.sqrt(1.0 / cout), (token_dim, cout)), f"proj{lvl}.w")
        params[f"proj{lvl}.b"] = dg.Parameter(np.zeros(token_dim), f"proj{lvl}.b")
        cin = cout
    return params


def build_pyramid(x, params, levels):
    """Feature maps for levels 1..L from a (1, D, H, W) input tensor."""
    check_dims(x.shape[1:], levels)
    feats = []
    cur = x
    for lvl in range(1, levels + 1):
        name = "stem" if lvl == 1 else f"down{lvl}"
        target = tuple(n // 2 for n in cur.shape[1:])
        y = dg.conv3d(cur, params[f"{name}.w"], params[f"{name}.b"], stride=2)
        if y.shape[1:] != target:
            y = dg.crop(y, target)
        cur = dg.relu(y)
        feats.append(cur)
    return feats


# -- candidate layout ----------------------------------------------------------


@lru_cache(maxsize=None)
def cell_grid(count: int, lattice: tuple) -> tuple | None:
    """Cell-grid shape (gd, gh, gw) with product ``count`` that fits ``lattice``.

    Prefers grids that divide the lattice evenly, then the most isotropic cells,
    then the lexicographically smallest shape. None when no grid fits.
    """
    best, best_key = None, None
    for a in range(1, lattice[0] + 1):
        if count % a:
            continue
        for b in range(1, lattice[1] + 1):
            if (count // a) % b:
                continue
            c = count // (a * b)
            if c > lattice[2]:
                continue
            grid = (a, b, c)
            ext = [n / g for n, g in zip(lattice, grid)]
            ragged = sum(n % g != 0 for n, g in zip(lattice, grid))
            key = (ragged, max(ext) / min(ext), grid)
            if best_key is None or key < best_key:
                best, best_key = grid, key
    return best


@lru_cache(maxsize=None)
def feasible_counts(lattice: tuple) -> tuple:
    """Every token count some cell grid on ``lattice`` can realize, ascending."""
    d, h, w = lattice
    return tuple(sorted({a * b * c for a in range(1, d + 1)
                         for b in range(1, h + 1) for c in range(1, w + 1)}))


def fit_layout(layout, lattices):
    """Nearest realizable per-level counts with the same total.

    Walks coarse to fine; each level takes the realizable count closest to its
    request plus whatever the coarser levels could not host, backtracking when
    the finest level would be left with an unrealizable remainder.
    """
    layout = [int(n) for n in layout]
    lattices = [tuple(int(n) for n in lat) for lat in lattices]
    total = sum(layout)
    if total > sum(int(np.prod(lat)) for lat in lattices):
        raise LayoutError(f"{total} tokens exceed the {lattices} lattice sites")

    def search(i, overflow):
        want = layout[i] + overflow
        if i == 0:
            return [want] if want >= 1 and cell_grid(want, lattices[0]) else None
        # finer levels must keep at least one token each
        room = sum(layout[:i]) + want - i
        cands = sorted((c for c in feasible_counts(lattices[i]) if c <= room),
                       key=lambda c: (abs(c - want), -c))
        for c in cands:
            rest = search(i - 1, want - c)
            if rest is not None:
                return rest + [c]
        return None

    fitted = search(len(layout) - 1, 0)
    if fitted is None:
        raise LayoutError(f"no realizable split of {total} tokens over {lattices}")
    return tuple(fitted)


@dataclass
class TokenCandidate:
    feature: np.ndarray
    level: int
    coord: tuple
    cell: tuple


@dataclass
class CandidatePool:
    """N pooled tokens in level-major (fine first), then lexicographic order."""

    level_features: list     # per level Tensor (C_l, n_l)
    levels: np.ndarray       # (N,) 1-based level of each token
    coords: np.ndarray       # (N, 3) anchor = minimum cell corner on its level lattice
    cell_sizes: np.ndarray   # (N, 3) cell extent on its level lattice
    layout: tuple
    lattices: list
    tokens: dg.Tensor | None = None   # (N, C_tok) after projection

    def __len__(self):
        return len(self.levels)

    def level_slice(self, lvl):
        start = int(sum(self.layout[: lvl - 1]))
        return slice(start, start + self.layout[lvl - 1])

    def candidate(self, i) -> TokenCandidate:
        lvl = int(self.levels[i])
        feats = self.level_features[lvl - 1].data
        return TokenCandidate(feats[:, i - self.level_slice(lvl).start].copy(), lvl,
                              tuple(int(v) for v in self.coords[i]),
                              tuple(int(v) for v in self.cell_sizes[i]))


def level_cells(lattice, count):
    """Per-axis cell start offsets for ``count`` cells on ``lattice``."""
    grid = cell_grid(int(count), tuple(lattice))
    if grid is None:
        raise LayoutError(f"lattice {tuple(lattice)} cannot be split into {count} cells")
    return [dg.partition(n, g) for n, g in zip(lattice, grid)]


def pool_geometry(layout, lattices):
    """Anchors, cell extents and level tags for a layout; independent of features."""
    levels, coords, sizes = [], [], []
    for lvl, (lattice, count) in enumerate(zip(lattices, layout), 1):
        starts = level_cells(lattice, count)
        extents = [np.diff(np.append(s, n)) for s, n in zip(starts, lattice)]
        gd, gh, gw = np.meshgrid(*[np.arange(len(s)) for s in starts], indexing="ij")
        gd, gh, gw = gd.ravel(), gh.ravel(), gw.ravel()
        coords.append(np.stack([starts[0][gd], starts[1][gh], starts[2][gw]], axis=1))
        sizes.append(np.stack([extents[0][gd], extents[1][gh], extents[2][gw]], axis=1))
        levels.append(np.full(len(gd), lvl))
    return np.concatenate(levels), np.concatenate(coords), np.concatenate(sizes)


def pool_candidates(pyramid, layout) -> CandidatePool:
    if len(layout) != len(pyramid):
        raise LayoutError(f"layout has {len(layout)} levels, pyramid has {len(pyramid)}")
    lattices = [tuple(f.shape[1:]) for f in pyramid]
    levels, coords, sizes = pool_geometry(layout, lattices)
    feats = []
    for lattice, count, fmap in zip(lattices, layout, pyramid):
        pooled = dg.cell_pool(fmap, level_cells(lattice, count))
        feats.append(dg.reshape(pooled, (fmap.shape[0], -1)))
    return CandidatePool(feats, levels, coords, sizes, tuple(layout), lattices)


def project_tokens(pool: CandidatePool, params) -> dg.Tensor:
    """Map every level's tokens to the shared width and stack them as (N, C_tok)."""
    cols = [dg.pointwise(f, params[f"proj{lvl}.w"], params[f"proj{lvl}.b"])
            for lvl, f in enumerate(pool.level_features, 1)]
    pool.tokens = dg.transpose(dg.concat(cols, axis=1))
    return pool.tokens
