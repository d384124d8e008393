"""Sparse-to-dense decoder: token reprojection, progressive fusion, dense head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffgraph as dg
from .volume import MaskVolume


@dataclass
class SparseGridSet:
    grids: list        # per level Tensor (C_s, D_s, H_s, W_s), finest first
    occupancy: list    # per level bool (D_s, H_s, W_s)


def _conv_param(rng, cout, cin, name):
    w = rng.normal(0, np.sqrt(2.0 / (cin * 27)), (cout, cin, 3, 3, 3))
    return {f"{name}.w": dg.Parameter(w, f"{name}.w"),
            f"{name}.b": dg.Parameter(np.zeros(cout), f"{name}.b")}


def init_decoder_params(channels, token_dim, rng):
    levels = len(channels)
    params = {}
    for lvl, c in enumerate(channels, 1):
        params[f"unproj{lvl}.w"] = dg.Parameter(
            rng.normal(0, np.sqrt(1.0 / token_dim), (c, token_dim)), f"unproj{lvl}.w")
    top = channels[-1]
    params.update(_conv_param(rng, top, top, "phi.1"))
    params.update(_conv_param(rng, top, top, "phi.2"))
    for s in range(levels - 1, 0, -1):
        c = channels[s - 1]
        cin = channels[s] + 2 * c
        params.update(_conv_param(rng, c, cin, f"psi{s}.1"))
        params.update(_conv_param(rng, c, c, f"psi{s}.2"))
    params["head.w"] = dg.Parameter(rng.normal(0, np.sqrt(1.0 / channels[0]), (1, channels[0])),
                                    "head.w")
    params["head.b"] = dg.Parameter(np.zeros(1), "head.b")
    return params


def reproject(features, levels, coords, level_shapes, channels, params=None) -> SparseGridSet:
    """Place selected tokens at their anchors on zero grids, one per level.

    ``features`` is a (K, C_tok) tensor. With ``params`` each level's tokens
    are first mapped back to that level's width by ``unproj{level}``;
    without, token width must already equal the level width.
    """
    levels = np.asarray(levels)
    coords = np.asarray(coords).reshape(-1, 3)
    grids, occupancy = [], []
    for lvl, (shape, c) in enumerate(zip(level_shapes, channels), 1):
        rows = np.flatnonzero(levels == lvl)
        occ = np.zeros(shape, dtype=bool)
        if not len(rows):
            grids.append(dg.Tensor(np.zeros((c,) + tuple(shape))))
            occupancy.append(occ)
            continue
        vals = dg.take(features, rows, axis=0)
        if params is not None:
            vals = dg.transpose(dg.pointwise(dg.transpose(vals), params[f"unproj{lvl}.w"]))
        grids.append(dg.scatter_sites(vals, coords[rows], (c,) + tuple(shape)))
        occ[tuple(coords[rows].T)] = True
        occupancy.append(occ)
    return SparseGridSet(grids, occupancy)


def _block(x, params, name):
    x = dg.relu(dg.conv3d(x, params[f"{name}.1.w"], params[f"{name}.1.b"]))
    return dg.relu(dg.conv3d(x, params[f"{name}.2.w"], params[f"{name}.2.b"]))


def refine_coarse(grid, params):
    """Two 3x3x3 conv + ReLU layers on the coarsest grid."""
    return _block(grid, params, "phi")


def match_spatial(x, shape):
    """Absorb floor-halving mismatches of at most one voxel per axis."""
    diff = [a - b for a, b in zip(x.shape[1:], shape)]
    if any(abs(d) > 1 for d in diff):
        raise ValueError(f"cannot reconcile {x.shape[1:]} with {tuple(shape)}")
    if any(d > 0 for d in diff):
        x = dg.crop(x, tuple(min(a, b) for a, b in zip(x.shape[1:], shape)))
    if any(d < 0 for d in diff):
        x = dg.pad_edge(x, tuple(max(b - a, 0) for a, b in zip(x.shape[1:], shape)))
    return x


def fuse_step(g_next, skip, params, stage, sparse=None):
    """Upsample the coarser decoder state, concatenate it with the encoder skip
    and the stage's sparse token grid (zeros when omitted), then refine."""
    up = match_spatial(dg.upsample2_trilinear(g_next), skip.shape[1:])
    if sparse is None:
        sparse = dg.Tensor(np.zeros(skip.shape))
    return _block(dg.concat([up, skip, sparse], axis=0), params, f"psi{stage}")


def predict_mask(g1, params, out_dims):
    """Sigmoid of the pointwise head, upsampled x2 to the input lattice."""
    logits = dg.pointwise(g1, params["head.w"], params["head.b"])
    logits = match_spatial(dg.upsample2_trilinear(logits), out_dims)
    return dg.sigmoid(logits)


def decode(grids: SparseGridSet, skips, params, out_dims):
    g = refine_coarse(grids.grids[-1], params)
    for s in range(len(skips) - 1, 0, -1):
        g = fuse_step(g, skips[s - 1], params, s, grids.grids[s - 1])
    return predict_mask(g, params, out_dims)


def binarize(prob, theta=0.5) -> MaskVolume:
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"threshold {theta} outside [0, 1]")
    p = prob.data if isinstance(prob, dg.Tensor) else np.asarray(prob)
    if p.ndim == 4:
        p = p[0]
    return MaskVolume((p >= theta).astype(np.uint8))
