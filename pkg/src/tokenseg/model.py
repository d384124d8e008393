"""End-to-end TokenSeg forward pass: encoder -> tokenizer -> decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffgraph as dg
from . import tokenizer as tk
from .config import ModelConfig
from .decoder import SparseGridSet, decode, init_decoder_params, reproject
from .encoder import (CandidatePool, build_pyramid, check_dims, fit_layout,
                      init_encoder_params, level_shapes, pool_candidates, project_tokens)


@dataclass
class Frozen:
    """Discrete decisions and stop-gradient constants from one forward pass.

    Passing it back into :meth:`TokenSegModel.forward` evaluates the surrogate
    whose exact gradient is the straight-through / VQ gradient contract.
    """

    indices: np.ndarray
    chosen: np.ndarray
    tokens: np.ndarray
    quantized: np.ndarray


@dataclass
class ForwardResult:
    prob: dg.Tensor            # (1, D, H, W)
    vq: dg.Tensor
    pool: CandidatePool
    qpool: tk.QuantizedPool
    scores: tk.ScoreRecord
    sparse: tk.SparseTokenSet
    grids: SparseGridSet
    frozen: Frozen


class TokenSegModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.params = {}
        self.params.update(init_encoder_params(cfg.channels, cfg.token_dim, rng))
        self.params.update(init_decoder_params(cfg.channels, cfg.token_dim, rng))
        self.params["codebook"] = dg.Parameter(
            np.zeros((cfg.codebook_size, cfg.token_dim)), "codebook")
        self.codebook_ready = False
        self._codebook_rng = rng

    def parameters(self):
        return list(self.params.values())

    def layout_for(self, dims):
        check_dims(dims, self.cfg.levels)
        return fit_layout(self.cfg.layout, level_shapes(dims, self.cfg.levels))

    def tokens(self, volume: np.ndarray) -> np.ndarray:
        """Candidate token matrix (N, C_tok) for one normalized volume, no graph."""
        x = dg.Tensor(np.asarray(volume, dtype=np.float64)[None])
        pyr = build_pyramid(x, self.params, self.cfg.levels)
        pool = pool_candidates(pyr, self.layout_for(volume.shape))
        return project_tokens(pool, self.params).data

    def prime_codebook(self, volumes):
        """Initialize prototypes from the token statistics of a first batch."""
        toks = np.concatenate([self.tokens(v) for v in volumes])
        self.params["codebook"].data[...] = tk.init_codebook(
            toks, self.cfg.codebook_size, self._codebook_rng)
        self.codebook_ready = True

    def forward(self, volume: np.ndarray, beta: float = 0.25, frozen: Frozen | None = None,
                strategy: str | None = None, k: int | None = None) -> ForwardResult:
        cfg = self.cfg
        volume = np.asarray(volume, dtype=np.float64)
        if not self.codebook_ready:
            self.prime_codebook([volume])
        strategy = strategy or cfg.strategy
        k = cfg.k if k is None else k
        p = self.params
        cb = p["codebook"]

        x = dg.Tensor(volume[None])
        pyr = build_pyramid(x, p, cfg.levels)
        pool = pool_candidates(pyr, self.layout_for(volume.shape))
        t = project_tokens(pool, p)

        if frozen is None:
            qpool = tk.quantize(t.data, cb.data)
        else:
            idx = frozen.indices
            qpool = tk.QuantizedPool(idx, cb.data[idx].copy(),
                                     np.linalg.norm(t.data - cb.data[idx], axis=1))
        p_b = tk.boundary_proximity_all(volume, pool.levels, pool.coords, pool.cell_sizes,
                                        cfg.levels)
        scores = tk.score_pool(qpool, p_b, cfg.codebook_size)
        if frozen is None:
            chosen = tk.select_strategy(strategy, scores, pool.layout, k, seed=self.seed)
            value = qpool.quantized
            frozen = Frozen(qpool.indices, chosen, t.data.copy(), qpool.quantized.copy())
            t_sg = q_sg = None
        else:
            chosen = frozen.chosen
            value = t.data + (frozen.quantized - frozen.tokens)
            t_sg, q_sg = frozen.tokens, frozen.quantized
        sparse = tk.make_sparse_set(pool, qpool, scores, chosen)

        tq = tk.straight_through(t, value)
        sparse.features = dg.take(tq, chosen, axis=0)
        grids = reproject(sparse.features, sparse.levels, sparse.coords, pool.lattices,
                          cfg.channels, p)
        prob = decode(grids, pyr, p, volume.shape)
        vq = tk.vq_loss(t, cb, qpool.indices, beta, tokens_sg=t_sg, quantized_sg=q_sg)
        return ForwardResult(prob, vq, pool, qpool, scores, sparse, grids, frozen)

    def predict(self, volume: np.ndarray) -> np.ndarray:
        return self.forward(volume).prob.data[0]

    def state(self) -> dict:
        return {name: prm.data.copy() for name, prm in self.params.items()}

    def load_state(self, state: dict):
        for name, arr in state.items():
            if name not in self.params:
                raise KeyError(f"unknown parameter {name!r}")
            if self.params[name].data.shape != arr.shape:
                raise ValueError(f"parameter {name}: checkpoint shape {arr.shape} != "
                                 f"model shape {self.params[name].data.shape}")
            self.params[name].data[...] = arr
        self.codebook_ready = True
