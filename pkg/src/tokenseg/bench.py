"""Desk-scale phantom benchmark shared by the ablation tests and scripts.

Each seed gets its own disjoint train/val/test phantoms; the model and the
selection RNG use the same seed. Settings trade the full training schedule for
a budget that fits many runs on one CPU core.
"""

from dataclasses import dataclass, replace

import numpy as np

from .config import TrainConfig, apply_overrides
from .trainer import evaluate, make_case, train
from .volume import generate_phantom, random_phantom_spec, sphere_phantom_spec

SHAPES = {"random": random_phantom_spec, "sphere": sphere_phantom_spec}


@dataclass(frozen=True)
class BenchSettings:
    dims: tuple = (32, 32, 32)
    n_train: int = 4
    n_val: int = 2
    n_test: int = 4
    epochs: int = 40
    base_lr: float = 1e-3
    shape: str = "random"


@dataclass
class BenchResult:
    seed: int
    overrides: dict
    dice: float
    iou: float
    hd95: float | None
    boundary_ratio: float | None
    utilization: float
    best_val_dice: float
    epochs_run: int


def phantom_splits(seed: int, s: BenchSettings):
    make_spec = SHAPES[s.shape]
    base = 1000 * (seed + 1)

    def case(i):
        return make_case(f"p{i:03d}", *generate_phantom(make_spec(s.dims, base + i)))

    # fixed offsets keep splits disjoint and stable when counts change
    return ([case(i) for i in range(s.n_train)],
            [case(100 + i) for i in range(s.n_val)],
            [case(200 + i) for i in range(s.n_test)])


def bench_config(seed: int, s: BenchSettings, overrides=None) -> TrainConfig:
    cfg = replace(TrainConfig(), seed=seed, base_lr=s.base_lr, max_epochs=s.epochs,
                  patience=s.epochs)
    return apply_overrides(cfg, {k: str(v) for k, v in (overrides or {}).items()}).validate()


def run_point(seed: int, s: BenchSettings, overrides=None, splits=None) -> BenchResult:
    tr, va, te = splits or phantom_splits(seed, s)
    cfg = bench_config(seed, s, overrides)
    model, _, runlog = train(cfg, tr, va)
    agg, _, _, util = evaluate(model, te, cfg.model.theta, cfg.model.boundary_radius)
    return BenchResult(seed, dict(overrides or {}), agg.dice, agg.iou, agg.hd95,
                       agg.boundary_token_ratio, util, max(runlog.val_dice), len(runlog.records))


def mean_of(results, field_name):
    vals = [getattr(r, field_name) for r in results if getattr(r, field_name) is not None]
    return float(np.mean(vals)) if vals else None
