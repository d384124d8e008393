import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tokenseg import diffgraph as dg
from tokenseg import objective as ob
from tokenseg.config import LossWeights
from tokenseg.tokenizer import SparseTokenSet


def test_dice_loss_fixed_points():
    y = (np.random.default_rng(0).random((4, 4, 4)) > 0.5).astype(float)
    assert ob.dice_loss(dg.Tensor(y), y).item() == 0.0
    ones = np.ones((3, 3, 3))
    v = ob.dice_loss(dg.Tensor(np.zeros_like(ones)), ones, eps=1e-5).item()
    assert v == pytest.approx(1 - 1e-5 / (27 + 1e-5), abs=1e-15)


def test_dice_loss_oracle(rng):
    p, y = rng.random((4, 4, 4)), (rng.random((4, 4, 4)) > 0.4).astype(float)
    inter = sum(a * b for a, b in zip(p.ravel(), y.ravel()))
    oracle = 1 - (2 * inter + 1e-5) / (y.sum() + sum(p.ravel()) + 1e-5)
    assert ob.dice_loss(dg.Tensor(p), y).item() == pytest.approx(oracle, abs=1e-12)


def test_bce_values(rng):
    y = (rng.random((4, 4, 4)) > 0.5).astype(float)
    assert ob.bce_loss(dg.Tensor(np.full((4, 4, 4), 0.5)), y).item() == pytest.approx(
        math.log(2), abs=1e-12)
    perfect = ob.bce_loss(dg.Tensor(y.copy()), y).item()
    assert perfect == pytest.approx(-math.log(1 - 1e-7), rel=1e-9)
    p = rng.uniform(0.01, 0.99, (4, 4, 4))
    oracle = -sum(t * math.log(q) + (1 - t) * math.log(1 - q)
                  for q, t in zip(p.ravel(), y.ravel())) / 64
    assert ob.bce_loss(dg.Tensor(p), y).item() == pytest.approx(oracle, abs=1e-12)


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        ob.dice_loss(dg.Tensor(np.zeros((2, 2, 2))), np.zeros((2, 2, 3)))
    with pytest.raises(ValueError):
        ob.bce_loss(dg.Tensor(np.zeros((2, 2, 2))), np.zeros(7))


def test_loss_gradchecks(rng):
    y = (rng.random((1, 3, 3, 3)) > 0.5).astype(float)
    p = rng.uniform(0.05, 0.95, (1, 3, 3, 3))
    assert dg.grad_check(lambda p: ob.dice_loss(p, y), [p.copy()]).passed
    assert dg.grad_check(lambda p: ob.bce_loss(p, y), [p.copy()]).passed


def test_total_loss():
    w = LossWeights()
    assert ob.total_loss(0.0, 0.0, 0.0, w) == 0.0
    assert ob.total_loss(0.2, 0.4, 0.1, w) == pytest.approx(0.41, abs=1e-15)
    t = ob.total_loss(dg.Tensor(np.array(0.2)), dg.Tensor(np.array(0.4)), dg.Tensor(np.array(0.1)), w)
    assert t.item() == pytest.approx(0.41, abs=1e-15)


def test_overlap_metrics_examples():
    a = np.zeros((4, 4, 4), np.uint8)
    a[1:3, 1:3, 1:3] = 1
    assert ob.dice_score(a, a) == ob.iou(a, a) == ob.sensitivity(a, a) == ob.precision(a, a) == 1.0
    b = np.zeros_like(a)
    b[0, 0, 0] = 1
    assert ob.dice_score(a, b) == 0.0 and ob.iou(a, b) == 0.0
    empty = np.zeros_like(a)
    assert ob.dice_score(empty, empty) is ob.UNDEFINED
    assert ob.precision(empty, a) is ob.UNDEFINED
    with pytest.raises(ValueError):
        ob.dice_score(a, np.zeros((4, 4, 3)))


@given(st.integers(0, 2**32 - 1))
def test_iou_dice_identity(seed):
    r = np.random.default_rng(seed)
    a, b = r.random((5, 5, 5)) < r.random(), r.random((5, 5, 5)) < r.random()
    tp = int(np.sum(a & b))
    fp, fn = int(np.sum(a & ~b)), int(np.sum(~a & b))
    if tp + fp + fn == 0:
        return
    d = ob.dice_score(a, b)
    assert d == 2 * tp / (2 * tp + fp + fn)
    assert abs(ob.iou(a, b) - d / (2 - d)) <= 1e-12


def brute_hd95(a, b, spacing=(1.0, 1.0, 1.0)):
    def surf(m):
        pts = []
        for idx in zip(*np.nonzero(m)):
            for ax, step in itertools.product(range(3), (-1, 1)):
                n = list(idx)
                n[ax] += step
                if not 0 <= n[ax] < m.shape[ax] or not m[tuple(n)]:
                    pts.append(idx)
                    break
        return np.array(pts, float) * spacing

    sa, sb = surf(a), surf(b)
    d = [min(math.dist(p, q) for q in sb) for p in sa]
    d += [min(math.dist(p, q) for q in sa) for p in sb]
    return float(np.percentile(d, 95))


def test_hd95_examples():
    a = np.zeros((8, 8, 8), bool)
    b = np.zeros_like(a)
    a[4, 4, 1] = True
    b[4, 4, 4] = True
    assert ob.hd95(a, b) == 3.0 == brute_hd95(a, b)
    assert ob.hd95(a, a) == 0.0
    assert ob.hd95(a, np.zeros_like(a)) is ob.UNDEFINED
    assert ob.hd95(a, b, spacing=(1.0, 1.0, 0.5)) == 1.5


def test_hd95_vs_brute_force(rng):
    for _ in range(5):
        a, b = rng.random((6, 7, 5)) > 0.6, rng.random((6, 7, 5)) > 0.7
        sp = tuple(rng.uniform(0.5, 2.0, 3))
        assert ob.hd95(a, b, sp) == pytest.approx(brute_hd95(a, b, sp), abs=1e-12)
        assert ob.hd95(a, b, sp) == ob.hd95(b, a, sp)


def test_surface_six_connectivity():
    m = np.zeros((5, 5, 5), bool)
    m[1:4, 1:4, 1:4] = True
    s = ob.surface(m)
    assert s.sum() == 26 and not s[2, 2, 2]


def test_codebook_utilization(rng):
    assert ob.codebook_utilization(np.zeros(400, int), 512) == 1 / 512
    assert ob.codebook_utilization(np.arange(16), 16) == 1.0
    parts = [rng.integers(0, 64, 50) for _ in range(3)]
    assert ob.codebook_utilization(parts, 64) == len(set(np.concatenate(parts).tolist())) / 64


def _sparse(levels, coords, sizes):
    n = len(levels)
    return SparseTokenSet(np.arange(n), np.array(levels), np.array(coords), np.array(sizes),
                          np.zeros(n, int), np.zeros(n))


def ratio_oracle(sparse, gt, radius):
    surf = ob.surface(gt)
    spts = np.argwhere(surf)
    hits = 0
    for lvl, c, s in zip(sparse.levels, sparse.coords, sparse.cell_sizes):
        f = 2 ** lvl
        box = [range(c[a] * f, min((c[a] + s[a]) * f, gt.shape[a])) for a in range(3)]
        found = False
        for p in itertools.product(*box):
            if np.min(np.sum((spts - p) ** 2, axis=1)) <= radius ** 2:
                found = True
                break
        hits += found
    return hits / len(sparse.levels)


def test_boundary_token_ratio_extremes():
    gt = np.zeros((16, 16, 16), bool)
    gt[6:10, 6:10, 6:10] = True
    on = _sparse([1, 1], [(3, 3, 3), (4, 4, 4)], [(1, 1, 1)] * 2)
    assert ob.boundary_token_ratio(on, gt) == 1.0
    off = _sparse([1], [(0, 0, 0)], [(1, 1, 1)])
    assert ob.boundary_token_ratio(off, gt) == 0.0
    assert ob.boundary_token_ratio(off, np.zeros_like(gt)) is ob.UNDEFINED


def test_boundary_token_ratio_vs_oracle(rng):
    from tokenseg.config import ModelConfig
    from tokenseg.model import TokenSegModel
    from tokenseg.volume import generate_phantom, sphere_phantom_spec

    vol, mask = generate_phantom(sphere_phantom_spec((32, 32, 32), seed=2))
    res = TokenSegModel(ModelConfig(), seed=0).forward(vol.voxels.astype(float))
    got = ob.boundary_token_ratio(res.sparse, mask.labels, 2)
    assert got == ratio_oracle(res.sparse, mask.labels.astype(bool), 2)


def test_compression_ratio():
    assert ob.compression_ratio((4, 4, 4), 64) == 1.0
    assert ob.compression_ratio((512, 512, 100), 100) == 262144.0
    assert ob.compression_ratio((512, 512, 100), 100) > 5000
    with pytest.raises(ValueError):
        ob.compression_ratio((4, 4, 4), 0)


def test_dice_loss_sweep_converges(rng):
    y = (rng.random((6, 6, 6)) > 0.5).astype(float)
    noise = rng.random(y.shape)
    losses, scores = [], []
    for a in np.linspace(0, 1, 11):
        p = a * y + (1 - a) * noise
        losses.append(ob.dice_loss(dg.Tensor(p), y).item())
        scores.append(ob.dice_score(p >= 0.5, y))
    assert losses[-1] == 0.0 and scores[-1] == 1.0
    assert all(b <= a + 1e-15 for a, b in zip(losses, losses[1:]))


def test_report_text_round_trip():
    rep = ob.MetricsReport(dice=0.5, iou=1 / 3, hd95=None, sensitivity=0.25, precision=1.0,
                           codebook_utilization=0.1, boundary_token_ratio=0.7,
                           compression_ratio=327.68, time_ms=12.5)
    text = rep.to_text()
    assert "hd95=undefined" in text
    assert all(f"{k}=" in text for k in ob.METRIC_KEYS)
    assert ob.MetricsReport.from_text(text) == rep


def test_aggregate_skips_undefined():
    a = ob.MetricsReport(dice=0.4, hd95=None)
    b = ob.MetricsReport(dice=0.8, hd95=2.0)
    agg, skipped = ob.aggregate([a, b])
    assert agg.dice == pytest.approx(0.6) and agg.hd95 == 2.0
    assert skipped["hd95"] == 1 and skipped["dice"] == 0
    assert agg.iou is ob.UNDEFINED
