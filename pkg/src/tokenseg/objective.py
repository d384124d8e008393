"""Training losses and the evaluation metric suite.

Metrics that are not defined for an input (empty denominators, empty masks)
return ``UNDEFINED`` (None), never a number.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from scipy.ndimage import distance_transform_edt
from scipy.spatial.distance import cdist

from . import diffgraph as dg
from .config import LossWeights

UNDEFINED = None
BCE_CLAMP = 1e-7


def _labels(m):
    return np.asarray(getattr(m, "labels", m)).astype(bool)


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")


# -- losses --------------------------------------------------------------------


def dice_loss(pred: dg.Tensor, target, eps=1e-5) -> dg.Tensor:
    if np.size(target) != pred.data.size:
        raise ValueError(f"shape mismatch {np.shape(target)} vs {pred.shape}")
    y = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    p = pred.data
    inter = (y * p).sum()
    denom = y.sum() + p.sum() + eps
    num = 2.0 * inter + eps
    value = 1.0 - num / denom

    def fn(g):
        return (float(g) * -(2.0 * y * denom - num) / denom ** 2,)

    return dg.make_op(np.array(value), (pred,), fn)


def bce_loss(pred: dg.Tensor, target, delta=BCE_CLAMP) -> dg.Tensor:
    if np.size(target) != pred.data.size:
        raise ValueError(f"shape mismatch {np.shape(target)} vs {pred.shape}")
    y = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    p = np.clip(pred.data, delta, 1.0 - delta)
    n = p.size
    value = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).sum() / n
    inside = (pred.data >= delta) & (pred.data <= 1.0 - delta)

    def fn(g):
        return (float(g) * inside * -(y / p - (1.0 - y) / (1.0 - p)) / n,)

    return dg.make_op(np.array(value), (pred,), fn)


def total_loss(dice, bce, vq, w: LossWeights):
    """Weighted sum; accepts tensors (differentiable) or plain floats."""
    if not any(isinstance(t, dg.Tensor) for t in (dice, bce, vq)):
        return w.dice * dice + w.bce * bce + w.vq * vq
    parts = [dg.scale(dg.as_tensor(t), c) for t, c in ((dice, w.dice), (bce, w.bce), (vq, w.vq))]
    return dg.add(dg.add(parts[0], parts[1]), parts[2])


# -- overlap metrics ------------------------------------------------------------------


def confusion(pred, target):
    p, t = _labels(pred), _labels(target)
    _check_shapes(p, t)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return tp, fp, fn


def _ratio(num, den):
    return UNDEFINED if den == 0 else num / den


def dice_score(pred, target):
    tp, fp, fn = confusion(pred, target)
    return _ratio(2 * tp, 2 * tp + fp + fn)


def iou(pred, target):
    tp, fp, fn = confusion(pred, target)
    return _ratio(tp, tp + fp + fn)


def sensitivity(pred, target):
    tp, _, fn = confusion(pred, target)
    return _ratio(tp, tp + fn)


def precision(pred, target):
    tp, fp, _ = confusion(pred, target)
    return _ratio(tp, tp + fp)


# -- boundary metrics ------------------------------------------------------------------


def surface(mask) -> np.ndarray:
    """Foreground voxels with at least one 6-connected background neighbor
    (outside the volume counts as background)."""
    m = _labels(mask)
    p = np.pad(m, 1)
    inner = p[1:-1, 1:-1, 1:-1]
    all_fg = (p[:-2, 1:-1, 1:-1] & p[2:, 1:-1, 1:-1] & p[1:-1, :-2, 1:-1]
              & p[1:-1, 2:, 1:-1] & p[1:-1, 1:-1, :-2] & p[1:-1, 1:-1, 2:])
    return inner & ~all_fg


def _nearest(src, dst, chunk=4096):
    out = np.empty(len(src))
    for i in range(0, len(src), chunk):
        out[i:i + chunk] = cdist(src[i:i + chunk], dst).min(axis=1)
    return out


def hd95(a, b, spacing=(1.0, 1.0, 1.0)):
    """95th percentile of symmetric surface-to-surface nearest distances (mm).

    Brute force over surface pairs, O(|Sa| * |Sb|); fine for masks up to ~64^3.
    """
    ma, mb = _labels(a), _labels(b)
    _check_shapes(ma, mb)
    if not ma.any() or not mb.any():
        return UNDEFINED
    sp = np.asarray(spacing, dtype=np.float64)
    pa = np.argwhere(surface(ma)) * sp
    pb = np.argwhere(surface(mb)) * sp
    dists = np.concatenate([_nearest(pa, pb), _nearest(pb, pa)])
    return float(np.percentile(dists, 95))


# -- tokenization diagnostics -----------------------------------------------------------


def codebook_utilization(assignments, size: int) -> float:
    """Fraction of prototypes used at least once across ``assignments``."""
    if isinstance(assignments, np.ndarray):
        arrays = [assignments]
    else:
        arrays = [np.asarray(a) for a in assignments]
    used = np.unique(np.concatenate([a.ravel() for a in arrays])) if arrays else []
    return len(used) / size


def near_surface(mask, radius=2) -> np.ndarray:
    """Voxels within Euclidean ``radius`` of the mask surface (surface dilation)."""
    surf = surface(mask)
    if not surf.any():
        return surf
    return distance_transform_edt(~surf) <= radius


def token_boxes(levels, coords, cell_sizes, dims):
    """Full-resolution [start, stop) boxes covered by each token's cell."""
    f = (2 ** np.asarray(levels))[:, None]
    lo = np.asarray(coords) * f
    hi = np.minimum((np.asarray(coords) + np.asarray(cell_sizes)) * f, np.asarray(dims))
    return lo, hi


def boundary_token_ratio(sparse, gt, radius=2):
    """Fraction of selected tokens whose cell touches the dilated GT surface."""
    m = _labels(gt)
    if not m.any():
        return UNDEFINED
    near = near_surface(m, radius)
    lo, hi = token_boxes(sparse.levels, sparse.coords, sparse.cell_sizes, m.shape)
    hits = sum(
        bool(near[a[0]:b[0], a[1]:b[1], a[2]:b[2]].any()) for a, b in zip(lo, hi)
    )
    return hits / len(lo)


def compression_ratio(dims, k) -> float:
    if k < 1:
        raise ValueError("K must be >= 1")
    return float(np.prod(dims)) / k


# -- reports -------------------------------------------------------------------------------


@dataclass
class MetricsReport:
    dice: float | None = UNDEFINED
    iou: float | None = UNDEFINED
    hd95: float | None = UNDEFINED
    sensitivity: float | None = UNDEFINED
    precision: float | None = UNDEFINED
    codebook_utilization: float | None = UNDEFINED
    boundary_token_ratio: float | None = UNDEFINED
    compression_ratio: float | None = UNDEFINED
    time_ms: float | None = UNDEFINED

    def to_text(self, prefix="") -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{prefix}{f.name}={'undefined' if v is None else repr(float(v))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, prefix="") -> "MetricsReport":
        values = {}
        names = {f.name for f in fields(cls)}
        for line in text.splitlines():
            if "=" not in line or not line.startswith(prefix):
                continue
            key, raw = line[len(prefix):].split("=", 1)
            if key in names:
                values[key] = None if raw == "undefined" else float(raw)
        return cls(**values)

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


METRIC_KEYS = ("dice", "iou", "hd95", "sensitivity", "precision",
               "codebook_utilization", "boundary_token_ratio", "compression_ratio")


def aggregate(reports):
    """Mean per metric over cases, skipping undefined entries.

    Returns the aggregate report and, per metric, how many cases were undefined.
    """
    out, skipped = MetricsReport(), {}
    for f in fields(MetricsReport):
        vals = [getattr(r, f.name) for r in reports]
        defined = [v for v in vals if v is not None]
        skipped[f.name] = len(vals) - len(defined)
        setattr(out, f.name, float(np.mean(defined)) if defined else UNDEFINED)
    return out, skipped
