"""AdamW + cosine schedule training loop, early stopping, evaluation, checkpoints."""

from __future__ import annotations

import csv
import io
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffgraph as dg
from . import objective as ob
from .config import TrainConfig, flatten, format_config, from_flat, parse_config_text
from .decoder import binarize
from .model import TokenSegModel
from .volume import MaskVolume, Volume3D, normalize_intensity

log = logging.getLogger(__name__)

ADAM_EPS = 1e-8


class NonFiniteError(RuntimeError):
    """A gradient or loss became NaN/inf."""


class TrainingAborted(RuntimeError):
    def __init__(self, msg, model, runlog):
        super().__init__(msg)
        self.model = model
        self.runlog = runlog


# -- optimizer --------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adamw_step(params, state: OptimizerState, lr, beta1=0.9, beta2=0.999,
               weight_decay=1e-5, eps=ADAM_EPS):
    """One AdamW update with decoupled decay; zeroes gradients afterwards."""
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in {p.name}")
    state.step += 1
    t = state.step
    for p in params:
        key = p.name
        if key not in state.m:
            state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        m, v, g = state.m[key], state.v[key], p.grad
        p.data -= lr * weight_decay * p.data
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)
        p.zero_grad()


def cosine_lr(epoch, base, min_lr, total):
    if not 0 <= epoch <= total:
        raise ValueError(f"epoch {epoch} outside [0, {total}]")
    return min_lr + 0.5 * (base - min_lr) * (1 + math.cos(math.pi * epoch / total))


# -- run log ------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_dice: float
    val_iou: float
    lr: float
    wall_ms: float = 0.0


RUNLOG_COLUMNS = ("epoch", "train_loss", "val_loss", "val_dice", "val_iou", "lr")


@dataclass
class RunLog:
    records: list = field(default_factory=list)

    def append(self, rec: EpochRecord):
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epochs must strictly increase")
        self.records.append(rec)

    @property
    def val_dice(self):
        return [r.val_dice for r in self.records]

    def to_csv(self) -> str:
        """Deterministic columns only; wall time goes to :meth:`timing_csv`."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RUNLOG_COLUMNS)
        for r in self.records:
            w.writerow([r.epoch] + [repr(float(getattr(r, c))) for c in RUNLOG_COLUMNS[1:]])
        return buf.getvalue()

    def timing_csv(self) -> str:
        lines = ["epoch,wall_ms"] + [f"{r.epoch},{r.wall_ms:.3f}" for r in self.records]
        return "\n".join(lines) + "\n"


def early_stop(val_dice, patience) -> bool:
    """True once the best (strictly improving) Dice is ``patience`` epochs old."""
    if not len(val_dice):
        raise ValueError("empty run log")
    best = int(np.argmax(val_dice))
    return len(val_dice) - 1 - best >= patience


# -- data -----------------------------------------------------------------------------


@dataclass
class Case:
    name: str
    volume: np.ndarray      # normalized intensities
    mask: np.ndarray        # uint8 labels
    spacing: tuple = (1.0, 1.0, 1.0)


def make_case(name, volume: Volume3D, mask: MaskVolume | None) -> Case:
    if mask is not None and mask.dims != volume.dims:
        raise ValueError(f"{name}: mask dims {mask.dims} != volume dims {volume.dims}")
    norm, _ = normalize_intensity(volume)
    labels = None if mask is None else mask.labels
    return Case(name, norm.voxels, labels, volume.spacing)


def case_loss(model, case, cfg: TrainConfig, record=True):
    res = model.forward(case.volume, beta=cfg.loss.beta)
    target = case.mask[None]
    loss = ob.total_loss(ob.dice_loss(res.prob, target, cfg.loss.eps),
                         ob.bce_loss(res.prob, target), res.vq, cfg.loss)
    return loss, res


def validate(model, cases, cfg: TrainConfig):
    losses, dices, ious = [], [], []
    for c in cases:
        loss, res = case_loss(model, c, cfg)
        pred = binarize(res.prob, cfg.model.theta)
        losses.append(loss.item())
        d, i = ob.dice_score(pred, c.mask), ob.iou(pred, c.mask)
        # an empty prediction of an empty target is a perfect match
        dices.append(1.0 if d is None else d)
        ious.append(1.0 if i is None else i)
    return float(np.mean(losses)), float(np.mean(dices)), float(np.mean(ious))


# -- training -----------------------------------------------------------------------------


def train(cfg: TrainConfig, train_set, val_set, on_epoch=None):
    """Optimize a fresh model; returns (best-Dice model, final-state dict, RunLog).

    ``on_epoch(record)`` runs after every epoch; returning True ends training early.
    """
    cfg.validate()
    if not train_set or not val_set:
        raise ValueError("training and validation sets must be nonempty")
    model = TokenSegModel(cfg.model, seed=cfg.seed)
    model.prime_codebook([c.volume for c in train_set[: cfg.batch_size]])
    params = model.parameters()
    state = OptimizerState()
    runlog = RunLog()
    rng = np.random.default_rng(cfg.seed)
    best_dice, best_state = -1.0, model.state()

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        lr = cosine_lr(epoch - 1, cfg.base_lr, cfg.min_lr, cfg.max_epochs)
        order = rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_set[i] for i in order[start:start + cfg.batch_size]]
            for case in batch:
                with dg.ComputeRecord() as rec:
                    loss, _ = case_loss(model, case, cfg)
                    if not np.isfinite(loss.item()):
                        raise _abort(model, best_state, runlog, epoch, "non-finite loss")
                    dg.backward(dg.scale(loss, 1.0 / len(batch)), rec)
                losses.append(loss.item())
            try:
                adamw_step(params, state, lr, cfg.beta1, cfg.beta2, cfg.weight_decay)
            except NonFiniteError as e:
                raise _abort(model, best_state, runlog, epoch, str(e)) from e
        val_loss, val_dice, val_iou = validate(model, val_set, cfg)
        rec_ = EpochRecord(epoch, float(np.mean(losses)), val_loss, val_dice, val_iou, lr,
                           (time.perf_counter() - t0) * 1e3)
        runlog.append(rec_)
        if val_dice > best_dice:
            best_dice, best_state = val_dice, model.state()
        log.info("epoch %d loss %.4f val_dice %.4f lr %.2e", epoch, rec_.train_loss,
                 val_dice, lr)
        if on_epoch is not None and on_epoch(rec_):
            log.info("stop requested after epoch %d", epoch)
            break
        if early_stop(runlog.val_dice, cfg.patience):
            log.info("early stop at epoch %d (best val dice %.4f)", epoch, best_dice)
            break

    final_state = model.state()
    model.load_state(best_state)
    return model, final_state, runlog


def _abort(model, best_state, runlog, epoch, why):
    model.load_state(best_state)
    return TrainingAborted(f"epoch {epoch}: {why}; restored last good checkpoint", model, runlog)


# -- evaluation ---------------------------------------------------------------------------------


def evaluate_case(model, case: Case, theta=0.5, radius=2, assignments=None) -> ob.MetricsReport:
    """Metrics for one case; appends its code assignments to ``assignments`` if given."""
    t0 = time.perf_counter()
    res = model.forward(case.volume)
    elapsed = (time.perf_counter() - t0) * 1e3
    if assignments is not None:
        assignments.append(res.qpool.indices)
    pred = binarize(res.prob, theta)
    return ob.MetricsReport(
        dice=ob.dice_score(pred, case.mask),
        iou=ob.iou(pred, case.mask),
        hd95=ob.hd95(pred, case.mask, case.spacing),
        sensitivity=ob.sensitivity(pred, case.mask),
        precision=ob.precision(pred, case.mask),
        codebook_utilization=ob.codebook_utilization(res.qpool.indices,
                                                     model.cfg.codebook_size),
        boundary_token_ratio=ob.boundary_token_ratio(res.sparse, case.mask, radius),
        compression_ratio=ob.compression_ratio(case.volume.shape, len(res.sparse)),
        time_ms=elapsed,
    )


def evaluate(model, cases, theta=0.5, radius=2):
    """Per-case reports, their mean, undefined counts and set-level codebook use.

    The mean skips undefined entries. The last value counts prototypes used
    anywhere in the set, unlike the mean of the per-case fractions.
    """
    if not cases:
        raise ValueError("empty evaluation set")
    assignments = []
    per_case = [evaluate_case(model, c, theta, radius, assignments) for c in cases]
    agg, skipped = ob.aggregate(per_case)
    return agg, per_case, skipped, ob.codebook_utilization(assignments, model.cfg.codebook_size)


# -- checkpoints ---------------------------------------------------------------------------------

CKPT_MAGIC = b"TSCK"
CKPT_VERSION = 1


def save_checkpoint(path, cfg: TrainConfig, state: dict):
    """Named float64 tensors plus the resolved config, little-endian."""
    meta = format_config(cfg).encode("utf-8")
    out = [struct.pack("<4sHHI", CKPT_MAGIC, CKPT_VERSION, 0, len(meta)), meta,
           struct.pack("<I", len(state))]
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        key = name.encode("utf-8")
        out.append(struct.pack("<H", len(key)) + key + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    magic, version, _, meta_len = struct.unpack_from("<4sHHI", raw, 0)
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise ValueError(f"{path}: not a TokenSeg checkpoint")
    off = 12
    cfg = from_flat(parse_config_text(raw[off:off + meta_len].decode("utf-8")))
    off += meta_len
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    state = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + klen].decode("utf-8")
        off += klen
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        n = int(np.prod(shape)) * 8
        state[name] = np.frombuffer(raw[off:off + n], dtype="<f8").reshape(shape).astype(np.float64)
        off += n
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    return cfg, state


def model_from_checkpoint(path):
    cfg, state = load_checkpoint(path)
    model = TokenSegModel(cfg.model, seed=cfg.seed)
    model.load_state(state)
    return cfg, model


def config_snapshot(cfg: TrainConfig) -> dict:
    return flatten(cfg)
