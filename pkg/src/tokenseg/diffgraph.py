"""Dense tensor kernels with tape-based reverse-mode differentiation.

Tensors carry numpy arrays laid out channel-first, ``(C, D, H, W)`` for feature
maps. Operations executed inside an active :class:`ComputeRecord` are appended
to it; :func:`backward` replays the record in reverse. Outside a record the
kernels run as plain numpy with no bookkeeping (inference mode).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

_local = threading.local()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


class Parameter(Tensor):
    """Trainable leaf with a gradient accumulator of identical shape."""

    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad[...] = 0.0


class ComputeRecord:
    """Ordered list of executed ops; use as a context manager."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)


def active_record():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def make_op(out_data, parents, backward_fn):
    """Wrap ``out_data`` as a Tensor and record ``backward_fn`` if needed.

    ``backward_fn(g)`` receives the gradient of the output and returns one
    gradient (or None) per parent, in order.
    """
    out = Tensor(out_data)
    rec = active_record()
    if rec is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        rec.nodes.append((out, tuple(parents), backward_fn))
    return out


def backward(loss: Tensor, record: ComputeRecord | None = None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    record = record if record is not None else active_record()
    if record is None:
        raise RuntimeError("backward called without a compute record")
    loss.grad = np.ones_like(loss.data)
    for out, parents, fn in reversed(record.nodes):
        if out.grad is None:
            continue
        grads = fn(out.grad)
        for p, g in zip(parents, grads):
            if g is None or not p.requires_grad:
                continue
            if p.grad is None:
                p.grad = np.array(g, dtype=np.float64)
            elif isinstance(p, Parameter):
                p.grad += g
            else:
                p.grad = p.grad + g


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


# -- elementwise --------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch {a.shape} vs {b.shape}")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"sub shape mismatch {a.shape} vs {b.shape}")
    return make_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch {a.shape} vs {b.shape}")
    return make_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x, c: float):
    return make_op(x.data * c, (x,), lambda g: (g * c,))


def relu(x):
    mask = x.data > 0
    return make_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x):
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def total(x):
    return make_op(np.array(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),))


def mean(x):
    n = x.data.size
    return make_op(np.array(x.data.sum() / n), (x,), lambda g: (np.full(x.shape, float(g) / n),))


# -- shape ops ----------------------------------------------------------------


def reshape(x, shape):
    old = x.shape
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x):
    return make_op(x.data.T, (x,), lambda g: (g.T,))


def concat(tensors, axis=0):
    """Stack along ``axis`` in argument order (channels a-then-b for axis 0)."""
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.data.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis
        ):
            raise ValueError(f"concat: incompatible shapes {ref} and {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def concat_channels(a, b):
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"concat_channels: spatial mismatch {a.shape[1:]} vs {b.shape[1:]}")
    return concat([a, b], axis=0)


def crop(x, spatial):
    """Keep the leading ``spatial`` extent of each spatial axis."""
    d, h, w = spatial
    if d > x.shape[1] or h > x.shape[2] or w > x.shape[3]:
        raise ValueError(f"crop target {spatial} exceeds {x.shape[1:]}")
    full = x.shape

    def fn(g):
        out = np.zeros(full)
        out[:, :d, :h, :w] = g
        return (out,)

    return make_op(x.data[:, :d, :h, :w].copy(), (x,), fn)


def take(x, idx, axis=0):
    idx = np.asarray(idx, dtype=np.intp)
    full = x.shape

    def fn(g):
        out = np.zeros(full)
        np.add.at(out, (slice(None),) * axis + (idx,), g)
        return (out,)

    return make_op(np.take(x.data, idx, axis=axis), (x,), fn)


def scatter_sites(values, coords, shape):
    """Place rows of ``values`` (k, C) at ``coords`` (k, 3) of a zero (C, D, H, W) grid."""
    coords = np.asarray(coords, dtype=np.intp).reshape(-1, 3)
    c, d, h, w = shape
    if values.shape != (len(coords), c):
        raise ValueError(f"scatter_sites: values {values.shape} vs {len(coords)} sites x {c}")
    if len(coords) and (
        (coords < 0).any() or (coords >= np.array([d, h, w])).any()
    ):
        raise IndexError(f"scatter_sites: anchor outside lattice {(d, h, w)}")
    out = np.zeros(shape)
    di, hi, wi = coords.T
    out[:, di, hi, wi] = values.data.T
    return make_op(out, (values,), lambda g: (g[:, di, hi, wi].T.copy(),))


# -- linear maps ----------------------------------------------------------------


def pointwise(x, w, b=None):
    """Per-site linear map over the channel axis: ``w`` is (Cout, Cin)."""
    cin = x.shape[0]
    if w.shape[1] != cin:
        raise ValueError(f"pointwise: weight {w.shape} does not match {cin} channels")
    rest = x.shape[1:]
    flat = x.data.reshape(cin, -1)
    out = w.data @ flat
    if b is not None:
        out = out + b.data[:, None]
    out = out.reshape((w.shape[0],) + rest)

    def fn(g):
        g2 = g.reshape(w.shape[0], -1)
        gx = (w.data.T @ g2).reshape(x.shape) if x.requires_grad else None
        gw = g2 @ flat.T if w.requires_grad else None
        gb = g2.sum(axis=1) if b is not None and b.requires_grad else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return make_op(out, parents, fn)


def conv3d(x, w, b=None, stride=1):
    """Zero-padded ('same') 3D cross-correlation with cubic kernels of size 1 or 3."""
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    if x.data.ndim != 4 or x.shape[0] != cin:
        raise ValueError(f"conv3d: input {x.shape} does not match weight {w.shape}")
    if w.shape[2:] != (k, k, k) or k not in (1, 3):
        raise ValueError(f"conv3d: kernel must be 1x1x1 or 3x3x3, got {w.shape[2:]}")
    if stride not in (1, 2):
        raise ValueError(f"conv3d: stride must be 1 or 2, got {stride}")
    if b is not None and b.shape != (cout,):
        raise ValueError(f"conv3d: bias {b.shape} does not match {cout} outputs")
    p = k // 2
    _, d, h, wd = x.shape
    od, oh, ow = (d - 1) // stride + 1, (h - 1) // stride + 1, (wd - 1) // stride + 1
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (p, p))) if p else x.data
    offsets = [(i, j, l) for i in range(k) for j in range(k) for l in range(k)]
    cols = np.empty((cin, len(offsets), od, oh, ow))
    for n, (i, j, l) in enumerate(offsets):
        cols[:, n] = xp[:, i:i + stride * od:stride, j:j + stride * oh:stride,
                        l:l + stride * ow:stride]
    cols = cols.reshape(cin * len(offsets), -1)
    wmat = w.data.reshape(cout, -1)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(cout, od, oh, ow)

    def fn(g):
        g2 = g.reshape(cout, -1)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=1) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(cin, len(offsets), od, oh, ow)
            gxp = np.zeros(xp.shape)
            for n, (i, j, l) in enumerate(offsets):
                gxp[:, i:i + stride * od:stride, j:j + stride * oh:stride,
                    l:l + stride * ow:stride] += gcols[:, n]
            gx = gxp[:, p:p + d, p:p + h, p:p + wd] if p else gxp
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return make_op(out, parents, fn)


# -- pooling and resampling --------------------------------------------------------


def partition(n: int, cells: int) -> np.ndarray:
    """Start offsets splitting ``n`` sites into ``cells`` contiguous runs.

    Every run has ``n // cells`` sites; the ``n % cells`` trailing (edge) runs
    take one extra site each.
    """
    if cells < 1 or cells > n:
        raise ValueError(f"cannot split {n} sites into {cells} cells")
    base, rem = divmod(n, cells)
    sizes = np.full(cells, base)
    if rem:
        sizes[cells - rem:] += 1
    return np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.intp)


def _sizes(starts, n):
    return np.diff(np.append(starts, n))


def cell_pool(x, starts):
    """Mean over the cells defined by per-axis start offsets ``(sd, sh, sw)``."""
    _, d, h, w = x.shape
    sd, sh, sw = (np.asarray(s, dtype=np.intp) for s in starts)
    nd, nh, nw = _sizes(sd, d), _sizes(sh, h), _sizes(sw, w)
    if min(nd.min(), nh.min(), nw.min()) < 1:
        raise ValueError("cell_pool: empty cell")
    vol = nd[:, None, None] * nh[None, :, None] * nw[None, None, :]
    s = np.add.reduceat(x.data, sd, axis=1)
    s = np.add.reduceat(s, sh, axis=2)
    s = np.add.reduceat(s, sw, axis=3)
    out = s / vol

    def fn(g):
        g = g / vol
        g = np.repeat(g, nd, axis=1)
        g = np.repeat(g, nh, axis=2)
        return (np.repeat(g, nw, axis=3),)

    return make_op(out, (x,), fn)


def pad_edge(x, extra):
    """Replicate the last slice of each spatial axis ``extra[i]`` more times."""
    ed, eh, ew = extra
    if not (ed or eh or ew):
        return x
    _, d, h, w = x.shape
    out = np.pad(x.data, ((0, 0), (0, ed), (0, eh), (0, ew)), mode="edge")

    def fn(g):
        g = g.copy()
        if ew:
            g[..., w - 1] += g[..., w:].sum(axis=3)
            g = g[..., :w]
        if eh:
            g[:, :, h - 1] += g[:, :, h:].sum(axis=2)
            g = g[:, :, :h]
        if ed:
            g[:, d - 1] += g[:, d:].sum(axis=1)
            g = g[:, :d]
        return (g,)

    return make_op(out, (x,), fn)


def avg_pool3d(x, cell):
    """Average non-overlapping ``cell`` blocks; ragged edges are replication-padded."""
    cd, ch, cw = cell
    if min(cell) < 1:
        raise ValueError(f"avg_pool3d: zero-size cell {cell}")
    _, d, h, w = x.shape
    extra = tuple((-n) % c for n, c in zip((d, h, w), cell))
    xp = pad_edge(x, extra)
    _, d2, h2, w2 = xp.shape
    starts = (np.arange(0, d2, cd), np.arange(0, h2, ch), np.arange(0, w2, cw))
    return cell_pool(xp, starts)


def _upsample_matrix(n: int) -> np.ndarray:
    """Linear x2 interpolation, align-corners-false, edges clamped."""
    m = np.zeros((2 * n, n))
    for j in range(2 * n):
        src = min(max((j + 0.5) / 2 - 0.5, 0.0), n - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n - 1)
        frac = src - i0
        m[j, i0] += 1.0 - frac
        m[j, i1] += frac
    return m


_UP_CACHE: dict[int, np.ndarray] = {}


def upsample_matrix(n: int) -> np.ndarray:
    if n not in _UP_CACHE:
        _UP_CACHE[n] = _upsample_matrix(n)
    return _UP_CACHE[n]


def upsample2_trilinear(x):
    c, d, h, w = x.shape
    ud, uh, uw = upsample_matrix(d), upsample_matrix(h), upsample_matrix(w)
    y = x.data @ uw.T                                   # (c, d, h, 2w)
    y = uh @ y                                          # (c, d, 2h, 2w)
    y = (ud @ y.reshape(c, d, -1)).reshape(c, 2 * d, 2 * h, 2 * w)

    def fn(g):
        g = (ud.T @ g.reshape(c, 2 * d, -1)).reshape(c, d, 2 * h, 2 * w)
        g = uh.T @ g
        return (g @ uw,)

    return make_op(y, (x,), fn)


# -- gradient checking ---------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    checked: int
    per_input: dict

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(f, inputs, tol=1e-4, h=1e-4, max_entries=None, seed=0) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f(*inputs)`` with central differences.

    The error for one input is ``max|analytic - numeric| / max(|analytic|, |numeric|)``
    taken over its checked entries, so entries with tiny gradients are judged on the
    scale of the whole tensor. ``max_entries`` samples that many entries per input.
    """
    inputs = [x if isinstance(x, Tensor) else Tensor(np.array(x, dtype=np.float64))
              for x in inputs]
    for x in inputs:
        x.requires_grad = True
        x.grad = np.zeros_like(x.data)
    with ComputeRecord() as rec:
        out = f(*inputs)
        backward(out, rec)
    analytic = [x.grad.copy() for x in inputs]

    rng = np.random.default_rng(seed)
    worst, checked, per_input = 0.0, 0, {}
    for n, x in enumerate(inputs):
        flat = x.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(len(idx))
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*inputs).item()
            flat[i] = orig - h
            fm = f(*inputs).item()
            flat[i] = orig
            numeric[k] = (fp - fm) / (2 * h)
        a = analytic[n].reshape(-1)[idx]
        scale_ = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0))
        err = 0.0 if scale_ == 0 else float(np.abs(a - numeric).max() / scale_)
        per_input[x.name or n] = err
        worst = max(worst, err)
        checked += len(idx)
    return GradCheckReport(worst, tol, checked, per_input)
