"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run: every operation eagerly computes its numpy result and, when
gradients are enabled, records a backward closure referencing its parents.
The implicit graph is rebuilt on every forward pass, which keeps gated /
early-exit control flow trivially correct.

Everything is float64. Speed comes from keeping the per-node payloads large
(whole point batches, whole feature maps), not from clever kernels.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import ConfigError, ContractError, NumericError, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A numpy float64 array plus an optional gradient buffer.

    `grad` is lazily allocated; `zero_grad` installs a zero buffer so that
    parameters untouched by a backward pass still report zero gradients.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bw")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._bw = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; the free functions hold the actual rules
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents, bw):
    """Wrap `data`; record backward only if enabled and any parent needs it."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bw = bw
    return out


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
        if t.grad.shape != t.data.shape:
            t.grad = np.broadcast_to(t.grad, t.data.shape).copy()
    else:
        t.grad += g


def _accum_owned(t: Tensor, g):
    """Like _accum but takes ownership of `g`.

    Only valid when `g` is a freshly allocated array the caller will never
    touch again (no views of upstream gradients).
    """
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor):
    """Reverse-mode sweep from a scalar loss.

    Accumulates dLoss/dT into `t.grad` for every reachable tensor with
    `requires_grad`. Non-scalar losses are a contract violation.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    # iterative topological order (graphs can be deep)
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad += 1.0
    for node in reversed(topo):
        if node._bw is not None and node.grad is not None:
            node._bw(node.grad)
            if node is not loss:
                # interior buffers are not needed after their sweep
                node.grad = None
                node._bw = None
                node._parents = ()


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def bw(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, -g)

    return _make(-a.data, (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0

    def bw(g):
        _accum(a, g * mask)

    return _make(a.data * mask, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        _accum(a, g * s * (1.0 - s))

    return _make(s, (a,), bw)


def sine(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, g * np.cos(a.data))

    return _make(np.sin(a.data), (a,), bw)


def cosine(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, -g * np.sin(a.data))

    return _make(np.cos(a.data), (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.data.shape[1]} vs {b.data.shape[0]}")
    data = a.data @ b.data

    def bw(g):
        _accum_owned(a, g @ b.data.T)
        _accum_owned(b, a.data.T @ g)

    return _make(data, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w (+ b). Shapes [n,in] @ [in,out] -> [n,out]."""
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(
            f"linear input width {x.data.shape[-1]} does not match weight rows {w.data.shape[0]}"
        )
    data = x.data @ w.data
    if b is not None:
        if b.data.shape != (w.data.shape[1],):
            raise ShapeError(f"bias shape {b.data.shape} does not match out width {w.data.shape[1]}")
        data = data + b.data

    def bw(g):
        _accum_owned(x, g @ w.data.T)
        _accum_owned(w, x.data.T @ g)
        if b is not None:
            _accum_owned(b, g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _make(data, parents, bw)


# ---------------------------------------------------------------------------
# reductions, shaping


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(data, (a,), bw)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), bw)


def moveaxis(a: Tensor, src, dst) -> Tensor:
    def bw(g):
        _accum(a, np.moveaxis(g, dst, src))

    return _make(np.ascontiguousarray(np.moveaxis(a.data, src, dst)), (a,), bw)


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make(data, tuple(tensors), bw)


# ---------------------------------------------------------------------------
# indexing


def _scatter_rows(idx, vals, n_rows):
    """Sum rows of `vals` into an [n_rows, ...] buffer at `idx` (may repeat)."""
    tail = vals.shape[1:]
    width = int(np.prod(tail)) if tail else 1
    flat = np.ascontiguousarray(vals.reshape(len(idx), width))
    idx = idx.astype(np.int64, copy=False)
    if width % 2 == 0 and width > 0:
        # complex view halves the element count np.add.at has to touch
        out = np.zeros((n_rows, width // 2), dtype=np.complex128)
        np.add.at(out, idx, flat.view(np.complex128))
        return out.view(np.float64).reshape((n_rows,) + tail)
    out = np.zeros((n_rows, width))
    np.add.at(out, idx, flat)
    return out.reshape((n_rows,) + tail)


def take(a: Tensor, indices, axis=0) -> Tensor:
    """Gather along one axis; duplicate indices are allowed."""
    idx = np.asarray(indices, dtype=np.int64)
    data = np.take(a.data, idx, axis=axis)

    def bw(g):
        if axis == 0:
            _accum_owned(a, _scatter_rows(idx, g, a.data.shape[0]))
        else:
            gm = np.moveaxis(g, axis, 0)
            acc = _scatter_rows(idx, np.ascontiguousarray(gm), a.data.shape[axis])
            _accum(a, np.moveaxis(acc, 0, axis))

    return _make(data, (a,), bw)


def scatter_add_rows(vals: Tensor, indices, n_rows: int) -> Tensor:
    """out[i] = sum of vals rows whose index equals i; inverse of `take`."""
    idx = np.asarray(indices, dtype=np.int64)
    data = _scatter_rows(idx, vals.data, n_rows)

    def bw(g):
        _accum_owned(vals, g[idx])

    return _make(data, (vals,), bw)


def select_per_row(a: Tensor, cols) -> Tensor:
    """out[n] = a[n, cols[n]] for a 2-D tensor."""
    cols = np.asarray(cols, dtype=np.int64)
    n = a.data.shape[0]
    rows = np.arange(n)
    data = a.data[rows, cols]

    def bw(g):
        buf = np.zeros_like(a.data)
        buf[rows, cols] = g
        _accum(a, buf)

    return _make(data, (a,), bw)


# ---------------------------------------------------------------------------
# softmax family


def softmax(a: Tensor) -> Tensor:
    """Row softmax over the last axis, max-subtracted for stability."""
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax input contains non-finite values")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accum(a, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _make(s, (a,), bw)


def log_softmax(a: Tensor) -> Tensor:
    if not np.all(np.isfinite(a.data)):
        raise NumericError("log_softmax input contains non-finite values")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def bw(g):
        _accum(a, g - np.exp(out) * g.sum(axis=-1, keepdims=True))

    return _make(out, (a,), bw)


# ---------------------------------------------------------------------------
# normalization


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=lead))
        _accum(bias, g.sum(axis=lead))
        gx = g * gain.data
        d = x.data.shape[-1]
        term = gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / d
        _accum(x, term * inv)

    return _make(data, (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# image sampling


def bilinear_sample_maps(maps: Tensor, map_idx, coords: Tensor) -> Tensor:
    """Sample a stack of feature maps at continuous (row, col) locations.

    maps:    [n_maps, H, W, C]
    map_idx: int array [S], which map each sample reads (not differentiated)
    coords:  Tensor [S, 2] of (row, col); locations outside [0,H-1]x[0,W-1]
             read zeros (zero-padding), so samples fade to zero at borders.

    Differentiable w.r.t. both `maps` and `coords`.
    """
    nm, hh, ww, cc = maps.data.shape
    midx = np.asarray(map_idx, dtype=np.int64)
    flat = maps.data.reshape(nm * hh * ww, cc)
    r = coords.data[:, 0]
    c = coords.data[:, 1]
    r0 = np.floor(r)
    c0 = np.floor(c)
    fr = r - r0
    fc = c - c0
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)
    base = midx * (hh * ww)

    corners = []
    for dr in (0, 1):
        ri = r0 + dr
        rv = (ri >= 0) & (ri < hh)
        wr = fr if dr else (1.0 - fr)
        for dc in (0, 1):
            ci = c0 + dc
            valid = rv & (ci >= 0) & (ci < ww)
            idx = base + np.clip(ri, 0, hh - 1) * ww + np.clip(ci, 0, ww - 1)
            wc = fc if dc else (1.0 - fc)
            w = wr * wc * valid
            corners.append((idx, w, dr, dc))

    out = np.zeros((len(midx), cc))
    for idx, w, _, _ in corners:
        out += w[:, None] * flat[idx]

    def bw(g):
        if maps.requires_grad:
            n_flat = nm * hh * ww
            acc = np.zeros((n_flat, cc))
            for idx, w, _, _ in corners:
                acc += _scatter_rows(idx, w[:, None] * g, n_flat)
            _accum(maps, acc.reshape(maps.data.shape))
        if coords.requires_grad:
            gr = np.zeros(len(midx))
            gc = np.zeros(len(midx))
            for idx, w, dr, dc in corners:
                dot = (flat[idx] * g).sum(axis=1)
                valid = w != 0.0
                # w = wr*wc*valid; d w/d fr = (+-wc)*valid, d w/d fc = (+-wr)*valid
                wr = fr if dr else (1.0 - fr)
                wc = fc if dc else (1.0 - fc)
                gr += np.where(valid, (1.0 if dr else -1.0) * wc * dot, 0.0)
                gc += np.where(valid, (1.0 if dc else -1.0) * wr * dot, 0.0)
            _accum(coords, np.stack([gr, gc], axis=1))

    return _make(out, (maps, coords), bw)


def bilinear_sample(fmap: Tensor, p: Tensor) -> Tensor:
    """Sample one [H, W, C] map at a single continuous (row, col) point."""
    out = bilinear_sample_maps(
        reshape(fmap, (1,) + fmap.data.shape), np.zeros(1, dtype=np.int64), reshape(p, (1, 2))
    )
    return reshape(out, (fmap.data.shape[2],))


def deformable_pool(maps_list, map_idx, coords_list, weights: Tensor) -> Tensor:
    """Fused multi-level deformable sampling with attention pooling.

    Per level l: maps_list[l] is a [n_maps, H_l, W_l, C] stack and
    coords_list[l] gives [P, heads, Ns, 2] sample locations (that level's
    own cell units). `map_idx` [P, heads] selects the map per instance and
    head; `weights` [P, heads, L*Ns] holds the jointly softmaxed attention
    weights, level-major. Returns sum_l sum_s w * bilinear(map, coord) as
    [P, heads, C]. Equivalent to bilinear_sample_maps + mul + sum, without
    materializing the per-sample features.
    """
    from . import _kernels as K

    levels = len(maps_list)
    p, h = map_idx.shape
    ns = coords_list[0].data.shape[2]
    cc = maps_list[0].data.shape[3]
    midx = np.ascontiguousarray(map_idx, dtype=np.int64)
    fwd = K.pool_forward if K.HAVE_NUMBA else K.pool_forward_numpy
    bwd = K.pool_backward if K.HAVE_NUMBA else K.pool_backward_numpy
    out = np.zeros((p, h, cc))
    for lvl in range(levels):
        w_l = np.ascontiguousarray(weights.data[:, :, lvl * ns : (lvl + 1) * ns])
        fwd(maps_list[lvl].data, midx, np.ascontiguousarray(coords_list[lvl].data), w_l, out)

    def bw(g):
        g = np.ascontiguousarray(g)
        dweights = np.zeros_like(weights.data)
        for lvl in range(levels):
            m = maps_list[lvl]
            c = coords_list[lvl]
            dmaps = np.zeros_like(m.data)
            dcoords = np.zeros_like(c.data)
            dw = np.zeros((p, h, ns))
            w_l = np.ascontiguousarray(weights.data[:, :, lvl * ns : (lvl + 1) * ns])
            bwd(m.data, midx, np.ascontiguousarray(c.data), w_l, g, dmaps, dcoords, dw)
            _accum_owned(m, dmaps)
            _accum_owned(c, dcoords)
            dweights[:, :, lvl * ns : (lvl + 1) * ns] = dw
        _accum_owned(weights, dweights)

    return _make(out, tuple(maps_list) + tuple(coords_list) + (weights,), bw)


# ---------------------------------------------------------------------------
# convolution / pooling (for the image stem)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """Same-padded 2-D convolution, NHWC-single-image layout.

    x: [H, W, Cin], w: [kh, kw, Cin, Cout], b: [Cout]; odd kernels only.
    """
    hh, ww, cin = x.data.shape
    kh, kw, wcin, cout = w.data.shape
    if wcin != cin:
        raise ShapeError(f"conv2d input channels {cin} do not match kernel channels {wcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError("conv2d expects odd kernel sizes")
    ph, pw = kh // 2, kw // 2
    padded = np.pad(x.data, ((ph, ph), (pw, pw), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(0, 1))
    win = win[::stride, ::stride]  # [Ho, Wo, Cin, kh, kw]
    ho, wo = win.shape[0], win.shape[1]
    cols = np.ascontiguousarray(np.moveaxis(win, 2, 4)).reshape(ho * wo, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    data = (cols @ wmat + b.data).reshape(ho, wo, cout)

    def bw(g):
        gm = g.reshape(ho * wo, cout)
        _accum(w, (cols.T @ gm).reshape(w.data.shape))
        _accum(b, gm.sum(axis=0))
        if x.requires_grad:
            gcols = (gm @ wmat.T).reshape(ho, wo, kh, kw, cin)
            gpad = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    gpad[i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
            _accum(x, gpad[ph : ph + hh, pw : pw + ww])

    return _make(data, (x, w, b), bw)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pool with ceil semantics; edge cells average fewer taps."""
    hh, ww, cc = x.data.shape
    ho, wo = -(-hh // 2), -(-ww // 2)
    padded = np.pad(x.data, ((0, 2 * ho - hh), (0, 2 * wo - ww), (0, 0)))
    sums = padded.reshape(ho, 2, wo, 2, cc).sum(axis=(1, 3))
    rc = np.full(ho, 2.0)
    ccn = np.full(wo, 2.0)
    if hh % 2:
        rc[-1] = 1.0
    if ww % 2:
        ccn[-1] = 1.0
    counts = np.outer(rc, ccn)[:, :, None]
    data = sums / counts

    def bw(g):
        spread = np.repeat(np.repeat(g / counts, 2, axis=0), 2, axis=1)
        _accum(x, spread[:hh, :ww])

    return _make(data, (x,), bw)


# ---------------------------------------------------------------------------
# optimizer


class AdamWState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self):
        self.step = 0
        self.m = {}
        self.v = {}

    def ensure(self, name, shape):
        if name not in self.m:
            self.m[name] = np.zeros(shape)
            self.v[name] = np.zeros(shape)


def adamw_step(
    params: dict,
    state: AdamWState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    lr_scales: dict | None = None,
):
    """One decoupled-weight-decay Adam update over named parameters.

    Decay multiplies weights directly by (1 - lr*wd); it never enters the
    moment estimates. Parameters with `grad is None` see a zero gradient.
    `lr_scales` maps name prefixes to learning-rate multipliers.
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        scale = 1.0
        if lr_scales:
            for prefix, s in lr_scales.items():
                if name.startswith(prefix):
                    scale = s
                    break
        step_lr = lr * scale
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        state.ensure(name, p.data.shape)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        if weight_decay:
            p.data *= 1.0 - step_lr * weight_decay
        p.data -= step_lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ---------------------------------------------------------------------------
# verification helper


def finite_difference_check(fn, tensors, h=1e-5, max_checks=16, rng=None):
    """Compare analytic gradients of scalar `fn(*tensors)` to central FD.

    Checks up to `max_checks` randomly chosen elements per tensor and
    returns the worst relative error observed.
    """
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    loss = fn(*tensors)
    if loss.data.size != 1:
        raise ContractError("finite_difference_check expects a scalar function")
    for t in tensors:
        t.zero_grad()
    backward(loss)
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        flat = t.data.reshape(-1)
        n = flat.size
        picks = range(n) if n <= max_checks else rng.choice(n, size=max_checks, replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn(*tensors).data)
            flat[i] = orig - h
            dn = float(fn(*tensors).data)
            flat[i] = orig
            fd = (up - dn) / (2.0 * h)
            an = float(t.grad.reshape(-1)[i])
            denom = max(abs(fd), abs(an), 1.0)
            worst = max(worst, abs(fd - an) / denom)
    return worst


def check_finite(x: np.ndarray, what: str):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")


def xavier_uniform(rng, fan_in, fan_out, shape=None, gain=1.0):
    """Glorot-uniform init from an explicit generator."""
    limit = gain * math.sqrt(6.0 / (fan_in + fan_out))
    shape = shape if shape is not None else (fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape)
