"""Dense tensors with reverse-mode differentiation on a recorded tape.

A ``Tensor`` wraps a numpy array. While a ``Tape`` is active (context
manager), every operation whose inputs require gradients appends a node to
the tape; ``backward`` replays the tape in reverse and returns gradients
for a named parameter map. Without an active tape the same functions are
plain forward numerics, which keeps decoding cheap.

Determinism: all reductions go through numpy, whose evaluation order is
fixed for a given shape and dtype, so repeated runs are bitwise identical.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class Tensor:
    """A shaped numeric array, optionally participating in a tape."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"


class Node:
    """One recorded operation: inputs, output, and its vector-Jacobian rule."""

    __slots__ = ("op", "inputs", "out", "backward")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], out: Tensor,
                 backward: Callable[[np.ndarray], tuple]):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward = backward


_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


class Tape:
    """Ordered record of operations; creation order is topological order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
            backward: Callable[[np.ndarray], tuple]) -> Tensor:
    """Create the output tensor, appending a node when a tape is active."""
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    if requires:
        stack = _tape_stack()
        if stack:
            stack[-1].nodes.append(Node(op, inputs, out, backward))
    return out


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _const(value, ref: Tensor) -> Tensor:
    """Coerce a plain number/array to a constant tensor of ref's dtype."""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=ref.dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class ShapeError(ValueError):
    """Raised when operand shapes do not conform; message names the shapes."""


# ---------------------------------------------------------------------------
# elementwise and structural operations
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _const(b, a)
    out = a.data + b.data
    return _record("add", (a, b), out, lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b) -> Tensor:
    b = _const(b, a)
    out = a.data - b.data
    return _record("sub", (a, b), out, lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    b = _const(b, a)
    out = a.data * b.data
    return _record("mul", (a, b), out, lambda g: (
        _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _record("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_stable(a.data)
    return _record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    datas = [p.data for p in parts]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def backward(g: np.ndarray) -> tuple:
        pieces = []
        for i in range(len(parts)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return _record("concat", tuple(parts), out, backward)


def getitem(a: Tensor, key) -> Tensor:
    out = np.asarray(a.data[key])

    def backward(g: np.ndarray) -> tuple:
        ga = np.zeros_like(a.data)
        np.add.at(ga, key, g)
        return (ga,)

    return _record("getitem", (a,), out, backward)


def flip0(a: Tensor) -> Tensor:
    out = a.data[::-1].copy()
    return _record("flip0", (a,), out, lambda g: (g[::-1],))


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _record("transpose", (a,), np.ascontiguousarray(out),
                   lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)
    return _record("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis))

    def backward(g: np.ndarray) -> tuple:
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _record("sum", (a,), out, backward)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / n)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted-scaling dropout: kept units are scaled by 1/(1-rate)."""
    if rate <= 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    mask = (rng.random(a.shape) >= rate).astype(a.dtype) / a.dtype.type(1.0 - rate)
    return mul(a, Tensor(mask))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    an, bn = a.data.ndim, b.data.ndim
    if an == 0 or bn == 0 or an > 2 or bn > 2:
        raise ShapeError(f"matmul supports 1-D/2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g: np.ndarray) -> tuple:
        ad, bd = a.data, b.data
        if an == 2 and bn == 2:
            return (g @ bd.T, ad.T @ g)
        if an == 2 and bn == 1:
            return (np.outer(g, bd), ad.T @ g)
        if an == 1 and bn == 2:
            return (g @ bd.T, np.outer(ad, g))
        return (g * bd, g * ad)  # vector dot

    return _record("matmul", (a, b), out, backward)


def dot(a: Tensor, b: Tensor) -> Tensor:
    return matmul(a, b)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map with weight (out, in): w @ x for vectors, x @ w.T for (S, in)."""
    if w.data.ndim != 2:
        raise ShapeError(f"linear weight must be 2-D, got {w.shape}")
    if x.data.ndim == 1:
        if x.shape[0] != w.shape[1]:
            raise ShapeError(f"linear: input {x.shape} vs weight {w.shape}")
        out = w.data @ x.data
    elif x.data.ndim == 2:
        if x.shape[1] != w.shape[1]:
            raise ShapeError(f"linear: input {x.shape} vs weight {w.shape}")
        out = x.data @ w.data.T
    else:
        raise ShapeError(f"linear input must be 1-D or 2-D, got {x.shape}")
    if b is not None:
        out = out + b.data

    def backward(g: np.ndarray) -> tuple:
        if x.data.ndim == 1:
            gx = w.data.T @ g
            gw = np.outer(g, x.data)
            gb = g
        else:
            gx = g @ w.data
            gw = g.T @ x.data
            gb = g.sum(axis=0)
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w) if b is None else (x, w, b)
    return _record("linear", inputs, out, backward)


# ---------------------------------------------------------------------------
# normalized exponentials
# ---------------------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; output sums to 1 along axis."""
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> tuple:
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _record("softmax", (a,), out, backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable log of softmax; all entries are <= 0."""
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g: np.ndarray) -> tuple:
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", (a,), out, backward)


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: tuple[int, int] = (1, 1)) -> Tensor:
    """Valid 2-D convolution.

    x: (C_in, H, W), w: (C_out, C_in, KH, KW), b: (C_out,) -> (C_out, H', W')
    with H' = (H - KH) // sh + 1 and W' = (W - KW) // sw + 1.
    """
    cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    sh, sw = stride
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    if h < kh or wd < kw:
        raise ShapeError(
            f"conv2d input {x.shape} smaller than kernel {w.shape}: "
            f"needs at least ({kh}, {kw}) spatial extent")
    windows = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(1, 2))
    windows = windows[:, ::sh, ::sw]  # (C_in, H', W', KH, KW)
    out = np.einsum("cijuv,ocuv->oij", windows, w.data, optimize=True)
    if b is not None:
        out = out + b.data[:, None, None]
    hp, wp = out.shape[1], out.shape[2]

    def backward(g: np.ndarray) -> tuple:
        gw = np.einsum("oij,cijuv->ocuv", g, windows, optimize=True)
        gx = np.zeros_like(x.data)
        for u in range(kh):
            for v in range(kw):
                gx[:, u:u + hp * sh:sh, v:v + wp * sw:sw] += np.einsum(
                    "oij,oc->cij", g, w.data[:, :, u, v], optimize=True)
        if b is not None:
            return (gx, gw, g.sum(axis=(1, 2)))
        return (gx, gw)

    inputs = (x, w) if b is None else (x, w, b)
    return _record("conv2d", inputs, out, backward)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int = 0) -> Tensor:
    """Stride-1 1-D convolution over the first axis.

    x: (L, C_in), w: (C_out, C_in, K), b: (C_out,) -> (L - K + 1 + 2*padding, C_out).
    """
    ln, cin = x.shape
    cout, cin_w, k = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv1d channel mismatch: input {x.shape} vs kernel {w.shape}")
    xp = np.pad(x.data, ((padding, padding), (0, 0))) if padding else x.data
    if xp.shape[0] < k:
        raise ShapeError(f"conv1d padded length {xp.shape[0]} shorter than kernel {k}")
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=0)  # (L', C_in, K)
    out = np.einsum("lck,ock->lo", windows, w.data, optimize=True)
    if b is not None:
        out = out + b.data
    lp = out.shape[0]

    def backward(g: np.ndarray) -> tuple:
        gw = np.einsum("lo,lck->ock", g, windows, optimize=True)
        gxp = np.zeros_like(xp)
        for kk in range(k):
            gxp[kk:kk + lp] += g @ w.data[:, :, kk]
        gx = gxp[padding:padding + ln] if padding else gxp
        if b is not None:
            return (gx, gw, g.sum(axis=0))
        return (gx, gw)

    inputs = (x, w) if b is None else (x, w, b)
    return _record("conv1d", inputs, out, backward)


# ---------------------------------------------------------------------------
# gated recurrent unit
# ---------------------------------------------------------------------------

# Gate layout along the 3H axis: update z, reset r, candidate n.
# z = sigmoid(xz + Uz h);  r = sigmoid(xr + Ur h)
# n = tanh(xn + r * (Un h));  h' = (1 - z) * n + z * h


def _gru_scan(x_pre: np.ndarray, wh: np.ndarray, h0: np.ndarray):
    steps, three_h = x_pre.shape
    hsz = three_h // 3
    hs = np.empty((steps, hsz), dtype=x_pre.dtype)
    zs = np.empty_like(hs)
    rs = np.empty_like(hs)
    ns = np.empty_like(hs)
    us = np.empty_like(hs)
    h = h0
    for t in range(steps):
        rec = wh @ h
        z = _sigmoid_stable(x_pre[t, :hsz] + rec[:hsz])
        r = _sigmoid_stable(x_pre[t, hsz:2 * hsz] + rec[hsz:2 * hsz])
        u = rec[2 * hsz:]
        n = np.tanh(x_pre[t, 2 * hsz:] + r * u)
        h = (1.0 - z) * n + z * h
        zs[t], rs[t], ns[t], us[t], hs[t] = z, r, n, u, h
    return hs, (zs, rs, ns, us)


def _gru_backward(g_hs: np.ndarray, x_pre: np.ndarray, wh: np.ndarray,
                  h0: np.ndarray, hs: np.ndarray, cache) -> tuple:
    zs, rs, ns, us = cache
    steps, three_h = x_pre.shape
    hsz = three_h // 3
    gx = np.empty_like(x_pre)
    pre = np.empty((steps, three_h), dtype=x_pre.dtype)  # grads wrt (Wh h) pre-acts
    prevs = np.empty((steps, hsz), dtype=x_pre.dtype)
    dh = np.zeros(hsz, dtype=x_pre.dtype)
    for t in range(steps - 1, -1, -1):
        dh = dh + g_hs[t]
        h_prev = hs[t - 1] if t > 0 else h0
        z, r, n, u = zs[t], rs[t], ns[t], us[t]
        dn = dh * (1.0 - z)
        dz = dh * (h_prev - n)
        dan = dn * (1.0 - n * n)
        du = dan * r
        dar = dan * u * r * (1.0 - r)
        daz = dz * z * (1.0 - z)
        gx[t, :hsz] = daz
        gx[t, hsz:2 * hsz] = dar
        gx[t, 2 * hsz:] = dan
        vec = np.concatenate([daz, dar, du])
        pre[t] = vec
        prevs[t] = h_prev
        dh = wh.T @ vec + dh * z
    gwh = pre.T @ prevs
    return gx, gwh, dh


def gru_sequence(x_pre: Tensor, wh: Tensor, h0: Tensor) -> Tensor:
    """Run a GRU over precomputed input pre-activations.

    x_pre: (S, 3H) rows of W_x x_t + b, wh: (3H, H), h0: (H,) -> states (S, H).
    """
    steps, three_h = x_pre.shape
    hsz = wh.shape[1]
    if three_h != 3 * hsz or wh.shape[0] != 3 * hsz or h0.shape != (hsz,):
        raise ShapeError(
            f"gru_sequence shapes disagree: x_pre {x_pre.shape}, wh {wh.shape}, h0 {h0.shape}")
    hs, cache = _gru_scan(x_pre.data, wh.data, h0.data)

    def backward(g: np.ndarray) -> tuple:
        return _gru_backward(g, x_pre.data, wh.data, h0.data, hs, cache)

    return _record("gru_sequence", (x_pre, wh, h0), hs, backward)


def gru_step(x_pre: Tensor, wh: Tensor, h_prev: Tensor) -> Tensor:
    """Single GRU step: x_pre (3H,), wh (3H, H), h_prev (H,) -> h (H,)."""
    hsz = wh.shape[1]
    if x_pre.shape != (3 * hsz,) or wh.shape[0] != 3 * hsz or h_prev.shape != (hsz,):
        raise ShapeError(
            f"gru_step shapes disagree: x_pre {x_pre.shape}, wh {wh.shape}, h {h_prev.shape}")
    hs, cache = _gru_scan(x_pre.data[None, :], wh.data, h_prev.data)

    def backward(g: np.ndarray) -> tuple:
        gx, gwh, gh = _gru_backward(g[None, :], x_pre.data[None, :], wh.data,
                                    h_prev.data, hs, cache)
        return gx[0], gwh, gh

    return _record("gru_step", (x_pre, wh, h_prev), hs[0], backward)


# ---------------------------------------------------------------------------
# reverse pass and gradient checking
# ---------------------------------------------------------------------------


def backward(tape: Tape, loss: Tensor,
             params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    """Accumulate gradients of a scalar loss for every named parameter.

    Visits each tape node exactly once, in reverse creation order.
    Parameters the loss never touched get zero gradients.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            acc = grads.get(key)
            grads[key] = gi if acc is None else acc + gi
    out: dict[str, Tensor] = {}
    for name, p in params.items():
        g = grads.get(id(p))
        out[name] = Tensor(np.zeros_like(p.data) if g is None
                           else np.asarray(g, dtype=p.data.dtype))
    return out


def finite_difference_check(fn: Callable[[Mapping[str, Tensor]], Tensor],
                            params: Mapping[str, Tensor],
                            eps: float | Sequence[float] = 1e-5,
                            samples_per_param: int | None = None,
                            rng: np.random.Generator | None = None,
                            return_worst: bool = False):
    """Compare tape gradients of ``fn`` against central finite differences.

    Returns the max over checked coordinates of
    |analytic - cd| / max(|analytic|, |cd|, 1e-8). ``fn`` must be
    deterministic (no dropout, fixed inputs). With ``samples_per_param``
    set, that many coordinates per tensor are drawn from ``rng``;
    otherwise every coordinate is checked.

    ``eps`` may be a sequence of step sizes; each coordinate then scores
    its best-agreeing step. Small steps suit well-scaled coordinates
    (truncation-limited), large steps suit near-zero gradients where fp
    cancellation dominates; a genuinely wrong analytic gradient disagrees
    with the central difference at every step size.
    """
    eps_ladder = (eps,) if isinstance(eps, float) else tuple(eps)
    with Tape() as tape:
        loss = fn(params)
    grads = backward(tape, loss, params)
    worst = 0.0
    worst_name = ""
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if samples_per_param is None or samples_per_param >= n:
            coords: Iterable[int] = range(n)
        else:
            coords = sorted(rng.choice(n, size=samples_per_param, replace=False))
        gflat = grads[name].data.reshape(-1)
        for idx in coords:
            analytic = float(gflat[idx])
            orig = flat[idx]
            rel = np.inf
            for e in eps_ladder:
                flat[idx] = orig + e
                up = float(fn(params).data)
                flat[idx] = orig - e
                dn = float(fn(params).data)
                flat[idx] = orig
                cd = (up - dn) / (2.0 * e)
                rel = min(rel, abs(analytic - cd) / max(abs(analytic), abs(cd), 1e-8))
            if rel > worst:
                worst = rel
                worst_name = name
    if return_worst:
        return worst, worst_name
    return worst
