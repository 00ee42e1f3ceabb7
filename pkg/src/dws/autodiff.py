"""Minimal reverse-mode autodiff over dense float32 arrays.

Define-by-run: ops executed while a Graph is active append tape nodes;
Graph.backward walks the tape once in reverse. Ops executed with no
active graph are plain (inference) computations. float64 tensors are
supported so tests can run finite-difference checks without float32
round-off swamping the tolerance; production code uses float32.
"""

import threading

import numpy as np

from . import kernels

LN_EPS = 1e-5


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    """Raised by an op whose inputs have incompatible shapes."""

    def __init__(self, op, message):
        self.op = op
        super().__init__(f"{op}: {message}")


class GraphError(AutodiffError):
    pass


class Tensor:
    """Dense array value, optionally carrying a gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, other)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return subtract(self, other)
        return shift(self, -other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return multiply(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class _Node:
    __slots__ = ("op", "inputs", "out", "bwd")

    def __init__(self, op, inputs, out, bwd):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.bwd = bwd


_tls = threading.local()


def _active_graph():
    stack = getattr(_tls, "stack", None)
    return stack[-1] if stack else None


class Graph:
    """Tape of op nodes in execution order (rebuilt per training step)."""

    def __init__(self):
        self.nodes = []
        self._consumed = False

    def __enter__(self):
        if not hasattr(_tls, "stack"):
            _tls.stack = []
        _tls.stack.append(self)
        return self

    def __exit__(self, *exc):
        _tls.stack.pop()
        return False

    def backward(self, loss):
        """Accumulate d(loss)/d(leaf) into .grad of all requires_grad leaves.

        Each node is visited exactly once, in reverse execution order. A
        second backward on the same tape is rejected; rebuild the graph.
        """
        if self._consumed:
            raise GraphError("backward already ran on this graph; rebuild it before calling again")
        if loss.size != 1:
            raise GraphError(f"loss must be scalar, got shape {loss.shape}")
        self._consumed = True
        produced = {id(n.out) for n in self.nodes}
        flowing = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            gout = flowing.pop(id(node.out), None)
            if gout is None:
                continue
            grads = node.bwd(gout)
            for t, g in zip(node.inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                if id(t) in produced:
                    prev = flowing.get(id(t))
                    flowing[id(t)] = g if prev is None else prev + g
                else:
                    t.grad = g.copy() if t.grad is None else t.grad + g


def backward(graph, loss):
    graph.backward(loss)


def _emit(op, inputs, out_data, bwd):
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    g = _active_graph()
    if g is not None and out.requires_grad:
        g.nodes.append(_Node(op, tuple(inputs), out, bwd))
    return out


def _unbroadcast(g, shape):
    """Reduce gradient g to a broadcast input's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementary ops


def matmul(a, b):
    if a.data.ndim >= 2 and b.data.ndim == 2:
        if a.shape[-1] != b.shape[0]:
            raise ShapeError("matmul", f"inner dims differ: {a.shape} @ {b.shape}")
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(lead + (b.shape[1],))

        def bwd(g):
            g2 = g.reshape(-1, b.shape[1])
            return [(g2 @ b.data.T).reshape(a.shape), a2.T @ g2]

        return _emit("matmul", [a, b], out, bwd)
    if a.data.ndim == 3 and b.data.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeError("matmul", f"batched shapes incompatible: {a.shape} @ {b.shape}")
        out = np.matmul(a.data, b.data)

        def bwd(g):
            return [np.matmul(g, np.swapaxes(b.data, 1, 2)),
                    np.matmul(np.swapaxes(a.data, 1, 2), g)]

        return _emit("matmul", [a, b], out, bwd)
    raise ShapeError("matmul", f"unsupported ranks {a.data.ndim} and {b.data.ndim}")


def add(a, b):
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError("add", f"shapes not broadcastable: {a.shape} vs {b.shape}")

    def bwd(g):
        return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]

    return _emit("add", [a, b], out, bwd)


def subtract(a, b):
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError("subtract", f"shapes not broadcastable: {a.shape} vs {b.shape}")

    def bwd(g):
        return [_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)]

    return _emit("subtract", [a, b], out, bwd)


def multiply(a, b):
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError("multiply", f"shapes not broadcastable: {a.shape} vs {b.shape}")

    def bwd(g):
        return [_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)]

    return _emit("multiply", [a, b], out, bwd)


def scale(x, s):
    s = float(s)
    out = x.data * x.dtype.type(s)

    def bwd(g):
        return [g * s]

    return _emit("scale", [x], out, bwd)


def shift(x, s):
    out = x.data + x.dtype.type(float(s))

    def bwd(g):
        return [g]

    return _emit("shift", [x], out, bwd)


def exp(x):
    out = np.exp(x.data)

    def bwd(g):
        return [g * out]

    return _emit("exp", [x], out, bwd)


def minimum(a, b):
    if a.shape != b.shape:
        raise ShapeError("minimum", f"shapes differ: {a.shape} vs {b.shape}")
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)

    def bwd(g):
        return [np.where(take_a, g, 0), np.where(take_a, 0, g)]

    return _emit("minimum", [a, b], out, bwd)


def clip_const(x, lo, hi):
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)

    def bwd(g):
        return [np.where(inside, g, 0)]

    return _emit("clip", [x], out, bwd)


def reshape(x, shape):
    out = x.data.reshape(shape)

    def bwd(g):
        return [g.reshape(x.shape)]

    return _emit("reshape", [x], out, bwd)


def transpose(x, axes):
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    inv = np.argsort(axes)

    def bwd(g):
        return [np.ascontiguousarray(np.transpose(g, inv))]

    return _emit("transpose", [x], out, bwd)


def slice_last(x, start, stop):
    out = np.ascontiguousarray(x.data[..., start:stop])

    def bwd(g):
        dx = np.zeros_like(x.data)
        dx[..., start:stop] = g
        return [dx]

    return _emit("slice_last", [x], out, bwd)


def slice_axis1(x, start, stop):
    out = np.ascontiguousarray(x.data[:, start:stop])

    def bwd(g):
        dx = np.zeros_like(x.data)
        dx[:, start:stop] = g
        return [dx]

    return _emit("slice_axis1", [x], out, bwd)


def mean_all(x):
    out = np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype)
    n = x.size

    def bwd(g):
        return [np.full(x.shape, float(g) / n, dtype=x.dtype)]

    return _emit("mean", [x], out, bwd)


def sum_all(x):
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)

    def bwd(g):
        return [np.full(x.shape, float(g), dtype=x.dtype)]

    return _emit("sum", [x], out, bwd)


def sum_last(x):
    out = x.data.sum(axis=-1)

    def bwd(g):
        return [np.broadcast_to(np.expand_dims(g, -1), x.shape).astype(x.dtype, copy=True)]

    return _emit("sum_last", [x], out, bwd)


# ---------------------------------------------------------------------------
# neural-net ops


def layer_norm(x, gamma, beta, eps=LN_EPS):
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("layer_norm", f"affine params must be ({c},), got {gamma.shape} and {beta.shape}")
    x2 = x.data.reshape(-1, c)
    y2, mu, rstd = kernels.ln_fwd(x2, gamma.data, beta.data, eps)
    out = y2.reshape(x.shape)

    def bwd(g):
        dx, dgamma, dbeta = kernels.ln_bwd(np.ascontiguousarray(g.reshape(-1, c)), x2, gamma.data, mu, rstd)
        return [dx.reshape(x.shape), dgamma, dbeta]

    return _emit("layer_norm", [x, gamma, beta], out, bwd)


def softmax(x):
    c = x.shape[-1]
    y2 = kernels.softmax_fwd(np.ascontiguousarray(x.data.reshape(-1, c)))
    out = y2.reshape(x.shape)

    def bwd(g):
        return [kernels.softmax_bwd(np.ascontiguousarray(g.reshape(-1, c)), y2).reshape(x.shape)]

    return _emit("softmax", [x], out, bwd)


def log_softmax(x):
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def bwd(g):
        return [g - np.exp(out) * g.sum(axis=-1, keepdims=True)]

    return _emit("log_softmax", [x], out, bwd)


def gelu(x):
    flat = np.ascontiguousarray(x.data.reshape(-1))
    out = kernels.gelu_fwd(flat).reshape(x.shape)

    def bwd(g):
        return [kernels.gelu_bwd(np.ascontiguousarray(g.reshape(-1)), flat).reshape(x.shape)]

    return _emit("gelu", [x], out, bwd)


def embedding(table, ids):
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding", f"id out of range for table of {table.shape[0]} rows")
    out = table.data[ids]

    def bwd(g):
        dtable = np.zeros_like(table.data)
        kernels.scatter_add_rows(dtable, ids.reshape(-1),
                                 np.ascontiguousarray(g.reshape(-1, table.shape[1])))
        return [dtable]

    return _emit("embedding", [table], out, bwd)


def take_along_last(x, idx):
    idx = np.asarray(idx)
    if idx.shape != x.shape[:-1]:
        raise ShapeError("take_along_last", f"index shape {idx.shape} does not match {x.shape[:-1]}")
    rows = np.arange(int(np.prod(x.shape[:-1])))
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2[rows, idx.reshape(-1)].reshape(idx.shape)

    def bwd(g):
        dx = np.zeros_like(x2)
        dx[rows, idx.reshape(-1)] = g.reshape(-1)
        return [dx.reshape(x.shape)]

    return _emit("take_along_last", [x], out, bwd)


def attention(q, k, v, block):
    """Scaled dot-product attention over (B, H, T, D) tensors.

    block=0 full, block=1 token-causal, block=n block-causal (queries in
    block m attend keys up to the end of block m).
    """
    for name, t in (("q", q), ("k", k), ("v", v)):
        if t.data.ndim != 4:
            raise ShapeError("attention", f"{name} must be rank 4, got {t.shape}")
    if q.shape[0] != k.shape[0] or q.shape[1] != k.shape[1] or q.shape[3] != k.shape[3]:
        raise ShapeError("attention", f"q/k shapes incompatible: {q.shape} vs {k.shape}")
    if k.shape != v.shape:
        raise ShapeError("attention", f"k/v shapes differ: {k.shape} vs {v.shape}")
    out, probs = kernels.attn_fwd(q.data, k.data, v.data, block)

    def bwd(g):
        return list(kernels.attn_bwd(np.ascontiguousarray(g), q.data, k.data, v.data, probs, block))

    op = "causal_self_attention" if block == 1 else ("cross_attention" if block == 0 else "block_causal_attention")
    return _emit(op, [q, k, v], out, bwd)


def causal_self_attention(q, k, v):
    return attention(q, k, v, block=1)


def cross_attention(q, k, v):
    return attention(q, k, v, block=0)


def weighted_squared_error(pred, target, weight):
    """Mean over all elements of weight * (pred - target)^2.

    target and weight are constants (plain arrays or detached tensors);
    gradients flow to pred only.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    w = weight.data if isinstance(weight, Tensor) else np.asarray(weight, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ShapeError("weighted_squared_error", f"target shape {t.shape} != pred shape {pred.shape}")
    try:
        wb = np.broadcast_to(w, pred.shape)
    except ValueError:
        raise ShapeError("weighted_squared_error", f"weight shape {w.shape} not broadcastable to {pred.shape}")
    diff = pred.data - t
    out = np.asarray((wb * diff * diff).mean(dtype=np.float64), dtype=pred.dtype)
    n = pred.size

    def bwd(g):
        return [(2.0 * float(g) / n) * wb * diff]

    return _emit("weighted_squared_error", [pred], out, bwd)


def weighted_cross_entropy(logits, targets, weights):
    """Mean over rows of weights * CE(softmax(logits), targets).

    logits: (N, V) tensor; targets: (N,) int array; weights: (N,) array,
    detached by construction.
    """
    targets = np.asarray(targets)
    w = weights.data if isinstance(weights, Tensor) else np.asarray(weights, dtype=logits.dtype)
    if logits.data.ndim != 2:
        raise ShapeError("weighted_cross_entropy", f"logits must be 2-d, got {logits.shape}")
    n = logits.shape[0]
    if targets.shape != (n,) or w.shape != (n,):
        raise ShapeError("weighted_cross_entropy",
                         f"targets/weights must be ({n},), got {targets.shape} and {w.shape}")
    loss, probs, _ce = kernels.wce_fwd(logits.data, targets, w)

    def bwd(g):
        return [kernels.wce_bwd(float(g), probs, targets, w)]

    return _emit("weighted_cross_entropy", [logits], np.asarray(loss), bwd)


_conv_idx_cache = {}


def _conv_indices(cin, hp, wp, kh, kw, oh, ow, stride):
    key = (cin, hp, wp, kh, kw, oh, ow, stride)
    idx = _conv_idx_cache.get(key)
    if idx is None:
        rows = []
        for oy in range(oh):
            for ox in range(ow):
                base_y, base_x = oy * stride, ox * stride
                for c in range(cin):
                    for dy in range(kh):
                        for dx in range(kw):
                            rows.append((c * hp + base_y + dy) * wp + base_x + dx)
        idx = np.asarray(rows, dtype=np.int64)
        _conv_idx_cache[key] = idx
    return idx


def conv2d(x, w, b, stride=1, pad=0):
    """x: (B, Cin, H, W), w: (Cout, Cin, kh, kw), b: (Cout,). im2col + BLAS."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d", f"expected rank-4 x and w, got {x.shape} and {w.shape}")
    batch, cin, h, wdt = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError("conv2d", f"input channels {cin} != weight channels {cin_w}")
    if b.shape != (cout,):
        raise ShapeError("conv2d", f"bias must be ({cout},), got {b.shape}")
    hp, wp = h + 2 * pad, wdt + 2 * pad
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    xp = np.zeros((batch, cin, hp, wp), dtype=x.dtype)
    xp[:, :, pad:pad + h, pad:pad + wdt] = x.data
    idx = _conv_indices(cin, hp, wp, kh, kw, oh, ow, stride)
    cols = xp.reshape(batch, -1)[:, idx].reshape(batch, oh * ow, cin * kh * kw)
    wmat = w.data.reshape(cout, -1).T
    out2 = cols.reshape(-1, cin * kh * kw) @ wmat + b.data[None, :]
    out = np.ascontiguousarray(
        out2.reshape(batch, oh, ow, cout).transpose(0, 3, 1, 2))

    def bwd(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        dw = (cols.reshape(-1, cin * kh * kw).T @ g2).T.reshape(w.shape)
        db = g2.sum(axis=0)
        dcols = (g2 @ wmat.T).reshape(batch, oh * ow, cin * kh * kw)
        dxp = np.zeros((batch, cin * hp * wp), dtype=x.dtype)
        np.add.at(dxp, (np.arange(batch)[:, None], idx[None, :]),
                  dcols.reshape(batch, -1))
        dx = dxp.reshape(batch, cin, hp, wp)[:, :, pad:pad + h, pad:pad + wdt]
        return [np.ascontiguousarray(dx), dw, db]

    return _emit("conv2d", [x, w, b], out, bwd)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Bias-corrected Adam over a fixed parameter list.

    Default learning rate matches the world-model fine-tuning default
    (2e-5). Gradients are cleared after each step.
    """

    def __init__(self, params, lr=2e-5, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros(p.size, dtype=p.dtype) for p in self.params]
        self._v = [np.zeros(p.size, dtype=p.dtype) for p in self.params]

    def step(self):
        self.step_count += 1
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            if p.grad.shape != p.data.shape:
                raise ShapeError("adam_step", f"grad shape {p.grad.shape} != param shape {p.data.shape}")
            if m.shape[0] != p.size:
                raise ShapeError("adam_step", f"state size {m.shape[0]} != param size {p.size}")
            kernels.adam_step(p.data.reshape(-1), np.ascontiguousarray(p.grad.reshape(-1)),
                              m, v, self.step_count, self.lr, self.beta1, self.beta2, self.eps)
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None
