"""Numba @njit kernels (float32 hot path).

Parallelism is only over independent rows / (batch, head) slices, with
sequential reductions inside each slice, so results are deterministic at
any thread count.
"""

import math

import numpy as np
from numba import njit, prange

SQRT_2_OVER_PI = 0.7978845608028654
GELU_C = 0.044715

_JIT = dict(cache=True, fastmath=False)


@njit(parallel=True, **_JIT)
def ln_fwd(x, gamma, beta, eps):
    R, C = x.shape
    y = np.empty((R, C), dtype=np.float32)
    mu = np.empty(R, dtype=np.float32)
    rstd = np.empty(R, dtype=np.float32)
    for r in prange(R):
        s = 0.0
        for c in range(C):
            s += x[r, c]
        m = s / C
        s2 = 0.0
        for c in range(C):
            d = x[r, c] - m
            s2 += d * d
        rs = 1.0 / math.sqrt(s2 / C + eps)
        mu[r] = m
        rstd[r] = rs
        for c in range(C):
            y[r, c] = (x[r, c] - m) * rs * gamma[c] + beta[c]
    return y, mu, rstd


@njit(parallel=True, **_JIT)
def ln_bwd(gout, x, gamma, mu, rstd):
    R, C = x.shape
    dx = np.empty((R, C), dtype=np.float32)
    dgamma_p = np.zeros((R, C), dtype=np.float32)
    dbeta_p = np.zeros((R, C), dtype=np.float32)
    for r in prange(R):
        m = mu[r]
        rs = rstd[r]
        s1 = 0.0
        s2 = 0.0
        for c in range(C):
            xh = (x[r, c] - m) * rs
            dxh = gout[r, c] * gamma[c]
            s1 += dxh
            s2 += dxh * xh
            dgamma_p[r, c] = gout[r, c] * xh
            dbeta_p[r, c] = gout[r, c]
        m1 = s1 / C
        m2 = s2 / C
        for c in range(C):
            xh = (x[r, c] - m) * rs
            dxh = gout[r, c] * gamma[c]
            dx[r, c] = rs * (dxh - m1 - xh * m2)
    dgamma = np.zeros(C, dtype=np.float32)
    dbeta = np.zeros(C, dtype=np.float32)
    for r in range(R):
        for c in range(C):
            dgamma[c] += dgamma_p[r, c]
            dbeta[c] += dbeta_p[r, c]
    return dx, dgamma, dbeta


@njit(parallel=True, **_JIT)
def softmax_fwd(x):
    R, C = x.shape
    y = np.empty((R, C), dtype=np.float32)
    for r in prange(R):
        mx = x[r, 0]
        for c in range(1, C):
            if x[r, c] > mx:
                mx = x[r, c]
        s = 0.0
        for c in range(C):
            e = math.exp(x[r, c] - mx)
            y[r, c] = e
            s += e
        inv = 1.0 / s
        for c in range(C):
            y[r, c] *= inv
    return y


@njit(parallel=True, **_JIT)
def softmax_bwd(gout, y):
    R, C = y.shape
    dx = np.empty((R, C), dtype=np.float32)
    for r in prange(R):
        dot = 0.0
        for c in range(C):
            dot += gout[r, c] * y[r, c]
        for c in range(C):
            dx[r, c] = y[r, c] * (gout[r, c] - dot)
    return dx


@njit(parallel=True, **_JIT)
def gelu_fwd(x):
    n = x.shape[0]
    y = np.empty(n, dtype=np.float32)
    for i in prange(n):
        v = x[i]
        inner = SQRT_2_OVER_PI * (v + GELU_C * v * v * v)
        y[i] = 0.5 * v * (1.0 + math.tanh(inner))
    return y


@njit(parallel=True, **_JIT)
def gelu_bwd(gout, x):
    n = x.shape[0]
    dx = np.empty(n, dtype=np.float32)
    for i in prange(n):
        v = x[i]
        inner = SQRT_2_OVER_PI * (v + GELU_C * v * v * v)
        t = math.tanh(inner)
        sech2 = 1.0 - t * t
        dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * v * v)
        dx[i] = gout[i] * (0.5 * (1.0 + t) + 0.5 * v * sech2 * dinner)
    return dx


@njit(**_JIT)
def _attn_limit(i, block, tk):
    if block == 0:
        return tk - 1
    if block == 1:
        return i if i < tk else tk - 1
    lim = (i // block) * block + block - 1
    return lim if lim < tk else tk - 1


@njit(parallel=True, **_JIT)
def _masked_softmax_rows(scores, block, tq, scale):
    """In-place scaled, masked row softmax; masked entries end up 0.

    scores: (N, Tk) where row r belongs to query index r % tq.
    """
    n, tk = scores.shape
    for r in prange(n):
        i = r % tq
        lim = _attn_limit(i, block, tk)
        mx = np.float32(-1e30)
        for j in range(lim + 1):
            sj = scores[r, j] * scale
            scores[r, j] = sj
            if sj > mx:
                mx = sj
        denom = np.float32(0.0)
        for j in range(lim + 1):
            e = np.float32(math.exp(scores[r, j] - mx))
            scores[r, j] = e
            denom += e
        inv = np.float32(1.0) / denom
        for j in range(lim + 1):
            scores[r, j] *= inv
        for j in range(lim + 1, tk):
            scores[r, j] = 0.0


@njit(parallel=True, **_JIT)
def _dsoftmax_rows(ds, probs, scale):
    """In-place ds <- p * (ds - sum(ds * p)) * scale over rows."""
    n, tk = ds.shape
    for r in prange(n):
        dot = np.float32(0.0)
        for j in range(tk):
            dot += ds[r, j] * probs[r, j]
        for j in range(tk):
            ds[r, j] = probs[r, j] * (ds[r, j] - dot) * scale


def attn_fwd(q, k, v, block):
    """Batched GEMMs (BLAS) + numba masked softmax."""
    B, H, Tq, D = q.shape
    Tk = k.shape[2]
    scores = np.matmul(q, np.swapaxes(k, 2, 3))
    _masked_softmax_rows(scores.reshape(-1, Tk), block, Tq, np.float32(1.0 / math.sqrt(D)))
    out = np.matmul(scores, v)
    return out, scores


def attn_bwd(gout, q, k, v, probs, block):
    B, H, Tq, D = q.shape
    Tk = k.shape[2]
    dv = np.matmul(np.swapaxes(probs, 2, 3), gout)
    ds = np.matmul(gout, np.swapaxes(v, 2, 3))
    _dsoftmax_rows(ds.reshape(-1, Tk), probs.reshape(-1, Tk), np.float32(1.0 / math.sqrt(D)))
    dq = np.matmul(ds, k)
    dk = np.matmul(np.swapaxes(ds, 2, 3), q)
    return dq, dk, dv


@njit(parallel=True, **_JIT)
def wce_fwd(logits, targets, weights):
    N, V = logits.shape
    probs = np.empty((N, V), dtype=np.float32)
    ce = np.empty(N, dtype=np.float32)
    for r in prange(N):
        mx = logits[r, 0]
        for c in range(1, V):
            if logits[r, c] > mx:
                mx = logits[r, c]
        s = 0.0
        for c in range(V):
            e = math.exp(logits[r, c] - mx)
            probs[r, c] = e
            s += e
        inv = 1.0 / s
        for c in range(V):
            probs[r, c] *= inv
        p = probs[r, targets[r]]
        if p < 1e-30:
            p = 1e-30
        ce[r] = -math.log(p)
    total = 0.0
    for r in range(N):
        total += weights[r] * ce[r]
    loss = np.float32(total / N)
    return loss, probs, ce


@njit(parallel=True, **_JIT)
def wce_bwd(gscalar, probs, targets, weights):
    N, V = probs.shape
    d = np.empty((N, V), dtype=np.float32)
    g = gscalar / N
    for r in prange(N):
        w = weights[r]
        for c in range(V):
            d[r, c] = probs[r, c] * w * g
        d[r, targets[r]] -= w * g
    return d


@njit(parallel=True, **_JIT)
def adam_step(p, g, m, v, t, lr, beta1, beta2, eps):
    n = p.shape[0]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for i in prange(n):
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        mhat = m[i] / c1
        vhat = v[i] / c2
        p[i] -= lr * mhat / (math.sqrt(vhat) + eps)


@njit(**_JIT)
def scatter_add_rows(table, ids, grads):
    n, c = grads.shape
    for i in range(n):
        row = ids[i]
        for j in range(c):
            table[row, j] += grads[i, j]
