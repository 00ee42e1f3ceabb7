"""Pure-numpy kernel implementations (dtype-generic fallback path)."""

import numpy as np

SQRT_2_OVER_PI = 0.7978845608028654
GELU_C = 0.044715


def ln_fwd(x, gamma, beta, eps):
    """x: (R, C). Returns (y, mean, rstd) with mean/rstd shaped (R,)."""
    mu = x.mean(axis=1)
    var = ((x - mu[:, None]) ** 2).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu[:, None]) * rstd[:, None]
    y = xhat * gamma[None, :] + beta[None, :]
    return y.astype(x.dtype, copy=False), mu.astype(x.dtype, copy=False), rstd.astype(x.dtype, copy=False)


def ln_bwd(gout, x, gamma, mu, rstd):
    xhat = (x - mu[:, None]) * rstd[:, None]
    dgamma = (gout * xhat).sum(axis=0)
    dbeta = gout.sum(axis=0)
    dxhat = gout * gamma[None, :]
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = rstd[:, None] * (dxhat - m1 - xhat * m2)
    return dx.astype(x.dtype, copy=False), dgamma, dbeta


def softmax_fwd(x):
    """Row softmax with max subtraction; x: (R, C)."""
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(gout, y):
    dot = (gout * y).sum(axis=1, keepdims=True)
    return y * (gout - dot)


def gelu_fwd(x):
    inner = SQRT_2_OVER_PI * (x + GELU_C * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_bwd(gout, x):
    inner = SQRT_2_OVER_PI * (x + GELU_C * x * x * x)
    t = np.tanh(inner)
    sech2 = 1.0 - t * t
    dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
    return gout * (0.5 * (1.0 + t) + 0.5 * x * sech2 * dinner)


def _attn_mask_limit(i, block):
    # highest key index (inclusive) query i may attend to
    if block == 0:
        return None
    if block == 1:
        return i
    return (i // block) * block + block - 1


def attn_fwd(q, k, v, block):
    """Scaled dot-product attention.

    q: (B, H, Tq, D), k/v: (B, H, Tk, D). block=0: full attention;
    block=1: token-causal; block=n>1: block-causal with width n.
    Returns (out, probs) with probs kept for the backward pass.
    """
    B, H, Tq, D = q.shape
    Tk = k.shape[2]
    scale = 1.0 / np.sqrt(D)
    scores = np.matmul(q, np.swapaxes(k, 2, 3)) * scale
    if block != 0:
        ii = np.arange(Tq)[:, None]
        jj = np.arange(Tk)[None, :]
        if block == 1:
            mask = jj > ii
        else:
            mask = jj > (ii // block) * block + block - 1
        scores = np.where(mask[None, None], np.array(-1e30, dtype=scores.dtype), scores)
    probs = softmax_fwd(scores.reshape(-1, Tk)).reshape(B, H, Tq, Tk).astype(q.dtype, copy=False)
    out = np.matmul(probs, v)
    return out, probs


def attn_bwd(gout, q, k, v, probs, block):
    D = q.shape[3]
    scale = 1.0 / np.sqrt(D)
    dv = np.matmul(np.swapaxes(probs, 2, 3), gout)
    dprobs = np.matmul(gout, np.swapaxes(v, 2, 3))
    dot = (dprobs * probs).sum(axis=3, keepdims=True)
    dscores = probs * (dprobs - dot)  # masked entries have probs == 0
    dq = np.matmul(dscores, k) * scale
    dk = np.matmul(np.swapaxes(dscores, 2, 3), q) * scale
    return dq.astype(q.dtype, copy=False), dk.astype(q.dtype, copy=False), dv.astype(q.dtype, copy=False)


def wce_fwd(logits, targets, weights):
    """Weighted cross-entropy, mean over rows.

    logits: (N, V); targets: (N,) int; weights: (N,). Returns
    (loss, probs, ce) where ce is the per-row unweighted cross-entropy.
    """
    probs = softmax_fwd(logits)
    n = logits.shape[0]
    picked = probs[np.arange(n), targets]
    ce = -np.log(np.maximum(picked, 1e-30))
    loss = (weights * ce).mean(dtype=np.float64)
    return np.asarray(loss, dtype=logits.dtype), probs, ce.astype(logits.dtype, copy=False)


def wce_bwd(gscalar, probs, targets, weights):
    n = probs.shape[0]
    d = probs * weights[:, None]
    d[np.arange(n), targets] -= weights
    return d * (gscalar / n)


def adam_step(p, g, m, v, t, lr, beta1, beta2, eps):
    """In-place bias-corrected Adam update on flat arrays."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    p -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype, copy=False)


def scatter_add_rows(table, ids, grads):
    """table[ids[i]] += grads[i] with repeated ids accumulated."""
    np.add.at(table, ids, grads)
