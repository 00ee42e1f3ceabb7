"""Motion-reinforced loss weights.

Continuous targets: per consecutive frame pair, the absolute difference
map is softmaxed over all positions of the pair, max-normalized so the
exponents span (0, 1], and the weight is strength**exponent in (1, c].
Fully static pairs get weight 1 (softmax of a flat map is uniform and
max-normalizing it would mark everything as motion, inverting the intent).

Discrete tokens: weight e where the token changed from the previous
frame, 1 elsewhere. The literal_indicator flag flips the condition to
"unchanged" instead.

Weights are computed from ground-truth targets only and enter training
losses as detached constants; the conditioning frame always has weight 1.
"""

import math
from dataclasses import dataclass

import numpy as np


class MotionError(Exception):
    pass


@dataclass
class MotionConfig:
    strength: float = 2.0        # continuous c; discrete weighting is fixed at e
    tau: float = 1e-6            # zero-motion tolerance
    literal_indicator: bool = False

    def __post_init__(self):
        if not self.strength > 1.0:
            raise MotionError(f"strength must be > 1, got {self.strength}")
        if self.tau < 0:
            raise MotionError(f"tau must be >= 0, got {self.tau}")


def weights_from_diff(diff, cfg):
    """Weights for one frame pair from its |difference| map (any shape)."""
    d = np.asarray(diff, dtype=np.float64).reshape(-1)
    if d.max(initial=0.0) <= cfg.tau:
        return np.ones_like(d, dtype=np.float32).reshape(np.shape(diff))
    e = np.exp(d - d.max())
    s = e / e.sum()
    s = s / s.max()
    return (cfg.strength ** s).astype(np.float32).reshape(np.shape(diff))


def motion_weights_continuous(frames, cfg, batched=None):
    """Per-element weights for frames (H, ...) or (B, H, ...) with H >= 2.

    Weight of frame 0 is 1; frame i+1 gets strength**s where s is the
    max-normalized softmax of |frame_{i+1} - frame_i| over the pair's
    positions. Leading batch dims are auto-detected for rank >= 5 input;
    pass batched explicitly for ambiguous ranks.
    """
    x = np.asarray(frames, dtype=np.float32)
    if batched is None:
        batched = x.ndim >= 2 and _looks_batched(x)
    xs = x if batched else x[None]
    if xs.shape[1] < 2:
        raise MotionError(f"need at least 2 frames, got {xs.shape[1]}")
    b, h = xs.shape[0], xs.shape[1]
    flat = xs.reshape(b, h, -1).astype(np.float64)
    d = np.abs(flat[:, 1:] - flat[:, :-1])
    out = np.ones_like(flat, dtype=np.float32)
    mx = d.max(axis=2)
    e = np.exp(d - d.max(axis=2, keepdims=True))
    s = e / e.sum(axis=2, keepdims=True)
    s = s / s.max(axis=2, keepdims=True)
    w = (cfg.strength ** s).astype(np.float32)
    static = mx <= cfg.tau
    w[static] = 1.0
    out[:, 1:] = w
    out = out.reshape(xs.shape)
    return out if batched else out[0]


def _looks_batched(x):
    # (B, H, h, w, c)-style input has >= 4 dims; (H, h, w, c) has 4 when
    # spatial is 3-d, so disambiguate by treating ndim >= 5 as batched.
    # 2-d/3-d inputs are (H, P)-style single sequences.
    return x.ndim >= 5


def motion_weights_discrete(tokens, cfg):
    """Per-token weights for token grids (H, P) or (B, H, P), values {1, e}."""
    t = np.asarray(tokens)
    batched = t.ndim == 3
    ts = t if batched else t[None]
    if ts.ndim != 3:
        raise MotionError(f"tokens must be (H, P) or (B, H, P), got {t.shape}")
    if ts.shape[1] < 2:
        raise MotionError(f"need at least 2 frames, got {ts.shape[1]}")
    changed = ts[:, 1:] != ts[:, :-1]
    hit = ~changed if cfg.literal_indicator else changed
    out = np.ones(ts.shape, dtype=np.float32)
    out[:, 1:] = np.where(hit, np.float32(math.e), np.float32(1.0))
    return out if batched else out[0]


def apply_motion_loss(losses, weights):
    """Scalar mean of weights * per-element losses."""
    l = np.asarray(losses, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if l.shape != w.shape:
        raise MotionError(f"loss shape {l.shape} != weight shape {w.shape}")
    return float((l * w).mean())
