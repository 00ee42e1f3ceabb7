"""Video prediction quality metrics and the evaluation report format.

PSNR/SSIM follow the standard definitions on range-1 pixels. The
action-following probe replaces feature-network metrics: it checks, step by
step, whether the generated frames put the agent exactly where the real
environment does under the same action sequence.
"""

import copy
import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import envs

PSNR_CAP = 99.0
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WINDOW = 8


class MetricError(Exception):
    pass


def psnr(reference, generated):
    """10 * log10(1 / MSE) on range-1 pixels, capped at 99 dB."""
    ref = np.asarray(reference, dtype=np.float64)
    gen = np.asarray(generated, dtype=np.float64)
    if ref.shape != gen.shape:
        raise MetricError(f"psnr: shape mismatch {ref.shape} vs {gen.shape}")
    mse = float(((ref - gen) ** 2).mean())
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _window_means(x, w):
    """Sliding-window means of all w x w windows (valid placement)."""
    s = np.cumsum(np.cumsum(x, axis=0), axis=1)
    s = np.pad(s, ((1, 0), (1, 0)))
    tot = s[w:, w:] - s[:-w, w:] - s[w:, :-w] + s[:-w, :-w]
    return tot / (w * w)


def ssim(reference, generated, window=SSIM_WINDOW):
    """Mean windowed SSIM over frames and channels (uniform 8x8 windows)."""
    ref = np.asarray(reference, dtype=np.float64)
    gen = np.asarray(generated, dtype=np.float64)
    if ref.shape != gen.shape:
        raise MetricError(f"ssim: shape mismatch {ref.shape} vs {gen.shape}")
    if ref.ndim < 3:
        raise MetricError(f"ssim: expected (..., h, w, c) frames, got {ref.shape}")
    flat_r = ref.reshape((-1,) + ref.shape[-3:])
    flat_g = gen.reshape((-1,) + gen.shape[-3:])
    vals = []
    for fr, fg in zip(flat_r, flat_g):
        for c in range(fr.shape[-1]):
            x, y = fr[..., c], fg[..., c]
            mx = _window_means(x, window)
            my = _window_means(y, window)
            mxx = _window_means(x * x, window)
            myy = _window_means(y * y, window)
            mxy = _window_means(x * y, window)
            vx = mxx - mx * mx
            vy = myy - my * my
            cxy = mxy - mx * my
            s = ((2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)) / (
                (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
            vals.append(s.mean())
    return float(np.mean(vals))


def action_following_accuracy(initial_state, rollout_frames, actions, env_id="gridpush"):
    """Fraction of steps where the generated agent cell matches the true env.

    initial_state: EnvState at the rollout's conditioning frame. Frames
    with zero or multiple agent-colored cells count as misses. If the true
    episode terminates early its final agent position is held fixed.
    """
    if env_id != "gridpush":
        raise MetricError(f"action following is defined for gridpush only, got {env_id!r}")
    frames = np.asarray(rollout_frames)
    k = frames.shape[0]
    if len(actions) != k:
        raise MetricError(f"{k} frames but {len(actions)} actions")
    sim = copy.deepcopy(initial_state)
    hits = 0
    for j in range(k):
        if not sim.done:
            envs.env_step(sim, int(actions[j]), "gridpush")
        got = envs.agent_cell(frames[j])
        if got is not None and got == sim.agent:
            hits += 1
    return hits / k


@dataclass
class EvalReport:
    """Per-sequence and aggregate metrics for one evaluation run."""

    config: dict
    psnr_per_seq: list = field(default_factory=list)
    ssim_per_seq: list = field(default_factory=list)
    afa_per_seq: list = field(default_factory=list)

    @property
    def n_sequences(self):
        return max(len(self.psnr_per_seq), len(self.afa_per_seq))

    def aggregate(self):
        out = {"n_sequences": self.n_sequences}
        if self.psnr_per_seq:
            out["psnr_mean"] = float(np.mean(self.psnr_per_seq))
            out["ssim_mean"] = float(np.mean(self.ssim_per_seq))
        if self.afa_per_seq:
            out["action_following_mean"] = float(np.mean(self.afa_per_seq))
        return out

    def fingerprint(self):
        text = ",".join(f"{k}={self.config[k]}" for k in sorted(self.config))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def to_text(self):
        lines = ["[report]"]
        lines.append(f"fingerprint = {self.fingerprint()}")
        for k, v in sorted(self.aggregate().items()):
            lines.append(f"{k} = {v}")
        lines.append("[config]")
        for k in sorted(self.config):
            lines.append(f"{k} = {self.config[k]}")
        lines.append("[sequences]")
        for name, seq in (("psnr", self.psnr_per_seq), ("ssim", self.ssim_per_seq),
                          ("action_following", self.afa_per_seq)):
            if seq:
                lines.append(f"{name} = " + " ".join(f"{v:.6g}" for v in seq))
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_text())
