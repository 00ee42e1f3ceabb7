"""Training loops for the world model and reward model, plus rollout eval.

Training samples fixed-length windows of consecutive frames from dataset
episodes; a window starting at s uses frames o_s..o_{s+H-1} and the
actions taken at o_s..o_{s+H-2}. Every run is deterministic for a fixed
seed, and per-step losses go to a CSV log when a path is given.
"""

import copy
import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import envs, metrics
from . import reward as reward_mod
from . import worldmodel as wm


@dataclass
class WindowIndex:
    """Flat index of (episode, start) training windows with a holdout split."""

    dataset: object
    horizon: int
    train: np.ndarray     # (N, 2) of (episode index, start)
    holdout: np.ndarray

    @classmethod
    def build(cls, dataset, horizon, holdout_every=10):
        train, hold = [], []
        for e, ep in enumerate(dataset.episodes):
            t = ep.length
            for s in range(0, t - horizon + 2):
                if s + horizon - 1 > t:
                    continue
                (hold if e % holdout_every == 0 else train).append((e, s))
        if not train:
            raise ValueError(f"no windows of horizon {horizon} in dataset")
        return cls(dataset, horizon, np.asarray(train, dtype=np.int64),
                   np.asarray(hold if hold else train[:1], dtype=np.int64))

    def batch(self, picks):
        """Materialize windows. Returns (tokens or None, frames, actions, rewards)."""
        ds, h = self.dataset, self.horizon
        toks, frames, acts, rews = [], [], [], []
        for e, s in picks:
            ep = ds.episodes[e]
            if ds.frame_encoding == 0:
                toks.append(ep.frames[s:s + h].reshape(h, -1))
            frames.append(ds.frames_float(ep)[s:s + h])
            acts.append(ep.actions[s:s + h - 1])
            rews.append(ep.rewards[s:s + h - 1])
        tokens = np.stack(toks).astype(np.int64) if toks else None
        return tokens, np.stack(frames), np.stack(acts), np.stack(rews)

    def sample(self, n, rng, split="train"):
        pool = self.train if split == "train" else self.holdout
        return pool[rng.integers(0, len(pool), size=n)]


def lr_schedule(base_lr, step, total, warmup=100, final_frac=0.1):
    """Linear warmup then cosine decay to final_frac * base_lr."""
    if total <= warmup:
        return base_lr * (step + 1) / max(total, 1)
    if step < warmup:
        return base_lr * (step + 1) / warmup
    frac = (step - warmup) / max(total - warmup, 1)
    return base_lr * (final_frac + (1 - final_frac) * 0.5 * (1 + np.cos(np.pi * frac)))


def train_world_model(dataset, cfg, steps, batch_size=16, lr=2e-5, seed=0,
                      log_path=None, log_every=1, progress=None, schedule="cosine"):
    """Train a fresh world model on the dataset; returns (model, loss list)."""
    cfg.action_kind = "discrete" if dataset.action_kind == 0 else "continuous"
    cfg.n_actions = dataset.action_arity
    model = wm.build_world_model(cfg, dataset.palette, dataset.env_id)
    index = WindowIndex.build(dataset, cfg.horizon)
    opt = ad.Adam(model.params.tensors(), lr=lr)
    rng = np.random.default_rng(seed)
    losses = train_world_model_inner(model, index, opt, steps, batch_size, rng,
                                     progress, schedule=schedule)
    if log_path:
        _write_loss_log(log_path, losses, log_every)
    return model, losses


def train_world_model_inner(model, index, opt, steps, batch_size, rng,
                            progress=None, schedule="constant"):
    losses = []
    flow = model.cfg.flavor == "flow"
    base_lr = opt.lr
    for step in range(steps):
        if schedule == "cosine":
            opt.lr = lr_schedule(base_lr, step, steps)
        tokens, frames, acts, _ = index.batch(index.sample(batch_size, rng))
        with ad.Graph() as g:
            if flow:
                t = rng.random(batch_size).astype(np.float32)
                z = rng.standard_normal(frames.shape).astype(np.float32)
                loss = model.loss_on_batch(frames, acts, t, z)
            else:
                loss = model.loss_on_batch(tokens, acts)
        g.backward(loss)
        opt.step()
        losses.append(loss.item())
        if progress and (step + 1) % progress[0] == 0:
            progress[1](step + 1, losses)
    opt.lr = base_lr
    return losses


def evaluate_ar_holdout(model, index, n_windows=512, batch_size=32, seed=123):
    """Held-out next-token accuracy plus unweighted CE (all / changed tokens)."""
    rng = np.random.default_rng(seed)
    accs, ces, ces_ch, counts_ch = [], [], [], []
    n = min(n_windows, len(index.holdout))
    picks = index.holdout[rng.choice(len(index.holdout), size=n, replace=False)]
    for i in range(0, n, batch_size):
        tokens, _, acts, _ = index.batch(picks[i:i + batch_size])
        acc, ce, ce_ch = model.token_metrics(tokens, acts)
        changed = int((tokens[:, 1:] != tokens[:, :-1]).sum())
        accs.append(acc * len(tokens))
        ces.append(ce * len(tokens))
        ces_ch.append(ce_ch * changed)
        counts_ch.append(changed)
    total = sum(len(picks[i:i + batch_size]) for i in range(0, n, batch_size))
    return (sum(accs) / total, sum(ces) / total,
            sum(ces_ch) / max(sum(counts_ch), 1))


def rollout_eval(model, env_id, n_rollouts, k, seed=0, batch_size=64, with_metrics=("psnr", "ssim", "afa")):
    """Roll the model against fresh environments under random actions.

    Returns an EvalReport with per-sequence PSNR/SSIM (vs the true env
    frames) and action-following accuracy.
    """
    rng = np.random.default_rng(seed)
    report = metrics.EvalReport(config={
        "env_id": env_id, "flavor": model.cfg.flavor, "n_rollouts": n_rollouts,
        "k": k, "seed": seed, "width": model.cfg.width, "layers": model.cfg.layers,
    })
    for lo in range(0, n_rollouts, batch_size):
        b = min(batch_size, n_rollouts - lo)
        states, f0s, truths, actions = [], [], [], []
        for i in range(b):
            st, f0 = envs.env_reset(env_id, int(rng.integers(1 << 62)))
            acts = rng.integers(0, 5, size=k)
            sim_frames = []
            sim = copy.deepcopy(envs.state_from_frame(f0) if env_id == "gridpush" else st)
            for a in acts:
                if not sim.done:
                    envs.env_step(sim, int(a), env_id)
                sim_frames.append(envs.render(sim, env_id))
            states.append(st)
            f0s.append(f0)
            truths.append(np.stack(sim_frames))
            actions.append(acts)
        rolled = model.rollout(np.stack(f0s), np.stack(actions), seed=seed + lo)
        for i in range(b):
            if "psnr" in with_metrics:
                report.psnr_per_seq.append(metrics.psnr(truths[i], rolled[i]))
                report.ssim_per_seq.append(metrics.ssim(truths[i], rolled[i]))
            if "afa" in with_metrics and env_id == "gridpush":
                report.afa_per_seq.append(
                    metrics.action_following_accuracy(states[i], rolled[i], actions[i]))
    return report


def train_reward_model(dataset, cfg, steps, batch_size=16, lr=1e-3, seed=0,
                       window=None, balance=True):
    """Train a reward model on dataset windows.

    With balance=True half of each batch is drawn from windows containing
    at least one nonzero reward (coin events are ~1% of random-policy
    steps, so unbalanced batches barely see them).
    """
    cfg.action_kind = "discrete" if dataset.action_kind == 0 else "continuous"
    cfg.n_actions = dataset.action_arity
    model = reward_mod.RewardModel(cfg, dataset.env_id)
    w = window or min(cfg.horizon, 9)
    plain, hot = [], []
    for e, ep in enumerate(dataset.episodes):
        for s in range(0, ep.length - w + 1):
            plain.append((e, s))
            if np.any(ep.rewards[s:s + w] != 0):
                hot.append((e, s))
    plain = np.asarray(plain, dtype=np.int64)
    hot = np.asarray(hot, dtype=np.int64) if hot else plain[:1]
    rng = np.random.default_rng(seed)
    opt = ad.Adam(model.params.tensors(), lr=lr)
    losses = []
    for _ in range(steps):
        n_hot = batch_size // 2 if balance else 0
        picks = np.concatenate([
            hot[rng.integers(0, len(hot), size=n_hot)],
            plain[rng.integers(0, len(plain), size=batch_size - n_hot)],
        ])
        frames = np.stack([dataset.frames_float(dataset.episodes[e])[s:s + w] for e, s in picks])
        acts = np.stack([dataset.episodes[e].actions[s:s + w] for e, s in picks])
        rews = np.stack([dataset.episodes[e].rewards[s:s + w] for e, s in picks])
        with ad.Graph() as g:
            loss = model.loss_on_batch(frames, acts, rews)
        g.backward(loss)
        opt.step()
        losses.append(loss.item())
    return model, losses


def evaluate_reward_model(model, dataset, n_windows=256, window=None, seed=321, threshold=0.5):
    """Held-out classification accuracy of thresholded reward predictions."""
    w = window or min(model.cfg.horizon, 9)
    rng = np.random.default_rng(seed)
    idx = [(e, s) for e, ep in enumerate(dataset.episodes)
           for s in range(0, ep.length - w + 1)]
    idx = np.asarray(idx, dtype=np.int64)
    # oversample reward windows so accuracy is not dominated by zeros
    hot = np.asarray([p for p in idx if np.any(
        dataset.episodes[p[0]].rewards[p[1]:p[1] + w] != 0)], dtype=np.int64)
    take = min(n_windows // 2, len(hot)) if len(hot) else 0
    picks = np.concatenate([
        hot[rng.choice(len(hot), size=take, replace=False)] if take else idx[:0],
        idx[rng.choice(len(idx), size=n_windows - take, replace=False)],
    ])
    correct, total, preds = 0, 0, []
    for i in range(0, len(picks), 32):
        chunk = picks[i:i + 32]
        frames = np.stack([dataset.frames_float(dataset.episodes[e])[s:s + w] for e, s in chunk])
        acts = np.stack([dataset.episodes[e].actions[s:s + w] for e, s in chunk])
        rews = np.stack([dataset.episodes[e].rewards[s:s + w] for e, s in chunk])
        pred = model.predict(frames, acts)
        preds.append(pred)
        correct += int(((pred >= threshold) == (rews >= threshold)).sum())
        total += rews.size
    return correct / total, np.concatenate([p.reshape(-1) for p in preds])


def _write_loss_log(path, losses, every=1):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        for i, l in enumerate(losses):
            if (i + 1) % every == 0:
                w.writerow([i + 1, f"{l:.6g}"])
