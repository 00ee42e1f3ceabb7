"""Separate reward predictor with symlog-transformed regression targets.

Observation frames are patch-embedded and run through two frame-causal
self-attention blocks; a per-step query (pooled frame features plus a
learned vector) cross-attends to the embeddings of the actions taken so
far, and a linear head reads out one scalar per step in symlog space.
Prediction at step t only sees observations and actions at steps <= t.
"""

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .actions import ActionTemplateMap, ContinuousActionEmbedder, GRIDPUSH_TEMPLATES
from .nn import ParamSet, normal_init, ones_init, zeros_init
from .worldmodel import PATCHES, PATCH_DIM, patchify


def symlog(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.log1p(np.abs(x))


def symexp(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * (np.expm1(np.abs(x)))


class RewardModelError(Exception):
    pass


@dataclass
class RewardConfig:
    width: int = 64
    heads: int = 4
    action_dim: int = 32
    horizon: int = 16
    action_kind: str = "discrete"
    n_actions: int = 5
    seed: int = 0


class RewardModel:
    def __init__(self, cfg, env_id="gridpush", templates=None):
        self.cfg = cfg
        self.env_id = env_id
        self.params = ParamSet()
        rng = np.random.default_rng(cfg.seed + 7)
        c, nd = cfg.width, cfg.action_dim
        p = self.params
        if cfg.action_kind == "discrete":
            if templates is None:
                templates = dict(GRIDPUSH_TEMPLATES) if env_id == "gridpush" else {
                    i: f"take action {i}" for i in range(cfg.n_actions)}
            self.templates = templates
            self.action_map = ActionTemplateMap(templates, nd, p, rng, prefix="ract")
            self.cont_embedder = None
        else:
            self.templates = {}
            self.action_map = None
            self.cont_embedder = ContinuousActionEmbedder(nd, p, rng, prefix="ract")
        self.patch_w = p.add("patch_w", normal_init(rng, (PATCH_DIM, c)))
        self.patch_b = p.add("patch_b", zeros_init(c))
        self.frame_pos = p.add("frame_pos", normal_init(rng, (cfg.horizon, c)))
        self.patch_pos = p.add("patch_pos", normal_init(rng, (PATCHES, c)))
        self.sa = []
        for i in range(2):
            pfx = f"sa{i}"
            self.sa.append({
                "ln1_g": p.add(f"{pfx}/ln1_g", ones_init(c)),
                "ln1_b": p.add(f"{pfx}/ln1_b", zeros_init(c)),
                "w_qkv": p.add(f"{pfx}/w_qkv", normal_init(rng, (c, 3 * c))),
                "b_qkv": p.add(f"{pfx}/b_qkv", zeros_init(3 * c)),
                "w_o": p.add(f"{pfx}/w_o", normal_init(rng, (c, c))),
                "b_o": p.add(f"{pfx}/b_o", zeros_init(c)),
                "ln2_g": p.add(f"{pfx}/ln2_g", ones_init(c)),
                "ln2_b": p.add(f"{pfx}/ln2_b", zeros_init(c)),
                "w_fc1": p.add(f"{pfx}/w_fc1", normal_init(rng, (c, 4 * c))),
                "b_fc1": p.add(f"{pfx}/b_fc1", zeros_init(4 * c)),
                "w_fc2": p.add(f"{pfx}/w_fc2", normal_init(rng, (4 * c, c))),
                "b_fc2": p.add(f"{pfx}/b_fc2", zeros_init(c)),
            })
        self.query = p.add("xa/query", normal_init(rng, (1, 1, c)))
        self.wq = p.add("xa/wq", normal_init(rng, (c, c)))
        self.wk = p.add("xa/wk", normal_init(rng, (nd, c)))
        self.wv = p.add("xa/wv", normal_init(rng, (nd, c)))
        self.wo = p.add("xa/wo", normal_init(rng, (c, c)))
        self.bo = p.add("xa/bo", zeros_init(c))
        self.lnf_g = p.add("lnf_g", ones_init(c))
        self.lnf_b = p.add("lnf_b", zeros_init(c))
        self.head_w = p.add("head_w", normal_init(rng, (c, 1)))
        self.head_b = p.add("head_b", zeros_init(1))

    def _embed_actions(self, actions):
        if self.cfg.action_kind == "discrete":
            return self.action_map.encode(np.asarray(actions))
        return self.cont_embedder.encode(np.asarray(actions, dtype=np.float32))

    def forward(self, frames, actions):
        """Symlog-space reward estimates, one per step.

        frames: (B, T, 16, 16, 3) observations; actions: (B, T) taken at
        each observation. Returns a (B, T) tensor.
        """
        frames = np.asarray(frames, dtype=np.float32)
        actions = np.asarray(actions)
        b, t = frames.shape[0], frames.shape[1]
        if actions.shape[:2] != (b, t):
            raise RewardModelError(f"{t} observations but {actions.shape[1]} actions")
        if t > self.cfg.horizon:
            raise RewardModelError(f"window {t} exceeds reward-model horizon {self.cfg.horizon}")
        cfg = self.cfg
        c = cfg.width
        nh, hd = cfg.heads, c // cfg.heads
        patches = patchify(frames).reshape(b, t * PATCHES, PATCH_DIM)
        x = ad.add(ad.matmul(ad.Tensor(patches), self.patch_w), self.patch_b)
        fidx = np.repeat(np.arange(t), PATCHES)
        pidx = np.tile(np.arange(PATCHES), t)
        x = ad.add(x, ad.add(ad.embedding(self.frame_pos, fidx), ad.embedding(self.patch_pos, pidx)))
        n = t * PATCHES
        for lay in self.sa:
            h = ad.layer_norm(x, lay["ln1_g"], lay["ln1_b"])
            qkv = ad.add(ad.matmul(h, lay["w_qkv"]), lay["b_qkv"])
            q, k, v = (ad.transpose(ad.reshape(ad.slice_last(qkv, i * c, (i + 1) * c),
                                               (b, n, nh, hd)), (0, 2, 1, 3)) for i in range(3))
            o = ad.attention(q, k, v, block=PATCHES)  # frame-causal
            o = ad.reshape(ad.transpose(o, (0, 2, 1, 3)), (b, n, c))
            x = ad.add(x, ad.add(ad.matmul(o, lay["w_o"]), lay["b_o"]))
            h2 = ad.layer_norm(x, lay["ln2_g"], lay["ln2_b"])
            mlp = ad.add(ad.matmul(ad.gelu(ad.add(ad.matmul(h2, lay["w_fc1"]), lay["b_fc1"])),
                                   lay["w_fc2"]), lay["b_fc2"])
            x = ad.add(x, mlp)
        # per-frame pooled features: mean over the 16 patches
        pool_mat = ad.Tensor(np.full((PATCHES, 1), 1.0 / PATCHES, dtype=np.float32))
        pooled = ad.reshape(ad.matmul(ad.transpose(ad.reshape(x, (b, t, PATCHES, c)),
                                                   (0, 1, 3, 2)), pool_mat), (b, t, c))
        act = self._embed_actions(actions)
        q = ad.matmul(ad.add(pooled, self.query), self.wq)
        k = ad.matmul(act, self.wk)
        v = ad.matmul(act, self.wv)
        qh = ad.transpose(ad.reshape(q, (b, t, nh, hd)), (0, 2, 1, 3))
        kh = ad.transpose(ad.reshape(k, (b, t, nh, hd)), (0, 2, 1, 3))
        vh = ad.transpose(ad.reshape(v, (b, t, nh, hd)), (0, 2, 1, 3))
        o = ad.attention(qh, kh, vh, block=1)  # step t sees actions <= t
        o = ad.reshape(ad.transpose(o, (0, 2, 1, 3)), (b, t, c))
        y = ad.add(pooled, ad.add(ad.matmul(o, self.wo), self.bo))
        y = ad.layer_norm(y, self.lnf_g, self.lnf_b)
        out = ad.add(ad.matmul(y, self.head_w), self.head_b)
        return ad.reshape(out, (b, t))

    def loss_on_batch(self, frames, actions, rewards):
        pred = self.forward(frames, actions)
        target = symlog(np.asarray(rewards)).astype(np.float32)
        return ad.weighted_squared_error(pred, target, np.ones_like(target))

    def predict(self, frames, actions):
        """Reward estimates (symexp of the head output), plain ndarray."""
        return symexp(self.forward(frames, actions).data)


def reward_config_to_dict(cfg):
    return asdict(cfg)


def reward_arrays(model, prefix="reward/"):
    return {prefix + k: v.data for k, v in model.params.named().items()}


def load_reward_model(meta, extra_arrays, prefix="reward/"):
    """Rebuild a reward model from checkpoint extras, or None if absent."""
    sub = {k[len(prefix):]: v for k, v in extra_arrays.items() if k.startswith(prefix)}
    if not sub:
        return None
    cfg = RewardConfig(**meta["reward_config"])
    templates = {int(k): v for k, v in meta.get("templates", {}).items()} or None
    model = RewardModel(cfg, meta.get("env_id", "gridpush"), templates)
    model.params.load_arrays(sub)
    return model
