"""Action-conditioned video predictors.

Two flavors over 16x16 frames:

* autoregressive: frames tokenized to palette indices, flattened frame by
  frame (row-major), next-token transformer with a causal mask over the
  whole sequence and per-frame conditioning in every block.
* flow: frames patch-embedded (4x4), transformer over (frame, patch)
  positions regressing the straight-path velocity from noise to data;
  sampling integrates the learned field with a fixed number of Euler steps.

Frame i is conditioned on the action taken at frame i. The last frame of
any window gets a zero conditioning vector: in interactive use the action
at the frontier frame has not been chosen yet, and it explains no
transition inside the window. Rollouts therefore need len(actions) == H-1
conditioning slots per window and generate one frame per requested action,
re-feeding each generated frame as context.
"""

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import envs, kernels, motion
from .actions import ActionTemplateMap, ContinuousActionEmbedder, AdaLNModule, GRIDPUSH_TEMPLATES
from .nn import ParamSet, normal_init, ones_init, sincos_grid_init, zeros_init

PATCH = 4
CELLS = 256          # tokens per frame
PATCHES = 16         # patches per frame (16x16 / 4x4)
PATCH_DIM = PATCH * PATCH * 3


class WorldModelError(Exception):
    pass


@dataclass
class WorldModelConfig:
    flavor: str = "autoregressive"      # or "flow"
    layers: int = 4
    width: int = 128
    heads: int = 4
    horizon: int = 9
    action_dim: int = 32
    patch: int = PATCH
    flow_steps: int = 10
    motion_c: float = 2.0               # continuous strength; discrete uses e
    motion_tau: float = 1e-6
    literal_indicator: bool = False
    condition_actions: bool = True      # False: no-action-module ablation
    use_motion_weights: bool = True     # False: plain-loss ablation
    max_rollout: int = 32
    action_kind: str = "discrete"
    n_actions: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.flavor not in ("autoregressive", "flow"):
            raise WorldModelError(f"unknown flavor {self.flavor!r}")
        if self.width % self.heads:
            raise WorldModelError(f"width {self.width} not divisible by heads {self.heads}")
        if self.horizon < 2:
            raise WorldModelError(f"horizon must be >= 2, got {self.horizon}")


def tokenize_frame(frame, palette):
    """Nearest-palette tokens (ties to the lower index), row-major."""
    return envs.frame_to_indices(np.asarray(frame, dtype=np.float32), palette)


def detokenize(tokens, palette):
    return palette[np.asarray(tokens)].astype(np.float32) / 255.0


def patchify(frames):
    """(..., 16, 16, 3) -> (..., 16, 48) in patch-row-major order."""
    lead = frames.shape[:-3]
    x = frames.reshape(lead + (4, PATCH, 4, PATCH, 3))
    x = np.moveaxis(x, -3, -4)  # (..., 4, 4, PATCH, PATCH, 3)
    return np.ascontiguousarray(x).reshape(lead + (PATCHES, PATCH_DIM))


class _Blocks:
    """Transformer trunk shared by both flavors (built on the param set)."""

    def __init__(self, cfg, params, rng, tokens_per_frame):
        self.cfg = cfg
        self.tpf = tokens_per_frame
        c, nd = cfg.width, cfg.action_dim
        self.adalns = []
        self.layers = []
        res_std = 0.02 / math.sqrt(2 * cfg.layers)
        for i in range(cfg.layers):
            pfx = f"block{i}"
            self.adalns.append(AdaLNModule(c, nd, params, rng, f"{pfx}/adaln"))
            lay = {
                "ln1_g": params.add(f"{pfx}/ln1_g", ones_init(c)),
                "ln1_b": params.add(f"{pfx}/ln1_b", zeros_init(c)),
                # wide enough that initial attention logits are O(1): with
                # near-zero logits the softmax starts uniform over the whole
                # sequence and position-selective circuits never bootstrap
                "w_qkv": params.add(f"{pfx}/w_qkv", normal_init(rng, (c, 3 * c), std=0.1)),
                "b_qkv": params.add(f"{pfx}/b_qkv", zeros_init(3 * c)),
                "w_o": params.add(f"{pfx}/w_o", normal_init(rng, (c, c), std=res_std)),
                "b_o": params.add(f"{pfx}/b_o", zeros_init(c)),
                "ln2_g": params.add(f"{pfx}/ln2_g", ones_init(c)),
                "ln2_b": params.add(f"{pfx}/ln2_b", zeros_init(c)),
                "w_fc1": params.add(f"{pfx}/w_fc1", normal_init(rng, (c, 4 * c))),
                "b_fc1": params.add(f"{pfx}/b_fc1", zeros_init(4 * c)),
                "w_fc2": params.add(f"{pfx}/w_fc2", normal_init(rng, (4 * c, c), std=res_std)),
                "b_fc2": params.add(f"{pfx}/b_fc2", zeros_init(c)),
            }
            self.layers.append(lay)

    def run(self, x, cond, attn_block):
        """x: (B, F*tpf, C) tensor; cond: (B, F, n_d) tensor."""
        cfg = self.cfg
        b, t, c = x.shape
        f = t // self.tpf
        nh, hd = cfg.heads, c // cfg.heads
        for adaln, lay in zip(self.adalns, self.layers):
            x4 = ad.reshape(x, (b, f, self.tpf, c))
            x = ad.reshape(adaln.modulate(x4, cond), (b, t, c))
            h = ad.layer_norm(x, lay["ln1_g"], lay["ln1_b"])
            qkv = ad.add(ad.matmul(h, lay["w_qkv"]), lay["b_qkv"])
            q, k, v = (ad.transpose(ad.reshape(ad.slice_last(qkv, i * c, (i + 1) * c),
                                               (b, t, nh, hd)), (0, 2, 1, 3))
                       for i in range(3))
            o = ad.attention(q, k, v, block=attn_block)
            o = ad.reshape(ad.transpose(o, (0, 2, 1, 3)), (b, t, c))
            x = ad.add(x, ad.add(ad.matmul(o, lay["w_o"]), lay["b_o"]))
            h2 = ad.layer_norm(x, lay["ln2_g"], lay["ln2_b"])
            mlp = ad.add(ad.matmul(ad.gelu(ad.add(ad.matmul(h2, lay["w_fc1"]), lay["b_fc1"])),
                                   lay["w_fc2"]), lay["b_fc2"])
            x = ad.add(x, mlp)
        return x


class _WorldModelBase:
    def __init__(self, cfg, palette, env_id, tokens_per_frame, templates=None):
        self.cfg = cfg
        self.palette = np.asarray(palette, dtype=np.uint8)
        self.env_id = env_id
        self.tpf = tokens_per_frame
        self.params = ParamSet()
        rng = np.random.default_rng(cfg.seed)
        c, nd = cfg.width, cfg.action_dim
        if cfg.action_kind == "discrete":
            if templates is None:
                templates = dict(GRIDPUSH_TEMPLATES) if env_id == "gridpush" else {
                    i: f"take action {i}" for i in range(cfg.n_actions)}
            self.templates = templates
            self.action_map = ActionTemplateMap(self.templates, nd, self.params, rng)
            self.cont_embedder = None
        else:
            self.templates = {}
            self.action_map = None
            self.cont_embedder = ContinuousActionEmbedder(nd, self.params, rng)
        self.frame_pos = self.params.add("frame_pos", normal_init(rng, (cfg.horizon, c), std=0.1))
        side = int(math.isqrt(tokens_per_frame))
        self.cell_pos = self.params.add("cell_pos", sincos_grid_init(side, c))
        self.lnf_g = self.params.add("lnf_g", ones_init(c))
        self.lnf_b = self.params.add("lnf_b", zeros_init(c))
        self._rng = rng
        self.blocks = _Blocks(cfg, self.params, rng, tokens_per_frame)

    def _encode_actions(self, actions, n_frames=None):
        """actions: (B, F-1) ids or (B, F-1, 2) vectors -> (B, F, n_d) with a
        zero vector in the frontier slot."""
        cfg = self.cfg
        a = np.asarray(actions)
        b = a.shape[0]
        h = cfg.horizon if n_frames is None else n_frames
        if a.shape[1] != h - 1:
            raise WorldModelError(f"expected {h - 1} actions per window, got {a.shape[1]}")
        if not cfg.condition_actions:
            return ad.Tensor(np.zeros((b, h, cfg.action_dim), dtype=np.float32))
        if cfg.action_kind == "discrete":
            padded = np.concatenate([a, np.zeros((b, 1), dtype=a.dtype)], axis=1)
            emb = self.action_map.encode(padded)
        else:
            padded = np.concatenate([a, np.zeros((b, 1, 2), dtype=np.float32)], axis=1)
            emb = self.cont_embedder.encode(padded)
        mask = np.ones((1, h, 1), dtype=np.float32)
        mask[0, -1, 0] = 0.0
        return ad.multiply(emb, ad.Tensor(mask))

    def _positions(self, f):
        t = f * self.tpf
        fidx = np.repeat(np.arange(f), self.tpf)
        cidx = np.tile(np.arange(self.tpf), f)
        return ad.add(ad.embedding(self.frame_pos, fidx), ad.embedding(self.cell_pos, cidx))


class ARWorldModel(_WorldModelBase):
    """Next-token transformer over flattened palette-index frames."""

    def __init__(self, cfg, palette, env_id="gridpush", templates=None):
        super().__init__(cfg, palette, env_id, CELLS, templates)
        self.vocab = len(self.palette)
        c = cfg.width
        # token identity must survive next to the 0.3-amplitude position
        # features, so it gets a comparable scale
        self.tok_emb = self.params.add("tok_emb", normal_init(self._rng, (self.vocab, c), std=0.25))
        self.head_w = self.params.add("head_w", normal_init(self._rng, (c, self.vocab)))
        self.head_b = self.params.add("head_b", zeros_init(self.vocab))

    def logits(self, tokens, actions):
        """tokens: (B, H, 256) ints; actions: (B, H-1). Returns (B, H*256, V)."""
        tokens = np.asarray(tokens)
        b, h, p = tokens.shape
        if h != self.cfg.horizon or p != self.tpf:
            raise WorldModelError(f"tokens must be (B, {self.cfg.horizon}, {self.tpf}), got {tokens.shape}")
        cond = self._encode_actions(actions)
        x = ad.embedding(self.tok_emb, tokens.reshape(b, h * p))
        x = ad.add(x, self._positions(h))
        x = self.blocks.run(x, cond, attn_block=1)
        x = ad.layer_norm(x, self.lnf_g, self.lnf_b)
        return ad.add(ad.matmul(x, self.head_w), self.head_b)

    def loss_on_batch(self, tokens, actions):
        """Motion-weighted next-token cross-entropy over frames 1..H-1."""
        tokens = np.asarray(tokens)
        b, h, p = tokens.shape
        logits = self.logits(tokens, actions)
        pred = ad.slice_axis1(logits, p - 1, h * p - 1)
        targets = tokens.reshape(b, h * p)[:, p:].reshape(-1).astype(np.int64)
        if self.cfg.use_motion_weights:
            mcfg = motion.MotionConfig(strength=math.e, tau=self.cfg.motion_tau,
                                       literal_indicator=self.cfg.literal_indicator)
            w = motion.motion_weights_discrete(tokens, mcfg)[:, 1:].reshape(-1)
        else:
            w = np.ones(targets.shape[0], dtype=np.float32)
        return ad.weighted_cross_entropy(ad.reshape(pred, (-1, self.vocab)), targets, w)

    def token_metrics(self, tokens, actions):
        """Inference-only: (accuracy, mean CE, mean CE on changed tokens)."""
        tokens = np.asarray(tokens)
        b, h, p = tokens.shape
        logits = self.logits(tokens, actions).data
        pred = logits[:, p - 1:h * p - 1].reshape(-1, self.vocab)
        targets = tokens.reshape(b, h * p)[:, p:].reshape(-1).astype(np.int64)
        _, _, ce = kernels.wce_fwd(np.ascontiguousarray(pred), targets,
                                   np.ones(len(targets), dtype=pred.dtype))
        acc = float((pred.argmax(axis=1) == targets).mean())
        changed = (tokens[:, 1:] != tokens[:, :-1]).reshape(-1)
        ce_changed = float(ce[changed].mean()) if changed.any() else 0.0
        return acc, float(ce.mean()), ce_changed

    def rollout(self, frame0, actions, seed=0):
        """Greedy per-token decode of k frames from one conditioning frame.

        frame0: (B, 16, 16, 3) floats or (B, 256) tokens; actions: (B, k).
        Returns (B, k, 16, 16, 3) float frames. Deterministic; argmax ties
        resolve to the lower token id.
        """
        tokens = self._rollout_tokens(frame0, actions)
        return detokenize(tokens.reshape(tokens.shape[:2] + (16, 16)), self.palette)

    def _rollout_tokens(self, frame0, actions):
        cfg = self.cfg
        actions = np.asarray(actions)
        b, k = actions.shape[0], actions.shape[1]
        if k < 1 or k > cfg.max_rollout:
            raise WorldModelError(f"rollout length {k} outside 1..{cfg.max_rollout}")
        f0 = np.asarray(frame0)
        if f0.ndim == 4:
            toks = np.stack([tokenize_frame(f0[i], self.palette).reshape(-1) for i in range(b)])
        else:
            toks = f0.reshape(b, self.tpf)
        hist = [toks.astype(np.int64)]
        dec = _ARDecoder(self)
        for j in range(1, k + 1):
            w = min(j, cfg.horizon - 1)
            ctx = hist[-w:]
            # action taken at context frame (j - w + i) is actions[:, j - w + i]
            ctx_actions = [actions[:, j - w + i] for i in range(w)]
            hist.append(dec.decode_frame(ctx, ctx_actions))
        return np.stack(hist[1:], axis=1)


class _ARDecoder:
    """Incremental greedy decoder reusing per-position attention state.

    Exists because per-token full recomputation makes rollouts quadratically
    expensive; the math is identical to the full forward pass (checked by
    tests). State lives only for the duration of one rollout call.
    """

    def __init__(self, model):
        self.m = model
        cfg = model.cfg
        self.nh = cfg.heads
        self.hd = cfg.width // cfg.heads
        p = model.params
        self.layers = []
        for i in range(cfg.layers):
            g = lambda n, i=i: p[f"block{i}/{n}"].data
            self.layers.append({k: g(k) for k in
                                ("ln1_g", "ln1_b", "w_qkv", "b_qkv", "w_o", "b_o",
                                 "ln2_g", "ln2_b", "w_fc1", "b_fc1", "w_fc2", "b_fc2")}
                               | {f"adaln/{k}": g(f"adaln/{k}") for k in
                                  ("ln_g", "ln_b", "reg_w", "reg_b", "ffn_w", "ffn_b")})

    def _cond_vectors(self, ctx_actions, batch):
        """Per-frame conditioning (numpy), zero for the frontier slot."""
        m = self.m
        w = len(ctx_actions)
        if not m.cfg.condition_actions:
            return np.zeros((batch, w + 1, m.cfg.action_dim), dtype=np.float32)
        ids = np.stack(ctx_actions, axis=1)
        emb = m.action_map.encode(ids).data if m.cfg.action_kind == "discrete" \
            else m.cont_embedder.encode(ids).data
        return np.concatenate([emb, np.zeros((batch, 1, m.cfg.action_dim), np.float32)], axis=1)

    def _adaln(self, lay, x, cvec):
        """x: (B, n, C); cvec: (B, n, n_d) per-row conditioning."""
        ab = cvec @ lay["adaln/reg_w"] + lay["adaln/reg_b"]
        c = x.shape[-1]
        alpha, beta = ab[..., :c], ab[..., c:]
        r, cc = x.reshape(-1, c), None
        z, _, _ = kernels.ln_fwd(np.ascontiguousarray(r), lay["adaln/ln_g"], lay["adaln/ln_b"], ad.LN_EPS)
        z = z.reshape(x.shape) * (1.0 + alpha) + beta
        zf = kernels.gelu_fwd(np.ascontiguousarray(z.reshape(-1)))
        return x + zf.reshape(z.shape) @ lay["adaln/ffn_w"] + lay["adaln/ffn_b"]

    def _ln(self, x, g, b):
        y, _, _ = kernels.ln_fwd(np.ascontiguousarray(x.reshape(-1, x.shape[-1])), g, b, ad.LN_EPS)
        return y.reshape(x.shape)

    def _chunk(self, x, cvec, caches, start):
        """Run n new rows through all layers, appending their K/V.

        x: (B, n, C); cvec: (B, n, n_d); rows occupy positions
        start..start+n-1 and attend causally to everything cached.
        """
        b, n, c = x.shape
        nh, hd = self.nh, self.hd
        for lay, cache in zip(self.layers, caches):
            x = self._adaln(lay, x, cvec)
            h = self._ln(x, lay["ln1_g"], lay["ln1_b"])
            qkv = h @ lay["w_qkv"] + lay["b_qkv"]
            q, kk, vv = qkv[..., :c], qkv[..., c:2 * c], qkv[..., 2 * c:]
            q = q.reshape(b, n, nh, hd).transpose(0, 2, 1, 3)
            cache["k"][:, :, start:start + n] = kk.reshape(b, n, nh, hd).transpose(0, 2, 1, 3)
            cache["v"][:, :, start:start + n] = vv.reshape(b, n, nh, hd).transpose(0, 2, 1, 3)
            total = start + n
            katt = cache["k"][:, :, :total]
            vatt = cache["v"][:, :, :total]
            scores = np.matmul(q, katt.transpose(0, 1, 3, 2)) / math.sqrt(hd)
            if n > 1:
                jj = np.arange(total)[None, :]
                ii = start + np.arange(n)[:, None]
                scores = np.where(jj > ii, np.float32(-1e30), scores)
            probs = kernels.softmax_fwd(np.ascontiguousarray(scores.reshape(-1, total))).reshape(scores.shape)
            o = np.matmul(probs, vatt).transpose(0, 2, 1, 3).reshape(b, n, c)
            x = x + o @ lay["w_o"] + lay["b_o"]
            h2 = self._ln(x, lay["ln2_g"], lay["ln2_b"])
            act = kernels.gelu_fwd(np.ascontiguousarray((h2 @ lay["w_fc1"] + lay["b_fc1"]).reshape(-1)))
            x = x + act.reshape(b, n, -1) @ lay["w_fc2"] + lay["b_fc2"]
        return x

    def decode_frame(self, ctx_tokens, ctx_actions):
        """Greedy-decode one 256-token frame given w context frames."""
        m = self.m
        cfg = m.cfg
        b = ctx_tokens[0].shape[0]
        w = len(ctx_tokens)
        tpf = m.tpf
        total = (w + 1) * tpf
        caches = [{"k": np.zeros((b, self.nh, total, self.hd), np.float32),
                   "v": np.zeros((b, self.nh, total, self.hd), np.float32)}
                  for _ in range(cfg.layers)]
        cond = self._cond_vectors(ctx_actions, b)
        tok_emb = m.tok_emb.data
        fpos = m.frame_pos.data
        cpos = m.cell_pos.data
        ctx = np.concatenate([t.reshape(b, tpf) for t in ctx_tokens], axis=1)
        x = tok_emb[ctx]
        fidx = np.repeat(np.arange(w), tpf)
        cidx = np.tile(np.arange(tpf), w)
        x = x + fpos[fidx][None] + cpos[cidx][None]
        crows = np.repeat(cond[:, :w], tpf, axis=1)
        h = self._chunk(x.astype(np.float32), crows, caches, 0)
        out_tokens = np.empty((b, tpf), dtype=np.int64)
        frontier = cond[:, w:w + 1]
        # logits from the last context row predict the frame's first token
        last = self._head(h[:, -1:])
        out_tokens[:, 0] = last.argmax(axis=-1)[:, 0]
        for pcell in range(1, tpf):
            prev = out_tokens[:, pcell - 1]
            row = tok_emb[prev][:, None] + fpos[w][None, None] + cpos[pcell - 1][None, None]
            h = self._chunk(row.astype(np.float32), frontier, caches, w * tpf + pcell - 1)
            out_tokens[:, pcell] = self._head(h).argmax(axis=-1)[:, 0]
        return out_tokens

    def _head(self, x):
        m = self.m
        h = self._ln(x, m.lnf_g.data, m.lnf_b.data)
        return h @ m.head_w.data + m.head_b.data


class FlowWorldModel(_WorldModelBase):
    """Rectified-flow frame model over 4x4 patches."""

    def __init__(self, cfg, palette, env_id="gridpush", templates=None):
        super().__init__(cfg, palette, env_id, PATCHES, templates)
        c, nd = cfg.width, cfg.action_dim
        rng = self._rng
        self.patch_w = self.params.add("patch_w", normal_init(rng, (PATCH_DIM, c)))
        self.patch_b = self.params.add("patch_b", zeros_init(c))
        self.time_w1 = self.params.add("time_w1", normal_init(rng, (nd, nd)))
        self.time_b1 = self.params.add("time_b1", zeros_init(nd))
        self.time_w2 = self.params.add("time_w2", normal_init(rng, (nd, nd)))
        self.time_b2 = self.params.add("time_b2", zeros_init(nd))
        self.out_w = self.params.add("out_w", normal_init(rng, (c, PATCH_DIM)))
        self.out_b = self.params.add("out_b", zeros_init(PATCH_DIM))
        half = nd // 2
        self._freqs = np.exp(-math.log(1e4) * np.arange(half) / max(half - 1, 1)).astype(np.float32)

    def _time_embedding(self, t_frames):
        """t_frames: (B, H) numpy in [0, 1] -> (B, H, n_d) tensor."""
        ang = t_frames[..., None] * self._freqs[None, None] * math.tau
        feats = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1).astype(np.float32)
        h = ad.gelu(ad.add(ad.matmul(ad.Tensor(feats), self.time_w1), self.time_b1))
        return ad.add(ad.matmul(h, self.time_w2), self.time_b2)

    def velocity(self, x_t, actions, t_frames):
        """Predicted velocity field.

        x_t: (B, F, 16, 16, 3) float frames (partially noised); actions:
        (B, F-1); t_frames: (B, F) per-frame interpolation times. F may be
        anything in 2..horizon (rollouts grow the window frame by frame).
        Returns a (B, F, 16, 16, 3) tensor.
        """
        x_t = np.asarray(x_t, dtype=np.float32)
        b, h = x_t.shape[0], x_t.shape[1]
        if not 2 <= h <= self.cfg.horizon:
            raise WorldModelError(f"window of {h} frames outside 2..{self.cfg.horizon}")
        cond = ad.add(self._encode_actions(actions, h), self._time_embedding(t_frames))
        patches = patchify(x_t).reshape(b, h * PATCHES, PATCH_DIM)
        x = ad.add(ad.matmul(ad.Tensor(patches), self.patch_w), self.patch_b)
        x = ad.add(x, self._positions(h))
        x = self.blocks.run(x, cond, attn_block=0)
        x = ad.layer_norm(x, self.lnf_g, self.lnf_b)
        v = ad.add(ad.matmul(x, self.out_w), self.out_b)
        v = ad.reshape(v, (b, h, 4, 4, PATCH, PATCH, 3))
        v = ad.transpose(v, (0, 1, 2, 4, 3, 5, 6))
        return ad.reshape(v, (b, h, 16, 16, 3))

    def loss_on_batch(self, frames, actions, t, z):
        """Motion-weighted velocity regression.

        frames: (B, H, 16, 16, 3) clean targets; t: (B,) in [0, 1]; z:
        standard normal, same shape as frames. Frame 0 stays clean and
        carries no loss.
        """
        frames = np.asarray(frames, dtype=np.float32)
        t = np.asarray(t, dtype=np.float32)
        if np.any(t < 0) or np.any(t > 1):
            raise WorldModelError("t must lie in [0, 1]")
        b, h = frames.shape[0], frames.shape[1]
        z = np.asarray(z, dtype=np.float32)
        x_t = frames.copy()
        tt = t[:, None, None, None]
        x_t[:, 1:] = (1.0 - tt[:, None]) * z[:, 1:] + tt[:, None] * frames[:, 1:]
        t_frames = np.concatenate([np.ones((b, 1), np.float32),
                                   np.repeat(t[:, None], h - 1, axis=1)], axis=1)
        v = self.velocity(x_t, actions, t_frames)
        target = frames - z
        if self.cfg.use_motion_weights:
            mcfg = motion.MotionConfig(strength=self.cfg.motion_c, tau=self.cfg.motion_tau)
            w = motion.motion_weights_continuous(frames, mcfg, batched=True)
        else:
            w = np.ones_like(frames)
        pred = ad.slice_axis1(v, 1, h)
        return ad.weighted_squared_error(pred, target[:, 1:], w[:, 1:])

    def rollout(self, frame0, actions, seed=0):
        """Frame-by-frame Euler sampling conditioned on generated context."""
        cfg = self.cfg
        actions = np.asarray(actions)
        b, k = actions.shape[0], actions.shape[1]
        if k < 1 or k > cfg.max_rollout:
            raise WorldModelError(f"rollout length {k} outside 1..{cfg.max_rollout}")
        frames = [np.asarray(frame0, dtype=np.float32)]
        rng = np.random.default_rng(np.uint64(seed))
        steps = cfg.flow_steps
        h = cfg.horizon
        for j in range(1, k + 1):
            w = min(j, h - 1)
            ctx = frames[-w:]
            x = rng.standard_normal((b, 16, 16, 3)).astype(np.float32)
            acts = np.stack([actions[:, j - w + i] for i in range(w)], axis=1)
            for s in range(steps):
                t_cur = s / steps
                seq = np.stack(ctx + [x], axis=1)
                t_frames = np.ones((b, w + 1), dtype=np.float32)
                t_frames[:, w] = t_cur
                v = self.velocity(seq, acts, t_frames).data
                x = x + v[:, w] / steps
            frames.append(np.clip(x, 0.0, 1.0))
        return np.stack(frames[1:], axis=1)


def build_world_model(cfg, palette, env_id, templates=None):
    cls = ARWorldModel if cfg.flavor == "autoregressive" else FlowWorldModel
    return cls(cfg, palette, env_id, templates)


def config_to_dict(cfg):
    return asdict(cfg)


def config_from_dict(d):
    return WorldModelConfig(**d)


def save_world_model(model, path, extra_arrays=None):
    """Write model (plus optional extra records, e.g. reward/...) to path."""
    from . import checkpoint
    meta = {
        "kind": "world_model",
        "format_version": 1,
        "flavor": model.cfg.flavor,
        "config": config_to_dict(model.cfg),
        "env_id": model.env_id,
        "palette": model.palette.tolist(),
        "templates": {str(k): v for k, v in model.templates.items()},
    }
    arrays = {f"model/{k}": v.data for k, v in model.params.named().items()}
    if extra_arrays:
        arrays.update(extra_arrays)
    checkpoint.save_checkpoint(path, meta, arrays)


def load_world_model(path, expect_flavor=None):
    """Load a model checkpoint. Returns (model, meta, extra_arrays)."""
    from . import checkpoint
    meta, arrays = checkpoint.load_checkpoint(path)
    if meta.get("kind") != "world_model":
        raise WorldModelError(f"{path}: not a world-model checkpoint")
    cfg = config_from_dict(meta["config"])
    if expect_flavor is not None and cfg.flavor != expect_flavor:
        raise WorldModelError(
            f"{path}: checkpoint flavor {cfg.flavor!r} does not match expected {expect_flavor!r}")
    palette = np.asarray(meta["palette"], dtype=np.uint8)
    templates = {int(k): v for k, v in meta.get("templates", {}).items()} or None
    model = build_world_model(cfg, palette, meta["env_id"], templates)
    model_arrays = {k[len("model/"):]: v for k, v in arrays.items() if k.startswith("model/")}
    extra = {k: v for k, v in arrays.items() if not k.startswith("model/")}
    model.params.load_arrays(model_arrays)
    return model, meta, extra
