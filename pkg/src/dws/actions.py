"""Action representation and per-frame scale/shift conditioning.

Discrete action ids are mapped through short language templates; an
action's conditioning vector is the mean of the learned embeddings of its
template's words, so actions sharing words share parameters. Continuous
actions go through a trainable linear embedder. Each transformer block
carries an add-on module that regresses per-frame (scale, shift) from the
conditioning vector and applies

    x_i <- x_i + FFN(LayerNorm(x_i) * (1 + scale_i) + shift_i)

with the regressor and the FFN output layer zero-initialized, so the
module is an exact identity residual before any training.
"""

import numpy as np

from . import autodiff as ad
from .nn import ParamSet, normal_init, ones_init, zeros_init

GRIDPUSH_TEMPLATES = {
    0: "do nothing",
    1: "move the agent up",
    2: "move the agent down",
    3: "move the agent left",
    4: "move the agent right",
}

MAX_VOCAB = 64


class ActionError(Exception):
    pass


class ActionTemplateMap:
    """Template table plus learned word embeddings (dimension n_d)."""

    def __init__(self, templates, n_d, params: ParamSet, rng, prefix="act"):
        if len(set(templates.values())) != len(templates):
            raise ActionError("templates for distinct action ids must be distinct")
        self.templates = dict(templates)
        self.n_d = n_d
        vocab = []
        for t in templates.values():
            for w in t.split():
                if w not in vocab:
                    vocab.append(w)
        if len(vocab) > MAX_VOCAB:
            raise ActionError(f"vocabulary too large ({len(vocab)} > {MAX_VOCAB})")
        self.vocab = vocab
        self.word_emb = params.add(f"{prefix}/word_emb", normal_init(rng, (len(vocab), n_d)))
        # mix[a, w] = (count of word w in template a) / template length
        n_act = max(templates) + 1
        mix = np.zeros((n_act, len(vocab)), dtype=np.float32)
        for a, t in templates.items():
            words = t.split()
            for w in words:
                mix[a, vocab.index(w)] += 1.0 / len(words)
        self._mix = ad.Tensor(mix)

    def encode(self, ids):
        """ids: int array of any shape -> Tensor (ids.shape + (n_d,))."""
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self._mix.shape[0]):
            raise ActionError(f"action id out of range 0..{self._mix.shape[0] - 1}")
        table = ad.matmul(self._mix, self.word_emb)
        return ad.embedding(table, ids)


class ContinuousActionEmbedder:
    """Trainable linear map from 2-d actions to conditioning vectors."""

    def __init__(self, n_d, params: ParamSet, rng, prefix="act"):
        self.n_d = n_d
        self.w = params.add(f"{prefix}/cont_w", normal_init(rng, (2, n_d)))
        self.b = params.add(f"{prefix}/cont_b", zeros_init(n_d))

    def encode(self, actions):
        """actions: float array (..., 2) with components in [-1, 1]."""
        a = np.asarray(actions, dtype=np.float32)
        if a.shape[-1] != 2:
            raise ActionError(f"continuous actions must end in dim 2, got {a.shape}")
        if a.size and np.abs(a).max() > 1.0 + 1e-6:
            raise ActionError("continuous action components must lie in [-1, 1]")
        return ad.add(ad.matmul(ad.Tensor(a), self.w), self.b)


class AdaLNModule:
    """Per-frame scale/shift conditioning: two linear layers + layer norm."""

    def __init__(self, width, n_d, params: ParamSet, rng, prefix):
        self.width = width
        self.ln_g = params.add(f"{prefix}/ln_g", ones_init(width))
        self.ln_b = params.add(f"{prefix}/ln_b", zeros_init(width))
        self.reg_w = params.add(f"{prefix}/reg_w", zeros_init((n_d, 2 * width)))
        self.reg_b = params.add(f"{prefix}/reg_b", zeros_init(2 * width))
        self.ffn_w = params.add(f"{prefix}/ffn_w", zeros_init((width, width)))
        self.ffn_b = params.add(f"{prefix}/ffn_b", zeros_init(width))

    def modulate(self, x, c):
        """x: (B, F, P, C) frame features; c: (B, F, n_d) per-frame vectors."""
        if x.shape[-1] != self.width:
            raise ActionError(f"feature width {x.shape[-1]} != module width {self.width}")
        if x.shape[:2] != c.shape[:2]:
            raise ActionError(f"frame counts differ: {x.shape[:2]} vs {c.shape[:2]}")
        b, f = x.shape[0], x.shape[1]
        ab = ad.add(ad.matmul(c, self.reg_w), self.reg_b)
        scale = ad.reshape(ad.slice_last(ab, 0, self.width), (b, f, 1, self.width))
        shift = ad.reshape(ad.slice_last(ab, self.width, 2 * self.width), (b, f, 1, self.width))
        z = ad.layer_norm(x, self.ln_g, self.ln_b)
        z = ad.add(ad.multiply(z, ad.shift(scale, 1.0)), shift)
        return ad.add(x, ad.add(ad.matmul(ad.gelu(z), self.ffn_w), self.ffn_b))
