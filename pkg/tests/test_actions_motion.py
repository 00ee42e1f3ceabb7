import math

import numpy as np
import pytest

from dws import autodiff as ad
from dws import motion
from dws.actions import (GRIDPUSH_TEMPLATES, ActionError, ActionTemplateMap,
                         AdaLNModule, ContinuousActionEmbedder)
from dws.nn import ParamSet
from conftest import fd_grad, max_rel_err


def make_map(n_d=8, seed=0):
    ps = ParamSet()
    amap = ActionTemplateMap(GRIDPUSH_TEMPLATES, n_d, ps, np.random.default_rng(seed))
    return amap, ps


class TestTemplates:
    def test_fixed_template_table(self):
        assert GRIDPUSH_TEMPLATES[1] == "move the agent up"
        assert GRIDPUSH_TEMPLATES[0] == "do nothing"

    def test_encoding_deterministic(self):
        amap, _ = make_map()
        e1 = amap.encode(np.array([2])).data
        e2 = amap.encode(np.array([2])).data
        assert np.array_equal(e1, e2)

    def test_left_right_embeddings_differ(self):
        amap, _ = make_map()
        e = amap.encode(np.array([3, 4])).data
        assert not np.allclose(e[0], e[1])

    def test_shared_words_share_parameters(self):
        amap, _ = make_map()
        # up/down templates differ only in the last word
        e = amap.encode(np.array([1, 2])).data
        w = amap.word_emb.data
        up = amap.vocab.index("up")
        down = amap.vocab.index("down")
        assert np.allclose(e[0] - e[1], (w[up] - w[down]) / 4, atol=1e-6)

    def test_unknown_id_rejected(self):
        amap, _ = make_map()
        with pytest.raises(ActionError):
            amap.encode(np.array([9]))

    def test_mean_of_word_embeddings(self):
        amap, _ = make_map()
        e = amap.encode(np.array([1])).data[0]
        words = GRIDPUSH_TEMPLATES[1].split()
        manual = np.mean([amap.word_emb.data[amap.vocab.index(w)] for w in words], axis=0)
        assert np.allclose(e, manual, atol=1e-6)


class TestContinuousEmbedder:
    def make(self, dtype=np.float32):
        ps = ParamSet(dtype=dtype)
        return ContinuousActionEmbedder(6, ps, np.random.default_rng(1)), ps

    def test_zero_action_gives_bias(self):
        emb, _ = self.make()
        out = emb.encode(np.zeros((1, 2))).data[0]
        assert np.allclose(out, emb.b.data, atol=1e-7)

    def test_affine_identity(self):
        emb, _ = self.make()
        a1 = np.array([[0.3, -0.2]], dtype=np.float32)
        a2 = np.array([[0.1, 0.4]], dtype=np.float32)
        lhs = emb.encode(a1).data + emb.encode(a2).data - emb.encode(np.zeros((1, 2))).data
        rhs = emb.encode(a1 + a2).data
        assert np.allclose(lhs, rhs, atol=1e-6)

    def test_out_of_range_rejected(self):
        emb, _ = self.make()
        with pytest.raises(ActionError):
            emb.encode(np.array([[1.2, 0.0]]))

    def test_gradient_matches_finite_differences(self):
        ps = ParamSet(dtype=np.float64)
        emb = ContinuousActionEmbedder(5, ps, np.random.default_rng(2))
        acts = np.random.default_rng(3).uniform(-1, 1, (4, 2))
        r = ad.Tensor(np.random.default_rng(4).standard_normal((4, 5)), dtype=np.float64)

        def build():
            return ad.sum_all(ad.multiply(emb.encode(acts), r))

        with ad.Graph() as g:
            loss = build()
        g.backward(loss)
        numeric = fd_grad(lambda: build().item(), [emb.w.data, emb.b.data])
        assert max_rel_err(emb.w.grad, numeric[0]) < 1e-3
        assert max_rel_err(emb.b.grad, numeric[1]) < 1e-3


class TestAdaLN:
    def make(self, width=8, n_d=6, dtype=np.float32):
        ps = ParamSet(dtype=dtype)
        mod = AdaLNModule(width, n_d, ps, np.random.default_rng(0), "blk0/adaln")
        return mod, ps

    def test_identity_at_init(self):
        mod, _ = self.make()
        rng = np.random.default_rng(5)
        x = ad.Tensor(rng.standard_normal((2, 3, 4, 8)).astype(np.float32))
        c = ad.Tensor(rng.standard_normal((2, 3, 6)).astype(np.float32))
        y = mod.modulate(x, c)
        assert np.array_equal(y.data, x.data)

    def test_per_frame_isolation(self):
        mod, ps = self.make()
        rng = np.random.default_rng(6)
        for t in ps.tensors():  # randomize so the module is not identity
            t.data = rng.standard_normal(t.shape).astype(np.float32) * 0.3
        x = rng.standard_normal((1, 4, 5, 8)).astype(np.float32)
        c = rng.standard_normal((1, 4, 6)).astype(np.float32)
        base = mod.modulate(ad.Tensor(x), ad.Tensor(c)).data
        c2 = c.copy()
        c2[0, 2] += 1.0
        pert = mod.modulate(ad.Tensor(x), ad.Tensor(c2)).data
        assert np.array_equal(base[:, [0, 1, 3]], pert[:, [0, 1, 3]])
        assert not np.allclose(base[:, 2], pert[:, 2])

    def test_width_mismatch_rejected(self):
        mod, _ = self.make()
        with pytest.raises(ActionError):
            mod.modulate(ad.Tensor(np.zeros((1, 2, 3, 5), np.float32)),
                         ad.Tensor(np.zeros((1, 2, 6), np.float32)))

    def test_parameter_count_is_two_linears_plus_ln(self):
        width, n_d = 8, 6
        _, ps = self.make(width, n_d)
        expected = (n_d * 2 * width + 2 * width) + (width * width + width) + 2 * width
        assert ps.n_params() == expected

    def test_divergence_after_training_on_action_dependent_target(self):
        mod, ps = self.make()
        rng = np.random.default_rng(7)
        x = np.tile(rng.standard_normal((1, 1, 4, 8)).astype(np.float32), (1, 2, 1, 1))
        c = rng.standard_normal((1, 2, 6)).astype(np.float32)  # same features, two actions
        target = rng.standard_normal((1, 2, 4, 8)).astype(np.float32)
        opt = ad.Adam(ps.tensors(), lr=1e-2)
        for _ in range(10):
            with ad.Graph() as g:
                y = mod.modulate(ad.Tensor(x), ad.Tensor(c))
                loss = ad.weighted_squared_error(y, target, np.ones_like(target))
            g.backward(loss)
            opt.step()
        out = mod.modulate(ad.Tensor(x), ad.Tensor(c)).data
        assert not np.allclose(out[0, 0], out[0, 1])

    def test_gradient_wrt_conditioning_matches_fd(self):
        ps = ParamSet(dtype=np.float64)
        mod = AdaLNModule(8, 6, ps, np.random.default_rng(0), "m")
        rng = np.random.default_rng(8)
        for t in ps.tensors():
            t.data = rng.standard_normal(t.shape) * 0.3
        x = ad.Tensor(rng.standard_normal((1, 2, 3, 8)), dtype=np.float64)
        c = ad.Tensor(rng.standard_normal((1, 2, 6)), requires_grad=True, dtype=np.float64)
        r = np.random.default_rng(9).standard_normal((1, 2, 3, 8))

        def build():
            return ad.sum_all(ad.multiply(mod.modulate(x, c), ad.Tensor(r, dtype=np.float64)))

        with ad.Graph() as g:
            loss = build()
        g.backward(loss)
        numeric = fd_grad(lambda: build().item(), [c.data])
        assert max_rel_err(c.grad, numeric[0]) < 1e-3


class TestMotionWeights:
    def test_worked_example(self):
        cfg = motion.MotionConfig(strength=2.0)
        d = np.array([0.0, 0.0, 0.0, math.log(3.0)])
        w = motion.weights_from_diff(d, cfg)
        expect = np.array([2 ** (1 / 3)] * 3 + [2.0])
        assert np.allclose(w, expect, atol=1e-4)

    def test_worked_example_from_frames(self):
        cfg = motion.MotionConfig(strength=2.0)
        frames = np.array([[0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, math.log(3.0)]])
        w = motion.motion_weights_continuous(frames, cfg)
        assert np.allclose(w[0], 1.0)
        assert np.allclose(w[1], [2 ** (1 / 3)] * 3 + [2.0], atol=1e-4)

    def test_zero_motion_guard(self):
        cfg = motion.MotionConfig(strength=2.0)
        frames = np.tile(np.linspace(0, 1, 6)[None], (3, 1))
        w = motion.motion_weights_continuous(frames, cfg)
        assert np.array_equal(w, np.ones_like(w))

    def test_conditioning_frame_weight_is_one(self):
        cfg = motion.MotionConfig(strength=2.0)
        rng = np.random.default_rng(0)
        frames = rng.random((4, 5, 5, 3)).astype(np.float32)
        w = motion.motion_weights_continuous(frames, cfg)
        assert np.array_equal(w[0], np.ones((5, 5, 3), np.float32))

    def test_range_and_monotonicity(self):
        cfg = motion.MotionConfig(strength=2.0)
        rng = np.random.default_rng(1)
        frames = rng.random((3, 40)).astype(np.float32)
        w = motion.motion_weights_continuous(frames, cfg)
        assert w.min() >= 1.0 and w.max() <= cfg.strength + 1e-6
        d = np.abs(frames[1] - frames[0])
        order = np.argsort(d)
        ws = w[1][order]
        assert np.all(np.diff(ws) >= -1e-6)

    def test_fewer_than_two_frames_rejected(self):
        with pytest.raises(motion.MotionError):
            motion.motion_weights_continuous(np.zeros((1, 4)), motion.MotionConfig())

    def test_discrete_changed_token_rule(self):
        w = motion.motion_weights_discrete(np.array([[1, 2], [1, 3]]), motion.MotionConfig())
        assert np.allclose(w[1], [1.0, math.e], atol=1e-6)
        assert np.allclose(w[0], 1.0)

    def test_discrete_identical_frames(self):
        w = motion.motion_weights_discrete(np.array([[1, 2, 3], [1, 2, 3]]), motion.MotionConfig())
        assert np.array_equal(w, np.ones((2, 3), np.float32))

    def test_discrete_values_binary(self):
        rng = np.random.default_rng(2)
        toks = rng.integers(0, 4, (5, 30))
        w = motion.motion_weights_discrete(toks, motion.MotionConfig())
        for v in np.unique(w):
            assert np.isclose(v, 1.0) or np.isclose(v, math.e)

    def test_literal_indicator_flag(self):
        cfg = motion.MotionConfig(literal_indicator=True)
        w = motion.motion_weights_discrete(np.array([[1, 2], [1, 3]]), cfg)
        assert np.allclose(w[1], [math.e, 1.0], atol=1e-6)

    def test_strength_must_exceed_one(self):
        with pytest.raises(motion.MotionError):
            motion.MotionConfig(strength=1.0)


class TestApplyMotionLoss:
    def test_neutral_weights(self):
        rng = np.random.default_rng(3)
        l = rng.random((4, 4))
        assert np.isclose(motion.apply_motion_loss(l, np.ones_like(l)), l.mean())

    def test_hand_example(self):
        got = motion.apply_motion_loss([0.5, 0.2], [1.0, math.e])
        assert abs(got - (0.5 + 0.2 * math.e) / 2) < 1e-9
        assert abs(got - 0.5218) < 1e-3

    def test_linearity(self):
        rng = np.random.default_rng(4)
        l = rng.random(10)
        w = 1 + rng.random(10)
        assert np.isclose(motion.apply_motion_loss(l, 2 * w), 2 * motion.apply_motion_loss(l, w))

    def test_misalignment_rejected(self):
        with pytest.raises(motion.MotionError):
            motion.apply_motion_loss(np.zeros(3), np.zeros(4))


def test_weights_are_detached_from_parameters():
    """Weights come from targets only; no gradient path through them."""
    ps = ParamSet()
    rng = np.random.default_rng(0)
    w = ps.add("w", rng.standard_normal((4, 4)).astype(np.float32))
    target = rng.random((2, 4)).astype(np.float32)
    wt = motion.motion_weights_continuous(target, motion.MotionConfig())
    with ad.Graph() as g:
        pred = ad.matmul(ad.Tensor(rng.random((2, 4)).astype(np.float32)), w)
        loss = ad.weighted_squared_error(pred, target, wt)
    g.backward(loss)
    # changing parameters must not change the weights themselves
    wt2 = motion.motion_weights_continuous(target, motion.MotionConfig())
    assert np.array_equal(wt, wt2)
    assert isinstance(wt, np.ndarray)  # constant, not part of the graph
