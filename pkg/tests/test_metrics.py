import numpy as np
import pytest

from dws import envs, metrics


class TestPSNR:
    def test_identical_capped_at_99(self, rng):
        f = rng.random((4, 16, 16, 3))
        assert metrics.psnr(f, f) == 99.0

    def test_20db_at_mse_001(self):
        ref = np.zeros((16, 16, 3))
        gen = np.full((16, 16, 3), 0.1)
        assert abs(metrics.psnr(ref, gen) - 20.0) < 1e-3

    def test_6db_at_mse_quarter(self):
        ref = np.zeros((16, 16, 3))
        gen = np.full((16, 16, 3), 0.5)
        assert abs(metrics.psnr(ref, gen) - 6.0206) < 1e-3

    def test_monotone_in_mse(self, rng):
        ref = rng.random((16, 16, 3))
        vals = [metrics.psnr(ref, ref + eps) for eps in (0.01, 0.05, 0.2)]
        assert vals[0] > vals[1] > vals[2]

    def test_shape_mismatch_rejected(self):
        with pytest.raises(metrics.MetricError):
            metrics.psnr(np.zeros((2, 2)), np.zeros((3, 3)))


class TestSSIM:
    def test_self_similarity_is_one(self, rng):
        f = rng.random((2, 16, 16, 3))
        assert abs(metrics.ssim(f, f) - 1.0) < 1e-9

    def test_zero_variance_closed_form(self):
        ref = np.zeros((16, 16, 3))
        gen = np.ones((16, 16, 3))
        expect = metrics.SSIM_C1 / (1 + metrics.SSIM_C1)
        assert abs(metrics.ssim(ref, gen) - expect) < 1e-6
        assert abs(metrics.ssim(ref, gen) - 1.0e-4) < 1e-3

    def test_symmetry(self, rng):
        a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
        assert abs(metrics.ssim(a, b) - metrics.ssim(b, a)) < 1e-12

    def test_in_range(self, rng):
        a, b = rng.random((3, 16, 16, 3)), rng.random((3, 16, 16, 3))
        assert -1.0 <= metrics.ssim(a, b) <= 1.0


class TestActionFollowing:
    def rollout_truth(self, seed, k=9):
        state, _ = envs.env_reset("gridpush", seed)
        rng = np.random.default_rng(seed)
        actions = [int(rng.integers(0, 5)) for _ in range(k)]
        frames = []
        sim = envs.state_from_frame(envs.render(state, "gridpush"))
        for a in actions:
            if not sim.done:
                envs.env_step(sim, a, "gridpush")
            frames.append(envs.render(sim, "gridpush"))
        return state, np.stack(frames), actions

    def test_true_env_rollout_scores_one(self):
        state, frames, actions = self.rollout_truth(5)
        assert metrics.action_following_accuracy(state, frames, actions) == 1.0

    def test_background_frames_score_zero(self):
        state, frames, actions = self.rollout_truth(6)
        blank = np.zeros_like(frames) + envs.GRIDPUSH_PALETTE[0].astype(np.float32) / 255.0
        assert metrics.action_following_accuracy(state, blank, actions) == 0.0

    def test_multiple_agent_cells_is_miss(self):
        state, frames, actions = self.rollout_truth(7, k=1)
        doubled = frames.copy()
        doubled[0, 8, 8] = envs.GRIDPUSH_PALETTE[envs.GRIDPUSH_AGENT].astype(np.float32) / 255.0
        doubled[0, 9, 9] = doubled[0, 8, 8]
        assert metrics.action_following_accuracy(state, doubled, actions) == 0.0

    def test_non_gridpush_rejected(self):
        with pytest.raises(metrics.MetricError):
            metrics.action_following_accuracy(None, np.zeros((1, 16, 16, 3)), [0], env_id="blockpush")


class TestReport:
    def test_text_roundtrip_fields(self, tmp_path):
        rep = metrics.EvalReport(config={"env": "gridpush", "flavor": "autoregressive"})
        rep.psnr_per_seq = [30.0, 40.0]
        rep.ssim_per_seq = [0.9, 0.95]
        rep.afa_per_seq = [1.0, 0.5]
        text = rep.to_text()
        assert "psnr_mean = 35.0" in text
        assert "action_following_mean = 0.75" in text
        assert rep.fingerprint() in text
        p = tmp_path / "r.txt"
        rep.save(p)
        assert p.read_text().startswith("[report]")

    def test_fingerprint_depends_on_config(self):
        a = metrics.EvalReport(config={"seed": 1}).fingerprint()
        b = metrics.EvalReport(config={"seed": 2}).fingerprint()
        assert a != b
