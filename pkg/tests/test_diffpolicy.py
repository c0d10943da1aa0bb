import numpy as np
import pytest

from corrpolicy.diffpolicy import (
    DiffusionSchedule,
    PolicyConfig,
    TrainSettings,
    ddim_sample,
    denoiser_apply,
    forward_noise,
    init_denoiser_params,
    make_schedule,
    sinusoidal_embedding,
    training_loss,
)
from corrpolicy.nncore import Tensor
from gradtools import check_gradients


def oracle_denoiser(a0):
    """Noise prediction consistent with a known clean sequence a0."""

    def fn(a, cond, k, schedule):
        ab = schedule.alpha_bar[k]
        return (a - np.sqrt(ab) * a0) / np.sqrt(1.0 - ab)

    return fn


class TestSchedule:
    def test_cosine_shape(self):
        sched = make_schedule(100, "squared-cosine")
        assert sched.alpha_bar[0] == 1.0
        assert sched.alpha_bar[-1] < 0.02
        assert np.all(np.diff(sched.alpha_bar) < 0)

    def test_linear_fallback(self):
        sched = make_schedule(100, "linear")
        assert np.all(np.diff(sched.alpha_bar) < 0)
        assert sched.alpha_bar[-1] < 0.02

    def test_matches_scalar_recurrence(self):
        for kind in ("squared-cosine", "linear"):
            sched = make_schedule(50, kind)
            acc = 1.0
            for k in range(50):
                acc *= 1.0 - sched.betas[k]
                assert abs(sched.alpha_bar[k + 1] - acc) < 1e-12

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="kind"):
            make_schedule(10, "exotic")

    def test_small_k(self):
        for kind in ("squared-cosine", "linear"):
            make_schedule(2, kind)
        with pytest.raises(ValueError):
            make_schedule(1)


class TestForwardNoise:
    def setup_method(self):
        # Hand-built coefficients so the exact endpoints are testable.
        self.sched = DiffusionSchedule(
            kind="squared-cosine",
            alpha_bar=np.array([1.0, 0.25, 0.0]),
            alphas=np.array([0.25, 0.0]),
            betas=np.array([0.75, 1.0]),
        )

    def test_no_noise_endpoint(self):
        rng = np.random.default_rng(0)
        a0 = rng.standard_normal((4, 5))
        eps = rng.standard_normal((4, 5))
        np.testing.assert_array_equal(forward_noise(a0, 0, eps, self.sched), a0)

    def test_pure_noise_endpoint(self):
        rng = np.random.default_rng(1)
        a0 = rng.standard_normal((4, 5))
        eps = rng.standard_normal((4, 5))
        np.testing.assert_array_equal(forward_noise(a0, 2, eps, self.sched), eps)

    def test_quarter_signal(self):
        a0 = np.ones((2, 2))
        eps = np.full((2, 2), 2.0)
        out = forward_noise(a0, 1, eps, self.sched)
        np.testing.assert_allclose(out, 0.5 + 0.8660254 * 2.0, atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            forward_noise(np.zeros((2, 3)), 1, np.zeros((3, 2)), self.sched)

    def test_vector_k_batching(self):
        sched = make_schedule(20)
        rng = np.random.default_rng(2)
        a0 = rng.standard_normal((3, 4, 2))
        eps = rng.standard_normal((3, 4, 2))
        k = np.array([1, 10, 20])
        out = forward_noise(a0, k, eps, sched)
        for i in range(3):
            np.testing.assert_allclose(out[i], forward_noise(a0[i], k[i], eps[i], sched))

    def test_marginal_statistics(self):
        # Mean/variance of the noised marginal against (sqrt(ab)*a0, 1-ab), 1e5 draws.
        sched = make_schedule(100)
        rng = np.random.default_rng(3)
        a0 = np.full(100_000, 0.7)
        k = 40
        eps = rng.standard_normal(100_000)
        samples = forward_noise(a0, k, eps, sched)
        ab = sched.alpha_bar[k]
        assert abs(samples.mean() - np.sqrt(ab) * 0.7) < 0.02 * max(abs(np.sqrt(ab) * 0.7), 1)
        assert abs(samples.var() - (1 - ab)) < 0.02 * (1 - ab)


class TestTrainingLoss:
    def test_perfect_denoiser_zero_loss(self):
        sched = make_schedule(100)
        rng = np.random.default_rng(4)
        a0 = rng.uniform(-1, 1, (8, 12, 5)).astype(np.float32)
        batch = {"actions": a0, "cond": np.zeros((8, 3), dtype=np.float32)}

        def denoise(ak, cond, k):
            ab = sched.alpha_bar[k][:, None]
            return (ak - np.sqrt(ab) * a0.reshape(8, -1)) / np.sqrt(1 - ab)

        loss = training_loss(batch, denoise, sched, np.random.default_rng(5))
        assert float(loss.data) < 1e-6

    def test_zero_denoiser_scores_action_dimensionality(self):
        sched = make_schedule(100)
        rng = np.random.default_rng(6)
        b, h, a = 170, 12, 5
        batch = {
            "actions": rng.uniform(-1, 1, (b, h, a)).astype(np.float32),
            "cond": np.zeros((b, 2), dtype=np.float32),
        }
        losses = [
            float(training_loss(batch, lambda ak, c, k: np.zeros_like(ak), sched, np.random.default_rng(100 + i)).data)
            for i in range(2)
        ]
        mean = np.mean(losses)  # >= 2e4 (k, eps) draws in total
        assert abs(mean - h * a) / (h * a) < 0.05

    def test_gradients_match_finite_differences(self):
        sched = make_schedule(10)
        cfg = PolicyConfig(
            horizon=3, n_obs_steps=2, n_action_steps=2, arm_dim=2, hand_dim=1,
            diffusion_steps=10, ddim_steps=4, hidden_dim=8, n_blocks=1, k_embed_dim=4,
        )
        params = {
            k: Tensor(v.data.astype(np.float64), requires_grad=True)
            for k, v in init_denoiser_params(cfg, 5, np.random.default_rng(7)).items()
        }
        rng = np.random.default_rng(8)
        batch = {
            "actions": rng.uniform(-1, 1, (2, 3, 3)),
            "cond": rng.standard_normal((2, 5)),
        }

        def f(p):
            return training_loss(
                batch,
                lambda a, c, k: denoiser_apply(p, cfg, a, c, k),
                sched,
                np.random.default_rng(9),  # identical draws on every call
            )

        check_gradients(f, params, h=1e-5, tol=1e-3)

    def test_non_finite_loss_aborts(self):
        sched = make_schedule(10)
        batch = {"actions": np.zeros((2, 3, 2), dtype=np.float32), "cond": np.zeros((2, 1), dtype=np.float32)}
        with pytest.raises(RuntimeError, match="non-finite"):
            training_loss(batch, lambda a, c, k: np.full_like(a, np.nan), sched, np.random.default_rng(0))


class TestDdim:
    def test_perfect_denoiser_recovers_a0(self):
        sched = make_schedule(100)
        rng = np.random.default_rng(10)
        a0 = rng.uniform(-1, 1, (12, 5))
        oracle = oracle_denoiser(a0)
        for n_steps in (1, 3, 10, 100):
            out = ddim_sample(
                None, lambda a, c, k: oracle(a, c, k, sched), sched, n_steps, seed=0, shape=(12, 5)
            )
            np.testing.assert_allclose(out, a0, atol=1e-6)

    def test_deterministic_given_seed(self):
        sched = make_schedule(50)
        fn = lambda a, c, k: 0.1 * a
        out1 = ddim_sample(None, fn, sched, 10, seed=42, shape=(4, 3))
        out2 = ddim_sample(None, fn, sched, 10, seed=42, shape=(4, 3))
        np.testing.assert_array_equal(out1, out2)

    def test_zero_denoiser_matches_closed_form(self):
        sched = make_schedule(60)
        _, trajectory = ddim_sample(
            None,
            lambda a, c, k: np.zeros_like(a),
            sched,
            6,
            seed=3,
            shape=(5, 2),
            return_trajectory=True,
        )
        ks = np.round(np.linspace(60, 0, 7)).astype(int)
        a = trajectory[0]
        for i, (k, k_prev) in enumerate(zip(ks[:-1], ks[1:])):
            a = np.sqrt(sched.alpha_bar[k_prev] / sched.alpha_bar[k]) * a
            np.testing.assert_allclose(trajectory[i + 1], a, atol=1e-9)

    def test_output_clipped(self):
        sched = make_schedule(40)
        out = ddim_sample(None, lambda a, c, k: np.zeros_like(a), sched, 4, seed=7, shape=(6, 4))
        assert np.all(out >= -1.0) and np.all(out <= 1.0)

    def test_n_steps_validation(self):
        sched = make_schedule(10)
        with pytest.raises(ValueError):
            ddim_sample(None, lambda a, c, k: a, sched, 11, seed=0, shape=(2, 2))


class RecordingEnv:
    """Env wrapper exposing the latest state so test stubs can read it."""

    def __init__(self, env):
        self.env = env
        self.state = None

    def reset(self, seed):
        self.state = self.env.reset(seed)
        return self.state

    def step(self, state, arm, hand):
        self.state = self.env.step(state, arm, hand)
        return self.state

    def observe(self, state):
        return self.env.observe(state)

    def success(self, state):
        return self.env.success(state)


class TestRolloutPlumbing:
    def test_expert_as_denoiser_reaches_goal(self):
        """A noise source consistent with the expert's plan drives the rollout to success."""
        from corrpolicy import toyenv
        from corrpolicy.corrnet import EncoderConfig, init_encoder_params
        from corrpolicy.diffpolicy import make_schedule, rollout_policy
        from corrpolicy.obsbuild import EpisodePack, fit_normalizer, normalize

        model = toyenv.build_toy_model(n_points=64)
        base_env = toyenv.PlanarPushEnv(model)

        # One expert episode provides extrema for a faithful normalizer.
        s = base_env.reset(0)
        rows = {k: [] for k in ("object_pc", "hand_pc", "arm_state", "hand_state", "arm_action", "hand_action", "object_pose")}
        for _ in range(120):
            obs = base_env.observe(s)
            arm, hand = base_env.expert_action(s)
            rows["object_pc"].append(obs.obj_pc)
            rows["hand_pc"].append(obs.hand_pc)
            rows["arm_state"].append(obs.arm_state)
            rows["hand_state"].append(obs.hand_state)
            rows["arm_action"].append(arm)
            rows["hand_action"].append(hand)
            rows["object_pose"].append(base_env.object_pose_row(s))
            s = base_env.step(s, arm, hand)
            if base_env.success(s):
                break
        pack = EpisodePack(
            task="planar-push", dt=0.2, n_points=64, arm_dim=3, hand_dim=2,
            streams={k: np.stack(v).astype(np.float32) for k, v in rows.items()},
        )
        normalizer = fit_normalizer([pack])

        pol_cfg = PolicyConfig(horizon=12, n_obs_steps=4, n_action_steps=6, diffusion_steps=20, ddim_steps=5)
        enc_cfg = EncoderConfig(n_points=64, token_dim=8, heads=4, state_dim=8)
        enc_params = init_encoder_params(enc_cfg, np.random.default_rng(0))
        den_params = init_denoiser_params(pol_cfg, enc_cfg.condition_dim * 4, np.random.default_rng(1))
        schedule = make_schedule(pol_cfg.diffusion_steps)
        env = RecordingEnv(base_env)

        def expert_plan_normalized():
            sim = env.state
            plan = []
            for _ in range(pol_cfg.horizon):
                arm, hand = base_env.expert_action(sim)
                plan.append(np.concatenate([arm, hand]))
                sim = base_env.step(sim, arm, hand)
            plan = np.array(plan)
            arm_n = normalize(plan[:, :3], normalizer, "arm_action")
            hand_n = normalize(plan[:, 3:], normalizer, "hand_action")
            return np.concatenate([arm_n, hand_n], axis=1)

        def stub(a, cond, k):
            a0 = np.clip(expert_plan_normalized(), -1, 1)
            ab = schedule.alpha_bar[k]
            return (a - np.sqrt(ab) * a0) / np.sqrt(1.0 - ab)

        record = rollout_policy(
            env, enc_params, enc_cfg, den_params, pol_cfg, schedule, normalizer,
            seed=0, max_steps=200, denoiser_fn=stub,
        )
        assert record.success
        assert record.steps <= 120

    def test_rollout_reproducible(self):
        from corrpolicy import toyenv
        from corrpolicy.corrnet import EncoderConfig, init_encoder_params
        from corrpolicy.diffpolicy import make_schedule, rollout_policy
        from corrpolicy.obsbuild import Normalizer

        model = toyenv.build_toy_model(n_points=64)
        env = toyenv.PlanarPushEnv(model)
        lo = {s: np.full(d, -1.0) for s, d in
              [("object_pc", 3), ("hand_pc", 3), ("arm_state", 3), ("hand_state", 2), ("arm_action", 3), ("hand_action", 2)]}
        hi = {s: np.full_like(v, 1.0) for s, v in lo.items()}
        normalizer = Normalizer(lo, hi)
        pol_cfg = PolicyConfig(horizon=6, n_obs_steps=2, n_action_steps=3, diffusion_steps=10, ddim_steps=3)
        enc_cfg = EncoderConfig(n_points=64, token_dim=8, heads=4, state_dim=8)
        enc_params = init_encoder_params(enc_cfg, np.random.default_rng(0))
        den_params = init_denoiser_params(pol_cfg, enc_cfg.condition_dim * 2, np.random.default_rng(1))
        schedule = make_schedule(pol_cfg.diffusion_steps)
        r1 = rollout_policy(env, enc_params, enc_cfg, den_params, pol_cfg, schedule, normalizer, seed=5, max_steps=12)
        r2 = rollout_policy(env, enc_params, enc_cfg, den_params, pol_cfg, schedule, normalizer, seed=5, max_steps=12)
        np.testing.assert_array_equal(r1.actions, r2.actions)
        np.testing.assert_array_equal(r1.object_xy, r2.object_xy)


class TestDenoiserNet:
    def test_shapes_and_determinism(self):
        cfg = PolicyConfig(horizon=4, n_action_steps=2, arm_dim=3, hand_dim=2, hidden_dim=16, n_blocks=2, k_embed_dim=8, diffusion_steps=20, ddim_steps=5)
        params = init_denoiser_params(cfg, cond_dim=7, rng=np.random.default_rng(0))
        a = np.random.default_rng(1).standard_normal((3, cfg.flat_dim)).astype(np.float32)
        cond = np.random.default_rng(2).standard_normal((3, 7)).astype(np.float32)
        k = np.array([1, 5, 20])
        out1 = denoiser_apply(params, cfg, a, cond, k)
        out2 = denoiser_apply(params, cfg, a, cond, k)
        assert out1.shape == (3, cfg.flat_dim)
        np.testing.assert_array_equal(out1.data, out2.data)

    def test_sinusoidal_embedding_shape(self):
        emb = sinusoidal_embedding(np.array([1, 50, 100]), 32)
        assert emb.shape == (3, 32)
        assert np.all(np.abs(emb) <= 1.0)
