import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from helpers import SMALL
from reforest.env import DroneSwarmEnv, EnvConfig
from reforest.microenv import BeaconEnv
from reforest.nn import NetworkConfig
from reforest.ppo import (
    CuriosityModel, LengthMismatch, NonFiniteLoss, PpoConfig, PpoTrainer, RolloutBuffer, blend_rewards,
    clip_objective, compute_gae, intrinsic_reward, learning_rate_at, normalize_advantages,
)

BEACON_NET = NetworkConfig(vector_dim=4, visual=False, hidden_units=64)


def discounted_oracle(rewards, dones, values, bootstrap, gamma):
    """Brute-force discounted return from each step to its episode end."""
    n = len(rewards)
    out = np.zeros(n)
    for t in range(n):
        total, disc = 0.0, 1.0
        for k in range(t, n):
            total += disc * rewards[k]
            disc *= gamma
            if dones[k]:
                break
        else:
            total += disc * bootstrap
        out[t] = total
    return out


class TestGae:
    def test_hand_example(self):
        adv, ret = compute_gae([1, 1], [0, 0], [0, 1], 0.0, gamma=1.0, lam=1.0)
        np.testing.assert_allclose(adv, [2, 1])
        np.testing.assert_allclose(ret, [2, 1])

    def test_lambda_one_is_discounted_sum(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(1, 50))
            r, v = rng.normal(size=n), rng.normal(size=n)
            d = (rng.random(n) < 0.1).astype(float)
            boot = rng.normal()
            adv, ret = compute_gae(r, v, d, boot, gamma=0.97, lam=1.0)
            np.testing.assert_allclose(ret, discounted_oracle(r, d, v, boot, 0.97), atol=1e-9)

    def test_lambda_zero_is_td_residual(self):
        rng = np.random.default_rng(1)
        r, v = rng.normal(size=30), rng.normal(size=30)
        d = np.zeros(30)
        d[12] = 1
        adv, _ = compute_gae(r, v, d, 0.4, gamma=0.9, lam=0.0)
        nxt = np.append(v[1:], 0.4) * (1 - d)
        np.testing.assert_array_equal(adv, r + 0.9 * nxt - v)

    def test_terminal_ignores_bootstrap(self):
        a, _ = compute_gae([1.0], [0.0], [1.0], 100.0)
        assert a[0] == 1.0

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            compute_gae([1, 2], [0], [0, 0], 0.0)


class TestClip:
    def test_examples(self):
        assert clip_objective(1.5, 1.0, 0.2) == pytest.approx(1.2)
        assert clip_objective(0.5, -1.0, 0.2) == pytest.approx(-0.8)
        assert clip_objective(1.0, -3.7) == pytest.approx(-3.7)

    @given(st.floats(1e-3, 10), st.floats(-100, 100), st.floats(0.01, 0.9))
    def test_bound(self, r, a, eps):
        assert abs(clip_objective(r, a, eps)) <= max(abs(r * a), (1 + eps) * abs(a)) + 1e-9

    @pytest.mark.parametrize("r,a", [(1.5, 1.0), (2.0, 0.3), (0.5, -1.0), (0.1, -2.0)])
    def test_flat_outside_trust_region(self, r, a):
        ratio = torch.tensor(r, requires_grad=True)
        clip_objective(ratio, torch.tensor(a)).backward()
        assert ratio.grad.item() == 0.0

    def test_numpy_and_torch_agree(self):
        r = np.linspace(0.1, 3, 20)
        a = np.linspace(-2, 2, 20)
        np.testing.assert_allclose(clip_objective(r, a), clip_objective(torch.tensor(r), torch.tensor(a)).numpy())


class TestHelpers:
    def test_normalize(self):
        x = normalize_advantages(torch.tensor([1.0, 2.0, 7.0, -3.0]))
        assert abs(x.mean().item()) < 1e-6 and abs(x.std(unbiased=False).item() - 1) < 1e-4
        assert normalize_advantages(torch.tensor([5.0])).item() == 0.0

    def test_linear_schedule(self):
        cfg = PpoConfig(max_steps=1000)
        assert learning_rate_at(cfg, 0) == 3e-4
        assert learning_rate_at(cfg, 500) == pytest.approx(1.5e-4)
        assert learning_rate_at(cfg, 1000) == 0.0
        assert learning_rate_at(cfg, 5000) == 0.0

    def test_blend(self):
        np.testing.assert_array_equal(blend_rewards([1.0, -2.0]), [0.9, -1.8])
        np.testing.assert_allclose(blend_rewards([1.0], [0.5]), [1.4])

    @pytest.mark.parametrize("bad", [dict(gamma=0.0), dict(lam=1.5), dict(epsilon=0.0),
                                     dict(batch_size=300, buffer_size=1000), dict(curiosity="icm")])
    def test_config_validation(self, bad):
        with pytest.raises(ValueError):
            PpoConfig(**bad).validate()


class TestCuriosity:
    def test_identity_fit_gives_zero(self):
        m = CuriosityModel(6, 2, encoding=16)
        obs = np.random.default_rng(0).normal(size=(4, 6))
        np.testing.assert_array_equal(intrinsic_reward(obs, np.zeros((4, 2)), obs, m), 0.0)

    def test_non_negative_and_learns(self):
        m = CuriosityModel(6, 2, encoding=16)
        rng = np.random.default_rng(0)
        s, a = rng.normal(size=(32, 6)), rng.normal(size=(32, 2))
        s2 = s + 0.5
        before = intrinsic_reward(s, a, s2, m)
        assert np.all(before >= 0) and before.mean() > 0
        opt = torch.optim.Adam(m.forward_model.parameters(), lr=1e-2)
        t = [torch.as_tensor(x, dtype=torch.float32) for x in (s, a, s2)]
        for _ in range(100):
            loss = m.prediction_error(*t).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
        assert intrinsic_reward(s, a, s2, m).mean() < 0.2 * before.mean()
        assert not any(p.requires_grad for p in m.encoder.parameters())

    def test_trainer_with_curiosity(self):
        cfg = PpoConfig(batch_size=50, buffer_size=100, time_horizon=25, curiosity="forward", max_steps=1000)
        tr = PpoTrainer([BeaconEnv(seed=0)], cfg, BEACON_NET)
        stats = tr.train_iteration()
        assert stats.curiosity_loss > 0


class TestBuffer:
    def test_segments_stay_per_agent(self):
        buf = RolloutBuffer(gamma=1.0, lam=1.0)
        for t in range(3):
            for agent in (0, 1):
                buf.add(agent, np.full(2, agent), None, np.zeros(3), np.zeros(2), 0.0, 0.0,
                        float(agent + 1), 0.0)
        assert len(buf) == 6 and buf.segment_length(0) == 3
        with pytest.raises(RuntimeError):
            buf.flatten()
        buf.finish(0, 0.0)
        buf.finish(1, 10.0)
        data = buf.flatten()
        np.testing.assert_array_equal(data["return"], [3, 2, 1, 16, 14, 12])
        np.testing.assert_array_equal(data["vector"][:, 0], [0, 0, 0, 1, 1, 1])
        assert data["visual"] is None


class TestTrainer:
    def make(self, seed=0, **kw):
        cfg = PpoConfig(**{**dict(batch_size=100, buffer_size=200, time_horizon=25, learning_rate=3e-3,
                                  beta=0.0, max_steps=200 * 60, seed=seed), **kw})
        return PpoTrainer([BeaconEnv(seed=seed)], cfg, BEACON_NET)

    def test_first_epoch_ratio_and_normalization(self):
        stats = self.make().train_iteration()
        assert 0.99 <= stats.mean_ratio_first_epoch <= 1.01
        assert stats.max_minibatch_adv_mean < 1e-6
        assert stats.max_minibatch_adv_std_error < 1e-4
        assert stats.transitions == 200

    def test_zero_learning_rate_changes_nothing(self):
        tr = self.make(max_steps=100)
        tr.total_steps = 100
        before = [p.detach().clone() for p in tr.net.parameters()]
        stats = tr.train_iteration()
        assert stats.learning_rate == 0.0
        for a, b in zip(before, tr.net.parameters()):
            assert torch.equal(a, b)

    def test_zero_advantage_surrogate_has_no_gradient(self):
        ratio = torch.tensor([0.8, 1.0, 1.3], requires_grad=True)
        clip_objective(ratio, torch.zeros(3)).mean().backward()
        assert torch.count_nonzero(ratio.grad) == 0

    def test_beacon_learning_signal(self):
        improved = 0
        for seed in range(10):
            tr = self.make(seed)
            curve = []
            for _ in range(50):
                tr.train_iteration()
                curve.extend(e["cumulative_reward"] for e in tr.drain_episodes())
            improved += np.mean(curve[-10:]) > np.mean(curve[:10])
        assert improved >= 9

    def test_resume_matches_uninterrupted(self, tmp_path):
        straight = self.make(3)
        for _ in range(4):
            straight.train_iteration()
        first = self.make(3)
        for _ in range(2):
            first.train_iteration()
        first.save(tmp_path / "ck.bin")
        resumed = PpoTrainer.resume(tmp_path / "ck.bin", first.config)
        for _ in range(2):
            stats = resumed.train_iteration()
        for a, b in zip(straight.net.parameters(), resumed.net.parameters()):
            assert torch.equal(a, b)
        assert stats.steps == straight.total_steps

    def test_multi_env_collection(self):
        cfg = PpoConfig(batch_size=60, buffer_size=120, time_horizon=10, max_steps=10_000)
        envs = [DroneSwarmEnv(EnvConfig(n_drones=2, episode_length=20), SMALL, rng_seed=i) for i in range(2)]
        tr = PpoTrainer(envs, cfg, NetworkConfig(vector_dim=42, hidden_units=16, channels=(4, 4, 4)))
        stats = tr.train_iteration()
        assert stats.transitions == 120 and tr.total_steps == 120
        assert len(tr.drain_episodes()) == 2

    def test_evaluate_is_reproducible(self):
        tr = self.make()
        a = tr.evaluate(BeaconEnv(seed=9), 2, deterministic=False, rng=np.random.default_rng(1))
        b = tr.evaluate(BeaconEnv(seed=9), 2, deterministic=False, rng=np.random.default_rng(1))
        assert a == b

    def test_non_finite_loss(self):
        tr = self.make()
        with torch.no_grad():
            tr.net.value_head.bias.fill_(float("nan"))
        with pytest.raises(NonFiniteLoss):
            tr.train_iteration()
