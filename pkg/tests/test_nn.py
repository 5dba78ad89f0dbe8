import json

import numpy as np
import pytest
import torch
from torch.distributions import Categorical, Normal

from helpers import gradient_check
from reforest import nn as rnn
from reforest.nn import CheckpointError, NetworkConfig, NonFiniteGradient, PolicyNet, ShapeMismatch

SMALL_NET = NetworkConfig(vector_dim=6, channels=(4, 4, 4), hidden_units=16)


def batch(config, n=5, seed=0):
    rng = np.random.default_rng(seed)
    vec = rng.uniform(-1, 1, (n, config.vector_dim)).astype(np.float32)
    vis = rng.uniform(0, 1, (n, config.visual_size, config.visual_size)).astype(np.float32)
    return vec, (vis if config.visual else None)


class TestArchitecture:
    def test_parameter_count(self):
        assert PolicyNet().param_count() == 136_747

    def test_output_shapes(self):
        net = PolicyNet()
        out = rnn.forward(net, *batch(net.config, 7))
        assert out.means.shape == (7, 3) and out.log_stds.shape == (7, 3)
        assert [l.shape for l in out.branch_logits] == [(7, 2), (7, 2)]
        assert out.value.shape == (7,)

    def test_initial_policy_is_near_uniform(self):
        net = PolicyNet()
        out = rnn.forward(net, *batch(net.config))
        for p in rnn.branch_probs(out):
            np.testing.assert_allclose(p, 0.5, atol=0.02)
        assert out.means.abs().max() < 0.05
        np.testing.assert_array_equal(out.log_stds.detach().numpy(), 0.0)

    def test_seeded_construction_leaves_global_rng(self):
        torch.manual_seed(123)
        expected = torch.rand(1)
        torch.manual_seed(123)
        a, b = PolicyNet(SMALL_NET, seed=3), PolicyNet(SMALL_NET, seed=3)
        assert torch.rand(1) == expected
        np.testing.assert_array_equal(rnn.flat_parameters(a), rnn.flat_parameters(b))
        assert not np.array_equal(rnn.flat_parameters(a), rnn.flat_parameters(PolicyNet(SMALL_NET, seed=4)))

    def test_deterministic_forward(self):
        net = PolicyNet(SMALL_NET)
        x = batch(SMALL_NET)
        a, b = rnn.forward(net, *x), rnn.forward(net, *x)
        assert torch.equal(a.means, b.means) and torch.equal(a.value, b.value)

    def test_encoder_sees_translation(self):
        net = PolicyNet()
        vec, vis = batch(net.config, 1)
        shifted = np.roll(vis, 1, axis=2)
        a, b = rnn.forward(net, vec, vis), rnn.forward(net, vec, shifted)
        assert not torch.allclose(a.value, b.value)

    def test_shape_errors(self):
        net = PolicyNet(SMALL_NET)
        vec, vis = batch(SMALL_NET)
        with pytest.raises(ShapeMismatch):
            rnn.forward(net, vec[:, :5], vis)
        with pytest.raises(ShapeMismatch):
            rnn.forward(net, vec, None)
        with pytest.raises(ShapeMismatch):
            rnn.forward(net, vec, vis[:, :8])

    def test_vector_only(self):
        cfg = NetworkConfig(vector_dim=4, visual=False, hidden_units=8)
        out = rnn.forward(PolicyNet(cfg), np.zeros((2, 4), np.float32))
        assert out.value.shape == (2,)


class TestDistributions:
    def test_log_prob_matches_torch(self):
        net = PolicyNet(SMALL_NET)
        with torch.no_grad():
            net.log_std.copy_(torch.tensor([-0.5, 0.1, 0.3]))
        out = rnn.forward(net, *batch(SMALL_NET))
        rng = np.random.default_rng(1)
        raw = torch.as_tensor(rng.normal(size=(5, 3)), dtype=torch.float32)
        disc = torch.as_tensor(rng.integers(0, 2, (5, 2)))
        want = Normal(out.means, out.log_stds.exp()).log_prob(raw).sum(-1)
        want_ent = Normal(out.means, out.log_stds.exp()).entropy().sum(-1)
        for b, logits in enumerate(out.branch_logits):
            want = want + Categorical(logits=logits).log_prob(disc[:, b])
            want_ent = want_ent + Categorical(logits=logits).entropy()
        torch.testing.assert_close(rnn.log_prob(out, raw, disc), want)
        torch.testing.assert_close(rnn.entropy(out), want_ent)

    def test_sampling_clamps_but_scores_raw(self):
        net = PolicyNet(SMALL_NET)
        with torch.no_grad():
            net.log_std.fill_(1.0)
        out = rnn.forward(net, *batch(SMALL_NET, 200))
        s = rnn.sample_action(out, np.random.default_rng(0))
        assert np.all(np.abs(s.continuous) <= 1.0)
        assert np.any(np.abs(s.raw_continuous) > 1.0)
        again = rnn.log_prob(out, torch.as_tensor(s.raw_continuous, dtype=torch.float32),
                             torch.as_tensor(s.discrete)).detach().numpy()
        np.testing.assert_allclose(again, s.log_prob, atol=1e-6)
        assert s.env_actions().shape == (200, 5)

    def test_equal_logits_frequency(self):
        net = PolicyNet(SMALL_NET)
        with torch.no_grad():
            for head in net.branch_heads:
                head.weight.zero_()
                head.bias.zero_()
        out = rnn.forward(net, *batch(SMALL_NET, 10_000))
        s = rnn.sample_action(out, np.random.default_rng(0))
        assert np.all(np.abs(s.discrete.mean(0) - 0.5) < 0.02)

    def test_deterministic_takes_modes(self):
        net = PolicyNet(SMALL_NET)
        out = rnn.forward(net, *batch(SMALL_NET))
        s = rnn.sample_action(out, np.random.default_rng(0), deterministic=True)
        np.testing.assert_allclose(s.raw_continuous, out.means.detach().numpy(), atol=1e-7)
        np.testing.assert_array_equal(s.discrete[:, 0], out.branch_logits[0].argmax(-1).numpy())

    def test_vanishing_std_is_deterministic(self):
        net = PolicyNet(SMALL_NET)
        with torch.no_grad():
            net.log_std.fill_(-30.0)
        out = rnn.forward(net, *batch(SMALL_NET))
        s = rnn.sample_action(out, np.random.default_rng(0))
        np.testing.assert_allclose(s.raw_continuous, out.means.detach().numpy(), atol=1e-9)

    def test_same_rng_same_sample(self):
        out = rnn.forward(PolicyNet(SMALL_NET), *batch(SMALL_NET))
        a = rnn.sample_action(out, np.random.default_rng(5))
        b = rnn.sample_action(out, np.random.default_rng(5))
        np.testing.assert_array_equal(a.env_actions(), b.env_actions())


class TestGradients:
    def test_finite_differences_small_net(self):
        assert gradient_check(0, SMALL_NET) < 1e-4

    def test_value_head_mse(self):
        net = PolicyNet(SMALL_NET).double()
        vec, vis = (torch.as_tensor(x, dtype=torch.float64) for x in batch(SMALL_NET, 1))

        def loss():
            return ((net(vec, vis).value - 0.7) ** 2).sum()

        w = net.value_head.weight
        g = rnn.backward(loss(), [w])[0].view(-1)
        flat = w.data.view(-1)
        for k in range(flat.numel()):
            old = flat[k].item()
            flat[k] = old + 1e-4
            up = loss().item()
            flat[k] = old - 1e-4
            down = loss().item()
            flat[k] = old
            fd = (up - down) / 2e-4
            assert abs(g[k].item() - fd) <= 1e-4 * max(abs(fd), 1e-6)

    def test_unused_parameter_gets_zero(self):
        net = PolicyNet(SMALL_NET)
        out = rnn.forward(net, *batch(SMALL_NET))
        g = rnn.backward(out.value.sum(), [net.mean_head.weight, net.value_head.bias])
        assert torch.count_nonzero(g[0]) == 0 and g[1].item() == 5.0

    def test_linearity(self):
        net = PolicyNet(SMALL_NET)
        params = list(net.parameters())
        x = batch(SMALL_NET)
        la = rnn.forward(net, *x).value.sum()
        lb = rnn.forward(net, *x).means.pow(2).sum()
        ga = rnn.backward(la, params)
        gb = rnn.backward(lb, params)
        gab = rnn.backward(rnn.forward(net, *x).value.sum() + rnn.forward(net, *x).means.pow(2).sum(), params)
        for a, b, c in zip(ga, gb, gab):
            torch.testing.assert_close(a + b, c)

    def test_non_finite(self):
        net = PolicyNet(SMALL_NET)
        out = rnn.forward(net, *batch(SMALL_NET))
        with pytest.raises(NonFiniteGradient):
            rnn.backward(out.value.sum() * float("nan"), list(net.parameters()))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        net = PolicyNet(SMALL_NET, seed=1)
        path = rnn.save_checkpoint(tmp_path / "a.bin", net)
        back = rnn.load_checkpoint(path)
        np.testing.assert_array_equal(rnn.flat_parameters(back), rnn.flat_parameters(net))
        assert back.config == net.config

    def test_layout(self, tmp_path):
        net = PolicyNet(SMALL_NET)
        data = rnn.save_checkpoint(tmp_path / "a.bin", net).read_bytes()
        assert data[:4] == b"RFCK"
        assert int.from_bytes(data[4:8], "little") == 1
        assert data[8:40] == SMALL_NET.digest()
        assert int.from_bytes(data[40:48], "little") == net.param_count()
        assert len(data) == 48 + 4 * net.param_count()
        np.testing.assert_array_equal(np.frombuffer(data[48:], "<f4"), rnn.flat_parameters(net))

    def test_no_temp_file_left(self, tmp_path):
        rnn.save_checkpoint(tmp_path / "a.bin", PolicyNet(SMALL_NET))
        assert sorted(p.name for p in tmp_path.iterdir()) == ["a.bin", "a.bin.json"]

    def test_corruption(self, tmp_path):
        path = rnn.save_checkpoint(tmp_path / "a.bin", PolicyNet(SMALL_NET))
        data = path.read_bytes()
        path.write_bytes(b"XXXX" + data[4:])
        with pytest.raises(CheckpointError, match="magic"):
            rnn.load_checkpoint(path)
        path.write_bytes(data[:-4])
        with pytest.raises(CheckpointError):
            rnn.load_checkpoint(path)
        path.write_bytes(data[:10])
        with pytest.raises(CheckpointError, match="truncated"):
            rnn.load_checkpoint(path)

    def test_config_mismatch(self, tmp_path):
        path = rnn.save_checkpoint(tmp_path / "a.bin", PolicyNet(SMALL_NET))
        with pytest.raises(CheckpointError, match="hash"):
            rnn.load_into(PolicyNet(NetworkConfig(vector_dim=6, channels=(4, 4, 4), hidden_units=8)), path)
        sidecar = tmp_path / "a.bin.json"
        meta = json.loads(sidecar.read_text())
        meta["network"]["hidden_units"] = 8
        sidecar.write_text(json.dumps(meta))
        with pytest.raises(CheckpointError):
            rnn.load_checkpoint(path)
        sidecar.unlink()
        with pytest.raises(CheckpointError, match="sidecar"):
            rnn.load_checkpoint(path)
