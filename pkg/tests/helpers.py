import numpy as np

from reforest.terrain import Scenario, ScenarioConfig

SMALL = ScenarioConfig(world_extent=300.0, grid_resolution=61)


def flat_scenario(trees=(), station=(0.0, 0.0, 0.0), extent=1200.0, resolution=25, height=0.0,
                  heights=None):
    cfg = ScenarioConfig(world_extent=extent, grid_resolution=resolution)
    h = np.full((resolution, resolution), height) if heights is None else heights
    fertile = np.ones((resolution, resolution), dtype=bool)
    return Scenario.from_arrays(cfg, h, fertile, np.asarray(trees, dtype=float).reshape(-1, 2), station)


def random_actions(rng, n):
    return np.concatenate([rng.uniform(-1, 1, (n, 3)), rng.integers(0, 2, (n, 2))], axis=1)


def gold_standard_run():
    """Fly 600 m out, drop 2.5 m from a tree, turn around and fly home.

    Returns the summed rewards of every step as a dict of components.
    """
    from dataclasses import replace

    from reforest.env import EnvConfig, reset, step

    scen = flat_scenario(trees=[(2.5, 600.0)])
    cfg = EnvConfig(n_drones=1, max_neighbors=0)
    state = reset(scen, cfg)
    state.drones[0] = replace(state.drones[0], yaw=0.0)
    totals = {"drop": 0.0, "return": 0.0, "battery": 0.0, "event": 0.0}
    plan = [(1, 0, 0, 0, 0)] * 600 + [(0, 0, 0, 1, 0)] + [(0, 1, 0, 0, 0)] * 36 + [(1, 0, 0, 0, 0)] * 590
    for a in plan:
        state, r, _ = step(state, np.array([a], dtype=float))
        totals["drop"] += r.drop_reward[0]
        totals["return"] += r.return_reward[0]
        totals["battery"] += r.battery_penalty[0]
        totals["event"] += r.event_penalty[0]
    return totals, state


def gradient_check(seed, config=None, batch=4, h=1e-6):
    """Worst relative error over parameter tensors, autograd vs central differences.

    Each tensor is probed along one random unit direction ``v``: the
    directional derivative ``g . v`` is compared with
    ``(L(p + h v) - L(p - h v)) / 2h`` in float64. The loss touches the
    value, mean, log-std and both branch heads. ``h`` is small because a
    conv-bias step moves every activation of its channel and a larger one
    can carry some ReLU/max-pool input across its kink.
    """
    import torch

    from reforest import nn as rnn

    config = config or rnn.NetworkConfig()
    net = rnn.PolicyNet(config, seed=seed).double()
    rng = np.random.default_rng(seed)
    vec = torch.as_tensor(rng.uniform(-1, 1, (batch, config.vector_dim)))
    vis = torch.as_tensor(rng.uniform(0, 1, (batch, config.visual_size, config.visual_size))) \
        if config.visual else None
    raw = torch.as_tensor(rng.normal(size=(batch, config.n_continuous)))
    disc = torch.as_tensor(rng.integers(0, 2, (batch, len(config.branches))))
    target = torch.as_tensor(rng.normal(size=batch))

    def loss_fn():
        out = net(vec, vis)
        return ((out.value - target) ** 2).mean() - rnn.log_prob(out, raw, disc).mean() \
            - 0.1 * rnn.entropy(out).mean()

    params = list(net.parameters())
    grads = rnn.backward(loss_fn(), params)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            v = torch.as_tensor(rng.normal(size=tuple(p.shape)))
            v /= v.norm()
            base = p.clone()
            p.copy_(base + h * v)
            up = loss_fn().item()
            p.copy_(base - h * v)
            down = loss_fn().item()
            p.copy_(base)
            fd = (up - down) / (2 * h)
            a = float((g * v).sum())
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-6))
    return worst
