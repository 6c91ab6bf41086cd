import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otpr import nn, rl
from otpr.errors import ConfigError


def _fill(buf, n, expert=False, start=0):
    for i in range(n):
        k = start + i
        buf.push(np.array([float(k)]), np.array([float(-k)]), float(k),
                 np.array([float(k + 1)]), False, expert=expert, kp_id=k if expert else -1)


def test_ring_eviction():
    buf = rl.ReplayBuffer(5, 1, 1, pin_expert=False)
    _fill(buf, 7)
    assert len(buf) == 5
    stored = sorted(buf.all_data().s[:, 0].tolist())
    assert stored == [2.0, 3.0, 4.0, 5.0, 6.0]


def test_pinned_expert_survives_eviction():
    buf = rl.ReplayBuffer(4, 1, 1, pin_expert=True)
    _fill(buf, 2, expert=True)
    _fill(buf, 6, start=10)
    data = buf.all_data()
    assert len(buf) == 4
    assert data.expert.sum() == 2
    assert set(data.kp_id.tolist()) >= {0, 1}


def test_all_pinned_buffer_rejects_push():
    buf = rl.ReplayBuffer(2, 1, 1, pin_expert=True)
    _fill(buf, 2, expert=True)
    with pytest.raises(ConfigError):
        _fill(buf, 1, start=5)


def test_sample_deterministic():
    buf = rl.ReplayBuffer(100, 1, 1)
    _fill(buf, 50)
    b1 = buf.sample(10, 123)
    b2 = buf.sample(10, 123)
    assert np.array_equal(b1.s, b2.s)
    assert np.array_equal(b1.a, b2.a)


def test_sample_without_replacement():
    buf = rl.ReplayBuffer(100, 1, 1)
    _fill(buf, 20)
    b = buf.sample(20, 0)
    assert len(set(b.s[:, 0].tolist())) == 20


def test_sample_undersized_buffer():
    buf = rl.ReplayBuffer(10, 1, 1)
    _fill(buf, 3)
    with pytest.raises(ConfigError):
        buf.sample(4, 0)


def test_sample_uniformity():
    buf = rl.ReplayBuffer(10, 1, 1)
    _fill(buf, 10)
    rng = np.random.default_rng(7)
    counts = np.zeros(10)
    draws = 10000
    for _ in range(draws):
        b = buf.sample(5, rng)
        for v in b.s[:, 0]:
            counts[int(v)] += 1
    expected = draws * 5 / 10
    assert np.abs(counts - expected).max() < 0.05 * expected


def test_buffer_snapshot_roundtrip(tmp_path):
    buf = rl.ReplayBuffer(10, 2, 1, pin_expert=True)
    rng = np.random.default_rng(0)
    for i in range(6):
        buf.push(rng.normal(size=2), rng.normal(size=1), float(i), rng.normal(size=2),
                 i % 2 == 0, expert=i < 2, kp_id=i if i < 2 else -1)
    path = tmp_path / "buf.bin"
    rl.save_buffer(path, buf)
    with open(path, "rb") as f:
        assert f.read(11) == b"OTPR-BUF-1\n"
    loaded = rl.load_buffer(path)
    a, b = buf.all_data(), loaded.all_data()
    assert np.array_equal(a.s, b.s)
    assert np.array_equal(a.a, b.a)
    assert np.array_equal(a.r, b.r)
    assert np.array_equal(a.done, b.done)
    assert np.array_equal(a.expert, b.expert)
    assert np.array_equal(a.kp_id, b.kp_id)


def test_expectile_loss_values():
    assert rl.expectile_loss(1.0, 0.7) == pytest.approx(0.7)
    assert rl.expectile_loss(-1.0, 0.7) == pytest.approx(0.3)
    assert rl.expectile_loss(0.0, 0.7) == 0.0


@settings(max_examples=40, deadline=None)
@given(st.floats(-10, 10), st.floats(0.05, 0.95))
def test_expectile_loss_nonnegative_and_scaled(diff, tau):
    val = float(rl.expectile_loss(diff, tau))
    assert val >= 0.0
    assert val == pytest.approx(abs(tau - (1.0 if diff < 0 else 0.0)) * diff * diff)


def test_discounted_return():
    assert rl.discounted_return([1.0, 1.0, 1.0], 0.5) == pytest.approx(1.75)
    assert rl.discounted_return([], 0.5) == 0.0
    assert rl.discounted_return([3.25], 0.9) == 3.25


def test_polyak_is_exact_blend():
    critic = rl.critic_init(1, 1, hidden=(4,), seed=0)
    online = nn.mlp_init([2, 4, 1], activation="relu", seed=9)
    blended = nn.polyak_update(critic.target_q, online, 0.005)
    for tw, cw, ow in zip(blended.weights, critic.target_q.weights, online.weights):
        assert np.allclose(tw, 0.995 * cw + 0.005 * ow)


def _chain_buffer():
    # two tabular states: s0 -> s1 (r=0), s1 -> s1 (r=1); actions are inert
    buf = rl.ReplayBuffer(64, 2, 1)
    s0, s1 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    for a in np.linspace(-1, 1, 8):
        buf.push(s0, [a], 0.0, s1, False)
        buf.push(s1, [a], 1.0, s1, False)
    return buf, s0, s1


def test_critic_fixed_point_on_chain():
    buf, s0, s1 = _chain_buffer()
    critic = rl.critic_init(2, 1, hidden=(32, 32), kappa=0.5, tau_expectile=0.7, seed=0)
    cfg = rl.CriticConfig(batch_size=16, steps=400, lr=3e-3, polyak=0.02, seed=1)
    for _ in range(6):
        critic, _ = rl.train_critic(critic, buf, cfg)
    # value iteration on the chain gives Q(s1)=1/(1-k)=2, Q(s0)=k*Q(s1)=1
    acts = np.linspace(-1, 1, 5)[:, None]
    q0 = rl.q_values(critic.q_net, np.tile(s0, (5, 1)), acts)
    q1 = rl.q_values(critic.q_net, np.tile(s1, (5, 1)), acts)
    assert np.abs(q0 - 1.0).max() < 1e-2
    assert np.abs(q1 - 2.0).max() < 1e-2


def test_critic_zero_rewards_shrinks_q():
    buf = rl.ReplayBuffer(64, 1, 1)
    rng = np.random.default_rng(3)
    for _ in range(32):
        buf.push(rng.normal(size=1), rng.normal(size=1), 0.0, rng.normal(size=1), False)
    critic = rl.critic_init(1, 1, hidden=(16, 16), kappa=0.9, seed=5)
    grid_s = np.linspace(-1, 1, 9)[:, None]
    grid_a = np.zeros((9, 1))
    before = np.abs(rl.q_values(critic.q_net, grid_s, grid_a)).max()
    cfg = rl.CriticConfig(batch_size=16, steps=300, lr=1e-3, polyak=0.02, seed=0)
    for _ in range(4):
        critic, _ = rl.train_critic(critic, buf, cfg)
    after = np.abs(rl.q_values(critic.q_net, grid_s, grid_a)).max()
    assert after < before


def test_critic_bandit_regression():
    # single-step episodes: Q(s, a) must regress onto r(a)
    def reward(a):
        return np.exp(-np.sum((a - 0.4) ** 2) / 0.08)

    rng = np.random.default_rng(11)
    buf = rl.ReplayBuffer(600, 1, 1)
    for _ in range(512):
        a = rng.uniform(-1, 1, size=1)
        buf.push(np.zeros(1), a, reward(a), np.zeros(1), True)
    critic = rl.critic_init(1, 1, hidden=(64, 64), kappa=0.99, seed=2)
    cfg = rl.CriticConfig(batch_size=128, steps=500, lr=2e-3, polyak=0.01, seed=4)
    for _ in range(6):
        critic, _ = rl.train_critic(critic, buf, cfg)
    grid = np.linspace(-1, 1, 41)[:, None]
    pred = rl.q_values(critic.q_net, np.zeros((41, 1)), grid)
    true = np.array([reward(a) for a in grid])
    rmse = float(np.sqrt(np.mean((pred - true) ** 2)))
    assert rmse < 0.05


def test_bellman_residual_decreases_on_chain():
    buf, s0, s1 = _chain_buffer()
    critic = rl.critic_init(2, 1, hidden=(32, 32), kappa=0.5, seed=7)
    cfg = rl.CriticConfig(batch_size=16, steps=60, lr=3e-3, polyak=0.02, seed=2)

    def residual(c):
        data = buf.all_data()
        v_next = rl.v_values(c.v_net, data.s2)
        target = data.r + c.kappa * (1 - data.done.astype(float)) * v_next
        q = rl.q_values(c.q_net, data.s, data.a)
        return float(np.mean((q - target) ** 2))

    res = [residual(critic)]
    for _ in range(10):
        critic, _ = rl.train_critic(critic, buf, cfg)
        res.append(residual(critic))
    assert res[-1] < res[0]
    assert res[5] < res[0]


def test_critic_rejects_small_buffer():
    buf = rl.ReplayBuffer(10, 1, 1)
    _fill(buf, 3)
    critic = rl.critic_init(1, 1, hidden=(8,), seed=0)
    with pytest.raises(ConfigError):
        rl.train_critic(critic, buf, rl.CriticConfig(batch_size=8, steps=1))
