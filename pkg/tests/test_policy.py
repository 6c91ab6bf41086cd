import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otpr import diffusion as df
from otpr import nn, ot, policy as pol, potentials as pt, rl
from otpr.errors import ConfigError

SCHED = df.DiffusionSchedule(kind="VP", sampler_steps=5)


def _policy(**kw):
    score = df.score_model_init(2, 2, hidden=8, depth=1, seed=0)
    defaults = dict(score_net=score, schedule=SCHED, q_fn=lambda S, A: np.zeros(len(S)))
    defaults.update(kw)
    return pol.OtprPolicy(**defaults)


def test_single_proposal_matches_sample_reverse():
    p = _policy()
    s = np.array([0.2, -0.1])
    one = pol.propose_actions(p, s, 1, seed=42)[0]
    direct = df.sample_reverse(p.score_net, s, SCHED, method="ddim",
                               rng_or_seed=df.derived_rng(42, 0))
    assert np.array_equal(one, direct)


def test_proposals_deterministic():
    p = _policy()
    s = np.array([0.2, -0.1])
    a = pol.propose_actions(p, s, 6, seed=9)
    b = pol.propose_actions(p, s, 6, seed=9)
    assert np.array_equal(a, b)
    c = pol.propose_actions(p, s, 6, seed=10)
    assert not np.array_equal(a, c)


def test_resample_normalization():
    idx, probs = pol.resample(np.array([2.0, 1.0, 1.0]), np.random.default_rng(0))
    assert np.allclose(probs, [0.5, 0.25, 0.25])
    assert idx in (0, 1, 2)


def test_resample_zero_scores_uniform_fallback():
    _, probs = pol.resample(np.zeros(3), np.random.default_rng(0))
    assert np.allclose(probs, [1 / 3] * 3)


def test_resample_rejects_negative():
    with pytest.raises(ConfigError):
        pol.resample(np.array([0.5, -0.1]), np.random.default_rng(0))


def test_resample_empirical_frequencies():
    rng = np.random.default_rng(3)
    scores = np.array([2.0, 1.0, 1.0])
    counts = np.zeros(3)
    n = 100000
    for _ in range(n):
        idx, _ = pol.resample(scores, rng)
        counts[idx] += 1
    assert np.abs(counts / n - np.array([0.5, 0.25, 0.25])).max() < 0.01


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.0, 10.0), min_size=2, max_size=6),
       st.floats(0.1, 100.0))
def test_resample_probs_invariant_to_scaling(raw, c):
    scores = np.array(raw)
    _, p1 = pol.resample(scores, np.random.default_rng(0))
    _, p2 = pol.resample(c * scores, np.random.default_rng(0))
    assert np.allclose(p1, p2)


def test_q_guidance_uniform_for_equal_values():
    p = _policy(guidance="Q", q_fn=lambda S, A: np.full(len(S), 1.7))
    scores = pol.guidance_scores(p, np.zeros(2), np.zeros((4, 2)))
    assert np.allclose(scores, 0.25)


def test_a_guidance_needs_critic():
    p = _policy(guidance="A")
    with pytest.raises(ConfigError):
        pol.guidance_scores(p, np.zeros(2), np.zeros((2, 2)))


def test_a_guidance_prefers_high_advantage():
    critic = rl.critic_init(2, 2, hidden=(8,), seed=0)
    p = _policy(guidance="A", critic=critic,
                q_fn=lambda S, A: A[:, 0])  # Q rises with the first action coord
    acts = np.array([[1.0, 0.0], [-1.0, 0.0]])
    scores = pol.guidance_scores(p, np.zeros(2), acts)
    assert scores[0] > scores[1]
    assert scores.sum() == pytest.approx(1.0)


def test_h_guidance_zero_when_hinge_inactive():
    u = nn.ParamSet((2, 1), "tanh", (np.zeros((2, 1)),), (np.zeros(1),))
    v = nn.ParamSet((2, 1), "tanh", (np.zeros((2, 1)),), (np.zeros(1),))
    dual = pt.DualPair(u, v, 0.1, ot.CostSpec(mode="neg_q", normalization="none"))
    p = _policy(guidance="H", dual=dual, q_fn=lambda S, A: np.full(len(S), -1.0))
    scores = pol.guidance_scores(p, np.zeros(2), np.zeros((3, 2)))
    assert np.array_equal(scores, np.zeros(3))


def test_h_guidance_tracks_oracle_plan_column():
    rng = np.random.default_rng(1)
    cost = rng.uniform(0, 1, (4, 4))
    q_fn = lambda S, A: -cost[np.argmax(S, axis=1), np.argmax(A, axis=1)]
    buf = rl.ReplayBuffer(4, 4, 4)
    eye = np.eye(4)
    for i in range(4):
        buf.push(eye[i], eye[i], 0.0, eye[i], False)
    u = nn.mlp_init([4, 1], activation="tanh", seed=0)
    v = nn.mlp_init([4, 1], activation="tanh", seed=1)
    dual = pt.DualPair(u, v, 0.05, ot.CostSpec(mode="neg_q", normalization="none"),
                       None, None, None, nn.adam_init(u), nn.adam_init(v))
    cfg = pt.DualTrainConfig(batch_size=4, lr=5e-3, iterations=3000, seed=0)
    dual, _ = pt.train_potentials(dual, buf, q_fn, cfg)
    res = ot.exact_plan_oracle(cost, np.full(4, 0.25), np.full(4, 0.25), 0.05)
    score_net = df.score_model_init(4, 4, hidden=8, depth=1, seed=0)
    p = pol.OtprPolicy(score_net=score_net, schedule=SCHED, dual=dual, q_fn=q_fn)
    for i in range(4):
        scores = pol.guidance_scores(p, eye[i], eye)
        col = res.plan.gamma[i]
        if scores.sum() == 0 or col.sum() == 0:
            continue
        got = scores / scores.sum()
        want = col / col.sum()
        keep = want > 1e-6
        assert np.abs(got[keep] - want[keep]).max() <= 0.1 * want[keep].max()


def test_act_eval_mode_equals_raw_sampler():
    p = _policy(mode="eval")
    s = np.array([0.3, 0.3])
    for seed in range(5):
        a = pol.act(p, s, seed)
        direct = pol.propose_actions(p, s, 1, seed)[0]
        assert np.array_equal(a, direct)


def test_act_train_mode_picks_peaked_score(monkeypatch):
    p = _policy(mode="train", n_proposals=4)
    proposals = pol.propose_actions(p, np.zeros(2), 4, seed=0)
    monkeypatch.setattr(pol, "guidance_scores",
                        lambda policy, s, acts: np.array([0.0, 0.0, 5.0, 0.0]))
    a = pol.act(p, np.zeros(2), seed=0)
    assert np.array_equal(a, proposals[2])


def test_policy_validation():
    with pytest.raises(ConfigError):
        _policy(n_proposals=0)
    with pytest.raises(ConfigError):
        _policy(guidance="Z")
    with pytest.raises(ConfigError):
        _policy(mode="replay")


def test_resampled_distribution_matches_oracle_conditional():
    # with a trained dual on a discrete instance, the resampling probabilities
    # over the action set must match the oracle plan's conditional rows
    rng = np.random.default_rng(4)
    cost = rng.uniform(0, 1, (4, 4))
    q_fn = lambda S, A: -cost[np.argmax(S, axis=1), np.argmax(A, axis=1)]
    buf = rl.ReplayBuffer(4, 4, 4)
    eye = np.eye(4)
    for i in range(4):
        buf.push(eye[i], eye[i], 0.0, eye[i], False)
    u = nn.mlp_init([4, 1], activation="tanh", seed=2)
    v = nn.mlp_init([4, 1], activation="tanh", seed=3)
    dual = pt.DualPair(u, v, 0.05, ot.CostSpec(mode="neg_q", normalization="none"),
                       None, None, None, nn.adam_init(u), nn.adam_init(v))
    dual, _ = pt.train_potentials(dual, buf, q_fn, pt.DualTrainConfig(
        batch_size=4, lr=5e-3, iterations=3000, seed=0))
    res = ot.exact_plan_oracle(cost, np.full(4, 0.25), np.full(4, 0.25), 0.05)
    for i in range(4):
        scores = pt.h_scores(dual, q_fn, eye[i], eye)
        _, probs = pol.resample(scores, np.random.default_rng(0))
        cond = res.plan.gamma[i] / res.plan.gamma[i].sum()
        tv = 0.5 * np.abs(probs - cond).sum()
        assert tv <= 0.1


def test_multigoal_proposals_cover_both_modes():
    from otpr import envs
    spec = envs.make_env("multigoal_pointmass")
    demos = envs.generate_demos(spec, 20, seed=3)
    states, actions = demos.pairs()
    rng = np.random.default_rng(0)
    score = df.score_model_init(4, 2, hidden=64, depth=2, seed=1)
    adam = nn.adam_init(score)
    for step in range(2500):
        idx = rng.integers(0, len(states), size=128)
        _, grads = df.dsm_loss(score, states[idx], actions[idx],
                               df.DiffusionSchedule(kind="VP"), rng)
        score, adam = nn.adam_step(adam, score, grads, lr=1e-3)
    p = pol.OtprPolicy(score_net=score, schedule=df.DiffusionSchedule(kind="VP"),
                       mode="train", action_low=spec.action_low,
                       action_high=spec.action_high)
    # a start state on the mode boundary: both goal routes are consistent
    boundary = np.array([0.0, 0.0, 0.0, 0.0])
    proposals = pol.propose_actions(p, boundary, 200, seed=9)
    toward_a = float(np.mean(proposals[:, 0] > 0))
    assert 0.2 <= toward_a <= 0.8
