"""Deterministic toy control environments with scripted experts.

All three are pure state machines: (state, action, spec) fully determine the
next state, so demo trajectories can be replayed into full transitions.

  bandit2d            one-step task; reward is a two-bump Gaussian mixture over
                      actions, so the exact Q-function equals the reward.
  pointmass           2-D double integrator steered to a fixed goal, dense or
                      sparse reward.
  multigoal_pointmass two symmetric goals; the scripted expert is bimodal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FileFormatError, GenerationError, NumericalError

DEMO_MAGIC = b"OTPR-DEMO-1\n"

ENV_NAMES = ("bandit2d", "pointmass", "multigoal_pointmass")

POS_CLIP = 1.5
VEL_CLIP = 2.0


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    horizon: int
    action_low: np.ndarray = field(repr=False)
    action_high: np.ndarray = field(repr=False)
    reward_kind: str = "dense"
    dt: float = 0.05
    goal: np.ndarray = None
    goals: tuple = None
    goal_radius: float = 0.1
    bump_centers: np.ndarray = None
    bump_weights: np.ndarray = None
    bump_std: float = 0.15
    kp_gain: float = 6.0
    kd_gain: float = 3.0
    expert_noise: float = 0.05
    success_reward: float = 0.5


def make_env(name, reward_kind=None):
    if name == "bandit2d":
        return EnvSpec(
            name=name, state_dim=2, action_dim=2, horizon=1,
            action_low=np.array([-1.0, -1.0]), action_high=np.array([1.0, 1.0]),
            reward_kind="dense",
            bump_centers=np.array([[0.5, 0.5], [-0.5, -0.5]]),
            bump_weights=np.array([1.0, 0.8]),
        )
    if name == "pointmass":
        return EnvSpec(
            name=name, state_dim=4, action_dim=2, horizon=100,
            action_low=np.array([-1.0, -1.0]), action_high=np.array([1.0, 1.0]),
            reward_kind=reward_kind or "sparse",
            goal=np.array([0.6, 0.6]),
        )
    if name == "multigoal_pointmass":
        return EnvSpec(
            name=name, state_dim=4, action_dim=2, horizon=100,
            action_low=np.array([-1.0, -1.0]), action_high=np.array([1.0, 1.0]),
            reward_kind="sparse",
            goals=(np.array([0.6, 0.6]), np.array([-0.6, 0.6])),
        )
    raise ConfigError(f"unknown environment {name!r}")


def bandit_reward(spec, action):
    a = np.asarray(action, dtype=float)
    total = 0.0
    for w, c in zip(spec.bump_weights, spec.bump_centers):
        d2 = float(np.sum((a - c) ** 2))
        total += w * np.exp(-d2 / (2.0 * spec.bump_std ** 2))
    return float(total)


def analytic_q(spec):
    """Exact Q for bandit2d (single-step MDP: Q == reward)."""
    if spec.name != "bandit2d":
        raise ConfigError("analytic Q is only defined for bandit2d")

    def q_fn(states, actions):
        actions = np.atleast_2d(np.asarray(actions, dtype=float))
        return np.array([bandit_reward(spec, a) for a in actions])

    return q_fn


def env_reset(spec, seed):
    rng = np.random.default_rng(seed)
    if spec.name == "bandit2d":
        return rng.uniform(-1.0, 1.0, size=2)
    pos = rng.uniform(-0.25, 0.25, size=2)
    return np.concatenate([pos, np.zeros(2)])


def _goal_for(spec, state):
    if spec.name == "pointmass":
        return spec.goal
    return spec.goals[0] if state[0] >= 0.0 else spec.goals[1]


def env_step(spec, state, action):
    """Advance one step; returns (state2, reward, done, info).

    Actions are clipped to the box (flagged in info); horizon bookkeeping is
    the rollout loop's job so the step stays a pure function.
    """
    action = np.asarray(action, dtype=float)
    if not np.all(np.isfinite(action)):
        raise NumericalError("non-finite action")
    clipped = np.clip(action, spec.action_low, spec.action_high)
    info = {"clipped": bool(np.any(clipped != action))}
    if spec.name == "bandit2d":
        r = bandit_reward(spec, clipped)
        info["success"] = r >= spec.success_reward
        return np.asarray(state, dtype=float).copy(), r, True, info
    pos, vel = np.asarray(state[:2], dtype=float), np.asarray(state[2:], dtype=float)
    pos2 = np.clip(pos + vel * spec.dt, -POS_CLIP, POS_CLIP)
    vel2 = np.clip(vel + clipped * spec.dt, -VEL_CLIP, VEL_CLIP)
    state2 = np.concatenate([pos2, vel2])
    if spec.name == "pointmass":
        dist = float(np.linalg.norm(pos2 - spec.goal))
        reached = dist < spec.goal_radius
    else:
        dists = [float(np.linalg.norm(pos2 - g)) for g in spec.goals]
        dist = min(dists)
        reached = dist < spec.goal_radius
    info["success"] = reached
    if spec.reward_kind == "dense":
        return state2, -dist, reached, info
    return state2, (1.0 if reached else 0.0), reached, info


def expert_policy(spec, state, rng=None):
    """Scripted expert: nearest-bump (bandit) or saturated PD to the goal."""
    state = np.asarray(state, dtype=float)
    if spec.name == "bandit2d":
        d = np.sum((spec.bump_centers - state) ** 2, axis=1)
        a = spec.bump_centers[int(np.argmin(d))].astype(float).copy()
        if rng is not None:
            a = a + spec.expert_noise * rng.standard_normal(2)
        return np.clip(a, spec.action_low, spec.action_high)
    goal = _goal_for(spec, state)
    pos, vel = state[:2], state[2:]
    a = spec.kp_gain * (goal - pos) - spec.kd_gain * vel
    return np.clip(a, spec.action_low, spec.action_high)


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray      # (T, state_dim), pre-action states
    actions: np.ndarray     # (T, action_dim)
    rewards: np.ndarray     # (T,)
    success: bool


@dataclass(frozen=True)
class DemoSet:
    env_name: str
    trajectories: tuple

    def __len__(self):
        return len(self.trajectories)

    def pairs(self):
        """All (state, action) pairs stacked across trajectories."""
        s = np.concatenate([t.states for t in self.trajectories])
        a = np.concatenate([t.actions for t in self.trajectories])
        return s, a


def rollout(spec, act_fn, seed):
    """Roll one episode; ``act_fn(state, step_index)`` supplies actions."""
    state = env_reset(spec, seed)
    states, actions, rewards = [], [], []
    success = False
    for k in range(spec.horizon):
        a = act_fn(state, k)
        s2, r, done, info = env_step(spec, state, a)
        states.append(state)
        actions.append(np.asarray(a, dtype=float))
        rewards.append(r)
        success = success or info["success"]
        state = s2
        if done:
            break
    return Trajectory(np.array(states), np.array(actions), np.array(rewards), success)


def generate_demos(spec, n_trajectories, seed):
    """Roll the scripted expert until n successful trajectories are collected."""
    if n_trajectories < 1:
        raise ConfigError("need at least one trajectory")
    kept = []
    attempts = 0
    while len(kept) < n_trajectories:
        root = np.random.SeedSequence(entropy=seed, spawn_key=(attempts,))
        reset_ss, noise_ss = root.spawn(2)
        noise_rng = np.random.default_rng(noise_ss)
        traj = rollout(spec, lambda s, k: expert_policy(spec, s, noise_rng), reset_ss)
        attempts += 1
        if traj.success:
            kept.append(traj)
        if attempts >= max(20, 10 * n_trajectories) and len(kept) / attempts < 0.1:
            raise GenerationError(
                f"expert success rate {len(kept)}/{attempts} below 10%; env misconfigured")
    return DemoSet(spec.name, tuple(kept))


def replay_transitions(spec, demos):
    """Re-step each demo through the env to recover (s, a, r, s', done) tuples."""
    out = []
    for traj in demos.trajectories:
        for k in range(len(traj.actions)):
            s2, r, done, _ = env_step(spec, traj.states[k], traj.actions[k])
            out.append((traj.states[k], traj.actions[k], r, s2,
                        done or k == len(traj.actions) - 1))
    return out


def _spec_to_json(spec):
    d = {}
    for key, val in vars(spec).items():
        if isinstance(val, np.ndarray):
            d[key] = val.tolist()
        elif isinstance(val, tuple) and val and isinstance(val[0], np.ndarray):
            d[key] = [v.tolist() for v in val]
        else:
            d[key] = val
    return d


def save_demos(path, spec, demos):
    """Binary demo file plus a JSON sidecar describing the environment."""
    meta = {
        "env_name": demos.env_name,
        "n_trajectories": len(demos),
        "lengths": [len(t.actions) for t in demos.trajectories],
        "state_dim": spec.state_dim,
        "action_dim": spec.action_dim,
        "success": [bool(t.success) for t in demos.trajectories],
    }
    with open(path, "wb") as f:
        f.write(DEMO_MAGIC)
        f.write((json.dumps(meta) + "\n").encode("utf-8"))
        for t in demos.trajectories:
            f.write(t.states.astype("<f8").tobytes())
            f.write(t.actions.astype("<f8").tobytes())
            f.write(t.rewards.astype("<f8").tobytes())
    with open(str(path) + ".json", "w") as f:
        json.dump(_spec_to_json(spec), f, indent=2)


def load_demos(path):
    with open(path, "rb") as f:
        if f.read(len(DEMO_MAGIC)) != DEMO_MAGIC:
            raise FileFormatError(f"{path}: bad demo header")
        meta = json.loads(f.readline().decode("utf-8"))
        ds, da = meta["state_dim"], meta["action_dim"]
        trajs = []
        for length, ok in zip(meta["lengths"], meta["success"]):
            states = np.frombuffer(f.read(length * ds * 8), dtype="<f8").reshape(length, ds)
            actions = np.frombuffer(f.read(length * da * 8), dtype="<f8").reshape(length, da)
            rewards = np.frombuffer(f.read(length * 8), dtype="<f8")
            trajs.append(Trajectory(states.copy(), actions.copy(), rewards.copy(), ok))
    return DemoSet(meta["env_name"], tuple(trajs))
