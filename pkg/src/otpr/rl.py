"""Replay buffer and an IQL-style critic (Q plus expectile-regressed V)."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .errors import ConfigError, FileFormatError

BUF_MAGIC = b"OTPR-BUF-1\n"


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s2: np.ndarray
    done: bool
    expert: bool = False
    kp_id: int = -1  # index into the keypoint set when this is an expert pair


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    done: np.ndarray
    expert: np.ndarray
    kp_id: np.ndarray

    def __len__(self):
        return self.s.shape[0]


class ReplayBuffer:
    """Ring buffer with FIFO eviction; expert rows can be pinned against it."""

    def __init__(self, capacity, state_dim, action_dim, pin_expert=True):
        if capacity < 1:
            raise ConfigError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.pin_expert = bool(pin_expert)
        self._s = np.zeros((capacity, state_dim))
        self._a = np.zeros((capacity, action_dim))
        self._r = np.zeros(capacity)
        self._s2 = np.zeros((capacity, state_dim))
        self._done = np.zeros(capacity, dtype=bool)
        self._expert = np.zeros(capacity, dtype=bool)
        self._kp = np.full(capacity, -1, dtype=np.int64)
        self._size = 0
        self._evictable = deque()

    def __len__(self):
        return self._size

    @property
    def n_expert(self):
        return int(self._expert[: self._size].sum())

    def push(self, s, a, r, s2, done, expert=False, kp_id=-1):
        if self._size < self.capacity:
            slot = self._size
            self._size += 1
        else:
            if not self._evictable:
                raise ConfigError("buffer full of pinned expert transitions")
            slot = self._evictable.popleft()
        self._s[slot] = s
        self._a[slot] = a
        self._r[slot] = float(r)
        self._s2[slot] = s2
        self._done[slot] = bool(done)
        self._expert[slot] = bool(expert)
        self._kp[slot] = int(kp_id)
        if not (expert and self.pin_expert):
            self._evictable.append(slot)
        return slot

    def push_transition(self, tr):
        return self.push(tr.s, tr.a, tr.r, tr.s2, tr.done, tr.expert, tr.kp_id)

    def _gather(self, idx):
        return Batch(self._s[idx].copy(), self._a[idx].copy(), self._r[idx].copy(),
                     self._s2[idx].copy(), self._done[idx].copy(),
                     self._expert[idx].copy(), self._kp[idx].copy())

    def sample(self, batch_size, rng_or_seed):
        """Uniform without replacement; deterministic given seed and contents."""
        if batch_size > self._size:
            raise ConfigError(f"batch {batch_size} exceeds buffer size {self._size}")
        rng = rng_or_seed if isinstance(rng_or_seed, np.random.Generator) \
            else np.random.default_rng(rng_or_seed)
        idx = rng.choice(self._size, size=batch_size, replace=False)
        return self._gather(idx)

    def sample_stratified(self, batch_size, expert_frac, rng_or_seed):
        """Batch with a fixed expert-row share (demo rehearsal for actor updates)."""
        rng = rng_or_seed if isinstance(rng_or_seed, np.random.Generator) \
            else np.random.default_rng(rng_or_seed)
        expert_idx = np.flatnonzero(self._expert[: self._size])
        other_idx = np.setdiff1d(np.arange(self._size), expert_idx, assume_unique=True)
        if expert_idx.size == 0 or other_idx.size == 0:
            return self.sample(min(batch_size, self._size), rng)
        n_exp = min(int(round(batch_size * expert_frac)), expert_idx.size)
        n_oth = min(batch_size - n_exp, other_idx.size)
        take = np.concatenate([rng.choice(expert_idx, size=n_exp, replace=False),
                               rng.choice(other_idx, size=n_oth, replace=False)])
        return self._gather(take)

    def all_data(self):
        return self._gather(np.arange(self._size))

    def row(self, i):
        return Transition(self._s[i].copy(), self._a[i].copy(), float(self._r[i]),
                          self._s2[i].copy(), bool(self._done[i]),
                          bool(self._expert[i]), int(self._kp[i]))


def save_buffer(path, buf):
    meta = {
        "capacity": buf.capacity,
        "size": len(buf),
        "state_dim": buf.state_dim,
        "action_dim": buf.action_dim,
        "pin_expert": buf.pin_expert,
        "fields": ["s", "a", "r", "s2", "done", "expert", "kp_id"],
    }
    with open(path, "wb") as f:
        f.write(BUF_MAGIC)
        f.write((json.dumps(meta) + "\n").encode("utf-8"))
        for i in range(len(buf)):
            tr = buf.row(i)
            rec = np.concatenate([tr.s, tr.a, [tr.r], tr.s2,
                                  [float(tr.done), float(tr.expert), float(tr.kp_id)]])
            f.write(rec.astype("<f8").tobytes())


def load_buffer(path):
    with open(path, "rb") as f:
        if f.read(len(BUF_MAGIC)) != BUF_MAGIC:
            raise FileFormatError(f"{path}: bad buffer header")
        meta = json.loads(f.readline().decode("utf-8"))
        ds, da = meta["state_dim"], meta["action_dim"]
        rec_len = ds + da + 1 + ds + 3
        buf = ReplayBuffer(meta["capacity"], ds, da, meta["pin_expert"])
        for _ in range(meta["size"]):
            raw = f.read(rec_len * 8)
            if len(raw) != rec_len * 8:
                raise FileFormatError(f"{path}: truncated transition record")
            rec = np.frombuffer(raw, dtype="<f8")
            s = rec[:ds]
            a = rec[ds:ds + da]
            r = rec[ds + da]
            s2 = rec[ds + da + 1:ds + da + 1 + ds]
            done, expert, kp = rec[-3:]
            buf.push(s, a, r, s2, bool(done), bool(expert), int(kp))
    return buf


# ---------------------------------------------------------------------------
# IQL critic
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CriticPair:
    q_net: nn.ParamSet
    v_net: nn.ParamSet
    target_q: nn.ParamSet
    kappa: float
    tau_expectile: float
    q_adam: nn.AdamState = field(repr=False, default=None)
    v_adam: nn.AdamState = field(repr=False, default=None)

    def __post_init__(self):
        if not 0.0 < self.kappa < 1.0:
            raise ConfigError("kappa must be in (0, 1)")
        if not 0.0 < self.tau_expectile < 1.0:
            raise ConfigError("tau_expectile must be in (0, 1)")


@dataclass(frozen=True)
class CriticConfig:
    batch_size: int = 256
    steps: int = 50
    lr: float = 3e-4
    polyak: float = 0.005
    seed: int = 0


def critic_init(state_dim, action_dim, hidden=(256, 256, 256), kappa=0.99,
                tau_expectile=0.7, seed=0):
    q = nn.mlp_init([state_dim + action_dim, *hidden, 1], activation="relu", seed=seed)
    v = nn.mlp_init([state_dim, *hidden, 1], activation="relu", seed=seed + 1)
    return CriticPair(q, v, nn.copy_params(q), kappa, tau_expectile,
                      nn.adam_init(q), nn.adam_init(v))


def q_values(q_net, states, actions):
    x = np.concatenate([np.atleast_2d(states), np.atleast_2d(actions)], axis=1)
    return nn.forward(q_net, x)[:, 0]


def v_values(v_net, states):
    return nn.forward(v_net, np.atleast_2d(states))[:, 0]


def critic_q_fn(critic):
    """Vectorized (S, A) -> Q callable for cost construction and guidance."""
    return lambda states, actions: q_values(critic.q_net, states, actions)


def expectile_loss(diff, tau):
    """Asymmetric squared loss |tau - 1{diff < 0}| * diff^2."""
    if not 0.0 < tau < 1.0:
        raise ConfigError("tau must be in (0, 1)")
    diff = np.asarray(diff, dtype=float)
    w = np.where(diff < 0.0, 1.0 - tau, tau)
    return w * diff * diff


def v_loss_and_grads(critic, states, actions):
    """Expectile regression of V onto target-Q values; returns (loss, grads)."""
    q_t = q_values(critic.target_q, states, actions)
    out, cache = nn.forward_batch(critic.v_net, np.atleast_2d(states))
    diff = q_t - out[:, 0]
    tau = critic.tau_expectile
    loss = float(np.mean(expectile_loss(diff, tau)))
    w = np.where(diff < 0.0, 1.0 - tau, tau)
    upstream = (-2.0 / len(diff)) * (w * diff)[:, None]
    grads, _ = nn.backward_batch(critic.v_net, cache, upstream)
    return loss, grads


def q_loss_and_grads(critic, batch):
    """Squared Bellman error against r + kappa * (1 - done) * V(s')."""
    v_next = v_values(critic.v_net, batch.s2)
    target = batch.r + critic.kappa * (1.0 - batch.done.astype(float)) * v_next
    x = np.concatenate([batch.s, batch.a], axis=1)
    out, cache = nn.forward_batch(critic.q_net, x)
    diff = out[:, 0] - target
    loss = float(np.mean(diff * diff))
    upstream = (2.0 / len(diff)) * diff[:, None]
    grads, _ = nn.backward_batch(critic.q_net, cache, upstream)
    return loss, grads


def train_critic(critic, buffer, config):
    """IQL epoch: V by expectile regression, Q by TD onto V(s'), Polyak target.

    Returns (critic, stats) with mean losses over the epoch.
    """
    if len(buffer) < config.batch_size:
        raise ConfigError("buffer smaller than critic batch size")
    rng = np.random.default_rng(config.seed)
    q_net, v_net, target_q = critic.q_net, critic.v_net, critic.target_q
    q_adam = critic.q_adam or nn.adam_init(q_net)
    v_adam = critic.v_adam or nn.adam_init(v_net)
    v_losses, q_losses = [], []
    cur = critic
    for _ in range(config.steps):
        batch = buffer.sample(config.batch_size, rng)
        vl, v_grads = v_loss_and_grads(cur, batch.s, batch.a)
        v_net, v_adam = nn.adam_step(v_adam, v_net, v_grads, config.lr)
        cur = replace(cur, v_net=v_net)
        ql, q_grads = q_loss_and_grads(cur, batch)
        q_net, q_adam = nn.adam_step(q_adam, q_net, q_grads, config.lr)
        target_q = nn.polyak_update(target_q, q_net, config.polyak)
        cur = replace(cur, q_net=q_net, target_q=target_q,
                      q_adam=q_adam, v_adam=v_adam)
        v_losses.append(vl)
        q_losses.append(ql)
    stats = {"v_loss": float(np.mean(v_losses)), "q_loss": float(np.mean(q_losses))}
    return cur, stats


def discounted_return(rewards, kappa):
    """Sum of kappa^k * r_k."""
    if not 0.0 < kappa < 1.0:
        raise ConfigError("kappa must be in (0, 1)")
    total = 0.0
    scale = 1.0
    for r in rewards:
        total += scale * float(r)
        scale *= kappa
    return total
