"""Action selection: L reverse-SDE proposals reweighted by compatibility.

Train mode draws L candidate actions from the diffusion model, scores them
(H from the transport dual, or Q/advantage softmax as ablation baselines) and
resamples one categorically. Eval mode is the single-sample path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffusion as df
from . import potentials as pt
from . import rl
from .errors import ConfigError

GUIDANCE_MODES = ("H", "Q", "A")


@dataclass(frozen=True)
class OtprPolicy:
    score_net: object
    schedule: df.DiffusionSchedule
    dual: pt.DualPair = None
    critic: rl.CriticPair = None
    q_fn: object = None  # overrides the critic's Q when set (e.g. exact bandit Q)
    n_proposals: int = 8
    guidance: str = "H"
    mode: str = "train"
    sampler: str = "ddim"
    action_low: np.ndarray = field(default=None, repr=False)
    action_high: np.ndarray = field(default=None, repr=False)
    softmax_temp: float = 1.0

    def __post_init__(self):
        if self.n_proposals < 1:
            raise ConfigError("need at least one proposal")
        if self.guidance not in GUIDANCE_MODES:
            raise ConfigError(f"unknown guidance {self.guidance!r}")
        if self.mode not in ("train", "eval"):
            raise ConfigError(f"unknown mode {self.mode!r}")

    def q_callable(self):
        if self.q_fn is not None:
            return self.q_fn
        if self.critic is not None:
            return rl.critic_q_fn(self.critic)
        raise ConfigError("policy needs a critic or an explicit q_fn")


def propose_actions(policy, s, n_proposals, seed):
    """L reverse-SDE samples conditioned on s, one derived RNG stream each."""
    if n_proposals < 1:
        raise ConfigError("need at least one proposal")
    states = np.tile(np.asarray(s, dtype=float), (n_proposals, 1))
    rngs = [df.derived_rng(seed, l) for l in range(n_proposals)]
    return df.sample_reverse_batch(policy.score_net, states, policy.schedule,
                                   method=policy.sampler, steps=None, rngs=rngs,
                                   low=policy.action_low, high=policy.action_high)


def _softmax(x, temp):
    z = np.asarray(x, dtype=float) / temp
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def guidance_scores(policy, s, actions):
    """Non-negative selection scores for the candidate actions."""
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    if actions.shape[0] == 0:
        raise ConfigError("no candidate actions")
    if policy.guidance == "H":
        if policy.dual is None:
            raise ConfigError("H guidance needs a trained dual")
        return pt.h_scores(policy.dual, policy.q_callable(), s, actions)
    q = policy.q_callable()(np.tile(np.asarray(s, dtype=float), (actions.shape[0], 1)),
                            actions)
    if policy.guidance == "Q":
        return _softmax(q, policy.softmax_temp)
    if policy.critic is None:
        raise ConfigError("A guidance needs a critic value net")
    v = rl.v_values(policy.critic.v_net, np.asarray(s, dtype=float)[None, :])[0]
    return _softmax(q - v, policy.softmax_temp)


def resample(scores, rng):
    """Categorical draw proportional to scores; uniform fallback when all zero."""
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise ConfigError("empty score list")
    if np.any(scores < 0):
        raise ConfigError("scores must be non-negative")
    total = scores.sum()
    probs = scores / total if total > 0 else np.full(scores.size, 1.0 / scores.size)
    index = int(rng.choice(scores.size, p=probs))
    return index, probs


def act(policy, s, seed):
    """One action: resampled proposal in train mode, raw sample in eval mode."""
    if policy.mode == "eval":
        return propose_actions(policy, s, 1, seed)[0]
    n = policy.n_proposals
    proposals = propose_actions(policy, s, n, seed)
    scores = guidance_scores(policy, s, proposals)
    idx, _ = resample(scores, df.derived_rng(seed, n))
    return proposals[idx]
