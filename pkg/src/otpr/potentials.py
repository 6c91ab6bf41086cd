"""Stochastic maximization of the regularized transport dual.

Two small nets u(state) and v(action) are ascended on batches drawn
independently from the replay buffer; the objective on a state batch S and
action batch A is

    mean_i u(s_i) + mean_j v(a_j) + mean_ij penalty(u_i, v_j, c_ij; mask_ij)

i.e. the full batch cross product. When a keypoint set is attached, the
penalty is masked and the cost includes the keypoint-relation term.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import nn, ot
from .errors import ConfigError


@dataclass(frozen=True)
class DualPair:
    u_net: nn.ParamSet
    v_net: nn.ParamSet
    lam: float
    cost_spec: ot.CostSpec
    keypoints: ot.KeypointSet = None
    relation: ot.RelationConfig = None
    cost_stats: ot.CostStats = None
    u_adam: nn.AdamState = field(repr=False, default=None)
    v_adam: nn.AdamState = field(repr=False, default=None)

    def __post_init__(self):
        if self.lam <= 0:
            raise ConfigError("lam must be positive")
        if self.u_net.out_dim != 1 or self.v_net.out_dim != 1:
            raise ConfigError("potential nets must output a single value")


@dataclass(frozen=True)
class DualTrainConfig:
    batch_size: int = 64
    lr: float = 1e-6
    iterations: int = 500
    seed: int = 0
    clip_norm: float = 10.0  # the hinge penalty can spike early in training
    mix_expert_actions: bool = False


def dual_init(state_dim, action_dim, lam, cost_spec=None, hidden=(64, 64),
              keypoints=None, relation=None, seed=0):
    """Fresh tanh potential nets (bounded outputs keep the hinge stable)."""
    u = nn.mlp_init([state_dim, *hidden, 1], activation="tanh", seed=seed)
    v = nn.mlp_init([action_dim, *hidden, 1], activation="tanh", seed=seed + 1)
    spec = cost_spec or ot.CostSpec()
    if keypoints is not None and relation is None:
        relation = ot.RelationConfig(rho=ot.median_rho(keypoints))
    return DualPair(u, v, lam, spec, keypoints, relation, None,
                    nn.adam_init(u), nn.adam_init(v))


def pair_costs(dual, q_fn, states, actions, s_kp=None, a_kp=None):
    """All-pairs (cost, mask) matrices for a state batch and an action batch.

    Masking uses buffer provenance ids when given, geometric matching
    otherwise; without keypoints the mask is all ones.
    """
    cost = ot.cost_matrix(dual.cost_spec, q_fn, states, actions,
                          keypoints=dual.keypoints, relation=dual.relation,
                          stats=dual.cost_stats)
    if dual.keypoints is None or len(dual.keypoints) == 0:
        mask = np.ones_like(cost)
    elif s_kp is not None and a_kp is not None:
        mask = ot.mask_matrix_from_ids(s_kp, a_kp)
    else:
        mask = ot.mask_matrix_geometric(states, actions, dual.keypoints)
    return cost, mask


def dual_objective_batch(dual, q_fn, states, actions, s_kp=None, a_kp=None):
    """Mean-over-cross-product dual objective; deterministic given inputs."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    if states.shape[0] == 0 or actions.shape[0] == 0:
        raise ConfigError("batches must be non-empty")
    u = nn.forward(dual.u_net, states)[:, 0]
    v = nn.forward(dual.v_net, actions)[:, 0]
    cost, mask = pair_costs(dual, q_fn, states, actions, s_kp, a_kp)
    pen = ot.penalty(u[:, None], v[None, :], cost, dual.lam, mask)
    return float(u.mean() + v.mean() + pen.mean())


def dual_objective_and_grads(dual, q_fn, states, actions, s_kp=None, a_kp=None):
    """Objective plus exact gradients w.r.t. both potential nets."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    n, m = states.shape[0], actions.shape[0]
    u_out, u_cache = nn.forward_batch(dual.u_net, states)
    v_out, v_cache = nn.forward_batch(dual.v_net, actions)
    u, v = u_out[:, 0], v_out[:, 0]
    cost, mask = pair_costs(dual, q_fn, states, actions, s_kp, a_kp)
    h = ot.compatibility(u[:, None], v[None, :], cost, dual.lam, mask)
    pen = -dual.lam * h * h  # penalty on the active branch
    obj = float(u.mean() + v.mean() + pen.mean())
    # d obj / d u_i = 1/n - (1/(n m)) sum_j H_ij, and symmetrically for v_j
    up_u = (1.0 / n - h.sum(axis=1) / (n * m))[:, None]
    up_v = (1.0 / m - h.sum(axis=0) / (n * m))[:, None]
    u_grads, _ = nn.backward_batch(dual.u_net, u_cache, up_u)
    v_grads, _ = nn.backward_batch(dual.v_net, v_cache, up_v)
    return obj, u_grads, v_grads


def train_potentials(dual, buffer, q_fn, config):
    """Ascend the dual objective for ``config.iterations`` Adam steps.

    State and action batches are sampled independently from the buffer; with
    ``mix_expert_actions`` half the action batch is drawn from expert rows
    (demo actions live there, keypoint-tagged). Returns (trained DualPair,
    per-iteration objective history). Optimizer moments ride along in the
    DualPair so repeated calls warm-start.
    """
    if len(buffer) == 0:
        raise ConfigError("buffer is empty")
    if len(buffer) < config.batch_size:
        raise ConfigError("buffer smaller than dual batch size")
    rng = np.random.default_rng(config.seed)
    u_net, v_net = dual.u_net, dual.v_net
    u_adam = dual.u_adam or nn.adam_init(u_net)
    v_adam = dual.v_adam or nn.adam_init(v_net)
    cur = dual
    history = []
    all_rows = buffer.all_data() if config.mix_expert_actions else None
    expert_rows = np.flatnonzero(all_rows.expert) if all_rows is not None else None
    for _ in range(config.iterations):
        sb = buffer.sample(config.batch_size, rng)
        ab = buffer.sample(config.batch_size, rng)
        actions, a_kp = ab.a, ab.kp_id
        if expert_rows is not None and expert_rows.size:
            k = min(config.batch_size // 2, expert_rows.size)
            pick = rng.choice(expert_rows, size=k, replace=False)
            actions = np.concatenate([actions[k:], all_rows.a[pick]])
            a_kp = np.concatenate([a_kp[k:], all_rows.kp_id[pick]])
        obj, gu, gv = dual_objective_and_grads(cur, q_fn, sb.s, actions, sb.kp_id, a_kp)
        history.append(obj)
        gu = nn.clip_grads(nn.scale_grads(gu, -1.0), config.clip_norm)
        gv = nn.clip_grads(nn.scale_grads(gv, -1.0), config.clip_norm)
        u_net, u_adam = nn.adam_step(u_adam, u_net, gu, config.lr)
        v_net, v_adam = nn.adam_step(v_adam, v_net, gv, config.lr)
        cur = replace(cur, u_net=u_net, v_net=v_net, u_adam=u_adam, v_adam=v_adam)
    return cur, history


def h_matrix(dual, q_fn, states, actions, keypoints=None):
    """Compatibility values H(s_i, a_j) for all pairs."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    u = nn.forward(dual.u_net, states)[:, 0]
    v = nn.forward(dual.v_net, actions)[:, 0]
    kp = keypoints if keypoints is not None else dual.keypoints
    cost = ot.cost_matrix(dual.cost_spec, q_fn, states, actions,
                          keypoints=kp, relation=dual.relation, stats=dual.cost_stats)
    if kp is None or len(kp) == 0:
        mask = np.ones_like(cost)
    else:
        mask = ot.mask_matrix_geometric(states, actions, kp)
    return ot.compatibility(u[:, None], v[None, :], cost, dual.lam, mask)


def plan_from_potentials(dual, q_fn, states, actions, keypoints=None):
    """Plan estimate H(s_i, a_j) / (n m) under uniform empirical marginals."""
    h = h_matrix(dual, q_fn, states, actions, keypoints)
    n, m = h.shape
    return h / (n * m)


def h_scores(dual, q_fn, state, actions):
    """H(s, a_l) for one state against a list of candidate actions."""
    return h_matrix(dual, q_fn, np.asarray(state, dtype=float)[None, :], actions)[0]


def h_pairs(dual, q_fn, states, actions, s_kp=None, a_kp=None):
    """H(s_i, a_i) for paired rows, as used to weight score-matching batches.

    Provenance ids give the mask; stored transitions are matched pairs, so a
    row is masked out only when its state and action tags disagree.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    u = nn.forward(dual.u_net, states)[:, 0]
    v = nn.forward(dual.v_net, actions)[:, 0]
    cost = ot.cost_pairs(dual.cost_spec, q_fn, states, actions,
                         keypoints=dual.keypoints, relation=dual.relation,
                         stats=dual.cost_stats)
    if dual.keypoints is None or len(dual.keypoints) == 0 or s_kp is None:
        mask = np.ones_like(cost)
    else:
        si = np.asarray(s_kp)
        aj = np.asarray(a_kp)
        mask = (((si < 0) & (aj < 0)) | ((si >= 0) & (si == aj))).astype(float)
    return ot.compatibility(u, v, cost, dual.lam, mask)
