"""Quadratically regularized optimal transport primitives.

The dual of the L2-regularized problem is an unconstrained concave
maximization over potentials (u, v); its hinge penalty and the associated
compatibility function are the two formulas everything else builds on:

    penalty(u, v, c)       = -m * (u + v - c)_+^2 / (4 lam)
    compatibility(u, v, c) =  m * (u + v - c)_+   / (2 lam)

with m a binary mask. The plan density w.r.t. mu (x) nu equals the
compatibility, so on discrete instances an exact primal solver (projected
gradient onto the transportation polytope) serves as the reference the
learned potentials are checked against.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError

COST_MODES = ("neg_q", "relation_js", "weighted_sum")
NORMALIZATIONS = ("zscore", "none")


@dataclass(frozen=True)
class CostSpec:
    """Transport-cost recipe: critic-based, keypoint-relation-based, or both."""

    mode: str = "weighted_sum"
    weight_negq: float = 1.0
    weight_relation: float = 1.0
    normalization: str = "zscore"

    def __post_init__(self):
        if self.mode not in COST_MODES:
            raise ConfigError(f"unknown cost mode {self.mode!r}")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"unknown normalization {self.normalization!r}")
        if self.weight_negq < 0 or self.weight_relation < 0:
            raise ConfigError("cost weights must be non-negative")
        if self.mode == "weighted_sum" and self.weight_negq == 0 and self.weight_relation == 0:
            raise ConfigError("weighted_sum needs at least one non-zero weight")


@dataclass(frozen=True)
class CostStats:
    """Frozen z-score statistics of -Q, so costs stay consistent between
    dual training and interaction-time compatibility queries."""

    mean: float = 0.0
    std: float = 1.0


@dataclass(frozen=True)
class KeypointSet:
    """Expert (state, action) pairs anchoring the masked matching."""

    states: np.ndarray = field(repr=False)
    actions: np.ndarray = field(repr=False)
    match_tolerance: float = 1e-6

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.states, dtype=float))
        a = np.atleast_2d(np.asarray(self.actions, dtype=float))
        if s.shape[0] != a.shape[0]:
            raise ShapeError("keypoint states/actions must pair up")
        if not math.isfinite(self.match_tolerance) or self.match_tolerance < 0:
            raise ConfigError("match_tolerance must be finite and >= 0")
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "actions", a)

    def __len__(self):
        return self.states.shape[0]


@dataclass(frozen=True)
class RelationConfig:
    rho: float = 1.0
    metric: str = "sqeuclidean"

    def __post_init__(self):
        if self.rho <= 0:
            raise ConfigError("relation temperature rho must be positive")
        if self.metric != "sqeuclidean":
            raise ConfigError(f"unsupported relation metric {self.metric!r}")


@dataclass(frozen=True)
class DiscretePlan:
    gamma: np.ndarray
    mu: np.ndarray
    nu: np.ndarray

    def validate(self, atol=1e-8):
        g = self.gamma
        if np.any(g < -atol):
            raise ValueError("plan has negative entries")
        if abs(self.mu.sum() - 1.0) > atol or abs(self.nu.sum() - 1.0) > atol:
            raise ValueError("marginals must sum to 1")
        if np.abs(g.sum(axis=1) - self.mu).max() > atol:
            raise ValueError("row sums do not match mu")
        if np.abs(g.sum(axis=0) - self.nu).max() > atol:
            raise ValueError("column sums do not match nu")
        return self


def penalty(u_val, v_val, cost, lam, mask=1.0):
    """Hinge penalty of the regularized dual; <= 0 everywhere."""
    if lam <= 0:
        raise ConfigError("lam must be positive")
    slack = np.maximum(np.asarray(u_val, dtype=float) + v_val - cost, 0.0)
    return -np.asarray(mask, dtype=float) * slack * slack / (4.0 * lam)


def compatibility(u_val, v_val, cost, lam, mask=1.0):
    """Plan density w.r.t. the product of marginals; >= 0 everywhere."""
    if lam <= 0:
        raise ConfigError("lam must be positive")
    slack = np.maximum(np.asarray(u_val, dtype=float) + v_val - cost, 0.0)
    return np.asarray(mask, dtype=float) * slack / (2.0 * lam)


def _sq_dists(x, points):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d = x[:, None, :] - points[None, :, :]
    return np.einsum("bnd,bnd->bn", d, d)


def relation_vectors(points, anchors, config):
    """Rows of softmax(-d^2/rho) against the anchor set; each row sums to 1."""
    anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
    if anchors.shape[0] == 0:
        raise ConfigError("relation vectors need at least one keypoint")
    logits = -_sq_dists(points, anchors) / config.rho
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def relation_vector(point, anchors, config):
    return relation_vectors(np.asarray(point, dtype=float)[None, :], anchors, config)[0]


def _xlogx(p):
    out = np.zeros_like(p)
    pos = p > 0
    out[pos] = p[pos] * np.log(p[pos])
    return out


def js_divergence(p, q):
    """Jensen-Shannon divergence (natural log, 0*log0 := 0); in [0, ln 2]."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ShapeError(f"length mismatch {p.shape} vs {q.shape}")
    m = 0.5 * (p + q)
    log_m = np.where(m > 0, np.log(np.where(m > 0, m, 1.0)), 0.0)
    kl_p = float(np.sum(_xlogx(p)) - np.sum(p * log_m))
    kl_q = float(np.sum(_xlogx(q)) - np.sum(q * log_m))
    return 0.5 * kl_p + 0.5 * kl_q


def js_matrix(p_rows, q_rows):
    """Pairwise JS divergences between two stacks of distributions."""
    if p_rows.min() > 0 and q_rows.min() > 0:
        # softmax rows are strictly positive: skip the 0*log0 masking
        m = 0.5 * (p_rows[:, None, :] + q_rows[None, :, :])
        log_m = np.log(m)
    else:
        m = 0.5 * (p_rows[:, None, :] + q_rows[None, :, :])
        log_m = np.where(m > 0, np.log(np.where(m > 0, m, 1.0)), 0.0)
    hp = _xlogx(p_rows).sum(axis=1)[:, None]
    hq = _xlogx(q_rows).sum(axis=1)[None, :]
    cross_p = np.einsum("ik,ijk->ij", p_rows, log_m)
    cross_q = np.einsum("jk,ijk->ij", q_rows, log_m)
    return 0.5 * (hp - cross_p) + 0.5 * (hq - cross_q)


def js_rows(p_rows, q_rows):
    """Row-wise JS divergences between paired stacks of distributions."""
    m = 0.5 * (p_rows + q_rows)
    log_m = np.where(m > 0, np.log(np.where(m > 0, m, 1.0)), 0.0)
    kl_p = _xlogx(p_rows).sum(axis=1) - np.sum(p_rows * log_m, axis=1)
    kl_q = _xlogx(q_rows).sum(axis=1) - np.sum(q_rows * log_m, axis=1)
    return 0.5 * kl_p + 0.5 * kl_q


def median_rho(keypoints):
    """Median of positive pairwise squared distances, pooled over both spaces."""
    vals = []
    for pts in (keypoints.states, keypoints.actions):
        if pts.shape[0] >= 2:
            d = _sq_dists(pts, pts)
            off = d[~np.eye(pts.shape[0], dtype=bool)]
            vals.append(off[off > 0])
    pooled = np.concatenate(vals) if vals else np.zeros(0)
    return float(np.median(pooled)) if pooled.size else 1.0


def masked_cost(s, a, keypoints, config):
    """Keypoint-relation transport cost: JS between the two relation vectors."""
    if len(keypoints) == 0:
        raise ConfigError("masked cost requires a non-empty keypoint set")
    r_s = relation_vector(s, keypoints.states, config)
    r_a = relation_vector(a, keypoints.actions, config)
    return js_divergence(r_s, r_a)


def masked_cost_matrix(states, actions, keypoints, config):
    r_s = relation_vectors(states, keypoints.states, config)
    r_a = relation_vectors(actions, keypoints.actions, config)
    return js_matrix(r_s, r_a)


def _match_index(x, points, tol):
    if points.shape[0] == 0:
        return -1
    d = np.sqrt(_sq_dists(np.asarray(x, dtype=float)[None, :], points)[0])
    i = int(np.argmin(d))
    return i if d[i] <= tol else -1


def mask_value(s, a, keypoints):
    """1 on matched keypoint pairs and on pairs touching no keypoint; else 0."""
    tol = keypoints.match_tolerance
    i = _match_index(s, keypoints.states, tol)
    j = _match_index(a, keypoints.actions, tol)
    if i < 0 and j < 0:
        return 1
    return 1 if i == j else 0


def mask_matrix_geometric(states, actions, keypoints):
    states = np.atleast_2d(np.asarray(states, dtype=float))
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    out = np.empty((states.shape[0], actions.shape[0]))
    s_idx = [_match_index(s, keypoints.states, keypoints.match_tolerance) for s in states]
    a_idx = [_match_index(a, keypoints.actions, keypoints.match_tolerance) for a in actions]
    for i, si in enumerate(s_idx):
        for j, aj in enumerate(a_idx):
            out[i, j] = 1.0 if (si < 0 and aj < 0) or si == aj else 0.0
    return out


def mask_matrix_from_ids(state_kp_ids, action_kp_ids):
    """Provenance mask: ids >= 0 tag buffer rows that ARE keypoint pairs."""
    si = np.asarray(state_kp_ids)[:, None]
    aj = np.asarray(action_kp_ids)[None, :]
    both_free = (si < 0) & (aj < 0)
    same_pair = (si >= 0) & (si == aj)
    return (both_free | same_pair).astype(float)


def cost_matrix(spec, q_fn, states, actions, keypoints=None, relation=None, stats=None):
    """All-pairs transport costs per the CostSpec.

    ``q_fn(S, A)`` must accept stacked (k, ds), (k, da) arrays and return (k,).
    When ``stats`` is given the -Q term is z-scored with those frozen moments;
    otherwise batch moments are used.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    n, m = states.shape[0], actions.shape[0]
    out = np.zeros((n, m))
    if spec.mode in ("neg_q", "weighted_sum"):
        s_rep = np.repeat(states, m, axis=0)
        a_rep = np.tile(actions, (n, 1))
        neg_q = -np.asarray(q_fn(s_rep, a_rep), dtype=float).reshape(n, m)
        if spec.normalization == "zscore":
            if stats is None:
                mean = float(neg_q.mean())
                std = float(neg_q.std())
                stats = CostStats(mean, std if std > 1e-12 else 1.0)
            neg_q = (neg_q - stats.mean) / stats.std
        w = spec.weight_negq if spec.mode == "weighted_sum" else 1.0
        out += w * neg_q
    if spec.mode in ("relation_js", "weighted_sum") and keypoints is not None and len(keypoints):
        if relation is None:
            relation = RelationConfig(rho=median_rho(keypoints))
        w = spec.weight_relation if spec.mode == "weighted_sum" else 1.0
        out += w * masked_cost_matrix(states, actions, keypoints, relation)
    elif spec.mode == "relation_js":
        raise ConfigError("relation_js cost requires keypoints")
    return out


def cost_pairs(spec, q_fn, states, actions, keypoints=None, relation=None, stats=None):
    """Element-wise costs c(s_i, a_i) for paired rows (no cross product)."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    out = np.zeros(states.shape[0])
    if spec.mode in ("neg_q", "weighted_sum"):
        neg_q = -np.asarray(q_fn(states, actions), dtype=float)
        if spec.normalization == "zscore":
            if stats is None:
                std = float(neg_q.std())
                stats = CostStats(float(neg_q.mean()), std if std > 1e-12 else 1.0)
            neg_q = (neg_q - stats.mean) / stats.std
        w = spec.weight_negq if spec.mode == "weighted_sum" else 1.0
        out += w * neg_q
    if spec.mode in ("relation_js", "weighted_sum") and keypoints is not None and len(keypoints):
        if relation is None:
            relation = RelationConfig(rho=median_rho(keypoints))
        r_s = relation_vectors(states, keypoints.states, relation)
        r_a = relation_vectors(actions, keypoints.actions, relation)
        w = spec.weight_relation if spec.mode == "weighted_sum" else 1.0
        out += w * js_rows(r_s, r_a)
    elif spec.mode == "relation_js":
        raise ConfigError("relation_js cost requires keypoints")
    return out


def compute_cost_stats(q_fn, states, actions):
    """Moments of -Q over the cross product, for freezing into a CostSpec."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    s_rep = np.repeat(states, actions.shape[0], axis=0)
    a_rep = np.tile(actions, (states.shape[0], 1))
    neg_q = -np.asarray(q_fn(s_rep, a_rep), dtype=float)
    std = float(neg_q.std())
    return CostStats(float(neg_q.mean()), std if std > 1e-12 else 1.0)


# ---------------------------------------------------------------------------
# Exact discrete solver (reference oracle)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OracleResult:
    plan: DiscretePlan
    converged: bool
    residual: float
    iterations: int


def project_transport_polytope(y, mu, nu, support=None, tol=1e-11, max_sweeps=20000):
    """Dykstra's alternating projections onto {g >= 0, g 1 = mu, g^T 1 = nu}.

    ``support`` (optional 0/1 matrix) additionally pins masked-out cells to 0;
    the clip and the support zeroing form a single coordinate-separable set.
    """
    x = np.asarray(y, dtype=float)
    n, m = x.shape
    p = np.zeros_like(x)
    q = np.zeros_like(x)
    r = np.zeros_like(x)
    for _ in range(max_sweeps):
        t = x + p
        y1 = t + (mu - t.sum(axis=1))[:, None] / m
        p = t - y1
        t = y1 + q
        y2 = t + (nu - t.sum(axis=0))[None, :] / n
        q = t - y2
        t = y2 + r
        x_new = np.maximum(t, 0.0)
        if support is not None:
            x_new = x_new * support
        r = t - x_new
        viol = max(np.abs(x_new.sum(axis=1) - mu).max(),
                   np.abs(x_new.sum(axis=0) - nu).max())
        delta = np.abs(x_new - x).max()
        x = x_new
        if viol < tol and delta < tol:
            break
    return x


def plan_objective(cost, gamma, mu, nu, lam):
    mn = np.outer(mu, nu)
    return float(np.sum(cost * gamma) + lam * np.sum(gamma * gamma / mn))


def exact_plan_oracle(cost, mu, nu, lam, mask=None, kkt_tol=1e-6, max_iters=200000):
    """Solve min <C, g> + lam * sum g^2/(mu_i nu_j) over the transportation
    polytope by projected gradient with Dykstra-style projections.

    Returns an OracleResult; ``converged=False`` reports the residual at the
    iteration cap and leaves the decision to the caller.
    """
    cost = np.asarray(cost, dtype=float)
    mu = np.asarray(mu, dtype=float)
    nu = np.asarray(nu, dtype=float)
    n, m = cost.shape
    if n > 64 or m > 64:
        raise ConfigError("oracle instances are capped at 64x64")
    if lam <= 0:
        raise ConfigError("lam must be positive")
    if abs(mu.sum() - 1.0) > 1e-8 or abs(nu.sum() - 1.0) > 1e-8:
        raise ConfigError("marginals must sum to 1")
    mn = np.outer(mu, nu)
    eta = mn.min() / (2.0 * lam)
    gamma = mn * mask if mask is not None else mn.copy()
    residual = math.inf
    iters = 0
    for iters in range(1, max_iters + 1):
        grad = cost + 2.0 * lam * gamma / mn
        nxt = project_transport_polytope(gamma - eta * grad, mu, nu, support=mask)
        residual = float(np.abs(nxt - gamma).max() / eta)
        gamma = nxt
        if residual < kkt_tol:
            break
    plan = DiscretePlan(gamma, mu, nu)
    return OracleResult(plan, residual < kkt_tol, residual, iters)


def independent_coupling(mu, nu):
    return np.outer(np.asarray(mu, dtype=float), np.asarray(nu, dtype=float))


def write_ot_debug_csv(path, cost, mask, h_matrix, plan):
    """Dump `i,j,cost,mask,H,plan_oracle` rows for small instances."""
    n, m = np.asarray(cost).shape
    if n * m > 4096:
        raise ConfigError("ot-debug instances are capped at 4096 cells")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["i", "j", "cost", "mask", "H", "plan_oracle"])
        for i in range(n):
            for j in range(m):
                w.writerow([i, j, repr(float(cost[i, j])), int(mask[i, j]),
                            repr(float(h_matrix[i, j])), repr(float(plan[i, j]))])
