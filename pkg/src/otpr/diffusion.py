"""Forward-SDE perturbation kernels, score-matching losses, reverse samplers.

Two forward processes are supported, both with closed-form Gaussian kernels:

    VP:  a_t = e^{h(t)/2} a_0 + sqrt(1 - e^{h(t)}) eps,
         h(t) = -0.5 t^2 (beta_max - beta_min) - t beta_min
    VE:  a_t = a_0 + sigma_min (sigma_max/sigma_min)^t eps

A score net consumes (a_t, condition, time embedding) and predicts the score
of the perturbed conditional action distribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigError, SamplingError, ShapeError

TIME_FREQS = (1.0, 2.0, 4.0, 8.0)
TIME_EMBED_DIM = 2 * len(TIME_FREQS)


@dataclass(frozen=True)
class DiffusionSchedule:
    kind: str = "VP"
    beta_min: float = 0.1
    beta_max: float = 20.0
    sigma_min: float = 0.01
    sigma_max: float = 10.0
    sampler_steps: int = 20
    t_floor: float = 1e-3  # loss times are drawn from (t_floor, 1]; sigma_0 ~ 0 is singular

    def __post_init__(self):
        if self.kind not in ("VP", "VE"):
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "VP" and not 0 < self.beta_min < self.beta_max:
            raise ConfigError("VP needs 0 < beta_min < beta_max")
        if self.kind == "VE":
            if not 0 < self.sigma_min < self.sigma_max:
                raise ConfigError("VE needs 0 < sigma_min < sigma_max")
            if self.sigma_min > 1e-2:
                raise ConfigError("VE sigma_min must be <= 1e-2 so t=0 is near-clean")
        if self.sampler_steps < 1:
            raise ConfigError("sampler_steps must be >= 1")


def marginal_prob(schedule, t):
    """(mean_scale, sigma) of the perturbation kernel at time t in [0, 1]."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ConfigError("t must lie in [0, 1]")
    if schedule.kind == "VP":
        h = -0.5 * t * t * (schedule.beta_max - schedule.beta_min) - t * schedule.beta_min
        mean_scale = np.exp(0.5 * h)
        sigma = np.sqrt(np.maximum(1.0 - np.exp(h), 0.0))
    else:
        mean_scale = np.ones_like(t)
        sigma = schedule.sigma_min * (schedule.sigma_max / schedule.sigma_min) ** t
    return mean_scale, sigma


def drift(schedule, a, t):
    if schedule.kind == "VP":
        beta = schedule.beta_min + (schedule.beta_max - schedule.beta_min) * t
        return -0.5 * beta * a
    return np.zeros_like(a)


def squared_diffusion(schedule, t):
    if schedule.kind == "VP":
        return schedule.beta_min + (schedule.beta_max - schedule.beta_min) * t
    sig = schedule.sigma_min * (schedule.sigma_max / schedule.sigma_min) ** t
    return 2.0 * sig * sig * math.log(schedule.sigma_max / schedule.sigma_min)


def perturb(a0, t, eps, schedule):
    """Reparameterized kernel sample a_t = mean_scale * a0 + sigma * eps."""
    a0 = np.asarray(a0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if a0.shape != eps.shape:
        raise ShapeError("a0 and eps must have matching shapes")
    mean_scale, sigma = marginal_prob(schedule, t)
    if a0.ndim == 2 and np.ndim(t) == 1:
        return mean_scale[:, None] * a0 + sigma[:, None] * eps
    return mean_scale * a0 + sigma * eps


def embed_time(t):
    t = np.atleast_1d(np.asarray(t, dtype=float))
    cols = []
    for f in TIME_FREQS:
        cols.append(np.sin(2.0 * math.pi * f * t))
        cols.append(np.cos(2.0 * math.pi * f * t))
    return np.stack(cols, axis=1)


def score_layer_sizes(state_dim, action_dim, hidden=256, depth=2):
    return [action_dim + state_dim + TIME_EMBED_DIM] + [hidden] * depth + [action_dim]


def score_model_init(state_dim, action_dim, hidden=256, depth=2, seed=0):
    """Score nets default to smooth activations and residual hidden blocks."""
    return nn.mlp_init(score_layer_sizes(state_dim, action_dim, hidden, depth),
                       activation="silu", seed=seed, residual=True)


def _score_forward(params, a_t, states, t):
    x = np.concatenate([a_t, states, embed_time(t)], axis=1)
    return nn.forward_batch(params, x)


def score_eval(params, a_t, states, t, emb=None):
    """Score field s(a_t; s, t) for stacked inputs."""
    a_t = np.atleast_2d(np.asarray(a_t, dtype=float))
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if emb is None:
        emb = np.broadcast_to(embed_time(t), (a_t.shape[0], TIME_EMBED_DIM))
    x = np.concatenate([a_t, states, emb], axis=1)
    return nn.forward_batch(params, x)[0]


def draw_dsm_noise(n, action_dim, schedule, rng):
    """Per-sample (t, eps) draws with t uniform on (t_floor, 1]."""
    t = 1.0 - rng.uniform(0.0, 1.0 - schedule.t_floor, size=n)
    eps = rng.standard_normal((n, action_dim))
    return t, eps


def _loss_core(params, states, actions, t, eps, schedule, weight_fn, sample_weights):
    states = np.atleast_2d(np.asarray(states, dtype=float))
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    b = actions.shape[0]
    mean_scale, sigma = marginal_prob(schedule, t)
    a_t = mean_scale[:, None] * actions + sigma[:, None] * eps
    out, cache = _score_forward(params, a_t, states, t)
    resid = sigma[:, None] * out + eps
    w_t = sigma * sigma if weight_fn is None else np.asarray(weight_fn(t), dtype=float)
    coef = w_t / (sigma * sigma)
    sw = np.ones(b) if sample_weights is None else np.asarray(sample_weights, dtype=float)
    per = coef * np.sum(resid * resid, axis=1)
    loss = float(np.mean(sw * per))
    upstream = (2.0 / b) * (sw * coef * sigma)[:, None] * resid
    grads, _ = nn.backward_batch(params, cache, upstream)
    return loss, grads


def dsm_loss_given(params, states, actions, t, eps, schedule, weight_fn=None):
    """Denoising score-matching loss with frozen (t, eps) draws; returns (loss, grads)."""
    return _loss_core(params, states, actions, np.asarray(t, dtype=float),
                      np.asarray(eps, dtype=float), schedule, weight_fn, None)


def dsm_loss(params, states, actions, schedule, rng, weight_fn=None):
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    if actions.shape[0] == 0:
        raise ConfigError("dsm batch must be non-empty")
    t, eps = draw_dsm_noise(actions.shape[0], actions.shape[1], schedule, rng)
    return dsm_loss_given(params, states, actions, t, eps, schedule, weight_fn)


def weighted_dsm_loss_given(params, states, actions, weights, t, eps, schedule,
                            weight_fn=None):
    """Per-sample-weighted DSM with frozen draws; returns (loss, grads, degenerate).

    Weights are used as given (no renormalization) under a batch-mean reduction.
    """
    weights = np.asarray(weights, dtype=float)
    if np.any(weights < 0):
        raise ConfigError("sample weights must be non-negative")
    if not np.any(weights > 0):
        return 0.0, nn.zeros_like_params(params), True
    loss, grads = _loss_core(params, states, actions, np.asarray(t, dtype=float),
                             np.asarray(eps, dtype=float), schedule, weight_fn, weights)
    return loss, grads, False


def weighted_dsm_loss(params, states, actions, weights, schedule, rng, weight_fn=None):
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    t, eps = draw_dsm_noise(actions.shape[0], actions.shape[1], schedule, rng)
    return weighted_dsm_loss_given(params, states, actions, weights, t, eps, schedule,
                                   weight_fn)


def score_regression_loss(params, states, a_t, t, targets, schedule, weight_fn=None):
    """Weighted L2 regression of the score field onto explicit targets.

    loss = mean_i w(t_i) ||s(a_t_i; s_i, t_i) - target_i||^2; returns (loss, grads).
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    a_t = np.atleast_2d(np.asarray(a_t, dtype=float))
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    t = np.asarray(t, dtype=float)
    b = a_t.shape[0]
    _, sigma = marginal_prob(schedule, t)
    w_t = sigma * sigma if weight_fn is None else np.asarray(weight_fn(t), dtype=float)
    out, cache = _score_forward(params, a_t, states, t)
    diff = out - targets
    loss = float(np.mean(w_t * np.sum(diff * diff, axis=1)))
    upstream = (2.0 / b) * w_t[:, None] * diff
    grads, _ = nn.backward_batch(params, cache, upstream)
    return loss, grads


# ---------------------------------------------------------------------------
# Reverse-time sampling
# ---------------------------------------------------------------------------

def derived_rng(seed, index=0):
    """Deterministic per-proposal stream: child generator of (seed, index)."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed),
                                                        spawn_key=(int(index),)))


def _as_rng(rng_or_seed):
    if isinstance(rng_or_seed, np.random.Generator):
        return rng_or_seed
    return derived_rng(int(rng_or_seed), 0)


def sample_reverse_batch(params, states, schedule, method="ddim", steps=None,
                         rngs=None, low=None, high=None):
    """Integrate the reverse process from t=1 to t=0 for a batch of conditions.

    ``rngs`` is one Generator per row so proposal streams stay independent.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    b = states.shape[0]
    steps = schedule.sampler_steps if steps is None else int(steps)
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    if method not in ("ddim", "euler_maruyama"):
        raise ConfigError(f"unknown sampler {method!r}")
    action_dim = params.out_dim
    grid = np.linspace(1.0, 0.0, steps + 1)
    ms_grid, sg_grid = marginal_prob(schedule, grid)
    emb_grid = embed_time(grid[:steps])
    init = np.stack([r.standard_normal(action_dim) for r in rngs])
    a = float(sg_grid[0]) * init
    if method == "euler_maruyama":
        path_noise = np.stack([r.standard_normal((steps, action_dim)) for r in rngs])
        g2_grid = np.array([squared_diffusion(schedule, t) for t in grid[:steps]])
    dt = -1.0 / steps
    for k in range(steps):
        emb = np.broadcast_to(emb_grid[k], (b, emb_grid.shape[1]))
        score = score_eval(params, a, states, grid[k], emb=emb)
        if method == "ddim":
            sg_t, sg_n = float(sg_grid[k]), float(sg_grid[k + 1])
            eps_hat = -sg_t * score
            a0_hat = (a - sg_t * eps_hat) / float(ms_grid[k])
            a = float(ms_grid[k + 1]) * a0_hat + sg_n * eps_hat
        else:
            g2 = g2_grid[k]
            a = a + (drift(schedule, a, grid[k]) - g2 * score) * dt \
                + math.sqrt(g2 * (-dt)) * path_noise[:, k, :]
        if not np.all(np.isfinite(a)):
            raise SamplingError(f"non-finite sample values at step {k}", step=k)
    if low is not None and high is not None:
        a = np.clip(a, low, high)
    return a


def sample_reverse(params, s, schedule, method="ddim", steps=None, rng_or_seed=0,
                   low=None, high=None):
    """Single-condition reverse sample; accepts a Generator or an integer seed."""
    rng = _as_rng(rng_or_seed)
    out = sample_reverse_batch(params, np.asarray(s, dtype=float)[None, :], schedule,
                               method, steps, [rng], low, high)
    return out[0]


def analytic_gaussian_score(mixture, a_t, t, schedule):
    """Exact score of a t-perturbed isotropic Gaussian mixture.

    ``mixture`` is a list of (weight, mean vector, std scalar); weights sum to 1.
    """
    ws = np.array([w for w, _, _ in mixture], dtype=float)
    if abs(ws.sum() - 1.0) > 1e-8:
        raise ConfigError("mixture weights must sum to 1")
    a_t = np.atleast_2d(np.asarray(a_t, dtype=float))
    d = a_t.shape[1]
    ms, sg = marginal_prob(schedule, t)
    ms, sg = float(ms), float(sg)
    log_dens = []
    grad_terms = []
    for w, mean, std in mixture:
        mean = np.asarray(mean, dtype=float)
        var = ms * ms * std * std + sg * sg
        diff = a_t - ms * mean
        sq = np.sum(diff * diff, axis=1)
        log_dens.append(math.log(w) - 0.5 * sq / var - 0.5 * d * math.log(2 * math.pi * var))
        grad_terms.append(-diff / var)
    log_dens = np.stack(log_dens, axis=1)
    log_dens -= log_dens.max(axis=1, keepdims=True)
    resp = np.exp(log_dens)
    resp /= resp.sum(axis=1, keepdims=True)
    score = np.zeros_like(a_t)
    for k in range(len(mixture)):
        score += resp[:, k:k + 1] * grad_terms[k]
    return score
