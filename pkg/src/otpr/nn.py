"""Small dense-network engine: exact reverse-mode gradients, Adam, checkpoints.

Everything is float64 numpy and purely functional: parameter containers are
never mutated in place, so a trained net can be shared freely across threads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, FileFormatError, NumericalError, ShapeError

CKPT_MAGIC = b"OTPR-CKPT-1\n"

_ACTIVATIONS = ("tanh", "silu", "relu")


@dataclass(frozen=True)
class ParamSet:
    """Weights and biases of a feed-forward net.

    ``weights[k]`` has shape (fan_in, fan_out); hidden layers use ``activation``,
    the output layer is affine. With ``residual=True`` every hidden layer whose
    input and output widths agree gets a skip connection h' = act(Wh+b) + h.
    """

    layer_sizes: tuple
    activation: str
    weights: tuple = field(repr=False)
    biases: tuple = field(repr=False)
    residual: bool = False

    @property
    def in_dim(self):
        return self.layer_sizes[0]

    @property
    def out_dim(self):
        return self.layer_sizes[-1]

    def n_params(self):
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)


@dataclass(frozen=True)
class AdamState:
    """First/second-moment accumulators plus the step counter."""

    m_w: tuple
    v_w: tuple
    m_b: tuple
    v_b: tuple
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def mlp_init(layer_sizes, activation="tanh", seed=0, residual=False):
    """Build a ParamSet with zero biases and uniform(-1/sqrt(fan_in), +) weights."""
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise ConfigError(f"layer_sizes must have >= 2 positive entries, got {layer_sizes}")
    if activation not in _ACTIVATIONS:
        raise ConfigError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ParamSet(sizes, activation, tuple(weights), tuple(biases), residual)


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "silu":
        return z / (1.0 + np.exp(-z))
    return np.maximum(z, 0.0)


def _act_grad(name, z):
    if name == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    if name == "silu":
        s = 1.0 / (1.0 + np.exp(-z))
        return s * (1.0 + z * (1.0 - s))
    return (z > 0.0).astype(z.dtype)


def _skip_at(params, k):
    # skip only where widths match; never on the output layer
    return (
        params.residual
        and k < len(params.weights) - 1
        and params.layer_sizes[k] == params.layer_sizes[k + 1]
    )


def forward_batch(params, x):
    """Run a batch (B, in_dim) through the net; returns (output, cache)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ShapeError(f"expected input (*, {params.in_dim}), got {x.shape}")
    h = x
    inputs, preacts = [], []
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w + b
        preacts.append(z)
        if k == last:
            h = z
        else:
            a = _act(params.activation, z)
            h = a + inputs[k] if _skip_at(params, k) else a
    return h, (inputs, preacts)


def backward_batch(params, cache, upstream):
    """Exact reverse-mode gradients of <upstream, output> summed over the batch.

    Returns (grads: ParamSet-shaped, input_grads: (B, in_dim)).
    """
    inputs, preacts = cache
    g = np.asarray(upstream, dtype=float)
    if g.shape != (inputs[0].shape[0], params.out_dim):
        raise ShapeError(f"upstream shape {g.shape} does not match output")
    gw = [None] * len(params.weights)
    gb = [None] * len(params.biases)
    last = len(params.weights) - 1
    for k in range(last, -1, -1):
        dz = g if k == last else _act_grad(params.activation, preacts[k]) * g
        gw[k] = inputs[k].T @ dz
        gb[k] = dz.sum(axis=0)
        g_prev = dz @ params.weights[k].T
        if k != last and _skip_at(params, k):
            g_prev = g_prev + g
        g = g_prev
    grads = ParamSet(params.layer_sizes, params.activation, tuple(gw), tuple(gb), params.residual)
    return grads, g


def forward(params, x):
    """Network value for a single vector or a (B, in_dim) batch."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    out, _ = forward_batch(params, x[None, :] if single else x)
    return out[0] if single else out


def forward_with_grad(params, x, upstream):
    """Single-vector forward plus exact gradients of <upstream, output>."""
    x = np.asarray(x, dtype=float)
    upstream = np.asarray(upstream, dtype=float)
    if x.ndim != 1 or upstream.ndim != 1:
        raise ShapeError("forward_with_grad expects 1-d input and upstream")
    out, cache = forward_batch(params, x[None, :])
    grads, gin = backward_batch(params, cache, upstream[None, :])
    return out[0], grads, gin[0]


def zeros_like_params(params):
    return ParamSet(
        params.layer_sizes,
        params.activation,
        tuple(np.zeros_like(w) for w in params.weights),
        tuple(np.zeros_like(b) for b in params.biases),
        params.residual,
    )


def adam_init(params, beta1=0.9, beta2=0.999, eps=1e-8):
    z = zeros_like_params(params)
    return AdamState(z.weights, z.biases, tuple(np.zeros_like(b) for b in params.biases),
                     tuple(np.zeros_like(b) for b in params.biases), 0, beta1, beta2, eps)


def adam_step(state, params, grads, lr):
    """One bias-corrected Adam update; returns (new_params, new_state)."""
    if lr <= 0:
        raise ConfigError("lr must be positive")
    for g in list(grads.weights) + list(grads.biases):
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient entries")
    t = state.step + 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t

    def upd(p, g, m, v):
        m2 = b1 * m + (1.0 - b1) * g
        v2 = b2 * v + (1.0 - b2) * g * g
        p2 = p - lr * (m2 / c1) / (np.sqrt(v2 / c2) + eps)
        return p2, m2, v2

    new_w, new_mw, new_vw = [], [], []
    for p, g, m, v in zip(params.weights, grads.weights, state.m_w, state.v_w):
        p2, m2, v2 = upd(p, g, m, v)
        new_w.append(p2)
        new_mw.append(m2)
        new_vw.append(v2)
    new_b, new_mb, new_vb = [], [], []
    for p, g, m, v in zip(params.biases, grads.biases, state.m_b, state.v_b):
        p2, m2, v2 = upd(p, g, m, v)
        new_b.append(p2)
        new_mb.append(m2)
        new_vb.append(v2)
    new_params = ParamSet(params.layer_sizes, params.activation, tuple(new_w), tuple(new_b),
                          params.residual)
    new_state = AdamState(tuple(new_mw), tuple(new_vw), tuple(new_mb), tuple(new_vb),
                          t, b1, b2, eps)
    return new_params, new_state


def scale_grads(grads, c):
    return ParamSet(grads.layer_sizes, grads.activation,
                    tuple(c * w for w in grads.weights),
                    tuple(c * b for b in grads.biases), grads.residual)


def add_grads(a, b):
    return ParamSet(a.layer_sizes, a.activation,
                    tuple(x + y for x, y in zip(a.weights, b.weights)),
                    tuple(x + y for x, y in zip(a.biases, b.biases)), a.residual)


def grad_norm(grads):
    sq = sum(float(np.sum(w * w)) for w in grads.weights)
    sq += sum(float(np.sum(b * b)) for b in grads.biases)
    return math.sqrt(sq)


def clip_grads(grads, max_norm):
    n = grad_norm(grads)
    if n <= max_norm or n == 0.0:
        return grads
    return scale_grads(grads, max_norm / n)


def flatten_params(params):
    parts = []
    for w, b in zip(params.weights, params.biases):
        parts.append(w.ravel())
        parts.append(b.ravel())
    return np.concatenate(parts) if parts else np.zeros(0)


def unflatten_params(params, flat):
    flat = np.asarray(flat, dtype=float)
    if flat.size != params.n_params():
        raise ShapeError("flat vector has the wrong length")
    weights, biases = [], []
    i = 0
    for w, b in zip(params.weights, params.biases):
        weights.append(flat[i:i + w.size].reshape(w.shape))
        i += w.size
        biases.append(flat[i:i + b.size].reshape(b.shape))
        i += b.size
    return ParamSet(params.layer_sizes, params.activation, tuple(weights), tuple(biases),
                    params.residual)


@dataclass(frozen=True)
class FiniteDiffReport:
    max_rel_err: float
    passed: bool
    n_checked: int
    worst_index: int


def finite_diff_check(loss_fn, params, tol, step=1e-5, n_coords=40, seed=0):
    """Compare analytic gradients from ``loss_fn`` against central differences.

    ``loss_fn(params)`` must return (scalar, ParamSet-shaped grads). A fixed
    random coordinate subset keeps the check cheap for larger nets.
    """
    if tol <= 0:
        raise ConfigError("tol must be positive")
    _, grads = loss_fn(params)
    flat_g = flatten_params(grads)
    flat_p = flatten_params(params)
    n = flat_p.size
    rng = np.random.default_rng(seed)
    idx = np.arange(n) if n <= n_coords else np.sort(rng.choice(n, size=n_coords, replace=False))
    max_err, worst = 0.0, -1
    for i in idx:
        p_plus = flat_p.copy()
        p_plus[i] += step
        p_minus = flat_p.copy()
        p_minus[i] -= step
        f_plus, _ = loss_fn(unflatten_params(params, p_plus))
        f_minus, _ = loss_fn(unflatten_params(params, p_minus))
        fd = (f_plus - f_minus) / (2.0 * step)
        err = abs(flat_g[i] - fd) / max(abs(flat_g[i]), abs(fd), 1e-8)
        if err > max_err:
            max_err, worst = err, int(i)
    return FiniteDiffReport(max_err, max_err <= tol, len(idx), worst)


def save_checkpoint(path, nets, extra=None):
    """Write named ParamSets to a single self-describing binary file."""
    order = list(nets.keys())
    meta = {
        "order": order,
        "nets": {
            name: {
                "layer_sizes": list(nets[name].layer_sizes),
                "activation": nets[name].activation,
                "residual": nets[name].residual,
            }
            for name in order
        },
        "extra": extra or {},
    }
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write((json.dumps(meta) + "\n").encode("utf-8"))
        for name in order:
            f.write(flatten_params(nets[name]).astype("<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (nets dict, extra dict)."""
    with open(path, "rb") as f:
        magic = f.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise FileFormatError(f"{path}: bad checkpoint header")
        meta = json.loads(f.readline().decode("utf-8"))
        nets = {}
        for name in meta["order"]:
            info = meta["nets"][name]
            proto = mlp_init(info["layer_sizes"], info["activation"], seed=0,
                             residual=info["residual"])
            raw = f.read(proto.n_params() * 8)
            if len(raw) != proto.n_params() * 8:
                raise FileFormatError(f"{path}: truncated parameter block for {name!r}")
            flat = np.frombuffer(raw, dtype="<f8").astype(float)
            nets[name] = unflatten_params(proto, flat)
    return nets, meta.get("extra", {})


def polyak_update(target, online, rate):
    """target <- (1 - rate) * target + rate * online, returned as a new ParamSet."""
    return ParamSet(
        target.layer_sizes,
        target.activation,
        tuple((1.0 - rate) * tw + rate * ow for tw, ow in zip(target.weights, online.weights)),
        tuple((1.0 - rate) * tb + rate * ob for tb, ob in zip(target.biases, online.biases)),
        target.residual,
    )


def copy_params(params):
    return replace(params,
                   weights=tuple(w.copy() for w in params.weights),
                   biases=tuple(b.copy() for b in params.biases))
