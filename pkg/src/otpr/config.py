"""Flat-namespaced run configuration: `key = value` lines, typed, closed-world.

Every key must appear in SCHEMA (unknown keys are hard errors, catching typos);
values are parsed per the declared type. The full key list is documented in
docs/config.md.
"""

from __future__ import annotations

from .errors import ConfigError


def _bool(s):
    if s in ("true", "True", "1"):
        return True
    if s in ("false", "False", "0"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


# key -> (parser, default)
SCHEMA = {
    "seed": (int, 0),
    "quiet": (_bool, False),

    "env.name": (str, "pointmass"),
    "env.reward": (str, "sparse"),

    "buffer.capacity": (int, 250000),
    "buffer.pin_expert": (_bool, True),

    "schedule.kind": (str, "VP"),
    "schedule.beta_min": (float, 0.1),
    "schedule.beta_max": (float, 20.0),
    "schedule.sigma_min": (float, 0.01),
    "schedule.sigma_max": (float, 10.0),
    "sampler.kind": (str, "ddim"),
    "sampler.steps": (int, 20),

    "pretrain.demos": (int, 20),
    "pretrain.demo_seed": (int, 0),
    "pretrain.epochs": (int, 2000),
    "pretrain.batch": (int, 128),
    "pretrain.lr": (float, 1e-5),
    "pretrain.hidden": (int, 128),
    "pretrain.depth": (int, 2),
    "pretrain.eval_episodes": (int, 50),

    "finetune.outer_iters": (int, 200),
    "finetune.episodes_per_iter": (int, 10),
    "finetune.eval_episodes": (int, 10),
    "finetune.L": (int, 8),
    "finetune.guidance": (str, "H"),
    "finetune.score_loss": (str, "hdsm"),
    "finetune.masked": (_bool, True),
    "finetune.score_steps": (int, 200),
    "finetune.score_batch": (int, 128),
    "finetune.score_lr": (float, 1e-5),
    "finetune.expert_frac": (float, 0.5),  # demo share in score-model batches
    "finetune.stop_success": (float, -1.0),
    "finetune.stop_patience": (int, 3),

    "dual.lam": (float, 0.05),
    "dual.batch": (int, 64),
    "dual.lr": (float, 1e-3),
    "dual.iters": (int, 500),
    "dual.hidden": (int, 64),
    "dual.clip": (float, 10.0),
    "dual.mix_expert": (_bool, False),
    "dual.cost_mode": (str, "weighted_sum"),
    "dual.cost_norm": (str, "zscore"),
    "dual.w_negq": (float, 1.0),
    "dual.w_relation": (float, 1.0),
    "dual.max_keypoints": (int, 128),
    "dual.stats_pool": (int, 256),

    "critic.hidden": (int, 64),
    "critic.layers": (int, 2),
    "critic.batch": (int, 256),
    "critic.steps": (int, 200),
    "critic.warmup": (int, 3000),  # offline IQL steps on demo data before the loop
    "critic.lr": (float, 3e-4),
    "critic.polyak": (float, 0.02),
    "critic.kappa": (float, -1.0),  # negative: pick 0.99 dense / 0.999 sparse
    "critic.tau": (float, 0.7),

    "eval.episodes": (int, 100),

    "otdebug.n": (int, 8),
    "otdebug.m": (int, 8),
    "otdebug.lam": (float, 0.05),
    "otdebug.iters": (int, 3000),
    "otdebug.lr": (float, 5e-3),

    "ablate.guidances": (str, "H,Q,A"),
    "ablate.masked": (str, "true,false"),
    "ablate.seeds": (str, "0,1,2,3,4"),
}


def default_config():
    return {key: default for key, (_, default) in SCHEMA.items()}


def parse_value(key, raw):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    parser, _ = SCHEMA[key]
    try:
        return parser(raw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from exc


def parse_config_text(text):
    cfg = default_config()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        cfg[key] = parse_value(key, raw)
    return cfg


def load_config(path=None, overrides=None):
    """Defaults, optionally updated from a file and then from override pairs."""
    cfg = default_config()
    if path is not None:
        with open(path) as f:
            cfg = parse_config_text(f.read())
    for key, raw in (overrides or {}).items():
        cfg[key] = parse_value(key, str(raw))
    validate_config(cfg)
    return cfg


def resolved_kappa(cfg):
    if cfg["critic.kappa"] > 0:
        return cfg["critic.kappa"]
    return 0.999 if cfg["env.reward"] == "sparse" else 0.99


def validate_config(cfg):
    for key in cfg:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
    if cfg["env.name"] not in ("bandit2d", "pointmass", "multigoal_pointmass"):
        raise ConfigError(f"unknown env {cfg['env.name']!r}")
    if cfg["env.reward"] not in ("dense", "sparse"):
        raise ConfigError(f"unknown reward kind {cfg['env.reward']!r}")
    if cfg["finetune.guidance"] not in ("H", "Q", "A"):
        raise ConfigError("finetune.guidance must be H, Q or A")
    if cfg["finetune.score_loss"] not in ("hdsm", "dsm"):
        raise ConfigError("finetune.score_loss must be hdsm or dsm")
    if cfg["sampler.kind"] not in ("ddim", "euler_maruyama"):
        raise ConfigError("sampler.kind must be ddim or euler_maruyama")
    if cfg["otdebug.n"] * cfg["otdebug.m"] > 4096:
        raise ConfigError("ot-debug instance exceeds 4096 cells")
    return cfg


def config_to_text(cfg):
    """Serialize so that parse_config_text round-trips exactly."""
    lines = []
    for key in SCHEMA:
        val = cfg[key]
        if isinstance(val, bool):
            val = "true" if val else "false"
        elif isinstance(val, float):
            val = repr(val)
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"
