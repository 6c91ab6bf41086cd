import csv
import json

import numpy as np
import pytest

from otpr import cli, config as cfgmod, envs, harness, nn
from otpr.errors import ConfigError

TINY = {
    "pretrain.epochs": "20", "pretrain.demos": "3", "pretrain.eval_episodes": "4",
    "pretrain.lr": "3e-4",
    "finetune.outer_iters": "2", "finetune.episodes_per_iter": "2",
    "finetune.eval_episodes": "3", "finetune.score_steps": "5",
    "dual.iters": "10", "dual.batch": "8", "critic.steps": "10",
    "critic.warmup": "20", "buffer.capacity": "2000", "quiet": "true",
}


def tiny_cfg(**extra):
    o = dict(TINY)
    o.update({k: str(v) for k, v in extra.items()})
    return cfgmod.load_config(overrides=o)


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------

def test_config_defaults_complete():
    cfg = cfgmod.default_config()
    assert set(cfg) == set(cfgmod.SCHEMA)


def test_config_unknown_key_rejected():
    with pytest.raises(ConfigError):
        cfgmod.parse_config_text("dual.lambda = 0.5\n")


def test_config_bad_value_rejected():
    with pytest.raises(ConfigError):
        cfgmod.parse_config_text("dual.iters = many\n")
    with pytest.raises(ConfigError):
        cfgmod.parse_config_text("quiet = maybe\n")


def test_config_parses_types_and_comments():
    cfg = cfgmod.parse_config_text(
        "# comment line\n"
        "dual.lam = 0.25   # inline comment\n"
        "finetune.masked = false\n"
        "env.name = bandit2d\n")
    assert cfg["dual.lam"] == 0.25
    assert cfg["finetune.masked"] is False
    assert cfg["env.name"] == "bandit2d"


def test_config_text_roundtrip():
    cfg = cfgmod.default_config()
    cfg["dual.lam"] = 0.125
    cfg["finetune.guidance"] = "Q"
    cfg["quiet"] = True
    again = cfgmod.parse_config_text(cfgmod.config_to_text(cfg))
    assert again == cfg


def test_config_validation_guards():
    with pytest.raises(ConfigError):
        cfgmod.load_config(overrides={"env.name": "atari"})
    with pytest.raises(ConfigError):
        cfgmod.load_config(overrides={"finetune.guidance": "Z"})
    with pytest.raises(ConfigError):
        cfgmod.load_config(overrides={"otdebug.n": "65", "otdebug.m": "64"})


def test_resolved_kappa_by_reward_kind():
    sparse = cfgmod.load_config(overrides={"env.reward": "sparse"})
    dense = cfgmod.load_config(overrides={"env.reward": "dense"})
    assert cfgmod.resolved_kappa(sparse) == 0.999
    assert cfgmod.resolved_kappa(dense) == 0.99
    explicit = cfgmod.load_config(overrides={"critic.kappa": "0.5"})
    assert cfgmod.resolved_kappa(explicit) == 0.5


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------

def test_pretrain_zero_epochs_equals_init(tmp_path):
    cfg = tiny_cfg(**{"pretrain.epochs": 0})
    out = harness.cmd_pretrain(cfg, str(tmp_path / "pre"))
    nets, _, _ = harness.load_policy_checkpoint(out["checkpoint"])
    from otpr import diffusion as df
    spec = envs.make_env(cfg["env.name"], cfg["env.reward"])
    init = df.score_model_init(spec.state_dim, spec.action_dim,
                               hidden=cfg["pretrain.hidden"],
                               depth=cfg["pretrain.depth"], seed=cfg["seed"])
    assert np.array_equal(nn.flatten_params(nets["score"]), nn.flatten_params(init))


def test_pretrain_deterministic_curves(tmp_path):
    cfg = tiny_cfg()
    harness.cmd_pretrain(cfg, str(tmp_path / "a"))
    harness.cmd_pretrain(cfg, str(tmp_path / "b"))
    a = (tmp_path / "a" / "pretrain_curve.csv").read_text()
    b = (tmp_path / "b" / "pretrain_curve.csv").read_text()
    assert a == b
    assert a.splitlines()[0] == "epoch,loss"


# ---------------------------------------------------------------------------
# finetune plumbing
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    out = tmp_path_factory.mktemp("pre")
    cfg = tiny_cfg()
    summary = harness.cmd_pretrain(cfg, str(out))
    return cfg, summary["checkpoint"]


def test_finetune_metrics_csv_shape(pretrained, tmp_path):
    cfg, ckpt = pretrained
    summary = harness.cmd_finetune(cfg, ckpt, str(tmp_path / "ft"))
    with open(summary["metrics_csv"]) as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 2
    assert list(rows[0]) == harness.METRICS_HEADER.split(",")
    for row in rows:
        for col in harness.METRICS_HEADER.split(","):
            float(row[col])  # parseable numbers throughout
    assert int(rows[1]["iter"]) == 2
    curve = (tmp_path / "ft" / "dual_curve.csv").read_text().splitlines()
    assert curve[0] == "outer_iter,inner_iter,dual_objective"
    assert len(curve) == 1 + 2 * cfg["dual.iters"]


def test_finetune_summary_echoes_config(pretrained, tmp_path):
    cfg, ckpt = pretrained
    summary = harness.cmd_finetune(cfg, ckpt, str(tmp_path / "ft"))
    assert summary["version"] == "otpr-run-1"
    assert summary["config"] == dict(cfg)
    with open(tmp_path / "ft" / "run_summary.json") as f:
        on_disk = json.load(f)
    assert on_disk["rows"] == summary["rows"]
    # the echoed config round-trips through the text format
    echoed = cfgmod.parse_config_text(cfgmod.config_to_text(summary["config"]))
    assert echoed == dict(cfg)


def test_finetune_env_mismatch_rejected(pretrained, tmp_path):
    cfg, ckpt = pretrained
    bad = dict(cfg)
    bad["env.name"] = "bandit2d"
    with pytest.raises(ConfigError):
        harness.cmd_finetune(bad, ckpt, str(tmp_path / "ft"))


def test_finetune_aborts_on_nan(pretrained, tmp_path, monkeypatch):
    cfg, ckpt = pretrained
    from otpr import diffusion as df
    from otpr.errors import NumericalError
    real = df.weighted_dsm_loss

    def poisoned(*args, **kwargs):
        loss, grads, flag = real(*args, **kwargs)
        return float("nan"), grads, flag

    monkeypatch.setattr(df, "weighted_dsm_loss", poisoned)
    monkeypatch.setattr(harness.df, "weighted_dsm_loss", poisoned)
    with pytest.raises(NumericalError):
        harness.cmd_finetune(cfg, ckpt, str(tmp_path / "ft"))
    assert (tmp_path / "ft" / "abort_diagnostic.json").exists()


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def test_eval_rejects_zero_episodes(pretrained):
    _, ckpt = pretrained
    with pytest.raises(ConfigError):
        harness.cmd_eval(ckpt, 0, seed=0)


def test_eval_deterministic(pretrained):
    _, ckpt = pretrained
    a = harness.cmd_eval(ckpt, 5, seed=3)
    b = harness.cmd_eval(ckpt, 5, seed=3)
    assert a == b
    assert a["return_ci95"][0] <= a["mean_return"] <= a["return_ci95"][1]


def test_eval_actor_with_expert_oracle():
    spec = envs.make_env("pointmass", "sparse")
    returns, successes = harness.eval_actor(
        spec, lambda s, seed: envs.expert_policy(spec, s), episodes=40, seed=0)
    assert successes.mean() >= 0.95
    del returns


# ---------------------------------------------------------------------------
# ot-debug
# ---------------------------------------------------------------------------

def test_ot_debug_csv(tmp_path):
    cfg = cfgmod.load_config(overrides={
        "otdebug.n": "2", "otdebug.m": "2", "otdebug.iters": "2000",
        "otdebug.lam": "0.05", "quiet": "true"})
    result = harness.cmd_ot_debug(cfg, str(tmp_path))
    with open(result["csv"]) as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 4
    assert result["oracle_converged"]
    # oracle column sums reproduce the marginal
    col0 = sum(float(r["plan_oracle"]) for r in rows if r["j"] == "0")
    assert col0 == pytest.approx(0.5, abs=1e-6)


def test_ot_debug_h_tracks_plan(tmp_path):
    cfg = cfgmod.load_config(overrides={
        "otdebug.n": "6", "otdebug.m": "6", "otdebug.iters": "4000",
        "otdebug.lam": "0.05", "quiet": "true"})
    result = harness.cmd_ot_debug(cfg, str(tmp_path))
    assert result["pearson_h_plan"] >= 0.9


def test_ot_debug_rejects_oversize(tmp_path):
    cfg = cfgmod.default_config()
    cfg["otdebug.n"], cfg["otdebug.m"] = 65, 64
    with pytest.raises(ConfigError):
        harness.cmd_ot_debug(cfg, str(tmp_path))


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def test_cli_config_error_exit_code(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("no.such.key = 1\n")
    code = cli.main(["--config", str(bad), "--out", str(tmp_path / "o"), "pretrain"])
    assert code == cli.EXIT_CONFIG


def test_cli_io_error_exit_code(tmp_path):
    code = cli.main(["eval", "--ckpt", str(tmp_path / "missing.ckpt"),
                     "--episodes", "1"])
    assert code == cli.EXIT_IO


def test_cli_ot_debug_runs(tmp_path, capsys):
    cfgfile = tmp_path / "cfg.txt"
    cfgfile.write_text("otdebug.n = 2\notdebug.m = 2\notdebug.iters = 500\n")
    code = cli.main(["--config", str(cfgfile), "--out", str(tmp_path / "o"),
                     "--quiet", "ot-debug"])
    assert code == 0
    assert (tmp_path / "o" / "ot_debug.csv").exists()


def test_cli_seed_override(tmp_path):
    cfgfile = tmp_path / "cfg.txt"
    cfgfile.write_text("\n".join(f"{k} = {v}" for k, v in TINY.items()) + "\n")
    code = cli.main(["--config", str(cfgfile), "--seed", "7",
                     "--out", str(tmp_path / "o"), "pretrain"])
    assert code == 0
    with open(tmp_path / "o" / "pretrain_summary.json") as f:
        assert json.load(f)["config"]["seed"] == 7
