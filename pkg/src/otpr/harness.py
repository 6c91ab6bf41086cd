"""Run orchestration: pretrain, finetune, eval, ablate and ot-debug commands.

Outputs per run directory:
  metrics.csv          one row per outer iteration (crash-safe append)
  dual_curve.csv       inner dual-ascent objective trace
  pretrain_curve.csv   per-epoch pretraining loss
  run_summary.json     RunSummary ("otpr-run-1"): rows, wall time, config echo
  *.ckpt / demos.bin   checkpoints and demo data

Every random draw derives from the config seed, so a rerun with the same
config file reproduces the same metrics (wall_s excepted).
"""

from __future__ import annotations

import json
import math
import os
import time
import zlib
from dataclasses import replace

import numpy as np

from . import config as cfgmod
from . import diffusion as df
from . import envs, nn, ot
from . import policy as pol
from . import potentials as pt
from . import rl
from .errors import ConfigError, NumericalError

METRICS_HEADER = "iter,env_steps,mean_return,success_rate,dual_obj,critic_loss,score_loss,wall_s"
RUN_SUMMARY_VERSION = "otpr-run-1"


def _int_seed(base, *parts):
    """Stable derived integer seed for a named stream (crc32 for string parts)."""
    key = tuple(zlib.crc32(p.encode()) if isinstance(p, str) else int(p) for p in parts)
    ss = np.random.SeedSequence(entropy=int(base), spawn_key=key)
    return int(ss.generate_state(1)[0])


def _rng(base, *parts):
    return np.random.default_rng(_int_seed(base, *parts))


def schedule_from_cfg(cfg):
    return df.DiffusionSchedule(
        kind=cfg["schedule.kind"], beta_min=cfg["schedule.beta_min"],
        beta_max=cfg["schedule.beta_max"], sigma_min=cfg["schedule.sigma_min"],
        sigma_max=cfg["schedule.sigma_max"], sampler_steps=cfg["sampler.steps"])


def env_from_cfg(cfg):
    return envs.make_env(cfg["env.name"], cfg["env.reward"])


def build_keypoints(demos, max_n, seed, tol=1e-6):
    """Keypoint set from demo pairs (subsampled when large) plus per-pair ids."""
    s, a = demos.pairs()
    n = s.shape[0]
    ids = np.full(n, -1, dtype=np.int64)
    if n <= max_n:
        chosen = np.arange(n)
    else:
        chosen = np.sort(np.random.default_rng(seed).choice(n, size=max_n, replace=False))
    ids[chosen] = np.arange(chosen.size)
    kp = ot.KeypointSet(s[chosen], a[chosen], match_tolerance=tol)
    return kp, ids


def _check_finite(name, value, out_dir, context):
    if not np.all(np.isfinite(value)):
        diag = {"metric": name, "context": context}
        if out_dir is not None:
            with open(os.path.join(out_dir, "abort_diagnostic.json"), "w") as f:
                json.dump(diag, f, indent=2)
        raise NumericalError(f"non-finite {name} ({context})")


def eval_actor(spec, act_fn, episodes, seed):
    """Roll ``act_fn(state, act_seed)`` for a batch of seeded episodes."""
    if episodes < 1:
        raise ConfigError("need at least one evaluation episode")
    returns, successes = [], []
    for ep in range(episodes):
        traj = envs.rollout(
            spec, lambda s, k: act_fn(s, _int_seed(seed, "evact", ep, k)),
            _int_seed(seed, "evreset", ep))
        returns.append(float(traj.rewards.sum()))
        successes.append(traj.success)
    return np.array(returns), np.array(successes, dtype=bool)


def eval_policy(score_net, schedule, spec, episodes, seed, sampler="ddim"):
    """Eval-mode rollouts (single-sample path); returns per-episode returns/successes."""
    policy = pol.OtprPolicy(score_net=score_net, schedule=schedule, mode="eval",
                            sampler=sampler, action_low=spec.action_low,
                            action_high=spec.action_high)
    return eval_actor(spec, lambda s, act_seed: pol.act(policy, s, act_seed),
                      episodes, seed)


def _guidance_weights(guidance, dual, critic, q_fn, batch):
    """Per-sample weights for the weighted score loss, per guidance arm.

    H uses the compatibility values as given; the Q/A ablations use
    exponentiated critic scores (advantage-weighted-regression style),
    normalized to batch mean 1.
    """
    if guidance == "H":
        return pt.h_pairs(dual, q_fn, batch.s, batch.a, batch.kp_id, batch.kp_id)
    q = np.asarray(q_fn(batch.s, batch.a), dtype=float)
    if guidance == "A":
        q = q - rl.v_values(critic.v_net, batch.s)
    w = np.exp(q - q.max())
    return w / w.mean()


def _ckpt_extra(cfg, spec, kind):
    return {
        "kind": kind,
        "env_name": spec.name,
        "env_reward": spec.reward_kind,
        "state_dim": spec.state_dim,
        "action_dim": spec.action_dim,
        "schedule": {k: cfg[k] for k in ("schedule.kind", "schedule.beta_min",
                                         "schedule.beta_max", "schedule.sigma_min",
                                         "schedule.sigma_max", "sampler.steps")},
        "sampler": cfg["sampler.kind"],
    }


def load_policy_checkpoint(path):
    nets, extra = nn.load_checkpoint(path)
    sch = extra["schedule"]
    schedule = df.DiffusionSchedule(
        kind=sch["schedule.kind"], beta_min=sch["schedule.beta_min"],
        beta_max=sch["schedule.beta_max"], sigma_min=sch["schedule.sigma_min"],
        sigma_max=sch["schedule.sigma_max"], sampler_steps=sch["sampler.steps"])
    return nets, schedule, extra


def cmd_pretrain(cfg, out_dir):
    """Behavior-clone the score model on expert demos via DSM."""
    os.makedirs(out_dir, exist_ok=True)
    t0 = time.time()
    seed = cfg["seed"]
    spec = env_from_cfg(cfg)
    demos = envs.generate_demos(spec, cfg["pretrain.demos"], cfg["pretrain.demo_seed"])
    envs.save_demos(os.path.join(out_dir, "demos.bin"), spec, demos)
    schedule = schedule_from_cfg(cfg)
    score = df.score_model_init(spec.state_dim, spec.action_dim,
                                hidden=cfg["pretrain.hidden"],
                                depth=cfg["pretrain.depth"], seed=seed)
    adam = nn.adam_init(score)
    states, actions = demos.pairs()
    rng = _rng(seed, "pretrain")
    curve_path = os.path.join(out_dir, "pretrain_curve.csv")
    with open(curve_path, "w") as curve:
        curve.write("epoch,loss\n")
        for epoch in range(cfg["pretrain.epochs"]):
            perm = rng.permutation(states.shape[0])
            losses = []
            for start in range(0, states.shape[0], cfg["pretrain.batch"]):
                idx = perm[start:start + cfg["pretrain.batch"]]
                loss, grads = df.dsm_loss(score, states[idx], actions[idx], schedule, rng)
                _check_finite("pretrain_loss", loss, out_dir, f"epoch {epoch}")
                score, adam = nn.adam_step(adam, score, grads, cfg["pretrain.lr"])
                losses.append(loss)
            curve.write(f"{epoch},{np.mean(losses)!r}\n")
            curve.flush()
    ckpt_path = os.path.join(out_dir, "pretrained.ckpt")
    nn.save_checkpoint(ckpt_path, {"score": score}, extra=_ckpt_extra(cfg, spec, "pretrain"))
    returns, successes = eval_policy(score, schedule, spec,
                                     cfg["pretrain.eval_episodes"],
                                     _int_seed(seed, "pre-eval"),
                                     sampler=cfg["sampler.kind"])
    summary = {
        "version": RUN_SUMMARY_VERSION,
        "kind": "pretrain",
        "success_rate": float(successes.mean()),
        "mean_return": float(returns.mean()),
        "wall_s": time.time() - t0,
        "checkpoint": ckpt_path,
        "demos": os.path.join(out_dir, "demos.bin"),
        "config": dict(cfg),
    }
    with open(os.path.join(out_dir, "pretrain_summary.json"), "w") as f:
        json.dump(summary, f, indent=2)
    if not cfg["quiet"]:
        print(f"pretrain: success={summary['success_rate']:.2f} "
              f"return={summary['mean_return']:.3f} ckpt={ckpt_path}")
    return summary


def cmd_finetune(cfg, checkpoint_path, out_dir):
    """Online fine-tuning loop: dual ascent, rollouts, critic, score updates."""
    os.makedirs(out_dir, exist_ok=True)
    t0 = time.time()
    seed = cfg["seed"]
    nets, schedule, extra = load_policy_checkpoint(checkpoint_path)
    score = nets["score"]
    spec = env_from_cfg(cfg)
    if extra.get("env_name") != spec.name:
        raise ConfigError(f"checkpoint env {extra.get('env_name')!r} != config env {spec.name!r}")
    adam = nn.adam_init(score)

    demos = envs.generate_demos(spec, cfg["pretrain.demos"], cfg["pretrain.demo_seed"])
    buffer = rl.ReplayBuffer(cfg["buffer.capacity"], spec.state_dim, spec.action_dim,
                             pin_expert=cfg["buffer.pin_expert"])
    masked = cfg["finetune.masked"]
    keypoints, kp_ids = (build_keypoints(demos, cfg["dual.max_keypoints"],
                                         _int_seed(seed, "kp"))
                         if masked else (None, None))
    for idx, (s, a, r, s2, done) in enumerate(envs.replay_transitions(spec, demos)):
        buffer.push(s, a, r, s2, done, expert=True,
                    kp_id=int(kp_ids[idx]) if masked else -1)

    critic = rl.critic_init(spec.state_dim, spec.action_dim,
                            hidden=(cfg["critic.hidden"],) * cfg["critic.layers"],
                            kappa=cfgmod.resolved_kappa(cfg),
                            tau_expectile=cfg["critic.tau"],
                            seed=_int_seed(seed, "critic-init"))
    if cfg["critic.warmup"] > 0:
        warm_cfg = rl.CriticConfig(batch_size=min(cfg["critic.batch"], len(buffer)),
                                   steps=cfg["critic.warmup"], lr=cfg["critic.lr"],
                                   polyak=cfg["critic.polyak"],
                                   seed=_int_seed(seed, "critic-warmup"))
        critic, _ = rl.train_critic(critic, buffer, warm_cfg)
    cost_spec = ot.CostSpec(mode=cfg["dual.cost_mode"], weight_negq=cfg["dual.w_negq"],
                            weight_relation=cfg["dual.w_relation"],
                            normalization=cfg["dual.cost_norm"])
    dual = pt.dual_init(spec.state_dim, spec.action_dim, cfg["dual.lam"], cost_spec,
                        hidden=(cfg["dual.hidden"], cfg["dual.hidden"]),
                        keypoints=keypoints, seed=_int_seed(seed, "dual-init"))

    metrics_path = os.path.join(out_dir, "metrics.csv")
    dual_curve_path = os.path.join(out_dir, "dual_curve.csv")
    rows = []
    env_steps = 0
    streak = 0
    stopped_early = False
    with open(metrics_path, "w") as metrics, open(dual_curve_path, "w") as dual_curve:
        metrics.write(METRICS_HEADER + "\n")
        dual_curve.write("outer_iter,inner_iter,dual_objective\n")
        for it in range(1, cfg["finetune.outer_iters"] + 1):
            q_fn = rl.critic_q_fn(critic)
            if cost_spec.normalization == "zscore":
                pool = buffer.sample(min(cfg["dual.stats_pool"], len(buffer)),
                                     _rng(seed, "stats", it))
                dual = replace(dual, cost_stats=ot.compute_cost_stats(q_fn, pool.s, pool.a))
            dual_cfg = pt.DualTrainConfig(
                batch_size=min(cfg["dual.batch"], len(buffer)), lr=cfg["dual.lr"],
                iterations=cfg["dual.iters"], seed=_int_seed(seed, "dual", it),
                clip_norm=cfg["dual.clip"], mix_expert_actions=cfg["dual.mix_expert"])
            dual, hist = pt.train_potentials(dual, buffer, q_fn, dual_cfg)
            for k, obj in enumerate(hist):
                dual_curve.write(f"{it},{k},{obj!r}\n")
            dual_curve.flush()
            dual_obj = float(np.mean(hist)) if hist else 0.0
            _check_finite("dual_objective", dual_obj, out_dir, f"iter {it}")

            policy = pol.OtprPolicy(
                score_net=score, schedule=schedule, dual=dual, critic=critic,
                n_proposals=cfg["finetune.L"], guidance=cfg["finetune.guidance"],
                mode="train", sampler=cfg["sampler.kind"],
                action_low=spec.action_low, action_high=spec.action_high)
            for ep in range(cfg["finetune.episodes_per_iter"]):
                state = envs.env_reset(spec, _int_seed(seed, "reset", it, ep))
                for k in range(spec.horizon):
                    a = pol.act(policy, state, _int_seed(seed, "act", it, ep, k))
                    s2, r, done, _ = envs.env_step(spec, state, a)
                    buffer.push(state, a, r, s2, done)
                    env_steps += 1
                    state = s2
                    if done:
                        break

            critic_cfg = rl.CriticConfig(
                batch_size=min(cfg["critic.batch"], len(buffer)),
                steps=cfg["critic.steps"], lr=cfg["critic.lr"],
                polyak=cfg["critic.polyak"], seed=_int_seed(seed, "criticfit", it))
            critic, cstats = rl.train_critic(critic, buffer, critic_cfg)
            _check_finite("critic_loss", cstats["q_loss"], out_dir, f"iter {it}")

            q_fn = rl.critic_q_fn(critic)
            rng_score = _rng(seed, "score", it)
            score_losses = []
            for _ in range(cfg["finetune.score_steps"]):
                batch = buffer.sample_stratified(
                    min(cfg["finetune.score_batch"], len(buffer)),
                    cfg["finetune.expert_frac"], rng_score)
                if cfg["finetune.score_loss"] == "hdsm":
                    weights = _guidance_weights(cfg["finetune.guidance"], dual, critic,
                                                q_fn, batch)
                    loss, grads, degenerate = df.weighted_dsm_loss(
                        score, batch.s, batch.a, weights, schedule, rng_score)
                    if degenerate:
                        score_losses.append(0.0)
                        continue
                else:
                    loss, grads = df.dsm_loss(score, batch.s, batch.a, schedule, rng_score)
                _check_finite("score_loss", loss, out_dir, f"iter {it}")
                score, adam = nn.adam_step(adam, score, grads, cfg["finetune.score_lr"])
                score_losses.append(loss)
            score_loss = float(np.mean(score_losses)) if score_losses else 0.0

            returns, successes = eval_policy(score, schedule, spec,
                                             cfg["finetune.eval_episodes"],
                                             _int_seed(seed, "eval", it),
                                             sampler=cfg["sampler.kind"])
            mean_return = float(returns.mean())
            success_rate = float(successes.mean())
            wall = time.time() - t0
            row = {"iter": it, "env_steps": env_steps, "mean_return": mean_return,
                   "success_rate": success_rate, "dual_obj": dual_obj,
                   "critic_loss": cstats["q_loss"], "score_loss": score_loss,
                   "wall_s": wall}
            rows.append(row)
            metrics.write(f"{it},{env_steps},{mean_return!r},{success_rate!r},"
                          f"{dual_obj!r},{cstats['q_loss']!r},{score_loss!r},"
                          f"{wall:.3f}\n")
            metrics.flush()
            if not cfg["quiet"]:
                print(f"iter {it}: success={success_rate:.2f} return={mean_return:.3f} "
                      f"dual={dual_obj:.4f}")
            threshold = cfg["finetune.stop_success"]
            if threshold >= 0.0:
                streak = streak + 1 if success_rate >= threshold else 0
                if streak >= cfg["finetune.stop_patience"]:
                    stopped_early = True
                    break

    ckpt_path = os.path.join(out_dir, "finetuned.ckpt")
    nn.save_checkpoint(ckpt_path, {"score": score, "u": dual.u_net, "v": dual.v_net,
                                   "q": critic.q_net, "value": critic.v_net},
                       extra=_ckpt_extra(cfg, spec, "finetune"))
    summary = {
        "version": RUN_SUMMARY_VERSION,
        "kind": "finetune",
        "rows": rows,
        "iterations_run": len(rows),
        "stopped_early": stopped_early,
        "env_steps": env_steps,
        "final_success_rate": rows[-1]["success_rate"] if rows else None,
        "wall_s": time.time() - t0,
        "checkpoint": ckpt_path,
        "metrics_csv": metrics_path,
        "config": dict(cfg),
    }
    with open(os.path.join(out_dir, "run_summary.json"), "w") as f:
        json.dump(summary, f, indent=2)
    return summary


def cmd_eval(checkpoint_path, episodes, seed, quiet=True):
    """Eval-mode rollouts with a bootstrap 95% CI over episode returns."""
    if episodes < 1:
        raise ConfigError("evaluation needs at least one episode")
    nets, schedule, extra = load_policy_checkpoint(checkpoint_path)
    spec = envs.make_env(extra["env_name"], extra.get("env_reward"))
    returns, successes = eval_policy(nets["score"], schedule, spec, episodes, seed,
                                     sampler=extra.get("sampler", "ddim"))
    rng = np.random.default_rng(_int_seed(seed, "bootstrap"))
    boots = np.array([rng.choice(returns, size=returns.size, replace=True).mean()
                      for _ in range(1000)])
    stats = {
        "episodes": episodes,
        "mean_return": float(returns.mean()),
        "success_rate": float(successes.mean()),
        "return_ci95": [float(np.percentile(boots, 2.5)),
                        float(np.percentile(boots, 97.5))],
    }
    if not quiet:
        print(json.dumps(stats, indent=2))
    return stats


def cmd_ot_debug(cfg, out_dir):
    """Small discrete instance: oracle plan vs dual-trained compatibility, as CSV."""
    os.makedirs(out_dir, exist_ok=True)
    n, m = cfg["otdebug.n"], cfg["otdebug.m"]
    if n * m > 4096:
        raise ConfigError("ot-debug instance exceeds 4096 cells")
    seed = cfg["seed"]
    rng = np.random.default_rng(seed)
    cost = rng.uniform(0.0, 1.0, size=(n, m))
    mu = np.full(n, 1.0 / n)
    nu = np.full(m, 1.0 / m)
    lam = cfg["otdebug.lam"]
    res = ot.exact_plan_oracle(cost, mu, nu, lam)

    buf = rl.ReplayBuffer(max(n, m), n, m)
    eye_n, eye_m = np.eye(n), np.eye(m)
    for i in range(max(n, m)):
        buf.push(eye_n[i % n], eye_m[i % m], 0.0, eye_n[i % n], False)
    q_fn = lambda S, A: -cost[np.argmax(S, axis=1), np.argmax(A, axis=1)]
    u = nn.mlp_init([n, 1], activation="tanh", seed=seed)
    v = nn.mlp_init([m, 1], activation="tanh", seed=seed + 1)
    dual = pt.DualPair(u, v, lam, ot.CostSpec(mode="neg_q", normalization="none"),
                       None, None, None, nn.adam_init(u), nn.adam_init(v))
    dual_cfg = pt.DualTrainConfig(batch_size=min(len(buf), cfg["dual.batch"]),
                                  lr=cfg["otdebug.lr"], iterations=cfg["otdebug.iters"],
                                  seed=seed)
    dual, _ = pt.train_potentials(dual, buf, q_fn, dual_cfg)
    h = pt.h_matrix(dual, q_fn, eye_n, eye_m)
    path = os.path.join(out_dir, "ot_debug.csv")
    ot.write_ot_debug_csv(path, cost, np.ones((n, m)), h, res.plan.gamma)
    hv, pv = h.ravel(), res.plan.gamma.ravel()
    corr = float(np.corrcoef(hv, pv)[0, 1]) if hv.std() > 0 and pv.std() > 0 else math.nan
    result = {"csv": path, "oracle_converged": res.converged,
              "pearson_h_plan": corr,
              "marginal_violation": float(max(np.abs(res.plan.gamma.sum(1) - mu).max(),
                                              np.abs(res.plan.gamma.sum(0) - nu).max()))}
    if not cfg["quiet"]:
        print(json.dumps(result, indent=2))
    return result


def cmd_ablate(cfg, checkpoint_path, out_dir):
    """Guidance x mask grid over seeds; each cell is a full finetune run."""
    os.makedirs(out_dir, exist_ok=True)
    guidances = [g.strip() for g in cfg["ablate.guidances"].split(",") if g.strip()]
    maskeds = [m.strip() == "true" for m in cfg["ablate.masked"].split(",") if m.strip()]
    seeds = [int(s) for s in cfg["ablate.seeds"].split(",") if s.strip()]
    threshold = cfg["finetune.stop_success"]
    runs = []
    for guidance in guidances:
        for masked in maskeds:
            for seed in seeds:
                sub = os.path.join(out_dir, f"g{guidance}_m{int(masked)}_s{seed}")
                run_cfg = dict(cfg)
                run_cfg["finetune.guidance"] = guidance
                run_cfg["finetune.masked"] = masked
                run_cfg["seed"] = seed
                summary = cmd_finetune(run_cfg, checkpoint_path, sub)
                iters_to = None
                if threshold >= 0.0:
                    for row in summary["rows"]:
                        if row["success_rate"] >= threshold:
                            iters_to = row["iter"]
                            break
                runs.append({"guidance": guidance, "masked": masked, "seed": seed,
                             "iterations_to_threshold": iters_to,
                             "final_success_rate": summary["final_success_rate"],
                             "out_dir": sub})
    result = {"version": RUN_SUMMARY_VERSION, "kind": "ablate", "runs": runs,
              "threshold": threshold, "config": dict(cfg)}
    with open(os.path.join(out_dir, "ablate_summary.json"), "w") as f:
        json.dump(result, f, indent=2)
    return result
