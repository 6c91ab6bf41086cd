#!/usr/bin/env python3
"""Full sparse-pointmass pipeline: pretrain on demos, fine-tune, evaluate.

Uses the desk-scale recipe that the acceptance suite runs; takes ~5-15 min on
a laptop CPU depending on how quickly the run crosses the success threshold.
"""

import argparse
import json
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from otpr import config as cfgmod, harness  # noqa: E402

RECIPE = {
    "env.name": "pointmass", "env.reward": "sparse",
    "pretrain.demos": "20", "pretrain.epochs": "600", "pretrain.lr": "3e-4",
    "finetune.outer_iters": "60", "finetune.episodes_per_iter": "10",
    "finetune.eval_episodes": "40",
    "finetune.stop_success": "0.9", "finetune.stop_patience": "1",
    "finetune.score_lr": "1e-5", "finetune.score_steps": "200",
    "dual.iters": "300", "dual.batch": "32", "dual.lam": "0.05",
    "critic.steps": "200",
    "buffer.capacity": "4000",
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/pointmass")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--eval-episodes", type=int, default=100)
    args = ap.parse_args()

    overrides = dict(RECIPE)
    overrides["seed"] = str(args.seed)
    cfg = cfgmod.load_config(overrides=overrides)

    pre = harness.cmd_pretrain(cfg, os.path.join(args.out, "pretrain"))
    print(f"pretrained: success={pre['success_rate']:.2f}")
    ft = harness.cmd_finetune(cfg, pre["checkpoint"], os.path.join(args.out, "finetune"))
    print(f"fine-tuned: final success={ft['final_success_rate']:.2f} "
          f"after {ft['iterations_run']} iterations "
          f"({'early stop' if ft['stopped_early'] else 'cap reached'})")
    stats = harness.cmd_eval(ft["checkpoint"], args.eval_episodes, seed=args.seed + 1)
    print(json.dumps(stats, indent=2))


if __name__ == "__main__":
    main()
