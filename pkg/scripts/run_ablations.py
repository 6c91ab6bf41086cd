#!/usr/bin/env python3
"""Guidance (H/Q/A) and mask (on/off) ablation grid on sparse pointmass.

Each cell is a full fine-tuning run; expect roughly an hour on a laptop CPU
for the default 3 seeds. Results land in <out>/ablate_summary.json.
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from otpr import config as cfgmod, harness  # noqa: E402
from run_pointmass import RECIPE  # noqa: E402


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/ablations")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--iters", type=int, default=20)
    args = ap.parse_args()

    overrides = dict(RECIPE)
    overrides.update({
        "finetune.outer_iters": str(args.iters),
        "finetune.stop_success": "0.9",
        "finetune.stop_patience": "1",
        "ablate.seeds": args.seeds,
        "ablate.guidances": "H,Q,A",
        "ablate.masked": "true,false",
    })
    cfg = cfgmod.load_config(overrides=overrides)
    pre = harness.cmd_pretrain(cfg, os.path.join(args.out, "pretrain"))
    print(f"pretrained: success={pre['success_rate']:.2f}")
    result = harness.cmd_ablate(cfg, pre["checkpoint"], args.out)
    for run in result["runs"]:
        print(f"guidance={run['guidance']} masked={run['masked']} seed={run['seed']}: "
              f"reach={run['iterations_to_threshold']} "
              f"final={run['final_success_rate']:.2f}")


if __name__ == "__main__":
    main()
