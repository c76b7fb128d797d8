"""Attribute score of a trained checkpoint as a function of the guidance scale.

    python scripts/sweep_cfg.py --run-dir runs/desk --scales 1 2 3 5 7
"""

import argparse
import json
from dataclasses import replace
from pathlib import Path

from unimm.harness import config as rc_mod
from unimm.harness.pipeline import Run, run_eval


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--run-dir", required=True, help="directory holding config.txt and checkpoints")
    ap.add_argument("--stage", default="stage2", choices=("stage1", "stage2"))
    ap.add_argument("--scales", type=float, nargs="+", default=[1.0, 2.0, 3.0, 5.0, 7.0])
    ap.add_argument("--steps", type=int, default=25)
    args = ap.parse_args()
    rc = rc_mod.load(Path(args.run_dir) / "config.txt")
    run = Run(rc, args.run_dir)
    ps = run.load(args.stage)
    for w in args.scales:
        res = run_eval(ps, rc, "attr", run.data, replace(rc.sampler, cfg_scale=w, n_steps=args.steps))
        print(json.dumps({"cfg_scale": w, **res}, sort_keys=True), flush=True)


if __name__ == "__main__":
    main()
