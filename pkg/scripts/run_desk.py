"""Overfit generation on 64 fixed shape scenes: distill, stage 1, stage 2, with attribute scores.

    python scripts/run_desk.py --run-dir runs/desk
"""

import argparse
import json

from unimm.harness import config as rc_mod
from unimm.harness.experiments import generation_config, run_generation


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--stage2-steps", type=int, default=4000)
    ap.add_argument("--run-dir", help="output directory (default: derived from the config)")
    ap.add_argument("--save-config", help="also write the run config to this file")
    args = ap.parse_args()
    rc = generation_config(args.seed, args.stage2_steps)
    if args.save_config:
        rc_mod.save(rc, args.save_config)
    res = run_generation(rc, args.run_dir, log=lambda m: print(m, flush=True))
    print(json.dumps(res, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
