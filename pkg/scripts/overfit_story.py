"""Overfit one two-image story and regenerate it from its first sentence.

    python scripts/overfit_story.py --out runs/story_trace
"""

import argparse
import json

from unimm.harness.experiments import run_story


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=900)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", help="export the generated trace here")
    args = ap.parse_args()
    res = run_story(args.steps, args.seed, args.out, log=lambda m: print(m, flush=True))
    print(json.dumps(res, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
