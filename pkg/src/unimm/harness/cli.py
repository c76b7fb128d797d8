"""Command line: distill, train, sample, eval, inspect-mask, gradcheck, config.

Every subcommand accepts ``--config FILE``, repeated ``--set key=value``
overrides and ``--run-dir DIR``.  Without ``--run-dir`` outputs go under
``$SHOWO2_TOY_HOME`` (or ``./runs``) in a directory stamped with the seed and
a digest of the config.  Exit codes: 0 ok, 2 usage or stage-order error,
1 runtime failure (diagnostic JSON on stderr).
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback

from ..backbone import init_params
from ..latents import load_png
from ..sequence import LayoutError, omni_mask, omni_mask_reference, parse_layout, render_mask
from ..training import TrainingDiverged
from . import config as rc_mod
from .gradcheck import run_gradcheck
from .pipeline import Run, StageOrderError, answer_image, run_eval, sample_mixed, sample_prompt


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="flat key = value run config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    p.add_argument("--run-dir", help="explicit run directory")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    ap = argparse.ArgumentParser(prog="unimm", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)

    sub.add_parser("distill", parents=[common], help="pre-train the semantic layers against the teacher")

    p = sub.add_parser("train", parents=[common], help="run training stage 1 or 2")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)

    p = sub.add_parser("sample", parents=[common], help="generate from the latest checkpoint")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--prompt", help="caption for text-to-image")
    g.add_argument("--image", help="PNG to answer a question about")
    g.add_argument("--mixed", metavar="PROMPT", help="interleaved text/image generation")
    p.add_argument("--question", default="q: how many? a:", help="question for --image")
    p.add_argument("--out", help="trace directory (default: <run>/traces/<n>)")
    p.add_argument("--max-items", type=int, default=8)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint, JSON on stdout")
    p.add_argument("--suite", choices=("attr", "understanding"), required=True)
    p.add_argument("--stage", choices=("init", "distill", "stage1", "stage2", "latest"), default="latest")

    p = sub.add_parser("inspect-mask", help="print the omni-attention mask of a layout")
    p.add_argument("--layout", required=True, help='comma list like "t3,i4,t2"')

    p = sub.add_parser("gradcheck", help="finite-difference check of the full training loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-entries", type=int, default=64)

    p = sub.add_parser("config", parents=[common], help="print the resolved run config")
    return ap


def resolve_config(args) -> rc_mod.RunConfig:
    rc = rc_mod.load(args.config) if args.config else rc_mod.RunConfig()
    pairs = {}
    for kv in args.set:
        if "=" not in kv:
            raise rc_mod.ConfigError(f"--set expects KEY=VALUE, got {kv!r}")
        k, v = kv.split("=", 1)
        pairs[k.strip()] = rc_mod._parse_value(v)
    return rc_mod.apply_overrides(rc, pairs) if pairs else rc


def _load_stage(run: Run, stage: str):
    if stage == "init":
        return init_params(run.rc.model, run.rc.seed)
    if stage == "latest":
        stage = run.latest()
        if stage is None:
            return init_params(run.rc.model, run.rc.seed)
    return run.load(stage)


def _next_trace_dir(run: Run):
    root = run.dir / "traces"
    root.mkdir(exist_ok=True)
    return root / f"{len(list(root.iterdir())):03d}"


def dispatch(args) -> int:
    if args.cmd == "inspect-mask":
        layout = parse_layout(args.layout)
        mask = omni_mask(layout)
        if not (mask == omni_mask_reference(layout)).all():
            raise AssertionError("omni mask disagrees with the pairwise rule")
        print(render_mask(mask))
        return 0
    if args.cmd == "gradcheck":
        res = run_gradcheck(seed=args.seed, max_entries=args.max_entries)
        print(json.dumps(res, indent=2, sort_keys=True))
        return 0 if res["max_rel_error"] < 1e-3 else 1

    rc = resolve_config(args)
    if args.cmd == "config":
        print(rc_mod.to_text(rc), end="")
        return 0
    run = Run(rc, args.run_dir)
    if args.cmd == "distill":
        out = run.distill()
    elif args.cmd == "train":
        out = run.train(args.stage)
    elif args.cmd == "eval":
        out = run_eval(_load_stage(run, args.stage), rc, args.suite, run.data)
    else:
        ps = _load_stage(run, "latest")
        out_dir = args.out or _next_trace_dir(run)
        if args.prompt is not None:
            trace = sample_prompt(ps, rc, args.prompt, out_dir)
        elif args.image is not None:
            trace = answer_image(ps, rc, load_png(args.image), args.question, out_dir)
        else:
            trace = sample_mixed(ps, rc, args.mixed, out_dir, args.max_items)
        out = {"trace": str(out_dir), "stop": trace.stop, "items": [i.kind for i in trace.items]}
    out["run_dir"] = str(run.dir)
    print(json.dumps(out, sort_keys=True))
    return 0


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)  # exits 2 with usage on bad flags
    try:
        return dispatch(args)
    except StageOrderError as exc:
        print(json.dumps({"error": "stage_order", "detail": str(exc)}), file=sys.stderr)
        return 2
    except (rc_mod.ConfigError, LayoutError) as exc:
        print(json.dumps({"error": type(exc).__name__, "detail": str(exc)}), file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(json.dumps({"error": "diverged", "detail": json.loads(str(exc))}), file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every failure becomes diagnostic JSON
        print(json.dumps({"error": type(exc).__name__, "detail": str(exc),
                          "where": traceback.format_exc().splitlines()[-3:]}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
