"""Desk-scale experiments: overfit generation on fixed scenes and overfit one interleaved story."""

from __future__ import annotations

import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .. import backbone as bb
from .. import training as tr
from ..latents import CodecConfig, VisualLatent, decode, psnr
from ..sampling import SamplerConfig, generate_mixed
from . import config as rc_mod
from .pipeline import Run, run_eval
from .scenes import ShapeObject, ShapeScene, story_sample


def generation_config(seed: int = 0, stage2_steps: int = 4000) -> rc_mod.RunConfig:
    """Desk schedule for the 64-scene generation overfit (about 12 minutes on one CPU core)."""
    model = replace(bb.ModelConfig(), model_dim=64, flow_head_dim=64)
    return rc_mod.RunConfig(
        seed=seed, model=model,
        data=rc_mod.DataConfig(n_gen=64, n_und=0),
        distill=rc_mod.StageConfig(steps=300, lr=3e-3, schedule="cosine"),
        stage1=rc_mod.StageConfig(steps=300, lr=2e-3),
        stage2=rc_mod.StageConfig(steps=stage2_steps, lr=2e-3, schedule="cosine"),
        sampler=SamplerConfig(cfg_scale=5.0, n_steps=25),
    )


def run_generation(rc: rc_mod.RunConfig, run_dir=None, log=print) -> dict:
    """distill -> stage1 -> stage2, scoring the attribute suite untrained, after stage 1 and after stage 2."""
    start = time.perf_counter()
    run = Run(rc, run_dir)
    out = {"run_dir": str(run.dir)}

    def note(key, value):
        out[key] = value
        log(f"{key}: {value}  ({time.perf_counter() - start:.0f}s)")

    note("untrained", run_eval(bb.init_params(rc.model, rc.seed), rc, "attr", run.data))
    note("distill", run.distill())
    run.train(1)
    note("stage1", run_eval(run.load("stage1"), rc, "attr", run.data))
    run.train(2)
    note("stage2", run_eval(run.load("stage2"), rc, "attr", run.data))
    out["seconds"] = time.perf_counter() - start
    return out


STORY_SCENES = (
    ShapeScene([ShapeObject("circle", "red", 0), ShapeObject("square", "blue", 8)]),
    ShapeScene([ShapeObject("triangle", "green", 4)]),
)


def run_story(steps: int = 900, seed: int = 0, out_dir=None, log=print) -> dict:
    """Overfit one two-image story, then regenerate it from its opening sentence.

    Returns per-image PSNR of the decoded samples against the rendered scenes
    and the stop reason of every decoded text chunk; a ``boi`` stop means the
    language head chose [BOI] itself.
    """
    start = time.perf_counter()
    codec = CodecConfig(8, 1)
    model = replace(bb.ModelConfig(), model_dim=64, n_layers=2, flow_head_dim=64)
    ps = bb.init_params(model, seed)
    story = story_sample(list(STORY_SCENES))
    spec = tr.stage2_spec(steps=steps, batch_size=8, lr=2e-3, weights={"interleaved": 1.0}, seed=seed)
    metrics = tr.run_stage(spec, tr.Corpus(codec, interleaved=[story]), ps)
    log(f"trained {steps} steps: ntp {metrics[-1]['ntp']:.4f} fm {metrics[-1]['fm']:.4f}")
    # no caption dropout in this data, so the unconditional branch is untrained: sample without guidance
    sampler = SamplerConfig(cfg_scale=1.0, n_steps=25, seed=seed)
    H, W = STORY_SCENES[0].height, STORY_SCENES[0].width
    shape = (1, H // codec.spatial_factor, W // codec.spatial_factor, codec.channels)
    trace = generate_mixed(ps, story.segments[0], sampler, shape, max_items=6)
    if out_dir is not None:
        trace.export(Path(out_dir), codec)
    images = [decode(VisualLatent(v.latent, v.kind), codec).pixels[0] for v in trace.visuals()]
    scores = [float(psnr(img, sc.render())) for img, sc in zip(images, STORY_SCENES)]
    out = {"psnr": scores, "n_images": len(images), "stops": [i.stop for i in trace.items if i.kind == "text"],
           "texts": trace.texts(), "stop": trace.stop, "seconds": time.perf_counter() - start}
    log(f"psnr {np.round(scores, 2).tolist()} stops {out['stops']} ({out['seconds']:.0f}s)")
    return out
