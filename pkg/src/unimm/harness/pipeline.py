"""Stage orchestration over a run directory: data, checkpoints, metrics, evals, traces."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .. import backbone as bb
from .. import training as tr
from .. import unirep
from ..latents import MediaSample, encode
from ..sampling import (GenerationTrace, SamplerConfig, TraceItem, decode_text, generate_mixed,
                        sample_visual)
from ..sequence import VisualItem
from . import config as rc_mod
from .evals import eval_attr, eval_understanding
from .scenes import gen_dataset

CHECKPOINTS = {"distill": "distill.ckpt", "stage1": "stage1.ckpt", "stage2": "stage2.ckpt"}
PARENT = {"stage1": "distill", "stage2": "stage1"}


class StageOrderError(RuntimeError):
    """A stage was started before the checkpoint it builds on exists."""


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def datasets(rc: rc_mod.RunConfig) -> dict:
    d = rc.data
    kw = dict(max_objects=d.max_objects, height=d.height, width=d.width, frames=d.frames)
    out = {}
    for kind, n in (("gen", d.n_gen), ("und", d.n_und), ("video", d.n_video), ("interleaved", d.n_interleaved)):
        if n > 0:
            out[kind] = gen_dataset(kind, n, d.seed, **kw)
    return out


def corpus(rc: rc_mod.RunConfig, data: dict | None = None) -> tr.Corpus:
    data = data if data is not None else datasets(rc)
    return tr.Corpus(rc.codec, **{k: v.samples for k, v in data.items()})


def teacher(rc: rc_mod.RunConfig) -> unirep.TeacherNet:
    return unirep.TeacherNet(rc.codec, rc.model.semantic_dim, seed=rc.seed + 1234)


def _media(data: dict) -> list[MediaSample]:
    out = []
    for ds in data.values():
        for s in ds.samples:
            out.extend(tr._media_of(s))
    return out


class Run:
    """One run directory: config.txt, checkpoints, metrics and timing JSONL, eval and trace outputs.

    Metrics files hold only deterministic values; wall-clock times go to
    ``timing.jsonl`` so that reruns reproduce every other artifact bitwise.
    """

    def __init__(self, rc: rc_mod.RunConfig, run_dir=None):
        self.rc = rc
        self.dir = Path(run_dir) if run_dir is not None else rc.run_dir()
        self.dir.mkdir(parents=True, exist_ok=True)
        rc_mod.save(rc, self.dir / "config.txt")
        self._data = None

    @property
    def data(self) -> dict:
        if self._data is None:
            self._data = datasets(self.rc)
        return self._data

    def ckpt(self, stage: str) -> Path:
        return self.dir / CHECKPOINTS[stage]

    def _log(self, stage: str):
        mfile = open(self.dir / f"metrics_{stage}.jsonl", "w")
        tfile = open(self.dir / "timing.jsonl", "a")

        def log(rec):
            rec = dict(rec)
            tfile.write(json.dumps({"stage": stage, "step": rec["step"], "wall_ms": rec.pop("wall_ms")}) + "\n")
            mfile.write(json.dumps(rec, sort_keys=True) + "\n")
        return log, (mfile, tfile)

    def _save(self, stage: str, ps, extra: dict) -> Path:
        lineage = {"stage": stage, "seed": self.rc.seed, "config_digest": self.rc.digest(), **extra}
        if stage in PARENT:
            lineage["parent"] = file_digest(self.ckpt(PARENT[stage]))
        path = self.ckpt(stage)
        bb.save_checkpoint(path, ps, lineage=lineage)
        return path

    def load(self, stage: str) -> bb.ModelParams:
        if not self.ckpt(stage).exists():
            raise StageOrderError(f"missing {self.ckpt(stage)}")
        return bb.load_checkpoint(self.ckpt(stage))[1]

    # -- stages
    def distill(self, log_extra=None) -> dict:
        rc = self.rc
        ps = bb.init_params(rc.model, rc.seed)
        log, files = self._log("distill")
        try:
            metrics = tr.run_distill(rc.stage_spec("distill"), _media(self.data), ps, rc.codec, teacher(rc), log)
        finally:
            for f in files:
                f.close()
        held = heldout_cosine(ps, rc)
        self._save("distill", ps, {"teacher": hashlib.sha256(teacher(rc).fingerprint()).hexdigest(),
                                   "heldout_cosine": held})
        return {"final_loss": metrics[-1]["distill"], "heldout_cosine": held}

    def train(self, stage: int) -> dict:
        name = f"stage{stage}"
        parent = PARENT[name]
        if not self.ckpt(parent).exists():
            raise StageOrderError(f"{name} needs the {parent} checkpoint at {self.ckpt(parent)}")
        ps = self.load(parent)
        log, files = self._log(name)
        try:
            metrics = tr.run_stage(self.rc.stage_spec(name), corpus(self.rc, self.data), ps, log)
        finally:
            for f in files:
                f.close()
        self._save(name, ps, {})
        last = metrics[-1]
        return {"stage": name, "ntp": last["ntp"], "fm": last["fm"], "total": last["total"]}

    def latest(self) -> str | None:
        for stage in ("stage2", "stage1", "distill"):
            if self.ckpt(stage).exists():
                return stage
        return None


def heldout_cosine(ps, rc: rc_mod.RunConfig, n: int = 32) -> float:
    """Mean student/teacher cosine on fresh scenes (a seed disjoint from the training data)."""
    d = rc.data
    held = gen_dataset("gen", n, d.seed + 10_000, d.max_objects, d.height, d.width)
    px = np.stack([s.media.pixels for s in held.samples])
    lat = np.stack([encode(s.media, rc.codec).grid for s in held.samples])
    return unirep.mean_cosine(unirep.semantic_features(ps, ps.config, lat).data, teacher(rc)(px))


def run_eval(ps, rc: rc_mod.RunConfig, suite: str, data: dict | None = None, sampler: SamplerConfig | None = None) -> dict:
    data = data if data is not None else datasets(rc)
    sampler = sampler or rc.sampler
    if suite == "attr":
        caps = [s.caption for s in data["gen"].samples]
        res = eval_attr(ps, rc.codec, caps, sampler, (rc.data.height, rc.data.width))
    elif suite == "understanding":
        if "und" not in data:
            raise ValueError("understanding suite needs data.n_und > 0")
        res = eval_understanding(ps, rc.codec, data["und"].samples, sampler)
    else:
        raise ValueError(f"unknown suite {suite}")
    return {"suite": suite, "seed": sampler.seed, **res}


def sample_prompt(ps, rc: rc_mod.RunConfig, prompt: str, out_dir) -> GenerationTrace:
    """Text-to-image: one image for ``prompt`` exported as a trace."""
    s = rc.codec.spatial_factor
    shape = (1, rc.data.height // s, rc.data.width // s, rc.codec.channels)
    lat = sample_visual(ps, [prompt], shape, rc.sampler, rng=np.random.default_rng(rc.sampler.seed))
    trace = GenerationTrace(prompt, [TraceItem("image", latent=lat.grid, seed=rc.sampler.seed)], "done",
                            asdict(rc.sampler))
    trace.export(out_dir, rc.codec)
    return trace


def answer_image(ps, rc: rc_mod.RunConfig, pixels: np.ndarray, question: str, out_dir) -> GenerationTrace:
    """Image understanding: decode text conditioned on [image, question]."""
    lat = encode(MediaSample.image(pixels), rc.codec)
    text, stop = decode_text(ps, [VisualItem(lat), question], rc.sampler)
    trace = GenerationTrace(question, [TraceItem("text", text=text.decode("utf-8", "surrogateescape"),
                                                 seed=rc.sampler.seed, stop=stop)], stop, asdict(rc.sampler))
    trace.export(out_dir, rc.codec)
    return trace


def sample_mixed(ps, rc: rc_mod.RunConfig, prompt: str, out_dir, max_items: int = 8) -> GenerationTrace:
    s, tf = rc.codec.spatial_factor, rc.codec.temporal_factor
    h, w = rc.data.height // s, rc.data.width // s
    vshape = (1 + (rc.data.frames - 1) // tf, h, w, rc.codec.channels)
    trace = generate_mixed(ps, prompt, rc.sampler, (1, h, w, rc.codec.channels), vshape, max_items)
    trace.export(out_dir, rc.codec)
    return trace
