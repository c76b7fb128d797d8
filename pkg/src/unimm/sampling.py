"""Text decoding, guided Euler flow sampling and interleaved generation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import backbone as bb
from .latents import CodecConfig, VisualLatent, decode, save_png, unpatchify
from .layers import ParamStore
from .sequence import VOCAB, VisualItem, detokenize
from .training import pack_batch, span_velocities, visual_inputs

STOP_IDS = {VOCAB.ids["[EOS]"]: "eos", VOCAB.ids["[BOI]"]: "boi", VOCAB.ids["[BOV]"]: "bov"}
# never valid as a decoded continuation
BANNED_IDS = [VOCAB.ids[k] for k in ("[BOS]", "[EOI]", "[EOV]", "[PAD]")]


class SamplingError(RuntimeError):
    pass


@dataclass
class SamplerConfig:
    cfg_scale: float = 5.0
    n_steps: int = 25
    text_mode: str = "greedy"
    top_k: int = 5
    max_new_tokens: int = 64
    seed: int = 0
    method: str = "euler"

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.text_mode not in ("greedy", "topk"):
            raise ValueError(f"unknown text mode {self.text_mode}")
        if self.text_mode == "topk" and self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.method not in ("euler", "midpoint"):
            raise ValueError(f"unknown integrator {self.method}")


# -- integration ---------------------------------------------------------------------

def integrate(x0: np.ndarray, velocity: Callable[[np.ndarray, float], np.ndarray], n_steps: int,
              method: str = "euler") -> np.ndarray:
    """Integrate dx/dt = velocity(x, t) from t=0 to t=1 with uniform steps."""
    h = 1.0 / n_steps
    x = x0
    for s in range(n_steps):
        t = s / n_steps
        v = velocity(x, t)
        if method == "midpoint":
            v = velocity(x + 0.5 * h * v, t + 0.5 * h)
        x = x + h * v
    return x


def guided(v_cond: np.ndarray, v_uncond: np.ndarray, w: float) -> np.ndarray:
    """v_u + w (v_c - v_u), written so that w = 1 returns v_c bit for bit."""
    return v_cond + (w - 1.0) * (v_cond - v_uncond)


# -- model calls ------------------------------------------------------------------------

def predict_velocity(ps: ParamStore, contexts: Sequence[list], x: np.ndarray, t: float,
                     kind: str = "image") -> np.ndarray:
    """Velocity for the open visual span ``x`` [S, T, H, W, C] appended to each context."""
    items = [list(ctx) + [VisualItem(VisualLatent(xi, kind), t=t, noised=True)] for ctx, xi in zip(contexts, x)]
    packed = pack_batch(items, complete=False, close_last=False)
    rows, feats = visual_inputs(ps, packed)
    hidden = bb.forward(ps, packed.batch, rows, feats)
    last = {(b, s.start) for b, s, _ in packed.spans if s.end == packed.batch.layouts[b].total_len}
    (group, pred), = span_velocities(ps, packed, hidden, lambda e: (e[0], e[1].start) in last)
    order = [b for b, _, _ in group]
    v = np.empty_like(x)
    v[order] = unpatchify(pred.data, x.shape[1:])
    return v


def sample_visuals(ps: ParamStore, contexts: Sequence[list], shape: tuple, cfg: SamplerConfig,
                   kind: str = "image", noise: np.ndarray | None = None, rng=None,
                   guidance: bool = True, snapshots: list | None = None) -> np.ndarray:
    """Generate one latent per context by integrating the (guided) flow from noise.

    The unconditional branch replaces each context by the caption-dropped
    layout ``[BOS] [BOI] ...``.  ``guidance=False`` runs the conditional
    branch alone.
    """
    if cfg.cfg_scale < 0:
        raise ValueError("guidance scale must be non-negative")
    S = len(contexts)
    if noise is None:
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        noise = rng.standard_normal((S, *shape))
    uncond = [[""]] * S

    def velocity(x, t):
        if snapshots is not None:
            snapshots.append((t, x.copy()))
        vc = predict_velocity(ps, contexts, x, t, kind)
        if not guidance:
            return vc
        vu = predict_velocity(ps, uncond, x, t, kind)
        return guided(vc, vu, cfg.cfg_scale)

    return integrate(noise, velocity, cfg.n_steps, cfg.method)


def sample_visual(ps: ParamStore, context: list, shape: tuple, cfg: SamplerConfig, kind: str = "image",
                  rng=None, guidance: bool = True) -> VisualLatent:
    return VisualLatent(sample_visuals(ps, [context], shape, cfg, kind, rng=rng, guidance=guidance)[0], kind)


def next_token_logits(ps: ParamStore, items: list, generated: bytes) -> np.ndarray:
    ctx = list(items) + [generated.decode("utf-8", "surrogateescape")] if generated else list(items)
    packed = pack_batch([ctx], complete=False)
    rows, feats = visual_inputs(ps, packed)
    hidden = bb.forward(ps, packed.batch, rows, feats)
    return bb.language_head(ps, hidden).data[0, -1]


def decode_text(ps: ParamStore, items: list, cfg: SamplerConfig, rng=None) -> tuple[bytes, str]:
    """Decode byte tokens after ``items`` until [EOS]/[BOI]/[BOV] or the token budget.

    Returns (generated bytes, stop reason in {eos, boi, bov, budget}).
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    out = bytearray()
    for _ in range(cfg.max_new_tokens):
        logits = next_token_logits(ps, items, bytes(out)).copy()
        logits[BANNED_IDS] = -np.inf
        if cfg.text_mode == "greedy":
            tok = int(np.argmax(logits))
        else:
            top = np.argsort(-logits, kind="stable")[:cfg.top_k]
            p = np.exp(logits[top] - logits[top].max())
            tok = int(top[rng.choice(len(top), p=p / p.sum())])
        if tok in STOP_IDS:
            return bytes(out), STOP_IDS[tok]
        out.append(tok)
    return bytes(out), "budget"


# -- interleaved generation ----------------------------------------------------------------

@dataclass
class TraceItem:
    kind: str  # text | image | video
    text: str | None = None
    latent: np.ndarray | None = None
    seed: int | None = None
    stop: str | None = None


@dataclass
class GenerationTrace:
    prompt: str
    items: list = field(default_factory=list)
    stop: str = ""
    config: dict = field(default_factory=dict)

    def texts(self) -> list[str]:
        return [i.text for i in self.items if i.kind == "text"]

    def visuals(self) -> list[TraceItem]:
        return [i for i in self.items if i.kind != "text"]

    def export(self, out_dir, codec: CodecConfig) -> Path:
        """Ordered text files, PNG images, frame folders for videos, and manifest.json."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        manifest = {"prompt": self.prompt, "stop": self.stop, "config": self.config, "items": []}
        for k, item in enumerate(self.items):
            entry = {"index": k, "kind": item.kind, "seed": item.seed, "stop": item.stop}
            if item.kind == "text":
                name = f"{k:03d}_text.txt"
                (out / name).write_text(item.text, encoding="utf-8", errors="surrogateescape")
            else:
                media = decode(VisualLatent(item.latent, item.kind), codec)
                if item.kind == "image":
                    name = f"{k:03d}_image.png"
                    save_png(out / name, media.pixels[0])
                else:
                    name = f"{k:03d}_video"
                    (out / name).mkdir(exist_ok=True)
                    for f, frame in enumerate(media.pixels):
                        save_png(out / name / f"frame_{f:03d}.png", frame)
            entry["path"] = name
            manifest["items"].append(entry)
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return out


def generate_mixed(ps: ParamStore, prompt: str, cfg: SamplerConfig, image_shape: tuple,
                   video_shape: tuple | None = None, max_items: int = 8) -> GenerationTrace:
    """Alternate text decoding and visual sampling until [EOS], budget or ``max_items``.

    A predicted [BOI]/[BOV] triggers flow sampling conditioned on everything so
    far; the finished latent re-enters the context as clean content (t = 1).
    """
    if max_items < 1:
        raise ValueError("max_items must be >= 1")
    trace = GenerationTrace(prompt, config=asdict(cfg))
    items: list = [prompt]
    max_len = ps.config.max_len
    n = 0
    while len(trace.items) < max_items:
        seed = int(np.random.SeedSequence([cfg.seed, n]).generate_state(1)[0])
        n += 1
        rng = np.random.default_rng(seed)
        text, stop = decode_text(ps, items, cfg, rng)
        chunk = text.decode("utf-8", "surrogateescape")
        items.append(chunk)
        trace.items.append(TraceItem("text", text=chunk, seed=seed, stop=stop))
        if stop not in ("boi", "bov") or len(trace.items) >= max_items:
            trace.stop = stop if stop not in ("boi", "bov") else "max_items"
            return trace
        kind, shape = ("image", image_shape) if stop == "boi" else ("video", video_shape)
        if shape is None:
            raise SamplingError("model requested a video but no video shape is configured")
        ctx_len = pack_batch([items], complete=False).batch.ids.shape[1]
        needed = ctx_len + 1 + 1 + VisualLatent(np.zeros(shape), kind).n_tokens + 1
        if needed > max_len:
            trace.stop = "overflow"
            return trace
        seed = int(np.random.SeedSequence([cfg.seed, n]).generate_state(1)[0])
        n += 1
        lat = sample_visuals(ps, [items], shape, cfg, kind, rng=np.random.default_rng(seed))[0]
        items.append(VisualItem(VisualLatent(lat, kind), t=1.0))
        items.append("")
        trace.items.append(TraceItem(kind, latent=lat, seed=seed))
    trace.stop = "max_items"
    return trace


def render_trace(trace: GenerationTrace) -> str:
    parts = []
    for item in trace.items:
        parts.append(item.text if item.kind == "text" else ("[BOI]<image>[EOI]" if item.kind == "image"
                                                              else "[BOV]<video>[EOV]"))
    return "".join(parts)
