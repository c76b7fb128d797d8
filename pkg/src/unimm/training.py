"""Loss assembly, batch construction and the staged training driver.

Total loss is ``alpha * NTP + FM``.  Stage gating is done by flipping
``requires_grad`` on parameter groups, so frozen tensors never receive a
gradient and the optimizer never sees them.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from . import backbone as bb
from . import numerics as nx
from . import unirep
from .latents import CodecConfig, MediaSample, VisualLatent, add_noise, encode, patchify
from .layers import GROUPS, ParamStore
from .numerics import Tensor
from .optim import AdamW
from .sequence import VOCAB, Collated, VisualItem, collate, mm_noise_policy, ntp_mask, pack

STAGE1_GROUPS = ("projector", "fusion", "flow_head", "time_embed")
STAGE2_GROUPS = ("backbone", "lm_head", "flow_head", "semantic", "projector", "fusion", "time_embed")


class TrainingDiverged(RuntimeError):
    pass


# -- samples ----------------------------------------------------------------------------

@dataclass
class GenSample:
    """Caption -> image/video generation pair."""

    caption: str
    media: MediaSample


@dataclass
class UndSample:
    """Image/video followed by text about it (understanding)."""

    media: MediaSample
    text: str


@dataclass
class StorySample:
    """Interleaved text and media segments."""

    segments: list


Sample = Union[GenSample, UndSample, StorySample]


class Corpus:
    """Training samples per stream with their latents encoded once up front."""

    KINDS = ("und", "gen", "video", "interleaved")

    def __init__(self, codec: CodecConfig, **streams: Sequence[Sample]):
        self.codec = codec
        self.streams: dict[str, list] = {}
        self._latents: dict[int, np.ndarray] = {}
        for kind, samples in streams.items():
            if kind not in self.KINDS:
                raise KeyError(f"unknown stream {kind}")
            self.streams[kind] = list(samples)
            for s in samples:
                for m in _media_of(s):
                    if id(m) not in self._latents:
                        self._latents[id(m)] = encode(m, codec).grid

    def latent(self, media: MediaSample) -> np.ndarray:
        return self._latents[id(media)]

    def draw(self, weights: dict[str, float], n: int, rng: np.random.Generator) -> list[tuple[str, Sample]]:
        kinds = [k for k in self.KINDS if weights.get(k, 0) > 0 and self.streams.get(k)]
        if not kinds:
            raise ValueError("no data stream with positive weight")
        w = np.array([weights[k] for k in kinds], dtype=float)
        picks = rng.choice(len(kinds), size=n, p=w / w.sum())
        out = []
        for p in picks:
            stream = self.streams[kinds[p]]
            out.append((kinds[p], stream[int(rng.integers(len(stream)))]))
        return out


def _media_of(s: Sample) -> list[MediaSample]:
    if isinstance(s, (GenSample, UndSample)):
        return [s.media]
    return [m for m in s.segments if isinstance(m, MediaSample)]


def caption_dropout(sample: GenSample, p: float, rng: np.random.Generator) -> GenSample:
    """Replace the caption by the empty string with probability ``p``."""
    if p > 0 and rng.random() < p:
        return GenSample("", sample.media)
    return sample


def _noised_item(x1: np.ndarray, kind: str, rng: np.random.Generator) -> VisualItem:
    t = float(rng.random())
    x0 = rng.standard_normal(x1.shape)
    return VisualItem(VisualLatent(add_noise(x1, x0, t), kind), t=t, noised=True, x1=x1, x0=x0)


def _clean_item(x1: np.ndarray, kind: str) -> VisualItem:
    return VisualItem(VisualLatent(x1, kind), t=1.0, noised=False, x1=x1)


def sample_items(kind: str, sample: Sample, corpus: Corpus, rng: np.random.Generator,
                 drop_p: float = 0.1, mm_p_all: float = 0.3) -> list:
    """Turn one training sample into a packed-item list with noise drawn from ``rng``."""
    if kind == "und":
        return [_clean_item(corpus.latent(sample.media), sample.media.kind), sample.text]
    if kind in ("gen", "video"):
        sample = caption_dropout(sample, drop_p, rng)
        return [sample.caption, _noised_item(corpus.latent(sample.media), sample.media.kind, rng)]
    items = [seg if isinstance(seg, str) else _clean_item(corpus.latent(seg), seg.kind)
             for seg in sample.segments]
    layout, _ = pack(items)
    flags = mm_noise_policy(layout, rng, mm_p_all)
    vis_pos = [i for i, it in enumerate(items) if isinstance(it, VisualItem)]
    for i, f in zip(vis_pos, flags):
        if f:
            items[i] = _noised_item(items[i].x1, items[i].kind, rng)
    return items


# -- forward pass over a batch of item lists -----------------------------------------------

@dataclass
class Packed:
    batch: Collated
    spans: list  # (b, Span, VisualItem) for every visual span


def pack_batch(item_lists: Sequence[list], complete: bool = True, close_last: bool = True) -> Packed:
    layouts, ids, spans = [], [], []
    for b, items in enumerate(item_lists):
        lay, seq = pack(items, complete=complete, close_last=close_last)
        layouts.append(lay)
        ids.append(seq)
        for s in lay.visual_spans():
            spans.append((b, s, items[s.item]))
    return Packed(collate(layouts, ids), spans)


def _by_shape(entries):
    groups: dict[tuple, list] = {}
    for e in entries:
        groups.setdefault(e[2].latent.grid.shape, []).append(e)
    return groups


def visual_inputs(ps: ParamStore, packed: Packed) -> tuple[np.ndarray, Tensor | None]:
    """Unified representations for every visual span, with their flat row indices."""
    Lq = packed.batch.ids.shape[1]
    rows, feats = [], []
    for shape, group in _by_shape(packed.spans).items():
        grids = np.stack([it.latent.grid for _, _, it in group])
        t = np.array([it.t for _, _, it in group])
        u = unirep.unified(ps, ps.config, grids, t)
        S, N1, D = u.shape
        feats.append(u.reshape(S * N1, D))
        rows.extend(b * Lq + np.arange(s.start, s.end) for b, s, _ in group)
    if not feats:
        return np.zeros(0, dtype=np.int64), None
    return np.concatenate(rows), (feats[0] if len(feats) == 1 else nx.concat(feats, axis=0))


def span_velocities(ps: ParamStore, packed: Packed, hidden: Tensor, which) -> list[tuple[list, Tensor]]:
    """Flow-head predictions for the selected spans, grouped by latent shape.

    Returns ``[(group_entries, pred [S, N, patch_dim]), ...]``.
    """
    B, Lq, D = hidden.shape
    flat = hidden.reshape(B * Lq, D)
    out = []
    for shape, group in _by_shape([e for e in packed.spans if which(e)]).items():
        S = len(group)
        N = group[0][2].n_tokens
        tok_rows = np.concatenate([b * Lq + np.arange(s.start + 1, s.end) for b, s, _ in group])
        time_rows = np.array([b * Lq + s.start for b, s, _ in group])
        h = nx.take_rows(flat, tok_rows).reshape(S, N, D)
        th = nx.take_rows(flat, time_rows)
        x_t = patchify(np.stack([it.latent.grid for _, _, it in group]))
        t = np.array([it.t for _, _, it in group])
        out.append((group, bb.flow_head(ps, h, t, th, x_t)))
    return out


def ntp_loss(logits, targets, mask) -> Tensor:
    return nx.cross_entropy(logits, targets, mask)


def fm_loss(preds: Sequence[Tensor], x1s: Sequence[np.ndarray], x0s: Sequence[np.ndarray]) -> Tensor:
    """Per-span mean squared velocity error, averaged over spans.

    ``preds[k]`` is [S_k, N, P] for a group of equally shaped spans whose clean
    and noise latents are stacked in ``x1s[k]`` / ``x0s[k]`` ([S_k, T, H, W, C]).
    """
    total = sum(p.shape[0] for p in preds)
    if total == 0:
        return Tensor(0.0)
    parts = []
    for pred, x1, x0 in zip(preds, x1s, x0s):
        if x0 is None:
            raise ValueError("fm_loss received a clean span (no noise recorded)")
        target = patchify(np.asarray(x1) - np.asarray(x0))
        parts.append(nx.mul(nx.mse(pred, target), pred.shape[0] / total))
    out = parts[0]
    for p in parts[1:]:
        out = nx.add(out, p)
    return out


def total_loss(ntp, fm, alpha: float) -> Tensor:
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    return nx.add(nx.mul(ntp, alpha), fm)


@dataclass
class Losses:
    ntp: Tensor
    fm: Tensor
    n_fm_spans: int


def model_losses(ps: ParamStore, item_lists: Sequence[list]) -> Losses:
    packed = pack_batch(item_lists)
    rows, feats = visual_inputs(ps, packed)
    hidden = bb.forward(ps, packed.batch, rows, feats)
    targets, m = ntp_mask(packed.batch)
    ntp = ntp_loss(bb.language_head(ps, hidden), targets, m)
    preds, x1s, x0s = [], [], []
    for group, pred in span_velocities(ps, packed, hidden, lambda e: e[1].noised):
        preds.append(pred)
        x1s.append(np.stack([it.x1 for _, _, it in group]))
        x0s.append(np.stack([it.x0 for _, _, it in group]))
    return Losses(ntp, fm_loss(preds, x1s, x0s), sum(p.shape[0] for p in preds))


# -- stages -------------------------------------------------------------------------------------

@dataclass
class StageSpec:
    name: str
    trainable_groups: tuple = STAGE1_GROUPS
    alpha: float = 0.2
    steps: int = 100
    lr: float = 1e-3
    schedule: str = "constant"
    batch_size: int = 16
    weights: dict = field(default_factory=lambda: {"gen": 1.0})
    caption_dropout: float = 0.1
    mm_p_all: float = 0.3
    weight_decay: float = 0.01
    max_grad_norm: float | None = 1.0
    seed: int = 0
    # distillation only: noising applies in the final fraction of steps
    noise_prob: float = 0.3
    noise_last_frac: float = 0.1

    def __post_init__(self):
        self.trainable_groups = tuple(self.trainable_groups)
        unknown = set(self.trainable_groups) - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.schedule}")

    def lr_at(self, step: int) -> float:
        if self.schedule == "constant":
            return self.lr
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * step / max(self.steps, 1)))


def stage1_spec(**kw) -> StageSpec:
    return StageSpec("stage1", STAGE1_GROUPS, alpha=0.2, **kw)


def stage2_spec(**kw) -> StageSpec:
    return StageSpec("stage2", STAGE2_GROUPS, alpha=1.0, **kw)


def _check_finite(value: float, spec: StageSpec, step: int, what: str) -> None:
    if not math.isfinite(value):
        raise TrainingDiverged(json.dumps({"stage": spec.name, "step": step, "loss": what,
                                           "value": repr(value)}))


def run_stage(spec: StageSpec, corpus: Corpus, ps: ParamStore,
              log: Callable[[dict], None] | None = None) -> list[dict]:
    """Train ``spec.trainable_groups`` in place; returns the per-step metrics."""
    ps.set_trainable(spec.trainable_groups)
    opt = AdamW(lr=spec.lr, weight_decay=spec.weight_decay, max_grad_norm=spec.max_grad_norm)
    metrics = []
    for step in range(spec.steps):
        t0 = time.perf_counter()
        rng = np.random.default_rng([spec.seed, step])
        draws = corpus.draw(spec.weights, spec.batch_size, rng)
        items = [sample_items(k, s, corpus, rng, spec.caption_dropout, spec.mm_p_all) for k, s in draws]
        lr = spec.lr_at(step)
        ps.zero_grad()
        with nx.Tape() as tape:
            losses = model_losses(ps, items)
            loss = total_loss(losses.ntp, losses.fm, spec.alpha)
            _check_finite(float(loss.data), spec, step, "total")
            tape.backward(loss)
        try:
            opt.step(ps.trainable(), lr=lr)
        except nx.NumericsError as exc:
            raise TrainingDiverged(json.dumps({"stage": spec.name, "step": step, "error": str(exc)})) from exc
        rec = {"step": step, "stage": spec.name, "ntp": float(losses.ntp.data), "fm": float(losses.fm.data),
               "total": float(loss.data), "lr": lr, "wall_ms": (time.perf_counter() - t0) * 1e3}
        metrics.append(rec)
        if log is not None:
            log(rec)
    ps.set_trainable(None)
    return metrics


def run_distill(spec: StageSpec, media: Sequence[MediaSample], ps: ParamStore, codec: CodecConfig,
                teacher: unirep.TeacherNet, log: Callable[[dict], None] | None = None) -> list[dict]:
    """Pre-train the semantic layers against the frozen teacher.

    Noising (probability ``spec.noise_prob``) is enabled only for the final
    ``spec.noise_last_frac`` of the steps.
    """
    by_shape: dict[tuple, list[int]] = {}
    for i, m in enumerate(media):
        by_shape.setdefault(m.pixels.shape, []).append(i)
    latents = [encode(m, codec).grid for m in media]
    opt = AdamW(lr=spec.lr, weight_decay=spec.weight_decay, max_grad_norm=spec.max_grad_norm)
    noise_from = int(round(spec.steps * (1.0 - spec.noise_last_frac)))
    shapes = sorted(by_shape)
    metrics = []
    for step in range(spec.steps):
        t0 = time.perf_counter()
        rng = np.random.default_rng([spec.seed, step])
        pool = by_shape[shapes[int(rng.integers(len(shapes)))]]
        pick = [pool[int(i)] for i in rng.integers(len(pool), size=spec.batch_size)]
        px = np.stack([media[i].pixels for i in pick])
        lat = np.stack([latents[i] for i in pick])
        p = spec.noise_prob if step >= noise_from else 0.0
        loss = unirep.distill_step(ps, ps.config, codec, teacher, px, opt, rng, noise_prob=p,
                                   latents=lat, lr=spec.lr_at(step))
        _check_finite(loss, spec, step, "distill")
        rec = {"step": step, "stage": spec.name, "distill": loss, "lr": spec.lr_at(step),
               "wall_ms": (time.perf_counter() - t0) * 1e3}
        metrics.append(rec)
        if log is not None:
            log(rec)
    ps.set_trainable(None)
    return metrics


def distill_spec(**kw) -> StageSpec:
    kw.setdefault("schedule", "cosine")
    return StageSpec("distill", ("semantic",), alpha=0.0, **kw)
