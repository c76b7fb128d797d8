"""Unified visual representation: semantic path, low-level projector, fusion.

Both paths read the same noisy latent through their own 2x2 patch embedding.
The semantic path adds a small bidirectional transformer and is pre-trained to
match a frozen teacher's patch features; fusion concatenates the two feature
sets, RMS-normalises and applies two linear layers.  A time-step token is
prepended to every visual span (t = 1 for clean content).
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import layers as L
from . import numerics as nx
from .latents import CodecConfig, MediaSample, VisualLatent, add_noise, encode, latent_group, patchify
from .numerics import Tensor

DISTILL_CLAMP = 1e-4


def init_unirep(ps: L.ParamStore, cfg, rng: np.random.Generator) -> None:
    P, Ds, Dl, D = cfg.latent_patch_dim, cfg.semantic_dim, cfg.lowlevel_dim, cfg.model_dim
    L.add_linear(ps, rng, "semantic.patch", P, Ds, "semantic")
    ps.add("semantic.pos", rng.standard_normal((cfg.max_visual_tokens, Ds)) * 0.02, "semantic")
    for i in range(cfg.semantic_layers):
        L.add_block(ps, rng, f"semantic.blocks.{i}", Ds, cfg.mlp_ratio, "semantic", cfg.semantic_layers)
    ps.add("semantic.norm", np.ones(Ds), "semantic")

    L.add_linear(ps, rng, "projector.patch", P, Dl, "projector")

    ps.add("fusion.norm", np.ones(Ds + Dl), "fusion")
    L.add_linear(ps, rng, "fusion.fc1", Ds + Dl, D, "fusion")
    L.add_linear(ps, rng, "fusion.fc2", D, D, "fusion")

    L.add_linear(ps, rng, "time_embed.fc1", cfg.time_freq_dim, D, "time_embed")
    L.add_linear(ps, rng, "time_embed.fc2", D, D, "time_embed")


def _patches(x) -> np.ndarray:
    """Accept a VisualLatent, a [T,H,W,C] grid or a batched [S,T,H,W,C] grid."""
    grid = x.grid if isinstance(x, VisualLatent) else np.asarray(x, dtype=np.float64)
    if grid.ndim == 4:
        grid = grid[None]
    return patchify(grid)


def semantic_features(ps: L.ParamStore, cfg, x) -> Tensor:
    """S(x_t): [S, N, semantic_dim] for latents ``x`` (see :func:`_patches`)."""
    p = _patches(x)
    S, N, _ = p.shape
    if N > cfg.max_visual_tokens:
        raise ValueError(f"{N} visual tokens exceed max_visual_tokens={cfg.max_visual_tokens}")
    h = nx.add(L.linear(ps, "semantic.patch", p), ps["semantic.pos"][:N])
    for i in range(cfg.semantic_layers):
        h = L.block(ps, f"semantic.blocks.{i}", h, cfg.semantic_heads, None)
    return nx.rms_norm(h, ps["semantic.norm"])


def project(ps: L.ParamStore, x) -> Tensor:
    """P(x_t): a single linear 2x2 patch embedding, [S, N, lowlevel_dim]."""
    return L.linear(ps, "projector.patch", _patches(x))


def fuse(ps: L.ParamStore, sem, low) -> Tensor:
    sem, low = nx.as_tensor(sem), nx.as_tensor(low)
    if sem.shape[:-1] != low.shape[:-1]:
        raise nx.ShapeError(f"semantic {sem.shape} and low-level {low.shape} token counts differ")
    h = nx.rms_norm(nx.concat([sem, low], axis=-1), ps["fusion.norm"])
    return L.linear(ps, "fusion.fc2", nx.silu(L.linear(ps, "fusion.fc1", h)))


def time_embedding(ps: L.ParamStore, cfg, t) -> Tensor:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any((t < 0) | (t > 1)):
        raise ValueError("time step must lie in [0, 1]")
    h = L.linear(ps, "time_embed.fc1", L.sinusoidal(t, cfg.time_freq_dim))
    return L.linear(ps, "time_embed.fc2", nx.silu(h))


def prepend_time_token(ps: L.ParamStore, cfg, u, t) -> Tensor:
    """[S, N, D] -> [S, N+1, D] with row 0 the embedding of each span's t."""
    u = nx.as_tensor(u)
    if u.ndim == 2:
        u = u.reshape(1, *u.shape)
    S, _, D = u.shape
    t = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.float64)), (S,))
    te = time_embedding(ps, cfg, t).reshape(S, 1, D)
    return nx.concat([te, u], axis=1)


def unified(ps: L.ParamStore, cfg, grids: np.ndarray, t) -> Tensor:
    """Full dual-path pipeline for S latents of identical shape: [S, N+1, D]."""
    sem = semantic_features(ps, cfg, grids)
    low = project(ps, grids)
    return prepend_time_token(ps, cfg, fuse(ps, sem, low), t)


# -- distillation -------------------------------------------------------------------

def cosine_rows(a, b) -> Tensor:
    a, b = nx.as_tensor(a), nx.as_tensor(b)
    dot = nx.tsum(nx.mul(a, b), axis=-1)
    na = nx.sqrt(nx.add(nx.tsum(nx.mul(a, a), axis=-1), 1e-30))
    nb = nx.sqrt(nx.add(nx.tsum(nx.mul(b, b), axis=-1), 1e-30))
    return nx.div(dot, nx.mul(na, nb))


def distill_loss(student, teacher) -> Tensor:
    """Mean over tokens of -log(clamp(cos(student_i, teacher_i), 1e-4, 1))."""
    student, teacher = nx.as_tensor(student), nx.as_tensor(teacher)
    if student.shape != teacher.shape:
        raise nx.ShapeError(f"student {student.shape} vs teacher {teacher.shape}")
    if student.size == 0:
        raise nx.ShapeError("distill_loss needs at least one token")
    cos = nx.clip(cosine_rows(student, teacher), DISTILL_CLAMP, 1.0)
    return nx.mean(nx.mul(nx.log(cos), -1.0))


def mean_cosine(student: np.ndarray, teacher: np.ndarray) -> float:
    s = np.asarray(student).reshape(-1, student.shape[-1])
    t = np.asarray(teacher).reshape(-1, teacher.shape[-1])
    num = np.sum(s * t, axis=-1)
    den = np.linalg.norm(s, axis=-1) * np.linalg.norm(t, axis=-1)
    return float(np.mean(np.where(den > 0, num / np.maximum(den, 1e-300), 0.0)))


class TeacherNet:
    """Frozen random conv -> tanh -> region pool -> linear feature extractor.

    Regions match the student's token geometry: one (2s x 2s) pixel window per
    2x2 latent patch, frames averaged within each causal latent frame group.
    """

    def __init__(self, codec: CodecConfig, out_dim: int, seed: int = 1234, n_filters: int = 32):
        rng = np.random.default_rng(seed)
        self.codec = codec
        self.out_dim = out_dim
        # small bias: black regions map to a weak constant, so object content dominates the features
        self.filters = rng.standard_normal((3, 3, 3, n_filters)) / math.sqrt(27) * 4.0
        self.bias = rng.standard_normal(n_filters) * 0.05
        self.proj = rng.standard_normal((n_filters, out_dim)) / math.sqrt(n_filters)
        for a in (self.filters, self.bias, self.proj):
            a.setflags(write=False)

    def fingerprint(self) -> bytes:
        return self.filters.tobytes() + self.bias.tobytes() + self.proj.tobytes()

    def __call__(self, media: MediaSample | np.ndarray) -> np.ndarray:
        """[N, out_dim] for one sample, or [S, N, out_dim] for a batch of equal-shape pixels."""
        if isinstance(media, MediaSample):
            return self._features(media.pixels[None])[0]
        px = np.asarray(media, dtype=np.float64)
        return self._features(px if px.ndim == 5 else px[None])

    def _features(self, px: np.ndarray) -> np.ndarray:
        S, T, H, W, _ = px.shape
        tf, s = self.codec.temporal_factor, self.codec.spatial_factor
        groups = np.array([latent_group(k, tf) for k in range(T)])
        Tl = int(groups.max()) + 1
        frames = np.stack([px[:, groups == g].mean(axis=1) for g in range(Tl)], axis=1)
        padded = np.pad(frames, ((0, 0), (0, 0), (1, 1), (1, 1), (0, 0)))
        win = sliding_window_view(padded, (3, 3), axis=(2, 3))  # [S,Tl,H,W,3,3,3]
        act = np.tanh(np.einsum("sthwcij,ijcf->sthwf", win, self.filters) + self.bias)
        r = 2 * s
        pooled = act.reshape(S, Tl, H // r, r, W // r, r, -1).mean(axis=(3, 5))
        return pooled.reshape(S, Tl * (H // r) * (W // r), -1) @ self.proj


def distill_step(ps: L.ParamStore, cfg, codec: CodecConfig, teacher: TeacherNet,
                 pixels: np.ndarray, optimizer, rng: np.random.Generator,
                 noise_prob: float = 0.0, latents: np.ndarray | None = None,
                 lr: float | None = None) -> float:
    """One gradient step on the semantic group; returns the loss before the step.

    ``pixels`` is a batch [S, T, H, W, 3] of equal-shape media.  With
    probability ``noise_prob`` (per sample) the student sees x_t at a uniform
    random t instead of the clean latent; the teacher always sees clean pixels.
    """
    if not 0.0 <= noise_prob <= 1.0:
        raise ValueError("noise_prob must lie in [0, 1]")
    kind = "image" if pixels.shape[1] == 1 else "video"
    if latents is None:
        latents = np.stack([encode(MediaSample(kind, p), codec).grid for p in pixels])
    x = latents.copy()
    for i in range(len(x)):
        if rng.random() < noise_prob:
            t = float(rng.random())
            x[i] = add_noise(latents[i], rng.standard_normal(latents[i].shape), t)
    target = teacher(pixels)
    ps.set_trainable(["semantic"])
    ps.zero_grad()
    with nx.Tape() as tape:
        loss = distill_loss(semantic_features(ps, cfg, x), target)
        tape.backward(loss)
    optimizer.step(ps.trainable(), lr=lr)
    return float(loss.data)
