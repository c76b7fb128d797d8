"""Finite-difference check of the full training loss on a micro model."""

from __future__ import annotations

import numpy as np

from .. import backbone as bb
from .. import numerics as nx
from ..latents import CodecConfig, MediaSample, VisualLatent, add_noise, encode
from ..sequence import VisualItem
from ..training import model_losses, total_loss

MICRO_CODEC = CodecConfig(spatial_factor=2, temporal_factor=1, seed=0)


def micro_config() -> bb.ModelConfig:
    return bb.ModelConfig(model_dim=16, n_layers=1, n_heads=2, mlp_ratio=2, max_len=64,
                          flow_head_layers=1, flow_head_dim=16, flow_head_heads=2,
                          latent_patch_dim=MICRO_CODEC.patch_dim, semantic_dim=8, semantic_layers=1,
                          semantic_heads=2, lowlevel_dim=8, max_visual_tokens=16, time_freq_dim=8)


def micro_batch(rng: np.random.Generator) -> list[list]:
    """Generation, understanding and interleaved samples with fixed noise (8x8 images, 4 tokens each)."""
    def latent():
        return encode(MediaSample.image(rng.random((8, 8, 3))), MICRO_CODEC).grid

    def noised(x1):
        t = float(rng.uniform(0.1, 0.9))
        x0 = rng.standard_normal(x1.shape)
        return VisualItem(VisualLatent(add_noise(x1, x0, t), "image"), t=t, noised=True, x1=x1, x0=x0)

    clean = latent()
    return [
        ["a red", noised(latent())],
        [VisualItem(VisualLatent(clean, "image"), t=1.0, x1=clean), "q? a: b"],
        ["s:", VisualItem(VisualLatent(clean, "image"), t=1.0, x1=clean), " then", noised(latent()), "."],
    ]


def run_gradcheck(seed: int = 0, alpha: float = 0.2, eps: float = 1e-5, max_entries: int | None = 64) -> dict:
    """Per-group max relative gradient error of ``alpha * NTP + FM`` on the micro model.

    Parameters are jittered away from their zero initialisation first; at
    init the zero-gated flow head blocks every upstream gradient, which
    would leave most groups untested.
    """
    rng = np.random.default_rng(seed)
    ps = bb.init_params(micro_config(), seed)
    for p in ps:
        p.data += rng.standard_normal(p.shape) * 0.05
    ps.set_trainable(None)
    items = micro_batch(rng)

    def f():
        losses = model_losses(ps, items)
        return total_loss(losses.ntp, losses.fm, alpha)

    params = list(ps.trainable())
    errs = nx.gradient_errors(f, params, eps=eps, max_entries=max_entries, seed=seed)
    per_group: dict[str, float] = {}
    for p in params:
        per_group[p.group] = max(per_group.get(p.group, 0.0), errs[p.name])
    return {"max_rel_error": max(per_group.values()), "groups": per_group, "n_tensors": len(params)}
