"""Toy evaluation suites: attribute-checked generation and QA understanding."""

from __future__ import annotations

import numpy as np

from ..latents import CodecConfig, MediaSample, VisualLatent, decode, encode
from ..sampling import SamplerConfig, decode_text, sample_visuals
from ..sequence import VisualItem
from .attrs import attribute_check

ATTRS = ("count", "position", "color", "shape", "overall")


def generate_images(ps, codec: CodecConfig, captions: list[str], cfg: SamplerConfig,
                    image_hw: tuple[int, int] = (32, 32), batch: int = 64) -> np.ndarray:
    """Decoded pixels [n, H, W, 3] for each caption; noise comes from ``cfg.seed``."""
    H, W = image_hw
    s = codec.spatial_factor
    shape = (1, H // s, W // s, codec.channels)
    rng = np.random.default_rng(cfg.seed)
    noise = rng.standard_normal((len(captions), *shape))
    out = []
    for i in range(0, len(captions), batch):
        ctx = [[c] for c in captions[i:i + batch]]
        lat = sample_visuals(ps, ctx, shape, cfg, noise=noise[i:i + batch])
        out.extend(decode(VisualLatent(x, "image"), codec).pixels[0] for x in lat)
    return np.stack(out)


def eval_attr(ps, codec: CodecConfig, captions: list[str], cfg: SamplerConfig,
              image_hw: tuple[int, int] = (32, 32)) -> dict:
    """Mean per-attribute pass rate over ``captions``; ``overall`` is the headline score."""
    images = generate_images(ps, codec, captions, cfg, image_hw)
    checks = [attribute_check(img, cap) for img, cap in zip(images, captions)]
    scores = {k: float(np.mean([c[k] for c in checks])) for k in ATTRS}
    scores["n"] = len(captions)
    return scores


def split_qa(text: str) -> tuple[str, str]:
    """'q: top? a: red circle' -> ('q: top? a:', ' red circle')."""
    k = text.index(" a:") + 3
    return text[:k], text[k:]


def eval_understanding(ps, codec: CodecConfig, samples: list, cfg: SamplerConfig) -> dict:
    """Exact-match accuracy of greedy answers to QA samples (UndSample)."""
    hits = []
    for s in samples:
        prompt, answer = split_qa(s.text)
        lat = encode(s.media if isinstance(s.media, MediaSample) else s.media, codec)
        items = [VisualItem(lat, t=1.0), prompt]
        got, _ = decode_text(ps, items, cfg)
        hits.append(got.decode("utf-8", "surrogateescape") == answer)
    return {"accuracy": float(np.mean(hits)), "n": len(samples)}
