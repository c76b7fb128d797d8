"""Exactly invertible block-orthogonal media codec and the linear noising path.

The codec splits media into non-overlapping (frames x s x s x 3) blocks and
multiplies each flattened block by one fixed, seeded orthogonal matrix.  The
first frame of a clip forms its own causal group (zero-padded to the group
size), the remaining frames are grouped ``temporal_factor`` at a time, so a
17-frame clip with factor 4 becomes 5 latent frames.  Because the map is
orthogonal, ``decode(encode(m)) == m`` up to rounding.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

KINDS = ("image", "video")


class CodecError(ValueError):
    """Media or latent shape is incompatible with the codec configuration."""


@dataclass(frozen=True)
class CodecConfig:
    spatial_factor: int = 8
    temporal_factor: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.spatial_factor < 1 or self.temporal_factor < 1:
            raise CodecError("codec factors must be >= 1")

    @property
    def channels(self) -> int:
        """Latent channels C: one square orthogonal map per (tf x s x s x 3) block."""
        return 3 * self.spatial_factor ** 2 * self.temporal_factor

    @property
    def patch_dim(self) -> int:
        """Width of one 2x2 latent patch (what the flow head predicts per token)."""
        return 4 * self.channels


@dataclass
class MediaSample:
    kind: str
    pixels: np.ndarray  # [T, H, W, 3]

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.kind not in KINDS:
            raise CodecError(f"unknown media kind {self.kind!r}")
        if self.pixels.ndim != 4 or self.pixels.shape[-1] != 3:
            raise CodecError(f"pixels must be [T,H,W,3], got {self.pixels.shape}")
        if self.kind == "image" and self.pixels.shape[0] != 1:
            raise CodecError("images carry exactly one frame")

    @classmethod
    def image(cls, hw3: np.ndarray) -> "MediaSample":
        return cls("image", np.asarray(hw3)[None])


@dataclass
class VisualLatent:
    grid: np.ndarray  # [T', H', W', C]
    kind: str = "image"

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 4:
            raise CodecError(f"latent grid must be [T',H',W',C], got {self.grid.shape}")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.grid.shape

    @property
    def n_tokens(self) -> int:
        t, h, w, _ = self.grid.shape
        return t * (h // 2) * (w // 2)


@lru_cache(maxsize=8)
def _basis(dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    # sign fix makes the draw unique for a given seed
    q *= np.sign(np.diag(r))
    q.setflags(write=False)
    return q


def codec_basis(cfg: CodecConfig) -> np.ndarray:
    return _basis(cfg.channels, cfg.seed)


def latent_frames(n_frames: int, temporal_factor: int) -> int:
    if n_frames < 1 or (n_frames - 1) % temporal_factor:
        raise CodecError(f"frame count {n_frames} must satisfy T = 1 (mod {temporal_factor})")
    return 1 + (n_frames - 1) // temporal_factor


def latent_group(frame: int, temporal_factor: int) -> int:
    """Index of the latent frame that frame ``frame`` is encoded into."""
    return 0 if frame == 0 else 1 + (frame - 1) // temporal_factor


def encode(media: MediaSample, cfg: CodecConfig) -> VisualLatent:
    T, H, W, _ = media.pixels.shape
    s, tf = cfg.spatial_factor, cfg.temporal_factor
    for axis, n in (("height", H), ("width", W)):
        if n % s:
            raise CodecError(f"{axis} {n} is not divisible by spatial_factor {s}")
    Tl = latent_frames(T, tf) if media.kind == "video" else 1
    # pad the causal first frame to a full temporal group
    padded = np.zeros((Tl * tf, H, W, 3))
    padded[0] = media.pixels[0]
    padded[tf:] = media.pixels[1:]
    blocks = padded.reshape(Tl, tf, H // s, s, W // s, s, 3)
    blocks = blocks.transpose(0, 2, 4, 1, 3, 5, 6).reshape(Tl, H // s, W // s, cfg.channels)
    return VisualLatent(blocks @ codec_basis(cfg).T, media.kind)


def decode(lat: VisualLatent, cfg: CodecConfig) -> MediaSample:
    Tl, Hl, Wl, C = lat.grid.shape
    if C != cfg.channels:
        raise CodecError(f"latent has {C} channels, codec expects {cfg.channels}")
    s, tf = cfg.spatial_factor, cfg.temporal_factor
    blocks = (lat.grid @ codec_basis(cfg)).reshape(Tl, Hl, Wl, tf, s, s, 3)
    frames = blocks.transpose(0, 3, 1, 4, 2, 5, 6).reshape(Tl * tf, Hl * s, Wl * s, 3)
    pixels = np.concatenate([frames[:1], frames[tf:]], axis=0)
    return MediaSample(lat.kind, pixels)


# -- flow-matching path ----------------------------------------------------------

def _grid(x) -> np.ndarray:
    return x.grid if isinstance(x, VisualLatent) else np.asarray(x, dtype=np.float64)


def _wrap(like, arr):
    return VisualLatent(arr, like.kind) if isinstance(like, VisualLatent) else arr


def add_noise(x1, x0, t: float):
    """Point on the straight path from noise ``x0`` (t=0) to data ``x1`` (t=1)."""
    a, b = _grid(x1), _grid(x0)
    if a.shape != b.shape:
        raise CodecError(f"x1 {a.shape} and x0 {b.shape} differ in shape")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"noise level t={t} outside [0, 1]")
    return _wrap(x1, t * a + (1.0 - t) * b)


def velocity_target(x1, x0) -> np.ndarray:
    a, b = _grid(x1), _grid(x0)
    if a.shape != b.shape:
        raise CodecError(f"x1 {a.shape} and x0 {b.shape} differ in shape")
    return a - b


def sample_noise(shape, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal(shape)


# -- 2x2 latent patching -----------------------------------------------------------

def patchify(grid: np.ndarray) -> np.ndarray:
    """[..., T', H', W', C] -> [..., T'*(H'/2)*(W'/2), 4C] (frame-major, row-major)."""
    *lead, T, H, W, C = grid.shape
    if H % 2 or W % 2:
        raise CodecError(f"latent grid {H}x{W} must have even spatial dims for 2x2 patching")
    x = grid.reshape(*lead, T, H // 2, 2, W // 2, 2, C)
    n = len(lead)
    x = x.transpose(*range(n), n, n + 1, n + 3, n + 2, n + 4, n + 5)
    return x.reshape(*lead, T * (H // 2) * (W // 2), 4 * C)


def unpatchify(patches: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    T, H, W, C = shape
    *lead, N, D = patches.shape
    if N != T * (H // 2) * (W // 2) or D != 4 * C:
        raise CodecError(f"{patches.shape[-2:]} patches do not fit latent shape {shape}")
    x = patches.reshape(*lead, T, H // 2, W // 2, 2, 2, C)
    n = len(lead)
    x = x.transpose(*range(n), n, n + 1, n + 3, n + 2, n + 4, n + 5)
    return x.reshape(*lead, T, H, W, C)


# -- media import / export -----------------------------------------------------------

def to_uint8(pixels: np.ndarray) -> np.ndarray:
    """Lossy export: clamp to [0, 1] and round to 8 bits."""
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, frame: np.ndarray) -> None:
    Image.fromarray(to_uint8(frame), mode="RGB").save(path)


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def write_farbfeld(path, frame: np.ndarray) -> None:
    """16-bit farbfeld (opaque alpha); values are clamped to [0, 1]."""
    H, W, _ = frame.shape
    rgba = np.empty((H, W, 4), dtype=">u2")
    rgba[..., :3] = np.round(np.clip(frame, 0.0, 1.0) * 65535.0)
    rgba[..., 3] = 65535
    Path(path).write_bytes(b"farbfeld" + struct.pack(">II", W, H) + rgba.tobytes())


def read_farbfeld(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != b"farbfeld":
        raise CodecError(f"{path}: not a farbfeld file")
    W, H = struct.unpack(">II", raw[8:16])
    rgba = np.frombuffer(raw[16:], dtype=">u2").reshape(H, W, 4)
    return rgba[..., :3].astype(np.float64) / 65535.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    err = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    return float("inf") if err == 0 else 10.0 * np.log10(1.0 / err)
