"""Omni-attention language model with a language head and an adaLN-Zero flow head."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import layers as L
from . import numerics as nx
from . import unirep
from .layers import ParamStore
from .numerics import Tensor
from .sequence import Collated


@dataclass
class ModelConfig:
    model_dim: int = 128
    n_layers: int = 4
    n_heads: int = 4
    mlp_ratio: int = 4
    vocab_size: int = 263
    max_len: int = 512
    flow_head_layers: int = 2
    flow_head_dim: int = 128
    flow_head_heads: int = 4
    latent_patch_dim: int = 4 * 192
    semantic_dim: int = 64
    semantic_layers: int = 2
    semantic_heads: int = 4
    lowlevel_dim: int = 64
    max_visual_tokens: int = 1024
    time_freq_dim: int = 128

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive")
        for dim, heads in ((self.model_dim, self.n_heads), (self.flow_head_dim, self.flow_head_heads),
                           (self.semantic_dim, self.semantic_heads)):
            if dim % heads:
                raise ValueError(f"width {dim} is not divisible by {heads} heads")


class ModelParams(ParamStore):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config

    def copy(self) -> "ModelParams":
        out = ModelParams(self.config)
        for name, p in self.tensors.items():
            q = out.add(name, p.data.copy(), p.group, p.decay)
            q.requires_grad = p.requires_grad
        return out


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    ps = ModelParams(cfg)
    D = cfg.model_dim
    ps.add("backbone.tok_emb", rng.standard_normal((cfg.vocab_size, D)) * 0.02, "backbone")
    ps.add("backbone.pos_emb", rng.standard_normal((cfg.max_len, D)) * 0.02, "backbone")
    for i in range(cfg.n_layers):
        L.add_block(ps, rng, f"backbone.blocks.{i}", D, cfg.mlp_ratio, "backbone", cfg.n_layers)
    ps.add("backbone.norm", np.ones(D), "backbone")
    L.add_linear(ps, rng, "lm_head", D, cfg.vocab_size, "lm_head", bias=False)
    _init_flow_head(ps, cfg, rng)
    unirep.init_unirep(ps, cfg, rng)
    return ps


def _init_flow_head(ps: ParamStore, cfg: ModelConfig, rng) -> None:
    Df, P = cfg.flow_head_dim, cfg.latent_patch_dim
    L.add_linear(ps, rng, "flow_head.in", cfg.model_dim, Df, "flow_head")
    ps.add("flow_head.pos", rng.standard_normal((cfg.max_visual_tokens, Df)) * 0.02, "flow_head")
    L.add_linear(ps, rng, "flow_head.t1", cfg.time_freq_dim, Df, "flow_head")
    L.add_linear(ps, rng, "flow_head.t2", Df, Df, "flow_head")
    for i in range(cfg.flow_head_layers):
        name = f"flow_head.blocks.{i}"
        L.add_block(ps, rng, name, Df, cfg.mlp_ratio, "flow_head", cfg.flow_head_layers, norm_gains=False)
        # adaLN-Zero: shift/scale/gate for both branches, zero-initialised
        L.add_linear(ps, rng, f"{name}.ada", Df, 6 * Df, "flow_head", zero=True)
    L.add_linear(ps, rng, "flow_head.final_ada", Df, 2 * Df, "flow_head", zero=True)
    L.add_linear(ps, rng, "flow_head.out", Df, P, "flow_head", zero=True)
    L.add_linear(ps, rng, "flow_head.skip", Df, P, "flow_head", zero=True)


# -- backbone -----------------------------------------------------------------------

def embed_inputs(ps: ParamStore, batch: Collated, visual_rows: np.ndarray | None,
                 visual_feats: Tensor | None, position_ids: np.ndarray | None = None) -> Tensor:
    """Token embeddings with fused visual features scattered into their slots.

    ``visual_rows`` are flat indices ``b * L + pos`` for the rows of
    ``visual_feats`` ([M, D]).  Learned positions are added everywhere.
    """
    B, Lq = batch.ids.shape
    cfg: ModelConfig = ps.config
    if Lq > cfg.max_len:
        raise ValueError(f"sequence length {Lq} exceeds max context {cfg.max_len}")
    D = cfg.model_dim
    tok = nx.embedding(ps["backbone.tok_emb"], batch.ids).reshape(B * Lq, D)
    if visual_feats is not None and len(visual_rows):
        tok = nx.scatter_rows(tok, visual_rows, visual_feats)
    pos_ids = np.arange(Lq) if position_ids is None else np.asarray(position_ids)
    pos = nx.embedding(ps["backbone.pos_emb"], pos_ids)
    return nx.add(tok.reshape(B, Lq, D), pos)


def forward(ps: ParamStore, batch: Collated, visual_rows=None, visual_feats=None,
            position_ids=None) -> Tensor:
    """Hidden states [B, L, model_dim] (final RMSNorm applied)."""
    cfg: ModelConfig = ps.config
    h = embed_inputs(ps, batch, visual_rows, visual_feats, position_ids)
    for i in range(cfg.n_layers):
        h = L.block(ps, f"backbone.blocks.{i}", h, cfg.n_heads, batch.mask)
    return nx.rms_norm(h, ps["backbone.norm"])


def language_head(ps: ParamStore, hidden) -> Tensor:
    return L.linear(ps, "lm_head", hidden)


# -- flow head ---------------------------------------------------------------------------

def _modulate(x, shift, scale) -> Tensor:
    return nx.add(nx.mul(nx.rms_norm(x), nx.add(scale, 1.0)), shift)


def flow_head(ps: ParamStore, hidden, t, time_hidden=None, x_t=None) -> Tensor:
    """Velocity for S visual spans of N tokens each.

    hidden:      [S, N, model_dim] backbone states at the span's visual tokens
    t:           [S] noise levels
    time_hidden: [S, model_dim] backbone state at the span's time token
    x_t:         [S, N, latent_patch_dim] the noisy patches being denoised

    The conditioning vector is the flow head's own embedding of t plus the
    projected time-token state.  Zero-initialised modulation, output and skip
    projections make the head the exact zero map at initialisation.
    """
    cfg: ModelConfig = ps.config
    hidden = nx.as_tensor(hidden)
    S, N, _ = hidden.shape
    t = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.float64)), (S,))
    if np.any((t < 0) | (t > 1)):
        raise ValueError("time step must lie in [0, 1]")
    if ps.has_group("adapter"):
        hidden = adapter(ps, hidden)
        time_hidden = None if time_hidden is None else adapter(ps, time_hidden)
    x = nx.add(L.linear(ps, "flow_head.in", hidden), ps["flow_head.pos"][:N])
    c = L.linear(ps, "flow_head.t2", nx.silu(L.linear(ps, "flow_head.t1", L.sinusoidal(t, cfg.time_freq_dim))))
    if time_hidden is not None:
        c = nx.add(c, L.linear(ps, "flow_head.in", time_hidden))
    c = nx.silu(c).reshape(S, 1, -1)
    Df = cfg.flow_head_dim
    for i in range(cfg.flow_head_layers):
        name = f"flow_head.blocks.{i}"
        mod = L.linear(ps, f"{name}.ada", c)
        sh1, sc1, g1, sh2, sc2, g2 = (mod[..., k * Df:(k + 1) * Df] for k in range(6))
        a = L.attention(ps, name, _modulate(x, sh1, sc1), cfg.flow_head_heads, None)
        x = nx.add(x, nx.mul(g1, a))
        x = nx.add(x, nx.mul(g2, L.mlp(ps, name, _modulate(x, sh2, sc2))))
    fmod = L.linear(ps, "flow_head.final_ada", c)
    out = L.linear(ps, "flow_head.out", _modulate(x, fmod[..., :Df], fmod[..., Df:]))
    if x_t is not None:
        out = nx.add(out, nx.mul(L.linear(ps, "flow_head.skip", c), x_t))
    return out


def adapter(ps: ParamStore, h) -> Tensor:
    return L.linear(ps, "adapter.fc2", nx.silu(L.linear(ps, "adapter.fc1", h)))


def adapt_head(ps: ParamStore, dim_large: int, seed: int = 0) -> ModelParams:
    """Flow-head parameters re-hosted on a wider backbone.

    Returns a new store holding bitwise copies of the flow-head tensors plus an
    ``adapter`` group: a 2-layer MLP from ``dim_large`` to the original width.
    """
    cfg: ModelConfig = ps.config
    dim_small = cfg.model_dim
    if dim_large == dim_small:
        raise ValueError("adapt_head needs a different hidden size")
    rng = np.random.default_rng(seed)
    out = ModelParams(ModelConfig(**{**asdict(cfg), "model_dim": dim_large}))
    for p in ps.group("flow_head"):
        out.add(p.name, p.data.copy(), "flow_head", p.decay)
    L.add_linear(out, rng, "adapter.fc1", dim_large, dim_small, "adapter")
    L.add_linear(out, rng, "adapter.fc2", dim_small, dim_small, "adapter")
    return out


# -- checkpoints ----------------------------------------------------------------------------

MAGIC = b"UMMCKPT1"


def save_checkpoint(path, ps: ParamStore, config: dict | None = None, lineage: dict | None = None,
                    groups: list[str] | None = None) -> None:
    """8-byte magic, u64 LE header size, JSON header, raw <f8 payloads in manifest order."""
    tensors = [p for p in ps if groups is None or p.group in groups]
    manifest = [{"name": p.name, "group": p.group, "shape": list(p.shape), "decay": p.decay} for p in tensors]
    if config is None and hasattr(ps, "config"):
        config = asdict(ps.config)
    header = json.dumps({"config": config, "manifest": manifest, "lineage": lineage or {}},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for p in tensors:
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n])
    offset = 16 + n
    arrays: dict[str, np.ndarray] = {}
    for entry in header["manifest"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        end = offset + 8 * count
        if end > len(raw):
            raise ValueError(f"{path}: truncated payload for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw[offset:end], dtype="<f8").reshape(entry["shape"]).astype(np.float64)
        offset = end
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes after manifest payloads")
    return header, arrays


def load_checkpoint(path, into: ParamStore | None = None) -> tuple[dict, ParamStore]:
    """Load into ``into`` (shapes verified) or into a fresh store built from the header config."""
    header, arrays = read_checkpoint(path)
    if into is None:
        into = ModelParams(ModelConfig(**header["config"]))
        for entry in header["manifest"]:
            into.add(entry["name"], arrays[entry["name"]], entry["group"], entry["decay"])
        return header, into
    for entry in header["manifest"]:
        name = entry["name"]
        if name not in into:
            raise KeyError(f"{path}: tensor {name} not present in target parameters")
        if list(into[name].shape) != entry["shape"]:
            raise ValueError(f"{path}: {name} shape {entry['shape']} != {list(into[name].shape)}")
    into.load_state(arrays)
    return header, into
