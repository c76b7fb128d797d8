"""Parameter container and the transformer building blocks shared by all modules."""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from . import numerics as nx
from .numerics import Parameter, Tensor

GROUPS = ("backbone", "lm_head", "flow_head", "semantic", "projector", "fusion", "time_embed", "adapter")


class ParamStore:
    """Named parameters, each owned by exactly one group."""

    def __init__(self):
        self.tensors: dict[str, Parameter] = {}

    def add(self, name: str, data: np.ndarray, group: str, decay: bool = False) -> Parameter:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name}")
        if group not in GROUPS:
            raise KeyError(f"unknown parameter group {group}")
        p = Parameter(data, name=name, group=group, decay=decay)
        self.tensors[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors.values())

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def groups(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for name, p in self.tensors.items():
            out.setdefault(p.group, []).append(name)
        return out

    def group(self, group: str) -> list[Parameter]:
        return [p for p in self.tensors.values() if p.group == group]

    def has_group(self, group: str) -> bool:
        return any(p.group == group for p in self.tensors.values())

    def set_trainable(self, groups: Iterable[str] | None) -> None:
        """``None`` makes everything trainable."""
        groups = None if groups is None else set(groups)
        for p in self.tensors.values():
            p.requires_grad = groups is None or p.group in groups

    def trainable(self) -> list[Parameter]:
        return [p for p in self.tensors.values() if p.requires_grad]

    def zero_grad(self) -> None:
        for p in self.tensors.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.tensors.items()}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        for k, arr in state.items():
            if k not in self.tensors:
                if strict:
                    raise KeyError(f"unexpected tensor {k}")
                continue
            if self.tensors[k].shape != arr.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {self.tensors[k].shape}")
            self.tensors[k].data = np.array(arr, dtype=np.float64)


# -- initialisers ---------------------------------------------------------------

def dense_init(rng: np.random.Generator, fan_in: int, fan_out: int, scale: float = 1.0) -> np.ndarray:
    return rng.standard_normal((fan_in, fan_out)) * (scale / math.sqrt(fan_in))


def add_linear(ps: ParamStore, rng, name: str, d_in: int, d_out: int, group: str,
               bias: bool = True, scale: float = 1.0, zero: bool = False) -> None:
    w = np.zeros((d_in, d_out)) if zero else dense_init(rng, d_in, d_out, scale)
    ps.add(f"{name}.w", w, group, decay=True)
    if bias:
        ps.add(f"{name}.b", np.zeros(d_out), group)


def linear(ps: ParamStore, name: str, x) -> Tensor:
    y = nx.matmul(x, ps[f"{name}.w"])
    b = f"{name}.b"
    return nx.add(y, ps[b]) if b in ps else y


def add_block(ps: ParamStore, rng, name: str, dim: int, mlp_ratio: int, group: str, n_layers: int,
              norm_gains: bool = True) -> None:
    """Pre-norm transformer block parameters; ``norm_gains=False`` for blocks whose norms are modulated."""
    out_scale = 1.0 / math.sqrt(2 * n_layers)
    if norm_gains:
        ps.add(f"{name}.norm1", np.ones(dim), group)
    add_linear(ps, rng, f"{name}.qkv", dim, 3 * dim, group, bias=False)
    add_linear(ps, rng, f"{name}.proj", dim, dim, group, bias=False, scale=out_scale)
    if norm_gains:
        ps.add(f"{name}.norm2", np.ones(dim), group)
    add_linear(ps, rng, f"{name}.fc1", dim, mlp_ratio * dim, group)
    add_linear(ps, rng, f"{name}.fc2", mlp_ratio * dim, dim, group, scale=out_scale)


def attention(ps: ParamStore, name: str, x, n_heads: int, mask: np.ndarray | None) -> Tensor:
    """Multi-head self-attention over x [B, L, D]; ``mask`` is [B, L, L] or None."""
    B, L, D = x.shape
    dh = D // n_heads
    qkv = linear(ps, f"{name}.qkv", x).reshape(B, L, 3, n_heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = nx.mul(nx.matmul(q, k.transpose(0, 1, 3, 2)), 1.0 / math.sqrt(dh))
    p = nx.masked_softmax(scores, None if mask is None else mask[:, None])
    o = nx.matmul(p, v).transpose(0, 2, 1, 3).reshape(B, L, D)
    return linear(ps, f"{name}.proj", o)


def mlp(ps: ParamStore, name: str, x) -> Tensor:
    return linear(ps, f"{name}.fc2", nx.silu(linear(ps, f"{name}.fc1", x)))


def block(ps: ParamStore, name: str, x, n_heads: int, mask: np.ndarray | None) -> Tensor:
    """Pre-norm transformer block."""
    x = nx.add(x, attention(ps, f"{name}", nx.rms_norm(x, ps[f"{name}.norm1"]), n_heads, mask))
    return nx.add(x, mlp(ps, name, nx.rms_norm(x, ps[f"{name}.norm2"])))


def sinusoidal(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """[..] noise levels in [0, 1] -> [.., dim] cos/sin features (t scaled by 1000)."""
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = (t[..., None] * 1000.0) * freqs
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)
