"""Run configuration stored as a flat ``dotted.key = value`` text file.

Values are JSON literals (numbers, strings in quotes, true/false, null);
bare words are read as strings.  Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from ..backbone import ModelConfig
from ..latents import CodecConfig
from ..sampling import SamplerConfig
from ..training import STAGE1_GROUPS, STAGE2_GROUPS, StageSpec

HOME_VAR = "SHOWO2_TOY_HOME"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_gen: int = 64
    n_und: int = 64
    n_video: int = 0
    n_interleaved: int = 0
    max_objects: int = 2
    height: int = 32
    width: int = 32
    frames: int = 5
    seed: int = 0


@dataclass
class StageConfig:
    steps: int = 100
    lr: float = 1e-3
    schedule: str = "constant"
    batch_size: int = 16
    weights: dict = field(default_factory=lambda: {"gen": 1.0})
    caption_dropout: float = 0.1
    mm_p_all: float = 0.3
    weight_decay: float = 0.01
    max_grad_norm: float | None = 1.0
    noise_prob: float = 0.3
    noise_last_frac: float = 0.1


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = ""
    codec: CodecConfig = field(default_factory=lambda: CodecConfig(8, 1))
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    distill: StageConfig = field(default_factory=lambda: StageConfig(steps=300, lr=3e-3, schedule="cosine"))
    stage1: StageConfig = field(default_factory=lambda: StageConfig(steps=200))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(steps=600, weights={"gen": 1.0, "und": 0.5}))
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self):
        if self.model.latent_patch_dim != self.codec.patch_dim:
            raise ConfigError(f"model.latent_patch_dim={self.model.latent_patch_dim} but the codec "
                              f"produces {self.codec.patch_dim}-dim patches")
        s = self.codec.spatial_factor
        if self.data.height % (2 * s) or self.data.width % (2 * s):
            raise ConfigError("canvas must be divisible by 2 * codec.spatial_factor")
        if (self.data.frames - 1) % self.codec.temporal_factor:
            raise ConfigError("data.frames must be 1 mod codec.temporal_factor")

    # -- derived objects
    def stage_spec(self, name: str) -> StageSpec:
        sc: StageConfig = getattr(self, name)
        groups = {"distill": ("semantic",), "stage1": STAGE1_GROUPS, "stage2": STAGE2_GROUPS}[name]
        alpha = {"distill": 0.0, "stage1": 0.2, "stage2": 1.0}[name]
        return StageSpec(name, groups, alpha=alpha, seed=self.seed, **asdict(sc))

    def output_root(self) -> Path:
        return Path(self.out_dir or os.environ.get(HOME_VAR) or "runs")

    def digest(self) -> str:
        return hashlib.sha256(to_text(self, with_out_dir=False).encode()).hexdigest()[:12]

    def run_dir(self) -> Path:
        """Run-stamped directory: deterministic in the config so reruns land in the same place."""
        return self.output_root() / f"run-{self.seed}-{self.digest()}"


def _flatten(obj, prefix: str = "") -> dict:
    out = {}
    items = asdict(obj).items() if is_dataclass(obj) else obj.items()
    for k, v in items:
        key = f"{prefix}{k}"
        if isinstance(v, dict) and v and not key.endswith("weights"):
            out.update(_flatten(v, key + "."))
        elif isinstance(v, dict):
            for wk, wv in v.items():
                out[f"{key}.{wk}"] = wv
        else:
            out[key] = v
    return out


def to_text(cfg: RunConfig, with_out_dir: bool = True) -> str:
    flat = _flatten(cfg)
    if not with_out_dir:
        flat.pop("out_dir")
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in sorted(flat.items()))


def _parse_value(raw: str):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(cfg: RunConfig, pairs: dict) -> RunConfig:
    """New config with dotted ``key -> value`` overrides applied (values already parsed)."""
    tree = asdict(cfg)
    for key, value in pairs.items():
        parts = key.split(".")
        node = tree
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise ConfigError(f"unknown config key {key}")
            node = node[p]
        leaf = parts[-1]
        if parts[-2:-1] == ["weights"] or (len(parts) >= 2 and parts[-2] == "weights"):
            node[leaf] = float(value)
        elif not isinstance(node, dict) or leaf not in node or isinstance(node[leaf], dict):
            raise ConfigError(f"unknown config key {key}")
        else:
            node[leaf] = value
    return from_tree(tree)


def from_tree(tree: dict) -> RunConfig:
    kinds = {f.name: f for f in fields(RunConfig)}
    ctors = {"codec": CodecConfig, "model": ModelConfig, "data": DataConfig, "sampler": SamplerConfig,
             "distill": StageConfig, "stage1": StageConfig, "stage2": StageConfig}
    kw = {}
    for k, v in tree.items():
        if k not in kinds:
            raise ConfigError(f"unknown config key {k}")
        try:
            kw[k] = ctors[k](**v) if k in ctors else v
        except TypeError as exc:
            raise ConfigError(f"{k}: {exc}") from exc
    return RunConfig(**kw)


def parse_text(text: str, base: RunConfig | None = None) -> RunConfig:
    pairs = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        k, v = line.split("=", 1)
        pairs[k.strip()] = _parse_value(v)
    if base is None:
        # weights in a file replace the default mix instead of merging into it
        base = RunConfig()
        for stage in ("distill", "stage1", "stage2"):
            if any(k.startswith(f"{stage}.weights.") for k in pairs):
                getattr(base, stage).weights = {}
    return apply_overrides(base, pairs)


def load(path) -> RunConfig:
    return parse_text(Path(path).read_text())


def save(cfg: RunConfig, path) -> None:
    Path(path).write_text(to_text(cfg))
