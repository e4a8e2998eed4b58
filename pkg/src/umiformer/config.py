"""Run configuration: flat ``key=value`` files, ``UMIF_*`` environment
variables and ``--key value`` overrides, applied in that order over the
defaults below.

Defaults are the toy profile (runs on a laptop CPU). :meth:`RunConfig.full_scale`
returns the full-size settings.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping

from .decoder import DecoderConfig
from .encoder import EncoderConfig

ENV_PREFIX = "UMIF_"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # encoder
    image_size: int = 32
    patch_size: int = 8
    channels: int = 1
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    ivdb_period: int = 2
    ivdb_once: bool = False
    k: int = 3
    k_dpc: int = 5
    g: int = 16
    rectification_strategy: str = "offset_weight"
    merger: str = "stm"
    # decoder
    query_count: int = 8
    decoder_depth: int = 2
    voxel_size: int = 16
    upsample_stages: int = 3
    decoder_channels: tuple[int, ...] = (32, 16, 8)
    upsample_mode: str = "transposed"
    # data
    n_shapes: int = 200
    data_seed: int = 0
    # training
    n_views_train: int = 3
    batch_size: int = 4
    epochs: int = 30
    lr: float = 1e-3
    lr_decay_epochs: tuple[int, ...] = (25, 29)
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    threshold: float = 0.5
    seed: int = 0
    # paths
    dataset: str = "data"
    checkpoints: str = "checkpoints"
    reports: str = "reports"

    def __post_init__(self):
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.n_views_train < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("n_views_train and batch_size must be >= 1, epochs >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        try:
            self.encoder_config()
            self.decoder_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def full_scale(cls, **overrides) -> "RunConfig":
        values = dict(
            image_size=224, patch_size=16, channels=3, dim=768, depth=12, heads=12, mlp_ratio=4.0,
            ivdb_period=3, k=5, k_dpc=15, g=196, query_count=64, decoder_depth=8, voxel_size=32,
            upsample_stages=3, decoder_channels=(256, 128, 64), n_views_train=3, batch_size=32,
            epochs=150, lr=1e-4, lr_decay_epochs=(50, 120), threshold=0.5,
        )
        values.update(overrides)
        return cls(**values)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            image_size=self.image_size, patch_size=self.patch_size, channels=self.channels, dim=self.dim,
            depth=self.depth, heads=self.heads, mlp_ratio=self.mlp_ratio, ivdb_period=self.ivdb_period,
            ivdb_once=self.ivdb_once, k=self.k, k_dpc=self.k_dpc, g=self.g,
            rectification_strategy=self.rectification_strategy, merger=self.merger,
        )

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(
            query_count=self.query_count, decoder_depth=self.decoder_depth, dim=self.dim, heads=self.heads,
            mlp_ratio=self.mlp_ratio, voxel_size=self.voxel_size, upsample_stages=self.upsample_stages,
            channels=self.decoder_channels, upsample_mode=self.upsample_mode,
        )

    def to_text_map(self) -> dict[str, str]:
        return {k: _format_value(v) for k, v in asdict(self).items()}

    def dumps(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.to_text_map().items())

    def replace(self, **changes) -> "RunConfig":
        values = asdict(self)
        values.update(changes)
        return RunConfig(**values)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _parse_value(key: str, raw: str):
    default = _FIELDS[key].default
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_pairs(pairs: Mapping[str, str], source: str = "config") -> dict:
    out = {}
    for key, raw in pairs.items():
        name = key.strip().replace("-", "_")
        if name not in _FIELDS:
            raise ConfigError(f"unknown {source} key {key!r}")
        out[name] = _parse_value(name, raw)
    return out


def read_config_text(text: str, source: str = "config") -> dict:
    pairs = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source} line {n}: expected key=value, got {line!r}")
        pairs[key.strip()] = value
    return parse_pairs(pairs, source)


def env_overrides(environ: Mapping[str, str] | None = None) -> dict:
    environ = os.environ if environ is None else environ
    pairs = {k[len(ENV_PREFIX):].lower(): v for k, v in environ.items() if k.startswith(ENV_PREFIX)}
    return parse_pairs(pairs, "environment")


def load_config(path=None, overrides: Mapping[str, str] | None = None, environ: Mapping[str, str] | None = None) -> RunConfig:
    values: dict = {}
    if path is not None:
        values.update(read_config_text(Path(path).read_text(), str(path)))
    values.update(env_overrides(environ))
    if overrides:
        values.update(parse_pairs(overrides, "command-line"))
    return RunConfig(**values)


def config_from_meta(meta: Mapping[str, str]) -> RunConfig:
    """Rebuild the config stored in a checkpoint's metadata block."""
    pairs = {k: v for k, v in meta.items() if k in _FIELDS}
    return RunConfig(**parse_pairs(pairs, "checkpoint"))
