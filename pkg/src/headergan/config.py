"""Pipeline configuration: one flat namespace of knobs, ``key = value`` files, CLI overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .gan import TrainConfig
from .gnn import GnnConfig


@dataclass
class PipelineConfig:
    seed: int = 7
    # reference traces
    n_records: int = 2000
    time_mode: str = "relative"  # or "interarrival"
    # schema
    max_vocab: int = 64
    buckets: int = 16
    binning: str = "width"
    # skip-gram
    embed_dim: int = 32
    embed_epochs: int = 5
    negatives: int = 5
    embed_lr: float = 0.025
    # gnn / autoencoder
    gnn_hidden: int = 32
    gnn_layers: int = 2
    gnn_out: int = 16
    decoder_hidden: int = 128
    ae_epochs: int = 50
    ae_lr: float = 1e-3
    ae_batch: int = 32
    # gan
    loss: str = "wasserstein"
    batch_size: int = 64
    n_critic: int = 5
    clip: float = 0.01
    lr_critic: float = 5e-5
    lr_generator: float = 5e-5
    steps: int = 2000
    noise_dim: int = 64
    gen_hidden: int = 256
    critic_hidden: int = 256
    checkpoint_every: int = 0
    finetune_gnn: bool = False
    # evaluation
    metric_bins: int = 100
    sample_count: int = 0  # 0: match the input trace size
    jobs: int = 1

    def __post_init__(self):
        if self.time_mode not in ("relative", "interarrival"):
            raise ConfigError(f"time_mode must be relative or interarrival, got {self.time_mode!r}")
        if self.binning not in ("width", "quantile"):
            raise ConfigError(f"binning must be width or quantile, got {self.binning!r}")
        for name in ("max_vocab", "buckets", "embed_dim", "embed_epochs", "ae_epochs", "steps", "n_critic", "batch_size", "metric_bins", "jobs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    def gnn_config(self) -> GnnConfig:
        return GnnConfig(
            in_dim=self.embed_dim,
            hidden=self.gnn_hidden,
            layers=self.gnn_layers,
            out_dim=self.gnn_out,
            decoder_hidden=self.decoder_hidden,
        )

    def train_config(self, variant: str, seed: int) -> TrainConfig:
        return TrainConfig.for_variant(
            variant,
            loss=self.loss,
            batch_size=self.batch_size,
            n_critic=self.n_critic,
            clip=self.clip,
            lr_critic=self.lr_critic,
            lr_generator=self.lr_generator,
            steps=self.steps,
            noise_dim=self.noise_dim,
            gen_hidden=self.gen_hidden,
            critic_hidden=self.critic_hidden,
            seed=seed,
            checkpoint_every=self.checkpoint_every,
            finetune_gnn=self.finetune_gnn,
        )

    def subset(self, *names: str) -> dict:
        return {n: getattr(self, n) for n in names}

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.as_dict().items())


FIELD_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def coerce(name: str, raw: str):
    if name not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {name!r}")
    kind = FIELD_TYPES[name]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        try:
            values[key] = coerce(key, raw)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return values


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(encoding="utf-8"), str(path)))
    values.update(overrides or {})
    return PipelineConfig(**values)
