"""Generator, GNN-augmented critic, and Wasserstein training with weight clipping."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffcore as dc
from .encoding import (
    EmbeddingTable,
    EncodedBatch,
    FieldSchema,
    Layout,
    decode_embedding,
    decode_onehot,
    embedding_layout,
    encode_embedding,
    encode_onehot,
    onehot_layout,
)
from .errors import ArtifactError, ConfigError, NumericError, ShapeError
from .gnn import GnnModel
from .trace_io import TraceDataset

log = logging.getLogger(__name__)

# name -> (encoding, use_gnn)
VARIANTS = {
    "onehot-wgan": ("onehot", False),
    "w2v-wgan": ("embedding", False),
    "w2v-gnn-wgan": ("embedding", True),
}


@dataclass
class TrainConfig:
    encoding: str = "embedding"
    use_gnn: bool = True
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
    seed: int = 7
    checkpoint_every: int = 0
    finetune_gnn: bool = False

    def __post_init__(self):
        if self.encoding not in ("onehot", "embedding"):
            raise ConfigError(f"encoding must be onehot or embedding, got {self.encoding!r}")
        if self.loss not in ("wasserstein", "vanilla"):
            raise ConfigError(f"loss must be wasserstein or vanilla, got {self.loss!r}")
        if self.n_critic < 1:
            raise ConfigError("n_critic must be >= 1")
        if self.clip <= 0:
            raise ConfigError("clip must be > 0")
        if self.use_gnn and self.encoding != "embedding":
            raise ConfigError("the GNN reads field graphs and needs embedding encoding")

    @classmethod
    def for_variant(cls, name: str, **overrides) -> "TrainConfig":
        if name not in VARIANTS:
            raise ConfigError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}")
        encoding, use_gnn = VARIANTS[name]
        return cls(encoding=encoding, use_gnn=use_gnn, **overrides)


class GeneratorModel:
    """Noise -> encoded row. One-hot mode ends in a softmax per field slice."""

    def __init__(self, layout: Layout, noise_dim: int, hidden: int, rng: np.random.Generator):
        self.layout = layout
        self.noise_dim = noise_dim
        self.mlp = dc.MLP(rng, [noise_dim, hidden, hidden, layout.width], "gen")

    @property
    def mode(self) -> str:
        return self.layout.mode

    def __call__(self, z) -> dc.Tensor:
        out = self.mlp(z)
        if self.mode == "onehot":
            out = dc.softmax_segments(out, self.layout.segments)
        return out

    def parameters(self):
        return self.mlp.parameters()


class DiscriminatorModel:
    def __init__(self, in_width: int, hidden: int, rng: np.random.Generator):
        self.in_width = in_width
        self.mlp = dc.MLP(rng, [in_width, hidden, hidden, 1], "critic")

    def __call__(self, x) -> dc.Tensor:
        x = dc.as_tensor(x)
        if x.shape[1] != self.in_width:
            raise ShapeError(f"critic expects width {self.in_width}, got {x.shape[1]}")
        return self.mlp(x)

    def parameters(self):
        return self.mlp.parameters()


def concat_features(x, f_gnn=None) -> dc.Tensor:
    """Row-wise [X, F_GNN]; with no deep features the raw rows pass through."""
    if f_gnn is None:
        return dc.as_tensor(x)
    x, f_gnn = dc.as_tensor(x), dc.as_tensor(f_gnn)
    if x.shape[0] != f_gnn.shape[0]:
        raise ShapeError(f"row count mismatch: {x.shape[0]} encoded rows vs {f_gnn.shape[0]} feature rows")
    return dc.concat_rows([x, f_gnn])


def model_layout(config: TrainConfig, schema: FieldSchema, table: EmbeddingTable | None) -> Layout:
    if config.encoding == "onehot":
        return onehot_layout(schema)
    if table is None:
        raise ArtifactError("embedding mode needs an embedding table")
    return embedding_layout(table.dim)


def build_models(config: TrainConfig, schema: FieldSchema, table: EmbeddingTable | None, gnn: GnnModel | None):
    """Construct (generator, discriminator) for ``config``; widths are checked here, not at run time."""
    layout = model_layout(config, schema, table)
    if config.use_gnn:
        if gnn is None:
            raise ArtifactError("GNN variant needs a pretrained GNN")
        if gnn.config.in_dim * gnn.n_nodes != layout.width:
            raise ShapeError(f"GNN input width {gnn.config.in_dim * gnn.n_nodes} != encoded width {layout.width}")
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])
    generator = GeneratorModel(layout, config.noise_dim, config.gen_hidden, rng)
    extra = gnn.config.out_dim if config.use_gnn else 0
    critic = DiscriminatorModel(layout.width + extra, config.critic_hidden, rng)
    return generator, critic


def _features(gnn, x, config, track: bool):
    if not config.use_gnn:
        return None
    if track:
        return gnn(x)
    return dc.Tensor(gnn(dc.Tensor(dc.as_tensor(x).data)).data)


def _score(critic, gnn, x, config, track_gnn=False) -> dc.Tensor:
    return critic(concat_features(x, _features(gnn, x, config, track_gnn)))


def _finite(value: float, what: str) -> float:
    if not np.isfinite(value):
        raise NumericError(f"non-finite {what}")
    return value


def critic_step(
    real: np.ndarray,
    noise: np.ndarray,
    generator: GeneratorModel,
    gnn: GnnModel | None,
    critic: DiscriminatorModel,
    config: TrainConfig,
    optimizer,
    real_features: np.ndarray | None = None,
) -> float:
    """One critic update. Generator and (unless fine-tuning) GNN parameters are not touched.

    ``real_features`` may carry precomputed GNN features for ``real`` (valid when the GNN is frozen).
    """
    fake = dc.Tensor(generator(noise).data)
    tune = config.use_gnn and config.finetune_gnn
    if config.use_gnn and real_features is not None and not tune:
        d_real = critic(concat_features(real, real_features))
    else:
        d_real = _score(critic, gnn, real, config, track_gnn=tune)
    d_fake = _score(critic, gnn, fake, config, track_gnn=tune)
    if config.loss == "wasserstein":
        loss = dc.sub(dc.mean(d_fake), dc.mean(d_real))
    else:
        loss = dc.scale(dc.add(dc.mean(dc.log_sigmoid(d_real)), dc.mean(dc.log_sigmoid(dc.scale(d_fake, -1.0)))), -1.0)
    value = _finite(float(loss.data), "critic loss")
    dc.backward(loss)
    optimizer.step()
    if config.loss == "wasserstein":
        dc.clip_weights(critic.parameters(), config.clip)
    dc.zero_grads(critic.parameters())
    if gnn is not None:
        dc.zero_grads(gnn.parameters())
    return value


def generator_loss(noise: np.ndarray, generator, gnn, critic, config) -> dc.Tensor:
    d_fake = _score(critic, gnn, generator(noise), config, track_gnn=True)
    if config.loss == "wasserstein":
        return dc.scale(dc.mean(d_fake), -1.0)
    return dc.scale(dc.mean(dc.log_sigmoid(d_fake)), -1.0)


def generator_step(noise: np.ndarray, generator, gnn, critic, config, optimizer) -> float:
    """One generator update; gradients reach G through the critic and the (frozen) GNN."""
    loss = generator_loss(noise, generator, gnn, critic, config)
    value = _finite(float(loss.data), "generator loss")
    dc.backward(loss)
    optimizer.step()
    dc.zero_grads(critic.parameters())
    if gnn is not None:
        dc.zero_grads(gnn.parameters())
    return value


@dataclass
class TrainReport:
    critic_losses: list = field(default_factory=list)
    generator_losses: list = field(default_factory=list)
    elapsed_ms: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    n_critic: int = 5

    def to_csv(self, path) -> None:
        """One row per generator step; ``critic_loss`` is the mean over that step's critic updates."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "critic_loss", "gen_loss", "elapsed_ms"])
            k = self.n_critic
            for i, g in enumerate(self.generator_losses):
                c = float(np.mean(self.critic_losses[i * k : (i + 1) * k]))
                w.writerow([i + 1, repr(c), repr(g), f"{self.elapsed_ms[i]:.3f}"])


def encode_for(config: TrainConfig, dataset: TraceDataset, schema: FieldSchema, table: EmbeddingTable | None) -> EncodedBatch:
    if config.encoding == "onehot":
        return encode_onehot(dataset.records, schema)
    if table is None:
        raise ArtifactError("embedding mode needs an embedding table")
    return encode_embedding(dataset.records, schema, table)


def train(
    dataset: TraceDataset,
    schema: FieldSchema,
    table: EmbeddingTable | None,
    gnn: GnnModel | None,
    config: TrainConfig,
    out_dir=None,
    callback: Callable[[int, GeneratorModel], None] | None = None,
) -> tuple[GeneratorModel, TrainReport]:
    """Alternate ``n_critic`` critic updates with one generator update for ``config.steps`` steps.

    ``callback(step, generator)`` fires at step 0 and at every checkpoint.
    """
    if len(dataset) == 0:
        raise ArtifactError("cannot train on an empty dataset")
    real_all = encode_for(config, dataset, schema, table).matrix
    generator, critic = build_models(config, schema, table, gnn)
    use_gnn = config.use_gnn
    real_feats = gnn(real_all).data if use_gnn and not config.finetune_gnn else None

    c_params = critic.parameters() + (gnn.parameters() if use_gnn and config.finetune_gnn else [])
    opt_c = dc.RMSProp(c_params, lr=config.lr_critic)
    opt_g = dc.RMSProp(generator.parameters(), lr=config.lr_generator)
    _, batch_seq, noise_seq = np.random.SeedSequence(config.seed).spawn(3)
    batch_rng, noise_rng = np.random.default_rng(batch_seq), np.random.default_rng(noise_seq)

    report = TrainReport(n_critic=config.n_critic)
    out = Path(out_dir) if out_dir is not None else None
    if callback:
        callback(0, generator)
    t0 = time.perf_counter()
    bs = config.batch_size
    for step in range(1, config.steps + 1):
        for _ in range(config.n_critic):
            idx = batch_rng.integers(0, len(real_all), size=bs)
            z = noise_rng.standard_normal((bs, config.noise_dim))
            rf = real_feats[idx] if real_feats is not None else None
            report.critic_losses.append(critic_step(real_all[idx], z, generator, gnn, critic, config, opt_c, rf))
        z = noise_rng.standard_normal((bs, config.noise_dim))
        report.generator_losses.append(generator_step(z, generator, gnn, critic, config, opt_g))
        report.elapsed_ms.append((time.perf_counter() - t0) * 1000.0)
        if config.checkpoint_every and (step % config.checkpoint_every == 0 or step == config.steps):
            if out is not None:
                path = out / f"generator-step{step:06d}.ckpt"
                dc.save_checkpoint(generator.parameters(), path)
                report.checkpoints.append(str(path))
            if callback:
                callback(step, generator)
        if step % 200 == 0:
            log.info("step %d critic %.5f gen %.5f", step, report.critic_losses[-1], report.generator_losses[-1])
    return generator, report


def sample_trace(
    generator: GeneratorModel,
    count: int,
    schema: FieldSchema,
    table: EmbeddingTable | None = None,
    seed: int = 0,
    batch_size: int = 1024,
) -> TraceDataset:
    """Draw ``count`` noise rows, run the generator and decode to header records."""
    rng = np.random.default_rng(seed)
    records = []
    for start in range(0, count, batch_size):
        n = min(batch_size, count - start)
        z = rng.standard_normal((n, generator.noise_dim))
        batch = EncodedBatch(generator(z).data, generator.layout)
        if generator.mode == "onehot":
            records.extend(decode_onehot(batch, schema, rng))
        else:
            if table is None:
                raise ArtifactError("embedding-mode generator needs its embedding table to decode")
            records.extend(decode_embedding(batch, schema, table))
    return TraceDataset(records, source_label="synthetic")


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
