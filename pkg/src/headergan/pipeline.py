"""Stage artifacts with manifests, and the three-variant experiment driver.

Every artifact ``X`` in an output directory has a sibling ``X.manifest.json``
recording the artifact's own hash, the hashes of everything it was built
from, the config knobs that shaped it, the seed, and the tool version.
Downstream stages refuse artifacts whose recorded inputs no longer match.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import diffcore as dc
from .config import PipelineConfig
from .encoding import EmbeddingTable, FieldSchema, fit_schema, train_embeddings
from .errors import ArtifactError
from .gan import VARIANTS, build_models, sample_trace, train
from .gnn import AutoencoderModel, pretrain_autoencoder
from .metrics import MetricRow, emit_report, evaluate
from .trace_io import TraceDataset, read_trace, to_interarrival, write_csv

log = logging.getLogger(__name__)

SCHEMA, EMBEDDINGS, GNN = "schema.json", "embeddings.bin", "gnn.ckpt"
SCHEMA_KEYS = ("max_vocab", "buckets", "binning", "time_mode")
EMBED_KEYS = ("embed_dim", "embed_epochs", "negatives", "embed_lr", "seed")
GNN_KEYS = ("gnn_hidden", "gnn_layers", "gnn_out", "decoder_hidden", "ae_epochs", "ae_lr", "ae_batch", "seed")


def generator_name(variant: str) -> str:
    return f"generator-{variant}.ckpt"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Workspace:
    def __init__(self, out_dir):
        self.root = Path(out_dir)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.root / name

    def manifest_path(self, name: str) -> Path:
        return self.root / f"{name}.manifest.json"

    def write_manifest(self, name: str, inputs: dict, config: dict, seed=None) -> None:
        doc = {
            "artifact": name,
            "sha256": sha256_file(self.path(name)),
            "inputs": inputs,
            "config": config,
            "seed": seed,
            "tool_version": __version__,
            "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        }
        self.manifest_path(name).write_text(json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")

    def read_manifest(self, name: str) -> dict:
        mp = self.manifest_path(name)
        if not self.path(name).exists():
            raise ArtifactError(f"missing artifact {self.path(name)}")
        if not mp.exists():
            raise ArtifactError(f"missing manifest for {self.path(name)}")
        try:
            return json.loads(mp.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ArtifactError(f"{mp}: unreadable manifest ({exc})") from None

    def verify(self, name: str, inputs: dict | None = None, config: dict | None = None) -> dict:
        """Raise ``ArtifactError`` unless ``name`` is intact and was built from ``inputs`` and ``config``."""
        doc = self.read_manifest(name)
        if doc.get("sha256") != sha256_file(self.path(name)):
            raise ArtifactError(f"{name} was modified after its manifest was written")
        for key, digest in (inputs or {}).items():
            if doc.get("inputs", {}).get(key) != digest:
                raise ArtifactError(f"{name} is stale: it was built from a different {key}")
        for key, value in (config or {}).items():
            if doc.get("config", {}).get(key) != value:
                raise ArtifactError(f"{name} is stale: config {key} differs ({doc.get('config', {}).get(key)!r} != {value!r})")
        return doc

    def reusable(self, name: str, inputs: dict, config: dict) -> bool:
        if not self.path(name).exists():
            return False
        self.verify(name, inputs, config)
        return True


def load_dataset(path, cfg: PipelineConfig) -> TraceDataset:
    ds = read_trace(path)
    if len(ds) == 0:
        raise ArtifactError(f"{path}: no usable records")
    return to_interarrival(ds) if cfg.time_mode == "interarrival" else ds


def _input_hashes(ws: Workspace, input_path, *names: str) -> dict:
    out = {"input": sha256_file(input_path)}
    for n in names:
        out[n] = sha256_file(ws.path(n))
    return out


def stage_schema(ws: Workspace, input_path, cfg: PipelineConfig, reuse: bool = False) -> FieldSchema:
    inputs, conf = _input_hashes(ws, input_path), cfg.subset(*SCHEMA_KEYS)
    if not (reuse and ws.reusable(SCHEMA, inputs, conf)):
        schema = fit_schema(load_dataset(input_path, cfg), cfg.max_vocab, cfg.buckets, cfg.binning)
        schema.save(ws.path(SCHEMA))
        ws.write_manifest(SCHEMA, inputs, conf)
    return FieldSchema.load(ws.path(SCHEMA))


def _check_upstream(ws: Workspace, input_path, names) -> None:
    digest = sha256_file(input_path)
    for n in names:
        ws.verify(n, {"input": digest})


def stage_embeddings(ws: Workspace, input_path, cfg: PipelineConfig, reuse: bool = False) -> EmbeddingTable:
    _check_upstream(ws, input_path, [SCHEMA])
    inputs, conf = _input_hashes(ws, input_path, SCHEMA), cfg.subset(*EMBED_KEYS)
    if not (reuse and ws.reusable(EMBEDDINGS, inputs, conf)):
        schema = FieldSchema.load(ws.path(SCHEMA))
        ds = load_dataset(input_path, cfg)
        table = train_embeddings(ds, schema, cfg.embed_dim, cfg.embed_epochs, cfg.negatives, cfg.seed, cfg.embed_lr)
        table.save(ws.path(EMBEDDINGS))
        ws.write_manifest(EMBEDDINGS, inputs, conf, cfg.seed)
        log.info("skip-gram epoch losses: %s", ", ".join(f"{x:.4f}" for x in table.loss_history))
    return EmbeddingTable.load(ws.path(EMBEDDINGS))


def _load_autoencoder(ws: Workspace, cfg: PipelineConfig) -> AutoencoderModel:
    model = AutoencoderModel(cfg.gnn_config(), np.random.default_rng(0))
    dc.load_checkpoint(model.parameters(), ws.path(GNN))
    return model


def stage_gnn(ws: Workspace, input_path, cfg: PipelineConfig, reuse: bool = False) -> AutoencoderModel:
    _check_upstream(ws, input_path, [SCHEMA, EMBEDDINGS])
    ws.verify(EMBEDDINGS, {SCHEMA: sha256_file(ws.path(SCHEMA))})
    inputs, conf = _input_hashes(ws, input_path, SCHEMA, EMBEDDINGS), cfg.subset(*GNN_KEYS)
    if not (reuse and ws.reusable(GNN, inputs, conf)):
        schema = FieldSchema.load(ws.path(SCHEMA))
        table = EmbeddingTable.load(ws.path(EMBEDDINGS))
        ds = load_dataset(input_path, cfg)
        model = pretrain_autoencoder(ds, schema, table, cfg.gnn_config(), cfg.ae_epochs, cfg.seed, cfg.ae_lr, cfg.ae_batch)
        dc.save_checkpoint(model.parameters(), ws.path(GNN))
        ws.write_manifest(GNN, inputs, conf, cfg.seed)
        log.info("autoencoder loss %.5f -> %.5f", model.loss_history[0], model.loss_history[-1])
    return _load_autoencoder(ws, cfg)


def _variant_assets(ws: Workspace, variant: str):
    encoding, use_gnn = VARIANTS[variant]
    names = [SCHEMA] + ([EMBEDDINGS] if encoding == "embedding" else []) + ([GNN] if use_gnn else [])
    return encoding, use_gnn, names


def variant_seed(cfg: PipelineConfig, variant: str) -> int:
    return cfg.seed + list(VARIANTS).index(variant)


def _load_generator(ws: Workspace, cfg: PipelineConfig, variant: str, schema, table, gnn):
    tcfg = cfg.train_config(variant, variant_seed(cfg, variant))
    generator, _ = build_models(tcfg, schema, table, gnn)
    dc.load_checkpoint(generator.parameters(), ws.path(generator_name(variant)))
    return generator


def stage_train(ws: Workspace, input_path, cfg: PipelineConfig, variant: str, reuse: bool = False):
    if variant not in VARIANTS:
        raise ArtifactError(f"unknown variant {variant!r}")
    encoding, use_gnn, names = _variant_assets(ws, variant)
    _check_upstream(ws, input_path, names)
    tcfg = cfg.train_config(variant, variant_seed(cfg, variant))
    conf = {k: v for k, v in vars(tcfg).items()}
    name = generator_name(variant)
    inputs = _input_hashes(ws, input_path, *names)
    schema = FieldSchema.load(ws.path(SCHEMA))
    table = EmbeddingTable.load(ws.path(EMBEDDINGS)) if encoding == "embedding" else None
    gnn = _load_autoencoder(ws, cfg).encoder if use_gnn else None
    if reuse and ws.reusable(name, inputs, conf):
        return _load_generator(ws, cfg, variant, schema, table, gnn)
    ckpt_dir = ws.path(f"checkpoints-{variant}") if tcfg.checkpoint_every else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(exist_ok=True)
    generator, report = train(load_dataset(input_path, cfg), schema, table, gnn, tcfg, out_dir=ckpt_dir)
    dc.save_checkpoint(generator.parameters(), ws.path(name))
    report.to_csv(ws.path(f"train-{variant}.csv"))
    ws.write_manifest(name, inputs, conf, tcfg.seed)
    return generator


def stage_generate(ws: Workspace, cfg: PipelineConfig, variant: str, count: int, reuse: bool = False) -> TraceDataset:
    encoding, use_gnn, names = _variant_assets(ws, variant)
    gname = generator_name(variant)
    ws.verify(gname, {n: sha256_file(ws.path(n)) for n in names})
    out_name = f"synth-{variant}.csv"
    seed = variant_seed(cfg, variant)
    inputs = {gname: sha256_file(ws.path(gname))}
    conf = {"count": count, "seed": seed}
    if not (reuse and ws.reusable(out_name, inputs, conf)):
        schema = FieldSchema.load(ws.path(SCHEMA))
        table = EmbeddingTable.load(ws.path(EMBEDDINGS)) if encoding == "embedding" else None
        gnn = _load_autoencoder(ws, cfg).encoder if use_gnn else None
        generator = _load_generator(ws, cfg, variant, schema, table, gnn)
        synth = sample_trace(generator, count, schema, table, seed=seed)
        write_csv(synth, ws.path(out_name))
        ws.write_manifest(out_name, inputs, conf, seed)
    return read_trace(ws.path(out_name))


def _run_variant(args) -> list[MetricRow]:
    out_dir, input_path, cfg, variant, reuse, count = args
    ws = Workspace(out_dir)
    stage_train(ws, input_path, cfg, variant, reuse)
    synth = stage_generate(ws, cfg, variant, count, reuse)
    return evaluate(load_dataset(input_path, cfg), synth, bins=cfg.metric_bins, variant=variant)


def experiment(input_path, cfg: PipelineConfig, out_dir, force: bool = False, variants=tuple(VARIANTS)) -> list[MetricRow]:
    """Run every variant on one input trace and write metrics.csv + report.svg.

    Intermediates already present in ``out_dir`` are reused when their manifests
    match, rebuilt when ``force`` is set, and otherwise abort the run.
    """
    ws = Workspace(out_dir)
    reuse = not force
    log.info("resolved config:\n%s", cfg.to_text())
    dataset = load_dataset(input_path, cfg)
    stage_schema(ws, input_path, cfg, reuse)
    if any(VARIANTS[v][0] == "embedding" for v in variants):
        stage_embeddings(ws, input_path, cfg, reuse)
    if any(VARIANTS[v][1] for v in variants):
        stage_gnn(ws, input_path, cfg, reuse)
    count = cfg.sample_count or len(dataset)
    jobs = [(str(ws.root), str(input_path), cfg, v, reuse, count) for v in variants]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_run_variant, jobs))
    else:
        results = [_run_variant(j) for j in jobs]
    rows = [r for rs in results for r in rs]
    emit_report(rows, ws.root)
    return rows
