"""Command-line driver.

Exit codes: 0 ok, 1 usage/config, 2 bad input data or stale/missing artifacts,
3 numeric failure, 4 I/O.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import __version__
from .config import PipelineConfig, coerce, load_config
from .errors import HeaderGanError
from .gan import VARIANTS
from .metrics import emit_report, evaluate
from .pipeline import (
    Workspace,
    experiment,
    load_dataset,
    stage_embeddings,
    stage_generate,
    stage_gnn,
    stage_schema,
    stage_train,
)
from .trace_io import ReferenceSpec, generate_reference, read_trace, write_csv

log = logging.getLogger("headergan")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 1, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("pipeline config (override --config)")
    for f in fields(PipelineConfig):
        g.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, metavar=f.type.upper(), default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="headergan", description="Train GAN generators for packet-header traces and score them against real traces.")
    parser.add_argument("--version", action="version", version=f"headergan {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, help_text, needs_input=True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out", required=True, type=Path, help="artifact directory")
        p.add_argument("--config", type=Path, help="key = value config file")
        if needs_input:
            p.add_argument("--input", required=True, type=Path, help="trace (.csv or .pcap)")
        _add_config_flags(p)
        return p

    cmd("synth-reference", "write a seeded synthetic reference trace", needs_input=False)
    cmd("fit-schema", "fit vocabularies and bucket edges")
    cmd("train-embeddings", "train skip-gram field embeddings")
    cmd("pretrain-gnn", "pretrain the GNN as an autoencoder encoder")
    p = cmd("train", "train one generator variant")
    p.add_argument("--variant", required=True, choices=list(VARIANTS))
    p = cmd("generate", "sample a synthetic trace from a trained generator", needs_input=False)
    p.add_argument("--variant", required=True, choices=list(VARIANTS))
    p.add_argument("--count", type=int, default=1000)
    p = sub.add_parser("evaluate", help="per-field JS / normalised EMD between two traces")
    p.add_argument("--real", required=True, type=Path)
    p.add_argument("--synth", required=True, type=Path)
    p.add_argument("--out", type=Path, help="write metrics.csv and report.svg here")
    p.add_argument("--variant", default="synthetic")
    p.add_argument("--config", type=Path)
    _add_config_flags(p)
    p = cmd("experiment", "run all three variants and write the comparison report")
    p.add_argument("--force", action="store_true", help="rebuild intermediates instead of reusing them")
    return parser


def resolve_config(args) -> PipelineConfig:
    overrides = {}
    for f in fields(PipelineConfig):
        raw = getattr(args, "cfg_" + f.name, None)
        if raw is not None:
            overrides[f.name] = coerce(f.name, raw)
    cfg = load_config(getattr(args, "config", None), overrides)
    log.info("resolved config:\n%s", cfg.to_text().rstrip())
    return cfg


def _print_rows(rows) -> None:
    for r in rows:
        print(f"{r.variant}\t{r.field}\t{r.metric}\t{r.value:.6f}")


def run(args) -> int:
    cfg = resolve_config(args)
    c = args.command
    if c == "evaluate":
        rows = evaluate(load_dataset(args.real, cfg), load_dataset(args.synth, cfg), bins=cfg.metric_bins, variant=args.variant)
        if args.out:
            emit_report(rows, args.out)
        _print_rows(rows)
        return 0
    ws = Workspace(args.out)
    if c == "synth-reference":
        ds = generate_reference(ReferenceSpec(n_records=cfg.n_records, seed=cfg.seed))
        write_csv(ds, ws.path("trace.csv"))
        ws.write_manifest("trace.csv", {}, cfg.subset("n_records"), cfg.seed)
        print(ws.path("trace.csv"))
    elif c == "fit-schema":
        stage_schema(ws, args.input, cfg)
    elif c == "train-embeddings":
        stage_embeddings(ws, args.input, cfg)
    elif c == "pretrain-gnn":
        stage_gnn(ws, args.input, cfg)
    elif c == "train":
        stage_train(ws, args.input, cfg, args.variant)
    elif c == "generate":
        stage_generate(ws, cfg, args.variant, args.count)
        print(ws.path(f"synth-{args.variant}.csv"))
    elif c == "experiment":
        _print_rows(experiment(args.input, cfg, ws.root, force=args.force))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except HeaderGanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
