"""Field schemas, one-hot and skip-gram embedding encodings, and decoding.

Every header field maps to a finite token set: discrete fields keep their
most frequent values plus an out-of-vocabulary slot, continuous fields are
cut into buckets. One-hot rows and embedding rows are both laid out field by
field in canonical order, and an ``EncodedBatch`` carries that layout with it.
"""

from __future__ import annotations

import json
import struct
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ArtifactError, ShapeError, TraceFormatError
from .trace_io import CONTINUOUS_FIELDS, DISCRETE_FIELDS, FIELDS, HeaderRecord, TraceDataset, make_record

OOV = "<OOV>"


def _value_token(v) -> str:
    return str(v)


@dataclass(frozen=True)
class FieldSchema:
    vocabs: dict  # discrete field -> tuple of value strings, OOV last
    edges: dict  # continuous field -> tuple of m+1 ascending floats

    def __post_init__(self):
        for f, v in self.vocabs.items():
            if len(set(v)) != len(v):
                raise ValueError(f"duplicate tokens in vocabulary of {f}")
            if not v or v[-1] != OOV:
                raise ValueError(f"vocabulary of {f} must end with the OOV token")
        for f, e in self.edges.items():
            e = np.asarray(e)
            if e.size < 2 or np.any(np.diff(e) <= 0):
                raise ValueError(f"bucket edges of {f} must be strictly ascending, at least 2")

    def cardinality(self, name: str) -> int:
        if name in self.vocabs:
            return len(self.vocabs[name])
        return len(self.edges[name]) - 1

    @property
    def fields(self) -> tuple[str, ...]:
        return tuple(f for f in FIELDS if f in self.vocabs or f in self.edges)

    @property
    def cardinalities(self) -> list[int]:
        return [self.cardinality(f) for f in self.fields]

    def midpoints(self, name: str) -> np.ndarray:
        e = np.asarray(self.edges[name], dtype=float)
        return (e[:-1] + e[1:]) / 2.0

    def bucket(self, name: str, values) -> np.ndarray:
        e = np.asarray(self.edges[name], dtype=float)
        idx = np.searchsorted(e, np.asarray(values, dtype=float), side="right") - 1
        return np.clip(idx, 0, len(e) - 2)

    def indices(self, records: Sequence[HeaderRecord]) -> np.ndarray:
        """(n_records, 10) matrix of per-field token indices."""
        out = np.zeros((len(records), len(FIELDS)), dtype=np.int64)
        for j, f in enumerate(FIELDS):
            col = [getattr(r, f) for r in records]
            if f in self.vocabs:
                lookup = {t: i for i, t in enumerate(self.vocabs[f])}
                oov = len(self.vocabs[f]) - 1
                out[:, j] = [lookup.get(_value_token(v), oov) for v in col]
            elif col:
                out[:, j] = self.bucket(f, col)
        return out

    def tokens(self, name: str) -> list[str]:
        """Field-namespaced token strings, one per index."""
        if name in self.vocabs:
            return [f"{name}:{t}" for t in self.vocabs[name]]
        return [f"{name}:b{i}" for i in range(self.cardinality(name))]

    def to_json(self) -> str:
        doc = {"version": 1, "fields": []}
        for f in FIELDS:
            if f in self.vocabs:
                doc["fields"].append({"name": f, "kind": "discrete", "vocab": list(self.vocabs[f])})
            else:
                doc["fields"].append({"name": f, "kind": "continuous", "edges": [float(x) for x in self.edges[f]]})
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "FieldSchema":
        try:
            doc = json.loads(text)
            vocabs, edges = {}, {}
            for entry in doc["fields"]:
                if entry["kind"] == "discrete":
                    vocabs[entry["name"]] = tuple(entry["vocab"])
                else:
                    edges[entry["name"]] = tuple(float(x) for x in entry["edges"])
            return cls(vocabs, edges)
        except (KeyError, TypeError, ValueError) as exc:
            raise ArtifactError(f"malformed schema document: {exc}") from None

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "FieldSchema":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def fit_schema(dataset: TraceDataset, max_vocab: int = 64, buckets_per_field: int = 16, binning: str = "width") -> FieldSchema:
    """Keep the ``max_vocab`` most frequent tokens per discrete field; bucket continuous fields.

    Frequency ties break lexicographically. ``binning`` is ``"width"`` (equal-width
    over the observed range) or ``"quantile"``.
    """
    if len(dataset) == 0:
        raise TraceFormatError("cannot fit a schema on an empty dataset")
    if max_vocab < 1 or buckets_per_field < 1:
        raise ValueError("max_vocab and buckets_per_field must be >= 1")
    vocabs = {}
    for f in DISCRETE_FIELDS:
        counts = Counter(_value_token(v) for v in dataset.column(f))
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        vocabs[f] = tuple(t for t, _ in ranked[:max_vocab]) + (OOV,)
    edges = {}
    for f in CONTINUOUS_FIELDS:
        vals = np.asarray(dataset.column(f), dtype=float)
        lo, hi = float(vals.min()), float(vals.max())
        if hi == lo:
            warnings.warn(f"field {f} is constant ({lo}); using one degenerate bucket", stacklevel=2)
            edges[f] = (lo - 0.5, lo + 0.5)
        elif binning == "quantile":
            e = np.unique(np.quantile(vals, np.linspace(0, 1, buckets_per_field + 1)))
            edges[f] = tuple(float(x) for x in e)
        elif binning == "width":
            edges[f] = tuple(float(x) for x in np.linspace(lo, hi, buckets_per_field + 1))
        else:
            raise ValueError(f"unknown binning {binning!r}")
    return FieldSchema(vocabs, edges)


def total_onehot_dim(schema: FieldSchema) -> int:
    """Sum of vocabulary sizes (OOV included) plus sum of bucket counts."""
    return sum(len(v) for v in schema.vocabs.values()) + sum(len(e) - 1 for e in schema.edges.values())


# -- batches and layouts ---------------------------------------------------------


@dataclass(frozen=True)
class Layout:
    mode: str  # "onehot" or "embedding"
    slices: tuple  # ((field, start, stop), ...) in canonical order

    @property
    def width(self) -> int:
        return self.slices[-1][2] if self.slices else 0

    def span(self, name: str) -> tuple[int, int]:
        for f, a, b in self.slices:
            if f == name:
                return a, b
        raise KeyError(name)

    @property
    def segments(self) -> list[tuple[int, int]]:
        return [(a, b) for _, a, b in self.slices]


def _layout(mode: str, widths: Sequence[int]) -> Layout:
    pos, slices = 0, []
    for f, w in zip(FIELDS, widths):
        slices.append((f, pos, pos + w))
        pos += w
    return Layout(mode, tuple(slices))


def onehot_layout(schema: FieldSchema) -> Layout:
    return _layout("onehot", schema.cardinalities)


def embedding_layout(dim: int) -> Layout:
    return _layout("embedding", [dim] * len(FIELDS))


@dataclass
class EncodedBatch:
    matrix: np.ndarray
    layout: Layout

    def field(self, name: str) -> np.ndarray:
        a, b = self.layout.span(name)
        return self.matrix[:, a:b]

    def __len__(self):
        return self.matrix.shape[0]


def encode_onehot(records: Sequence[HeaderRecord], schema: FieldSchema) -> EncodedBatch:
    layout = onehot_layout(schema)
    idx = schema.indices(records)
    mat = np.zeros((len(records), layout.width))
    rows = np.arange(len(records))
    for j, (_, a, _b) in enumerate(layout.slices):
        mat[rows, a + idx[:, j]] = 1.0
    return EncodedBatch(mat, layout)


def indices_to_records(idx: np.ndarray, schema: FieldSchema) -> list[HeaderRecord]:
    """Map token indices back to typed records; buckets become their midpoints."""
    mids = {f: schema.midpoints(f) for f in CONTINUOUS_FIELDS}
    records = []
    for row in idx:
        vals = {}
        for j, f in enumerate(FIELDS):
            if f in schema.vocabs:
                tok = schema.vocabs[f][row[j]]
                if tok == OOV:
                    raise ValueError(f"cannot materialise the OOV token for {f}")
                vals[f] = tok
            else:
                vals[f] = mids[f][row[j]]
        records.append(make_record(vals))
    return records


def _in_vocab_count(schema: FieldSchema, name: str) -> int:
    # OOV is never emitted by decoders
    return schema.cardinality(name) - 1 if name in schema.vocabs else schema.cardinality(name)


def decode_onehot(batch: EncodedBatch, schema: FieldSchema, rng: np.random.Generator | None = None) -> list[HeaderRecord]:
    """Per-field argmax, or categorical sampling when ``rng`` is given, over in-vocabulary slots."""
    idx = np.zeros((len(batch), len(FIELDS)), dtype=np.int64)
    for j, f in enumerate(FIELDS):
        p = np.clip(batch.field(f)[:, : _in_vocab_count(schema, f)], 0.0, None)
        if rng is None:
            idx[:, j] = p.argmax(axis=1)
            continue
        tot = p.sum(axis=1, keepdims=True)
        p = np.where(tot > 0, p / np.where(tot > 0, tot, 1.0), 1.0 / p.shape[1])
        cdf = np.cumsum(p, axis=1)
        u = rng.random((len(batch), 1))
        idx[:, j] = np.minimum((u > cdf).sum(axis=1), p.shape[1] - 1)
    return indices_to_records(idx, schema)


# -- skip-gram embeddings -----------------------------------------------------------


@dataclass
class EmbeddingTable:
    dim: int
    matrices: dict  # field -> (cardinality, dim) array
    loss_history: list = field(default_factory=list)

    def row(self, name: str, index: int) -> np.ndarray:
        return self.matrices[name][index]

    def vector(self, schema: FieldSchema, name: str, value) -> np.ndarray:
        vocab = schema.vocabs.get(name)
        if vocab is None:
            return self.matrices[name][int(schema.bucket(name, [value])[0])]
        tok = _value_token(value)
        return self.matrices[name][vocab.index(tok) if tok in vocab else len(vocab) - 1]

    def check(self, schema: FieldSchema) -> None:
        for f in FIELDS:
            m = self.matrices.get(f)
            if m is None or m.shape != (schema.cardinality(f), self.dim):
                raise ArtifactError(f"embedding table does not match schema at field {f}")

    def save(self, path) -> None:
        chunks = [b"HGEM", struct.pack("<II", len(FIELDS), self.dim)]
        for f in FIELDS:
            m = self.matrices[f]
            chunks.append(struct.pack("<I", m.shape[0]))
            chunks.append(np.ascontiguousarray(m, dtype="<f4").tobytes())
        Path(path).write_bytes(b"".join(chunks))

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        buf = Path(path).read_bytes()
        if buf[:4] != b"HGEM":
            raise ArtifactError(f"{path}: not an embedding table")
        n_fields, dim = struct.unpack_from("<II", buf, 4)
        if n_fields != len(FIELDS):
            raise ArtifactError(f"{path}: expected {len(FIELDS)} fields, found {n_fields}")
        off, mats = 12, {}
        try:
            for f in FIELDS:
                (rows,) = struct.unpack_from("<I", buf, off)
                off += 4
                mats[f] = np.frombuffer(buf, dtype="<f4", count=rows * dim, offset=off).reshape(rows, dim).astype(np.float64)
                off += 4 * rows * dim
        except (struct.error, ValueError) as exc:
            raise ArtifactError(f"{path}: truncated embedding table ({exc})") from None
        return cls(dim, mats)


def _log_sigmoid(x):
    return np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))


def train_embeddings(
    dataset: TraceDataset,
    schema: FieldSchema,
    dim: int = 32,
    epochs: int = 5,
    negatives: int = 5,
    seed: int = 7,
    lr: float = 0.025,
) -> EmbeddingTable:
    """Skip-gram with negative sampling; one record is one sentence of 10 tokens.

    The context window spans the whole record. Tokens are namespaced by field,
    so all fields share one vocabulary without collisions. Updates are applied
    record by record, with the learning rate decaying linearly to 1e-4 * lr.
    """
    if dim < 2:
        raise ValueError("embedding dimension must be >= 2")
    if len(dataset) == 0:
        raise TraceFormatError("cannot train embeddings on an empty dataset")
    cards = schema.cardinalities
    offsets = np.concatenate([[0], np.cumsum(cards)[:-1]])
    vocab_size = int(sum(cards))
    sentences = schema.indices(dataset.records) + offsets

    counts = np.bincount(sentences.ravel(), minlength=vocab_size).astype(float)
    noise = counts**0.75
    noise /= noise.sum()
    noise_cdf = np.cumsum(noise)
    live = int((counts > 0).sum())
    k = negatives
    if live < k + 1:
        k = max(live - 1, 0)
        warnings.warn(f"only {live} distinct tokens; reducing negatives from {negatives} to {k}", stacklevel=2)

    rng = np.random.default_rng(seed)
    w_in = (rng.random((vocab_size, dim)) - 0.5) / dim
    w_out = np.zeros((vocab_size, dim))

    n_fields = len(FIELDS)
    ci, oi = np.nonzero(~np.eye(n_fields, dtype=bool))
    n_pairs = ci.size
    total = epochs * len(sentences)
    step = 0
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(sentences))
        epoch_loss = 0.0
        for r in order:
            alpha = lr * max(1e-4, 1.0 - step / total)
            step += 1
            s = sentences[r]
            centers, targets = s[ci], s[oi]
            negs = np.searchsorted(noise_cdf, rng.random((n_pairs, k)) * noise_cdf[-1], side="right")
            negs = np.minimum(negs, vocab_size - 1)

            v = w_in[centers]
            u_pos = w_out[targets]
            u_neg = w_out[negs]
            x_pos = np.einsum("pd,pd->p", v, u_pos)
            x_neg = np.einsum("pd,pkd->pk", v, u_neg)
            epoch_loss -= _log_sigmoid(x_pos).sum() + _log_sigmoid(-x_neg).sum()

            g_pos = 1.0 / (1.0 + np.exp(-x_pos)) - 1.0
            g_neg = 1.0 / (1.0 + np.exp(-x_neg))
            grad_v = g_pos[:, None] * u_pos + np.einsum("pk,pkd->pd", g_neg, u_neg)
            np.add.at(w_out, targets, -alpha * g_pos[:, None] * v)
            np.add.at(w_out, negs, -alpha * g_neg[:, :, None] * v[:, None, :])
            np.add.at(w_in, centers, -alpha * grad_v)
        history.append(float(epoch_loss / (len(sentences) * n_pairs)))

    mats = {f: w_in[o : o + c].copy() for f, o, c in zip(FIELDS, offsets, cards)}
    return EmbeddingTable(dim, mats, history)


def encode_embedding(records: Sequence[HeaderRecord], schema: FieldSchema, table: EmbeddingTable) -> EncodedBatch:
    idx = schema.indices(records)
    parts = [table.matrices[f][idx[:, j]] for j, f in enumerate(FIELDS)]
    mat = np.concatenate(parts, axis=1) if len(records) else np.zeros((0, len(FIELDS) * table.dim))
    return EncodedBatch(mat, embedding_layout(table.dim))


def nearest_rows(x: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Index of the most cosine-similar row for each row of ``x``; lowest index wins ties.

    Zero-norm queries fall back to Euclidean distance.
    """
    xn = np.linalg.norm(x, axis=1)
    rn = np.linalg.norm(rows, axis=1)
    safe = np.where(rn > 0, rn, 1.0)
    cos = (x @ rows.T) / np.where(xn > 0, xn, 1.0)[:, None] / safe[None, :]
    cos[:, rn == 0] = -np.inf
    best = cos.argmax(axis=1)
    zero = xn == 0
    if zero.any():
        d = ((x[zero][:, None, :] - rows[None, :, :]) ** 2).sum(axis=2)
        best[zero] = d.argmin(axis=1)
    return best


def decode_embedding(batch: EncodedBatch, schema: FieldSchema, table: EmbeddingTable) -> list[HeaderRecord]:
    if batch.layout.mode != "embedding":
        raise ShapeError("decode_embedding needs an embedding-layout batch")
    idx = np.zeros((len(batch), len(FIELDS)), dtype=np.int64)
    for j, f in enumerate(FIELDS):
        cand = table.matrices[f][: _in_vocab_count(schema, f)]
        idx[:, j] = nearest_rows(batch.field(f), cand)
    return indices_to_records(idx, schema)
