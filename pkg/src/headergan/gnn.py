"""Field-graph neural network: one node per header field, complete-graph message passing.

Each layer computes, for every node i,

    h_i' = relu(h_i U + (sum over neighbours j of h_j) W + b)

and the graph-level feature is the node mean passed through one affine map.
The network is pretrained as the encoder of an autoencoder over embedded
records and then used frozen as a feature extractor for the critic.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .encoding import EmbeddingTable, EncodedBatch, FieldSchema, Layout, encode_embedding
from .errors import NumericError, ShapeError
from .trace_io import FIELDS, TraceDataset

log = logging.getLogger(__name__)

N_NODES = len(FIELDS)


def complete_neighbors(n: int) -> tuple[tuple[int, ...], ...]:
    return tuple(tuple(j for j in range(n) if j != i) for i in range(n))


def adjacency_matrix(neighbors) -> np.ndarray:
    n = len(neighbors)
    a = np.zeros((n, n))
    for i, nb in enumerate(neighbors):
        a[i, list(nb)] = 1.0
    return a


@dataclass
class RecordGraph:
    node_features: np.ndarray  # (n_nodes, width)
    neighbors: tuple

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def n_edges(self) -> int:
        return sum(len(nb) for nb in self.neighbors) // 2

    def adjacency(self) -> np.ndarray:
        return adjacency_matrix(self.neighbors)


def build_record_graph(row: np.ndarray, layout: Layout) -> RecordGraph:
    widths = {b - a for _, a, b in layout.slices}
    if len(widths) != 1:
        raise ShapeError(f"record graph needs equal field widths, got {sorted(widths)}")
    feats = np.stack([row[a:b] for _, a, b in layout.slices])
    return RecordGraph(feats, complete_neighbors(len(layout.slices)))


@dataclass
class GnnConfig:
    in_dim: int = 32
    hidden: int = 32
    layers: int = 2
    out_dim: int = 16
    decoder_hidden: int = 128


class GnnLayer:
    def __init__(self, rng, d_in: int, d_out: int, name: str):
        self.W = dc.Parameter(dc.glorot(rng, d_in, d_out), f"{name}.W")
        self.U = dc.Parameter(dc.glorot(rng, d_in, d_out), f"{name}.U")
        self.b = dc.Parameter(np.zeros(d_out), f"{name}.b")

    def __call__(self, h: dc.Tensor, adjacency: np.ndarray) -> dc.Tensor:
        batch, n, d = h.shape
        flat = dc.reshape(h, (batch * n, d))
        msg = dc.propagate(dc.reshape(dc.matmul(flat, self.W), (batch, n, -1)), adjacency)
        own = dc.add(dc.matmul(flat, self.U), self.b)
        pre = dc.add(dc.reshape(own, msg.shape), msg)
        return dc.relu(pre)

    def parameters(self):
        return [self.W, self.U, self.b]


class GnnModel:
    def __init__(self, config: GnnConfig, rng: np.random.Generator, n_nodes: int = N_NODES, name: str = "gnn"):
        self.config = config
        self.n_nodes = n_nodes
        self.adjacency = adjacency_matrix(complete_neighbors(n_nodes))
        dims = [config.in_dim] + [config.hidden] * config.layers
        self.layers = [GnnLayer(rng, a, b, f"{name}.layer{k}") for k, (a, b) in enumerate(zip(dims, dims[1:]))]
        self.readout = dc.Linear(rng, dims[-1], config.out_dim, f"{name}.readout")

    def node_states(self, x, adjacency: np.ndarray | None = None) -> dc.Tensor:
        """Final-layer node features, shape (batch, n_nodes, hidden), for flattened rows ``x``."""
        x = dc.as_tensor(x)
        width = self.n_nodes * self.config.in_dim
        if x.data.ndim != 2 or x.shape[1] != width:
            raise ShapeError(f"GNN expects rows of width {width}, got {x.shape}")
        adj = self.adjacency if adjacency is None else adjacency
        h = dc.reshape(x, (x.shape[0], self.n_nodes, self.config.in_dim))
        for layer in self.layers:
            h = layer(h, adj)
        return h

    def pool(self, h: dc.Tensor) -> dc.Tensor:
        return self.readout(dc.mean_over_axis(h, 1))

    def __call__(self, x) -> dc.Tensor:
        return self.pool(self.node_states(x))

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()] + self.readout.parameters()


def message_pass(graph: RecordGraph, layer: GnnLayer, features: np.ndarray | None = None) -> np.ndarray:
    """One layer on a single graph; returns the updated (n_nodes, d_out) features."""
    h = graph.node_features if features is None else features
    if h.shape[1] != layer.W.shape[0]:
        raise ShapeError(f"layer expects width {layer.W.shape[0]}, node features have {h.shape[1]}")
    return layer(dc.Tensor(h[None]), graph.adjacency()).data[0]


def readout(node_features: np.ndarray, affine: dc.Linear) -> np.ndarray:
    h = dc.Tensor(np.asarray(node_features, dtype=float)[None])
    return affine(dc.mean_over_axis(h, 1)).data[0]


def extract_features(batch: EncodedBatch, model: GnnModel) -> np.ndarray:
    if batch.layout.mode != "embedding":
        raise ShapeError("GNN features need an embedding-layout batch")
    return model(batch.matrix).data


class AutoencoderModel:
    def __init__(self, config: GnnConfig, rng: np.random.Generator):
        self.config = config
        self.encoder = GnnModel(config, rng, name="gnn")
        width = N_NODES * config.in_dim
        self.decoder = dc.MLP(rng, [config.out_dim, config.decoder_hidden, width], "decoder")
        self.loss_history: list[float] = []

    def __call__(self, x) -> dc.Tensor:
        return self.decoder(self.encoder(x))

    def parameters(self):
        return self.encoder.parameters() + self.decoder.parameters()


def pretrain_autoencoder(
    dataset: TraceDataset,
    schema: FieldSchema,
    table: EmbeddingTable,
    config: GnnConfig | None = None,
    epochs: int = 50,
    seed: int = 7,
    lr: float = 1e-3,
    batch_size: int = 32,
) -> AutoencoderModel:
    """Fit GNN encoder + MLP decoder to reconstruct embedded records under MSE."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    config = config or GnnConfig(in_dim=table.dim)
    if config.in_dim != table.dim:
        raise ShapeError(f"GNN input width {config.in_dim} != embedding dim {table.dim}")
    x_all = encode_embedding(dataset.records, schema, table).matrix
    rng = np.random.default_rng(seed)
    model = AutoencoderModel(config, rng)
    opt = dc.Adam(model.parameters(), lr=lr)
    for epoch in range(epochs):
        order = rng.permutation(len(x_all))
        total, seen = 0.0, 0
        for start in range(0, len(order), batch_size):
            xb = x_all[order[start : start + batch_size]]
            loss = dc.mse(model(xb), dc.Tensor(xb))
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"non-finite reconstruction loss at epoch {epoch}, batch starting {start}")
            dc.backward(loss)
            opt.step()
            total += value * len(xb)
            seen += len(xb)
        model.loss_history.append(total / seen)
        log.debug("autoencoder epoch %d loss %.6f", epoch, model.loss_history[-1])
    return model
