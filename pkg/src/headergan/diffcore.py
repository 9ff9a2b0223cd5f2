"""Reverse-mode autodiff over dense float64 arrays, plus optimizers and checkpoints.

A ``Tensor`` records the op that produced it; ``backward`` walks the recorded
graph in reverse topological order and accumulates gradients into leaf
tensors that require them (normally ``Parameter`` objects). Intermediate
gradients live only for the duration of one ``backward`` call.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ArtifactError, NumericError, ShapeError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _node(data, parents, backward, op) -> Tensor:
    needs = any(_tracked(p) for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, _parents=parents, _backward=backward, op=op)


def _check(cond, msg):
    if not cond:
        raise ShapeError(msg)


# -- forward ops ---------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check(
        a.data.ndim == 2 and b.data.ndim == 2 and a.shape[1] == b.shape[0],
        f"matmul shape mismatch: {a.shape} @ {b.shape}",
    )

    def back(g):
        ga = g @ b.data.T if _tracked(a) else None
        gb = a.data.T @ g if _tracked(b) else None
        return ga, gb

    return _node(a.data @ b.data, (a, b), back, "matmul")


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may also be a row vector broadcast over the rows of ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")
    _check(
        a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1],
        f"add shape mismatch: {a.shape} + {b.shape}",
    )
    return _node(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)), "add_bias")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check(a.shape == b.shape, f"sub shape mismatch: {a.shape} - {b.shape}")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check(a.shape == b.shape, f"mul shape mismatch: {a.shape} * {b.shape}")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Join equal-height matrices side by side: row i of the result is [a_i, b_i, ...]."""
    ts = [as_tensor(t) for t in tensors]
    rows = {t.shape[0] for t in ts}
    _check(
        len(rows) == 1 and all(t.data.ndim == 2 for t in ts),
        f"concat_rows needs equal row counts, got {[t.shape for t in ts]}",
    )
    widths = np.cumsum([0] + [t.shape[1] for t in ts])

    def back(g):
        return tuple(g[:, widths[i] : widths[i + 1]] for i in range(len(ts)))

    return _node(np.concatenate([t.data for t in ts], axis=1), tuple(ts), back, "concat_rows")


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)

    def back(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _node(a.data[:, start:stop], (a,), back, "slice_cols")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope)
    return _node(a.data * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _node(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return _node(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(x)) without overflow."""
    a = as_tensor(a)
    x = a.data
    y = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return _node(y, (a,), lambda g: (g * _sigmoid(-x),), "log_sigmoid")


def softmax_segments(a, segments: Sequence[tuple[int, int]]) -> Tensor:
    """Row-wise softmax applied independently within each column segment.

    Segments must tile the columns of ``a``.
    """
    a = as_tensor(a)
    y = np.empty_like(a.data)
    for lo, hi in segments:
        z = a.data[:, lo:hi]
        z = np.exp(z - z.max(axis=1, keepdims=True))
        y[:, lo:hi] = z / z.sum(axis=1, keepdims=True)

    def back(g):
        gx = np.empty_like(g)
        for lo, hi in segments:
            s, gs = y[:, lo:hi], g[:, lo:hi]
            gx[:, lo:hi] = s * (gs - (gs * s).sum(axis=1, keepdims=True))
        return (gx,)

    return _node(y, (a,), back, "softmax_segments")


def propagate(h, adjacency: np.ndarray) -> Tensor:
    """Neighbour sums for a batch of graphs sharing one adjacency matrix.

    ``h`` has shape (batch, nodes, width); output[b, i] = sum_j A[i, j] h[b, j].
    """
    h = as_tensor(h)
    adj = np.asarray(adjacency, dtype=np.float64)
    _check(
        h.data.ndim == 3 and adj.shape == (h.shape[1], h.shape[1]),
        f"propagate shape mismatch: features {h.shape}, adjacency {adj.shape}",
    )
    n = adj.shape[0]
    if np.array_equal(adj, 1.0 - np.eye(n)):
        # complete graph: total minus self, with an order-free total so that
        # relabelling nodes permutes the output exactly
        def back(g):
            return (_node_sum(g, 1, keepdims=True) - g,)

        return _node(_node_sum(h.data, 1, keepdims=True) - h.data, (h,), back, "propagate")
    adj_t = np.ascontiguousarray(adj.T)
    return _node(np.matmul(adj, h.data), (h,), lambda g: (np.matmul(adj_t, g),), "propagate")


def _node_sum(x: np.ndarray, axis: int, keepdims: bool = False) -> np.ndarray:
    """Sum along ``axis`` independent of element order (values are sorted first)."""
    return np.sort(x, axis=axis).sum(axis=axis, keepdims=keepdims)


def sum_over_axis(a, axis: int) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _node(_node_sum(a.data, axis), (a,), back, "sum_over_axis")


def mean_over_axis(a, axis: int) -> Tensor:
    a = as_tensor(a)
    n = a.shape[axis]
    return scale(sum_over_axis(a, axis), 1.0 / n)


def mean(a) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.data.size
    return _node(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, g / n),), "mean")


def mse(a, b) -> Tensor:
    d = sub(a, b)
    return mean(mul(d, d))


# -- backward ------------------------------------------------------------------


def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf requiring grad."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not _tracked(parent):
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


# -- parameters, layers ---------------------------------------------------------


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


class Linear:
    def __init__(self, rng, fan_in: int, fan_out: int, name: str):
        self.W = Parameter(glorot(rng, fan_in, fan_out), f"{name}.W")
        self.b = Parameter(np.zeros(fan_out), f"{name}.b")

    def __call__(self, x) -> Tensor:
        return add(matmul(x, self.W), self.b)

    def parameters(self) -> list[Parameter]:
        return [self.W, self.b]


class MLP:
    """Stack of ``Linear`` layers with leaky-ReLU between them and a linear output."""

    def __init__(self, rng, sizes: Sequence[int], name: str, slope: float = 0.2):
        self.layers = [Linear(rng, a, b, f"{name}.{i}") for i, (a, b) in enumerate(zip(sizes, sizes[1:]))]
        self.slope = slope
        self.sizes = tuple(sizes)

    def __call__(self, x) -> Tensor:
        for layer in self.layers[:-1]:
            x = leaky_relu(layer(x), self.slope)
        return self.layers[-1](x)

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None


def check_finite(params: Iterable[Parameter]) -> None:
    for p in params:
        if not np.all(np.isfinite(p.data)):
            raise NumericError(f"parameter {p.name} became non-finite")


# -- optimizers ------------------------------------------------------------------


class RMSProp:
    def __init__(self, params: Sequence[Parameter], lr: float, decay: float = 0.9, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.decay, self.eps = lr, decay, eps
        self.avg: dict[str, np.ndarray] = {}

    def step(self) -> None:
        rmsprop_step(self.params, self.lr, self.avg, self.decay, self.eps)


def rmsprop_step(params, lr, state: dict | None = None, decay=0.9, eps=1e-8) -> dict:
    """Functional RMSProp step; ``state`` maps parameter names to running averages."""
    state = {} if state is None else state
    for p in params:
        if p.grad is None:
            continue
        avg = state.setdefault(p.name, np.zeros_like(p.data))
        g = p.grad
        avg *= decay
        avg += (1.0 - decay) * (g * g)
        p.data -= (lr * g) / np.sqrt(avg + eps)
        p.grad = None
    return state


class Adam:
    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        for p in self.params:
            if p.grad is None:
                continue
            m, v = self.m[p.name], self.v[p.name]
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad * p.grad
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
            p.grad = None


def clip_weights(params: Iterable[Parameter], c: float) -> None:
    if c <= 0:
        raise ValueError("clip constant must be positive")
    for p in params:
        np.clip(p.data, -c, c, out=p.data)


# -- gradient checking -------------------------------------------------------------


def numerical_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + eps
        fp = f()
        x[i] = orig - eps
        fm = f()
        x[i] = orig
        g[i] = (fp - fm) / (2 * eps)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


# -- checkpoints -------------------------------------------------------------------

CKPT_MAGIC = b"HGCK"
CKPT_VERSION = 1


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(params: Iterable[Parameter], path) -> None:
    params = list(params)
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise ValueError("parameter identifiers must be unique")
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(params))]
    for p in params:
        name = p.name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name)) + name)
        chunks.append(struct.pack("<I", p.data.ndim) + struct.pack(f"<{p.data.ndim}I", *p.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    atomic_write_bytes(path, b"".join(chunks))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise ArtifactError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise ArtifactError(f"{path}: unsupported checkpoint version {version}")
    off, out = 12, {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape)
            off += 8 * size
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise ArtifactError(f"{path}: truncated checkpoint ({exc})") from None
    return out


def load_checkpoint(params: Iterable[Parameter], path) -> None:
    stored = read_checkpoint(path)
    for p in params:
        if p.name not in stored:
            raise ArtifactError(f"{path}: missing parameter {p.name}")
        if stored[p.name].shape != p.shape:
            raise ArtifactError(f"{path}: {p.name} has shape {stored[p.name].shape}, expected {p.shape}")
        p.data = stored[p.name].copy()
