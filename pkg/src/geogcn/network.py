"""Graph-convolutional regressors for positions and normals.

Both networks stack EdgeConv layers over a fixed (precomputed) kNN
graph: per edge (i, j) a two-layer MLP maps [x_i, x_j - x_i] through
LeakyReLU(0.1) activations, then channel-wise max over each point's
edges aggregates. The position network adds its head output to the
input (residual displacement); the normal network unit-normalizes its
head output.

The first edge MLP layer is evaluated as x_i @ W_top + (x_j - x_i) @
W_bottom, which is algebraically identical to concatenation but does
its matmuls per point instead of per edge. Checkpoints store the full
stacked weight.

Parameters are plain DiffArray leaves; sgd_step applies classic
momentum SGD in place and clears gradients.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .cloud import KnnGraph
from .errors import (DataError, InvalidArgumentError,
                     TrainingDivergenceError)

LEAKY_SLOPE = 0.1
SGCN_CHANNELS = (3, 64, 64, 128)
NGCN_CHANNELS = (6, 64, 64, 128)
OUTPUT_DIM = 3
_CHECKPOINT_FORMAT = "geogcn-checkpoint-v1"


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class EdgeConvLayer:
    """One EdgeConv: per-edge MLP on [x_i, x_j - x_i], then max over edges.

    w1 stacks the two input blocks: rows [0, c_in) act on x_i, rows
    [c_in, 2*c_in) on x_j - x_i.
    """

    c_in: int
    c_out: int
    w1: ad.DiffArray
    b1: ad.DiffArray
    w2: ad.DiffArray
    b2: ad.DiffArray

    @classmethod
    def initialize(cls, c_in: int, c_out: int, rng: np.random.Generator) -> "EdgeConvLayer":
        return cls(
            c_in=c_in,
            c_out=c_out,
            w1=ad.DiffArray(_glorot(rng, 2 * c_in, c_out), requires_grad=True),
            b1=ad.DiffArray(np.zeros(c_out), requires_grad=True),
            w2=ad.DiffArray(_glorot(rng, c_out, c_out), requires_grad=True),
            b2=ad.DiffArray(np.zeros(c_out), requires_grad=True),
        )

    def parameters(self) -> list[ad.DiffArray]:
        return [self.w1, self.b1, self.w2, self.b2]

    def forward(self, x: ad.DiffArray, neighbor_indices: np.ndarray,
                plan: ad.ScatterPlan | None = None) -> ad.DiffArray:
        n = x.values.shape[0]
        k = neighbor_indices.shape[1]
        w_self = ad.slice_rows(self.w1, 0, self.c_in)
        w_rel = ad.slice_rows(self.w1, self.c_in, 2 * self.c_in)
        from_self = ad.matmul(x, w_self)
        from_rel = ad.matmul(x, w_rel)
        rel_j = ad.gather_rows(from_rel, neighbor_indices, plan)
        edges = ad.reshape(from_self - from_rel, (n, 1, self.c_out)) + rel_j
        edges = edges + self.b1
        edges = ad.leaky_relu(edges, LEAKY_SLOPE)
        flat = ad.matmul(ad.reshape(edges, (n * k, self.c_out)), self.w2)
        edges = ad.reshape(flat, (n, k, self.c_out)) + self.b2
        edges = ad.leaky_relu(edges, LEAKY_SLOPE)
        return ad.max_over_axis(edges, axis=1)


@dataclass
class LinearHead:
    """Affine map from aggregated features to a 3-vector per point."""

    w: ad.DiffArray
    b: ad.DiffArray

    def parameters(self) -> list[ad.DiffArray]:
        return [self.w, self.b]

    def forward(self, x: ad.DiffArray) -> ad.DiffArray:
        return ad.matmul(x, self.w) + self.b


def _build_stack(channels: tuple[int, ...], rng: np.random.Generator) -> list[EdgeConvLayer]:
    return [EdgeConvLayer.initialize(channels[i], channels[i + 1], rng)
            for i in range(len(channels) - 1)]


@dataclass
class NetworkParams:
    """All parameters of both networks plus optimizer and RNG state.

    Both heads start at zero: the untrained position network is the
    identity on positions, and the untrained normal network passes the
    initial normals through unchanged.
    """

    sgcn_layers: list[EdgeConvLayer]
    sgcn_head: LinearHead
    ngcn_layers: list[EdgeConvLayer]
    ngcn_head: LinearHead
    rng_seed: int
    epoch: int = 0
    momentum_buffers: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def initialize(cls, rng_seed: int) -> "NetworkParams":
        rng = np.random.default_rng(rng_seed)
        sgcn_layers = _build_stack(SGCN_CHANNELS, rng)
        sgcn_head = LinearHead(
            w=ad.DiffArray(np.zeros((SGCN_CHANNELS[-1], OUTPUT_DIM)), requires_grad=True),
            b=ad.DiffArray(np.zeros(OUTPUT_DIM), requires_grad=True))
        ngcn_layers = _build_stack(NGCN_CHANNELS, rng)
        ngcn_head = LinearHead(
            w=ad.DiffArray(np.zeros((NGCN_CHANNELS[-1], OUTPUT_DIM)), requires_grad=True),
            b=ad.DiffArray(np.zeros(OUTPUT_DIM), requires_grad=True))
        params = cls(sgcn_layers, sgcn_head, ngcn_layers, ngcn_head, rng_seed=rng_seed)
        params.momentum_buffers = [np.zeros_like(p.values) for p in params.parameters()]
        return params

    def parameters(self) -> list[ad.DiffArray]:
        out: list[ad.DiffArray] = []
        for layer in self.sgcn_layers:
            out.extend(layer.parameters())
        out.extend(self.sgcn_head.parameters())
        for layer in self.ngcn_layers:
            out.extend(layer.parameters())
        out.extend(self.ngcn_head.parameters())
        return out

    def parameter_names(self) -> list[str]:
        names: list[str] = []
        for i in range(len(self.sgcn_layers)):
            names += [f"sgcn.ec{i}.{p}" for p in ("w1", "b1", "w2", "b2")]
        names += ["sgcn.head.w", "sgcn.head.b"]
        for i in range(len(self.ngcn_layers)):
            names += [f"ngcn.ec{i}.{p}" for p in ("w1", "b1", "w2", "b2")]
        names += ["ngcn.head.w", "ngcn.head.b"]
        return names

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def architecture(self) -> dict:
        return {
            "sgcn_channels": list(SGCN_CHANNELS),
            "ngcn_channels": list(NGCN_CHANNELS),
            "output_dim": OUTPUT_DIM,
        }


def _as_indices(graph) -> np.ndarray:
    if isinstance(graph, KnnGraph):
        return graph.neighbor_indices
    indices = np.asarray(graph, dtype=np.int64)
    if indices.ndim != 2:
        raise InvalidArgumentError(
            f"neighbor indices must be 2-D, got shape {indices.shape}")
    return indices


def forward_sgcn(params: NetworkParams, positions, graph,
                 plan: ad.ScatterPlan | None = None) -> ad.DiffArray:
    """Denoised positions: input + regressed displacement."""
    x = positions if isinstance(positions, ad.DiffArray) else ad.DiffArray(
        np.asarray(positions, dtype=np.float64))
    if x.values.ndim != 2 or x.values.shape[1] != SGCN_CHANNELS[0]:
        raise InvalidArgumentError(
            f"positions must be (N, {SGCN_CHANNELS[0]}), got {x.values.shape}")
    indices = _as_indices(graph)
    if indices.shape[0] != x.values.shape[0]:
        raise InvalidArgumentError("graph size does not match the input")
    features = x
    for layer in params.sgcn_layers:
        features = layer.forward(features, indices, plan)
    return x + params.sgcn_head.forward(features)


# Selects the initial-normal columns out of the 6-channel N-GCN input.
_NORMAL_COLUMNS = np.vstack([np.zeros((3, 3)), np.eye(3)])


def forward_ngcn(params: NetworkParams, features, graph,
                 plan: ad.ScatterPlan | None = None) -> ad.DiffArray:
    """Refined unit normals from [position, initial normal] features.

    The head regresses a correction on the initial normals:
    normalize(initial + head(hidden)). A zero head therefore passes the
    initial normals through unchanged.
    """
    x = features if isinstance(features, ad.DiffArray) else ad.DiffArray(
        np.asarray(features, dtype=np.float64))
    if x.values.ndim != 2 or x.values.shape[1] != NGCN_CHANNELS[0]:
        raise InvalidArgumentError(
            f"features must be (N, {NGCN_CHANNELS[0]}), got {x.values.shape}")
    indices = _as_indices(graph)
    if indices.shape[0] != x.values.shape[0]:
        raise InvalidArgumentError("graph size does not match the input")
    hidden = x
    for layer in params.ngcn_layers:
        hidden = layer.forward(hidden, indices, plan)
    initial = ad.matmul(x, ad.DiffArray(_NORMAL_COLUMNS))
    return ad.normalize_rows(initial + params.ngcn_head.forward(hidden))


def sgd_step(params: NetworkParams, learning_rate: float,
             momentum: float = 0.9) -> None:
    """One momentum-SGD update over every parameter, in place.

    buffer = momentum * buffer + grad; param -= learning_rate * buffer.
    Parameters that received no gradient this step contribute zero (their
    buffers keep decaying). Gradients are cleared afterwards. Non-finite
    gradients or updated values raise TrainingDivergenceError.
    """
    if not (np.isfinite(learning_rate) and learning_rate > 0.0):
        raise InvalidArgumentError(f"learning_rate must be positive, got {learning_rate}")
    if not 0.0 <= momentum < 1.0:
        raise InvalidArgumentError(f"momentum must be in [0, 1), got {momentum}")
    names = params.parameter_names()
    for name, p, buf in zip(names, params.parameters(), params.momentum_buffers):
        grad = p.grad
        if grad is not None and not np.isfinite(grad).all():
            raise TrainingDivergenceError(f"non-finite gradient in {name}")
        buf *= momentum
        if grad is not None:
            buf += grad
        p.values -= learning_rate * buf
        if not np.isfinite(p.values).all():
            raise TrainingDivergenceError(f"non-finite values in {name} after update")
        p.grad = None


LR_START = 1e-3
LR_END = 1e-6


def lr_schedule(epoch: int, total_epochs: int) -> float:
    """Geometric decay from 1e-3 to 1e-6 across the run.

    Degenerate schedules (total_epochs < 2) return the starting rate.
    """
    if total_epochs < 2:
        return LR_START
    if not 0 <= epoch < total_epochs:
        raise InvalidArgumentError(
            f"epoch {epoch} outside schedule of {total_epochs}")
    return LR_START * (LR_END / LR_START) ** (epoch / (total_epochs - 1))


def save_checkpoint(params: NetworkParams, path) -> Path:
    """Serialize every parameter, momentum buffer, and counter to JSON.

    Values are stored as JSON numbers printed by repr, which round-trips
    float64 exactly; saving the same state twice yields identical bytes.
    """
    named = dict(zip(params.parameter_names(), params.parameters()))
    doc = {
        "format": _CHECKPOINT_FORMAT,
        "architecture": params.architecture(),
        "rng_seed": params.rng_seed,
        "epoch": params.epoch,
        "parameters": {
            name: {"shape": list(p.values.shape),
                   "values": p.values.reshape(-1).tolist()}
            for name, p in named.items()
        },
        "momentum": {
            name: buf.reshape(-1).tolist()
            for name, buf in zip(params.parameter_names(), params.momentum_buffers)
        },
    }
    path = Path(path)
    path.write_text(json.dumps(doc, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> NetworkParams:
    """Rebuild NetworkParams from save_checkpoint output.

    Shape or architecture mismatches, missing keys, and malformed JSON
    raise DataError.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot read checkpoint ({exc})") from None
    try:
        if doc["format"] != _CHECKPOINT_FORMAT:
            raise DataError(f"{path}: unknown checkpoint format {doc['format']!r}")
        params = NetworkParams.initialize(int(doc["rng_seed"]))
        if doc["architecture"] != params.architecture():
            raise DataError(f"{path}: architecture mismatch "
                            f"{doc['architecture']} vs {params.architecture()}")
        params.epoch = int(doc["epoch"])
        names = params.parameter_names()
        for name, p, buf in zip(names, params.parameters(), params.momentum_buffers):
            entry = doc["parameters"][name]
            if tuple(entry["shape"]) != p.values.shape:
                raise DataError(
                    f"{path}: parameter {name} has shape {entry['shape']}, "
                    f"expected {list(p.values.shape)}")
            flat = np.asarray(entry["values"], dtype=np.float64)
            if flat.size != p.values.size:
                raise DataError(f"{path}: parameter {name} has {flat.size} values, "
                                f"expected {p.values.size}")
            p.values = flat.reshape(p.values.shape)
            mom = np.asarray(doc["momentum"][name], dtype=np.float64)
            if mom.size != buf.size:
                raise DataError(f"{path}: momentum {name} has wrong size")
            buf[...] = mom.reshape(buf.shape)
    except KeyError as exc:
        raise DataError(f"{path}: checkpoint missing key {exc}") from None
    except (TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed checkpoint ({exc})") from None
    return params
