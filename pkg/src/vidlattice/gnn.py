"""Pluggable GNN over a video graph, reduced to one embedding vector.

Three layer operators are supported, all without bias terms:

    vanilla_gcn   H' = relu(A H W)
    cluster_gcn   H' = relu(A H Wa + H Wb)
    sgcn          H' = A^K H W            (no activation)

where A is the renormalized adjacency.  Node states are then pooled (mean or
max over nodes), centered and L2-normalized.  Weights are stored as float32;
all arithmetic runs in float64.  Every forward step keeps what its backward
step needs so training can compute exact gradients without autograd.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import scipy.sparse as sp

from .errors import ContractViolation, DegenerateEmbeddingError, InputError, NumericError
from .graphbuild import VideoGraph

log = logging.getLogger(__name__)

ACTIVATIONS = {"vanilla_gcn": "relu", "cluster_gcn": "relu", "sgcn": "identity"}


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)


@dataclass
class GnnModel:
    operator_kind: str
    layers: list[dict[str, np.ndarray]]
    aggregator: str = "mean"
    sgcn_power: int = 1
    seed: int = 0

    @classmethod
    def initialize(cls, operator_kind: str, in_dim: int, out_dim: int, num_layers: int = 1,
                   aggregator: str = "mean", sgcn_power: int = 1, seed: int = 0) -> "GnnModel":
        if operator_kind not in ACTIVATIONS:
            raise ContractViolation(f"unknown operator kind {operator_kind!r}")
        rng = np.random.default_rng(seed)
        layers = []
        dims = [in_dim] + [out_dim] * num_layers
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            if operator_kind == "cluster_gcn":
                layers.append({"Wa": glorot_uniform(rng, d_in, d_out), "Wb": glorot_uniform(rng, d_in, d_out)})
            else:
                layers.append({"W": glorot_uniform(rng, d_in, d_out)})
        return cls(operator_kind, layers, aggregator, sgcn_power, seed)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def activation(self) -> str:
        return ACTIVATIONS[self.operator_kind]

    @property
    def param_names(self) -> tuple[str, ...]:
        return ("Wa", "Wb") if self.operator_kind == "cluster_gcn" else ("W",)

    @property
    def in_dim(self) -> int:
        return self.layers[0][self.param_names[0]].shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][self.param_names[0]].shape[1]

    def dims(self) -> list[tuple[int, int]]:
        return [layer[self.param_names[0]].shape for layer in self.layers]

    def parameters(self) -> list[np.ndarray]:
        """Weight arrays in a fixed (layer, name) order."""
        return [layer[name] for layer in self.layers for name in self.param_names]

    def with_parameters(self, params: list[np.ndarray]) -> "GnnModel":
        it = iter(params)
        layers = [{name: next(it) for name in self.param_names} for _ in self.layers]
        return GnnModel(self.operator_kind, layers, self.aggregator, self.sgcn_power, self.seed)

    def copy(self) -> "GnnModel":
        return self.with_parameters([p.copy() for p in self.parameters()])


@dataclass
class GraphSignal:
    values: np.ndarray  # (N, D)


@dataclass
class VideoEmbedding:
    vector: np.ndarray
    video_id: str = ""


def propagate(adj: np.ndarray | sp.spmatrix, h: np.ndarray, power: int = 1) -> np.ndarray:
    for _ in range(power):
        h = adj @ h
    return np.asarray(h)


def _check_dims(h: np.ndarray, adj, model: GnnModel, layer: int) -> None:
    w = model.layers[layer][model.param_names[0]]
    if h.shape[1] != w.shape[0]:
        raise ContractViolation(f"layer {layer}: signal width {h.shape[1]} != weight rows {w.shape[0]}")
    if adj.shape != (h.shape[0], h.shape[0]):
        raise ContractViolation(f"adjacency {adj.shape} does not match {h.shape[0]} nodes")


def _layer(h: np.ndarray, adj, model: GnnModel, layer: int) -> tuple[np.ndarray, dict[str, Any]]:
    _check_dims(h, adj, model, layer)
    params = {k: v.astype(np.float64) for k, v in model.layers[layer].items()}
    kind = model.operator_kind
    if kind == "vanilla_gcn":
        ah = propagate(adj, h)
        z = ah @ params["W"]
    elif kind == "cluster_gcn":
        ah = propagate(adj, h)
        z = ah @ params["Wa"] + h @ params["Wb"]
    else:
        ah = propagate(adj, h, model.sgcn_power)
        z = ah @ params["W"]
    out = np.maximum(z, 0.0) if model.activation == "relu" else z
    if not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite activations at layer {layer}")
    return out, {"h": h, "ah": ah, "z": z, "params": params}


def layer_forward(signal: GraphSignal, adj, model: GnnModel, layer: int) -> GraphSignal:
    h = np.asarray(signal.values, dtype=np.float64)
    return GraphSignal(_layer(h, adj, model, layer)[0])


def _layer_backward(dout: np.ndarray, adj, model: GnnModel, cache: dict, need_input_grad: bool):
    z, ah, h, params = cache["z"], cache["ah"], cache["h"], cache["params"]
    dz = dout * (z > 0) if model.activation == "relu" else dout
    grads: dict[str, np.ndarray] = {}
    dh = None
    if model.operator_kind == "cluster_gcn":
        grads["Wa"] = ah.T @ dz
        grads["Wb"] = h.T @ dz
        if need_input_grad:
            dh = propagate(adj, dz @ params["Wa"].T) + dz @ params["Wb"].T
    else:
        grads["W"] = ah.T @ dz
        if need_input_grad:
            power = model.sgcn_power if model.operator_kind == "sgcn" else 1
            # A is symmetric, so A^T = A
            dh = propagate(adj, dz @ params["W"].T, power)
    return grads, dh


def aggregate(signal: GraphSignal | np.ndarray, aggregator: str = "mean") -> np.ndarray:
    values = signal.values if isinstance(signal, GraphSignal) else np.asarray(signal)
    if values.ndim != 2 or values.shape[0] == 0:
        raise ContractViolation("cannot aggregate an empty signal")
    if aggregator == "mean":
        return values.mean(axis=0)
    if aggregator == "max":
        return values.max(axis=0)
    raise ContractViolation(f"unknown aggregator {aggregator!r}")


def postprocess(raw: np.ndarray, video_id: str = "") -> VideoEmbedding:
    """Subtract the vector's own component mean, then L2-normalize."""
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise NumericError(f"non-finite raw embedding for video {video_id!r}")
    centered = raw - raw.mean()
    norm = np.linalg.norm(centered)
    if norm <= 1e-12 * max(1.0, float(np.abs(raw).max())):
        raise DegenerateEmbeddingError(f"constant raw embedding for video {video_id!r}")
    return VideoEmbedding(centered / norm, video_id)


def fallback_embedding(dim: int, video_id: str = "") -> VideoEmbedding:
    """Deterministic zero-mean unit vector used when postprocess degenerates."""
    if dim < 2:
        raise ContractViolation("embedding dimension must be at least 2")
    v = np.zeros(dim)
    v[0], v[1] = 1.0 / np.sqrt(2.0), -1.0 / np.sqrt(2.0)
    return VideoEmbedding(v, video_id)


@dataclass
class ForwardCache:
    adj: Any
    layers: list[dict] = field(default_factory=list)
    nodes: np.ndarray | None = None
    raw: np.ndarray | None = None
    centered_norm: float = 0.0
    embedding: np.ndarray | None = None


def node_states(g: VideoGraph, model: GnnModel) -> np.ndarray:
    """Pre-aggregation node outputs (N x D)."""
    h = np.asarray(g.features, dtype=np.float64)
    for layer in range(model.num_layers):
        h, _ = _layer(h, g.adjacency, model, layer)
    return h


def forward(g: VideoGraph, model: GnnModel) -> tuple[VideoEmbedding, ForwardCache]:
    if g.features.shape[1] != model.in_dim:
        raise ContractViolation(f"graph feature dim {g.features.shape[1]} != model input dim {model.in_dim}")
    cache = ForwardCache(g.adjacency)
    h = np.asarray(g.features, dtype=np.float64)
    for layer in range(model.num_layers):
        h, lc = _layer(h, cache.adj, model, layer)
        cache.layers.append(lc)
    cache.nodes = h
    cache.raw = aggregate(h, model.aggregator)
    emb = postprocess(cache.raw, g.video_id)
    cache.centered_norm = float(np.linalg.norm(cache.raw - cache.raw.mean()))
    cache.embedding = emb.vector
    return emb, cache


def backward(cache: ForwardCache, model: GnnModel, d_embedding: np.ndarray) -> list[np.ndarray]:
    """Gradients w.r.t. ``model.parameters()`` given dLoss/d(embedding)."""
    e = cache.embedding
    d_centered = (d_embedding - e * np.dot(e, d_embedding)) / cache.centered_norm
    d_raw = d_centered - d_centered.mean()
    nodes = cache.nodes
    if model.aggregator == "mean":
        dh = np.broadcast_to(d_raw / nodes.shape[0], nodes.shape).copy()
    else:
        dh = np.zeros_like(nodes)
        dh[np.argmax(nodes, axis=0), np.arange(nodes.shape[1])] = d_raw
    per_layer: list[dict[str, np.ndarray]] = [None] * model.num_layers  # type: ignore[list-item]
    for layer in reversed(range(model.num_layers)):
        grads, dh = _layer_backward(dh, cache.adj, model, cache.layers[layer], need_input_grad=layer > 0)
        per_layer[layer] = grads
    return [per_layer[layer][name] for layer in range(model.num_layers) for name in model.param_names]


def embed_video(g: VideoGraph, model: GnnModel) -> VideoEmbedding:
    return forward(g, model)[0]


def embed_or_fallback(g: VideoGraph, model: GnnModel) -> VideoEmbedding:
    try:
        return embed_video(g, model)
    except DegenerateEmbeddingError:
        log.warning("degenerate embedding for video %s; using fallback vector", g.video_id)
        return fallback_embedding(model.out_dim, g.video_id)


def static_embedding(g: VideoGraph) -> VideoEmbedding:
    """Baseline without graph context: mean of raw region features, centered and normalized."""
    return postprocess(aggregate(np.asarray(g.features, dtype=np.float64), "mean"), g.video_id)


# ---------------------------------------------------------------------------
# checkpoint ("STRW")

_KIND_CODES = {"vanilla_gcn": 0, "cluster_gcn": 1, "sgcn": 2}
_AGG_CODES = {"mean": 0, "max": 1}
_STRW = struct.Struct("<4sHBHHB")
STRW_VERSION = 1


def encode_model(model: GnnModel, config_hash: str = "0" * 64) -> bytes:
    parts = [_STRW.pack(b"STRW", STRW_VERSION, _KIND_CODES[model.operator_kind], model.num_layers,
                        model.sgcn_power, _AGG_CODES[model.aggregator])]
    parts += [struct.pack("<II", d_in, d_out) for d_in, d_out in model.dims()]
    parts += [np.ascontiguousarray(p, dtype="<f4").tobytes() for p in model.parameters()]
    parts.append(struct.pack("<Q", model.seed))
    parts.append(bytes.fromhex(config_hash))
    return b"".join(parts)


def decode_model(data: bytes, offset: int = 0) -> tuple[GnnModel, str, int]:
    """Parse a checkpoint starting at ``offset``; returns (model, config hash, end offset)."""
    try:
        magic, version, kind, layers, power, agg = _STRW.unpack_from(data, offset)
    except struct.error as exc:
        raise InputError("checkpoint truncated") from exc
    if magic != b"STRW" or version != STRW_VERSION:
        raise InputError("not a model checkpoint")
    kind_name = {v: k for k, v in _KIND_CODES.items()}[kind]
    agg_name = {v: k for k, v in _AGG_CODES.items()}[agg]
    pos = offset + _STRW.size
    dims = []
    for _ in range(layers):
        dims.append(struct.unpack_from("<II", data, pos))
        pos += 8
    names = ("Wa", "Wb") if kind_name == "cluster_gcn" else ("W",)
    layer_params = []
    for d_in, d_out in dims:
        layer = {}
        for name in names:
            arr = np.frombuffer(data, "<f4", d_in * d_out, pos).reshape(d_in, d_out).astype(np.float32)
            pos += arr.nbytes
            layer[name] = arr
        layer_params.append(layer)
    (seed,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    config_hash = data[pos:pos + 32].hex()
    if len(config_hash) != 64:
        raise InputError("checkpoint truncated")
    pos += 32
    return GnnModel(kind_name, layer_params, agg_name, power, seed), config_hash, pos
