"""Spatio-temporal lattice graph for one video.

Nodes are the multi-scale regions of every sampled frame.  Two rules define
the edges:

* spatial: all regions of the same frame form a complete subgraph;
* temporal: regions sharing (scale, position) form a complete subgraph
  across frames.

Edge weights are cosine similarities of the raw region features (clamped to
[0, 1]) or all ones in unweighted mode.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ContractViolation, InputError
from .ingest import RegionNode, atomic_write

DENSE_THRESHOLD = 2048


def cosine_weight(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"feature dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), 0.0, 1.0))


def _pair_cosines(x: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    unit = np.divide(x, norms[:, None], out=np.zeros_like(x), where=norms[:, None] > 0)
    cos = np.einsum("ij,ij->i", unit[u], unit[v])
    return np.clip(cos, 0.0, 1.0)


@dataclass
class VideoGraph:
    video_id: str
    nodes: list[RegionNode]
    edge_index: np.ndarray  # (E, 2) int64, u < v
    edge_weight: np.ndarray  # (E,) float32
    features: np.ndarray  # (N, C)
    num_frames: int
    num_scales: int
    weighted: bool
    edge_kind: np.ndarray | None = None  # (E,) 0 spatial, 1 temporal
    dense_threshold: int = DENSE_THRESHOLD
    _adjacency: np.ndarray | sp.spmatrix | None = field(default=None, repr=False, compare=False)

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return len(self.edge_index)

    @property
    def edges(self) -> Iterator[tuple[int, int, float]]:
        for (u, v), w in zip(self.edge_index.tolist(), self.edge_weight.tolist()):
            yield u, v, w

    def frame_of(self) -> np.ndarray:
        return np.array([n.frame_index for n in self.nodes])

    @property
    def adjacency(self) -> np.ndarray | sp.spmatrix:
        if self._adjacency is None:
            self._adjacency = renormalized_adjacency(self)
        return self._adjacency


def _edge_lists(keys: Sequence[tuple[int, int, int]]) -> tuple[np.ndarray, np.ndarray]:
    by_frame: dict[int, list[int]] = {}
    by_site: dict[tuple[int, int], list[int]] = {}
    for idx, (i, k, j) in enumerate(keys):
        by_frame.setdefault(i, []).append(idx)
        by_site.setdefault((k, j), []).append(idx)
    pairs, kinds = [], []
    for members in by_frame.values():
        pairs.extend(itertools.combinations(members, 2))
        kinds.extend([0] * (len(members) * (len(members) - 1) // 2))
    for members in by_site.values():
        pairs.extend(itertools.combinations(members, 2))
        kinds.extend([1] * (len(members) * (len(members) - 1) // 2))
    if not pairs:
        return np.zeros((0, 2), np.int64), np.zeros(0, np.int8)
    edge_index = np.asarray(pairs, dtype=np.int64)
    kinds_arr = np.asarray(kinds, dtype=np.int8)
    order = np.lexsort((edge_index[:, 1], edge_index[:, 0]))
    return edge_index[order], kinds_arr[order]


def build_graph(regions: Sequence[RegionNode], weighted: bool = True, video_id: str = "",
                dense_threshold: int = DENSE_THRESHOLD) -> VideoGraph:
    if not regions:
        raise ContractViolation("cannot build a graph from zero regions")
    nodes = sorted(regions, key=lambda n: n.key)
    keys = [n.key for n in nodes]
    if len(set(keys)) != len(keys):
        seen, dup = set(), None
        for key in keys:
            if key in seen:
                dup = key
                break
            seen.add(key)
        raise ContractViolation(f"duplicate region (frame, scale, position) = {dup}")
    dims = {np.shape(n.feature) for n in nodes}
    if len(dims) != 1:
        raise ContractViolation(f"region features have mixed shapes {sorted(dims)}")

    features = np.stack([np.asarray(n.feature) for n in nodes])
    edge_index, kinds = _edge_lists(keys)
    if weighted:
        weight = _pair_cosines(features, edge_index[:, 0], edge_index[:, 1]).astype(np.float32)
    else:
        weight = np.ones(len(edge_index), np.float32)
    return VideoGraph(
        video_id=video_id,
        nodes=nodes,
        edge_index=edge_index,
        edge_weight=weight,
        features=features,
        num_frames=len({k[0] for k in keys}),
        num_scales=len({k[1] for k in keys}),
        weighted=weighted,
        edge_kind=kinds,
        dense_threshold=dense_threshold,
    )


def renormalized_adjacency(g: VideoGraph) -> np.ndarray | sp.spmatrix:
    """D^-1/2 (A + I) D^-1/2, dense up to ``g.dense_threshold`` nodes, CSR above."""
    n = g.num_nodes
    u, v = g.edge_index[:, 0], g.edge_index[:, 1]
    w = g.edge_weight.astype(np.float64)
    deg = np.ones(n)
    np.add.at(deg, u, w)
    np.add.at(deg, v, w)
    inv_sqrt = 1.0 / np.sqrt(deg)
    if n <= g.dense_threshold:
        a = np.zeros((n, n))
        a[u, v] = w
        a[v, u] = w
        a[np.arange(n), np.arange(n)] = 1.0
        return a * inv_sqrt[:, None] * inv_sqrt[None, :]
    diag = np.arange(n)
    rows = np.concatenate([u, v, diag])
    cols = np.concatenate([v, u, diag])
    vals = np.concatenate([w, w, np.ones(n)]) * inv_sqrt[rows] * inv_sqrt[cols]
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def permute_frames(g: VideoGraph, order: Sequence[int]) -> VideoGraph:
    """Rebuild ``g`` with frame ``order[i]`` relabelled as frame ``i``."""
    remap = {old: new for new, old in enumerate(order)}
    regions = [RegionNode(remap[n.frame_index], n.scale_index, n.position_index, n.feature) for n in g.nodes]
    return build_graph(regions, g.weighted, g.video_id, g.dense_threshold)


# ---------------------------------------------------------------------------
# serialization ("STRG")

_STRG = struct.Struct("<4sHIIHBHIH")
_NODE = np.dtype([("i", "<u4"), ("k", "<u2"), ("j", "<u2"), ("offset", "<u4")])
_EDGE = np.dtype([("u", "<u4"), ("v", "<u4"), ("w", "<f4")])
STRG_VERSION = 1
HASH_LEN = 32


def encode_graph(g: VideoGraph, config_hash: str = "0" * 64) -> bytes:
    vid = g.video_id.encode()
    n, c = g.features.shape
    header = _STRG.pack(b"STRG", STRG_VERSION, n, g.num_frames, g.num_scales, int(g.weighted), c,
                        g.num_edges, len(vid))
    table = np.zeros(n, _NODE)
    table["i"] = [nd.frame_index for nd in g.nodes]
    table["k"] = [nd.scale_index for nd in g.nodes]
    table["j"] = [nd.position_index for nd in g.nodes]
    table["offset"] = np.arange(n)
    edges = np.zeros(g.num_edges, _EDGE)
    edges["u"], edges["v"], edges["w"] = g.edge_index[:, 0], g.edge_index[:, 1], g.edge_weight
    feats = np.ascontiguousarray(g.features, dtype="<f4")
    return b"".join([header, vid, table.tobytes(), edges.tobytes(), feats.tobytes(), bytes.fromhex(config_hash)])


def decode_graph(data: bytes, dense_threshold: int = DENSE_THRESHOLD) -> tuple[VideoGraph, str]:
    """Returns the graph and the config hash it was written under."""
    try:
        magic, version, n, f, s, weighted, c, e, id_len = _STRG.unpack_from(data)
    except struct.error as exc:
        raise InputError("graph file truncated") from exc
    if magic != b"STRG" or version != STRG_VERSION:
        raise InputError("not a graph file")
    pos = _STRG.size
    vid = data[pos:pos + id_len].decode()
    pos += id_len
    table = np.frombuffer(data, _NODE, n, pos)
    pos += table.nbytes
    edges = np.frombuffer(data, _EDGE, e, pos)
    pos += edges.nbytes
    feats = np.frombuffer(data, "<f4", n * c, pos).reshape(n, c).astype(np.float32)
    pos += feats.nbytes
    if len(data) != pos + HASH_LEN:
        raise InputError("graph file has unexpected length")
    config_hash = data[pos:].hex()
    nodes = [RegionNode(int(r["i"]), int(r["k"]), int(r["j"]), feats[int(r["offset"])]) for r in table]
    edge_index = np.stack([edges["u"], edges["v"]], axis=1).astype(np.int64)
    frame = table["i"]
    kinds = (frame[edge_index[:, 0]] != frame[edge_index[:, 1]]).astype(np.int8) if e else np.zeros(0, np.int8)
    g = VideoGraph(vid, nodes, edge_index, edges["w"].astype(np.float32), feats, f, s, bool(weighted),
                   kinds, dense_threshold)
    return g, config_hash


def save_graph(path: Path, g: VideoGraph, config_hash: str = "0" * 64) -> None:
    atomic_write(Path(path), encode_graph(g, config_hash))


def load_graph(path: Path, dense_threshold: int = DENSE_THRESHOLD) -> tuple[VideoGraph, str]:
    return decode_graph(Path(path).read_bytes(), dense_threshold)
