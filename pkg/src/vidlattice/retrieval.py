"""Embedding index, exact ranking and mAP evaluation."""

from __future__ import annotations

import json
import struct
from fractions import Fraction
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractViolation, InputError, LookupFailure
from .gnn import VideoEmbedding
from .ingest import atomic_write


@dataclass
class EmbeddingIndex:
    entries: dict[str, np.ndarray] = field(default_factory=dict)
    dim: int | None = None

    def add(self, emb: VideoEmbedding | str, vector: np.ndarray | None = None) -> None:
        if isinstance(emb, VideoEmbedding):
            vid, vec = emb.video_id, emb.vector
        else:
            vid, vec = emb, vector
        vec = np.asarray(vec, dtype=np.float64)
        if self.dim is None:
            self.dim = vec.shape[0]
        elif vec.shape != (self.dim,):
            raise ContractViolation(f"embedding for {vid!r} has shape {vec.shape}, index dim is {self.dim}")
        self.entries[vid] = vec

    def __contains__(self, vid: str) -> bool:
        return vid in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, vid: str) -> np.ndarray:
        try:
            return self.entries[vid]
        except KeyError:
            raise LookupFailure(f"video id not in index: {vid!r}") from None


@dataclass
class QueryRelevance:
    query_id: str
    positive_ids: set[str]
    negative_ids: set[str] = field(default_factory=set)

    def __post_init__(self) -> None:
        self.positive_ids = set(self.positive_ids)
        self.negative_ids = set(self.negative_ids)
        if self.positive_ids & self.negative_ids:
            raise ContractViolation(f"query {self.query_id!r}: positives and negatives overlap")
        if self.query_id in self.positive_ids or self.query_id in self.negative_ids:
            raise ContractViolation(f"query {self.query_id!r} lists itself as a candidate")


@dataclass
class RetrievalResult:
    query_id: str
    ranked: list[tuple[str, float]]
    ap: float


def rank(query: VideoEmbedding | np.ndarray, index: EmbeddingIndex, candidate_ids: Iterable[str]) -> list[tuple[str, float]]:
    """Full scan by cosine score (dot product of unit vectors), descending; ties by id."""
    q = query.vector if isinstance(query, VideoEmbedding) else np.asarray(query, dtype=np.float64)
    ids = sorted(set(candidate_ids))
    if not ids:
        return []
    mat = np.stack([index.get(v) for v in ids])
    scores = mat @ q
    order = np.lexsort((np.arange(len(ids)), -scores))  # ids already ascending
    return [(ids[i], float(scores[i])) for i in order]


def average_precision(ranked_ids: Sequence[str], positives: set[str]) -> float:
    if not positives:
        raise ContractViolation("average precision needs at least one positive")
    # exact rational sum, rounded once
    hits = 0
    total = Fraction(0)
    for r, vid in enumerate(ranked_ids, start=1):
        if vid in positives:
            hits += 1
            total += Fraction(hits, r)
    return float(total / len(positives))


def evaluate_queries(index: EmbeddingIndex, queries: Sequence[QueryRelevance],
                     distractor_ids: Iterable[str] = ()) -> list[RetrievalResult]:
    distractors = set(distractor_ids)
    results = []
    for q in queries:
        candidates = (q.positive_ids | q.negative_ids | distractors) - {q.query_id}
        ranked = rank(index.get(q.query_id), index, candidates)
        ap = average_precision([vid for vid, _ in ranked], q.positive_ids)
        results.append(RetrievalResult(q.query_id, ranked, ap))
    return results


def evaluate_map(index: EmbeddingIndex, queries: Sequence[QueryRelevance], distractor_ids: Iterable[str] = ()) -> float:
    if not queries:
        raise ContractViolation("no queries to evaluate")
    return float(np.mean([r.ap for r in evaluate_queries(index, queries, distractor_ids)]))


def sample_distractors(pool: Iterable[str], count: int, seed: int = 0) -> list[str]:
    """Seeded choice of ``count`` distractors; smaller counts are prefixes of larger ones."""
    ids = sorted(set(pool))
    if count > len(ids):
        raise ContractViolation(f"requested {count} distractors, only {len(ids)} available")
    order = np.random.default_rng(seed).permutation(len(ids))
    return [ids[i] for i in order[:count]]


def evaluation_report(results: Sequence[RetrievalResult], distractor_count: int, seed: int) -> dict:
    return {
        "map": float(np.mean([r.ap for r in results])) if results else 0.0,
        "per_query": {r.query_id: r.ap for r in results},
        "distractor_count": distractor_count,
        "seed": seed,
    }


# ---------------------------------------------------------------------------
# files

_STRE = struct.Struct("<4sHIH")
STRE_VERSION = 1


def encode_index(index: EmbeddingIndex, config_hash: str = "0" * 64) -> bytes:
    parts = [_STRE.pack(b"STRE", STRE_VERSION, len(index), index.dim or 0)]
    for vid in sorted(index.entries):
        raw = vid.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(np.ascontiguousarray(index.entries[vid], dtype="<f4").tobytes())
    parts.append(bytes.fromhex(config_hash))
    return b"".join(parts)


def decode_index(data: bytes) -> tuple[EmbeddingIndex, str]:
    try:
        magic, version, count, dim = _STRE.unpack_from(data)
    except struct.error as exc:
        raise InputError("embedding store truncated") from exc
    if magic != b"STRE" or version != STRE_VERSION:
        raise InputError("not an embedding store")
    pos = _STRE.size
    index = EmbeddingIndex(dim=dim or None)
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            vid = data[pos:pos + n].decode()
            pos += n
            vec = np.frombuffer(data, "<f4", dim, pos).astype(np.float64)
            pos += 4 * dim
            index.entries[vid] = vec
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise InputError("embedding store truncated") from exc
    if len(data) != pos + 32:
        raise InputError("embedding store has unexpected length")
    return index, data[pos:].hex()


def save_index(path: Path, index: EmbeddingIndex, config_hash: str = "0" * 64) -> None:
    atomic_write(Path(path), encode_index(index, config_hash))


def load_index(path: Path) -> tuple[EmbeddingIndex, str]:
    return decode_index(Path(path).read_bytes())


def read_relevance(path: Path) -> list[QueryRelevance]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(QueryRelevance(rec["query"], set(rec["positives"]), set(rec.get("negatives", []))))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise InputError(f"{path}:{lineno}: bad relevance record ({exc})") from exc
    return out


def write_relevance(path: Path, queries: Sequence[QueryRelevance]) -> None:
    lines = [json.dumps({"query": q.query_id, "positives": sorted(q.positive_ids),
                         "negatives": sorted(q.negative_ids)}) for q in queries]
    atomic_write(Path(path), ("\n".join(lines) + "\n").encode())


def index_from_embeddings(embeddings: Mapping[str, VideoEmbedding] | Iterable[VideoEmbedding]) -> EmbeddingIndex:
    index = EmbeddingIndex()
    items = embeddings.values() if isinstance(embeddings, Mapping) else embeddings
    for emb in items:
        index.add(emb)
    return index
