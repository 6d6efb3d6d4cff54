"""Metric learning for the GNN weights.

Each mini-batch holds B (anchor, positive) pairs.  All videos in the batch
are embedded with the current weights, every anchor gets its hardest in-batch
negative (closest non-positive), and the mean triplet (or contrastive) loss
is minimized with Adam.  Distances are squared Euclidean between unit-norm
embeddings.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import InputError, MiningError, NumericError
from .gnn import GnnModel, VideoEmbedding, backward, decode_model, encode_model, forward
from .graphbuild import VideoGraph
from .ingest import atomic_write

log = logging.getLogger(__name__)


@dataclass
class LossConfig:
    kind: str = "triplet"
    margin: float = 0.5

    def __post_init__(self) -> None:
        if self.kind not in ("triplet", "contrastive"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.margin < 0:
            raise ValueError("margin must be nonnegative")


def sq_dist(a: np.ndarray, b: np.ndarray) -> float:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.dot(d, d))


def _vec(x) -> np.ndarray:
    return x.vector if isinstance(x, VideoEmbedding) else np.asarray(x, dtype=np.float64)


def triplet_loss(a, p, n, margin: float = 0.5) -> float:
    a, p, n = _vec(a), _vec(p), _vec(n)
    return max(0.0, sq_dist(a, p) - sq_dist(a, n) + margin)


def contrastive_loss(x, y, is_positive: bool, margin: float = 0.5) -> float:
    d = sq_dist(_vec(x), _vec(y))
    if is_positive:
        return d
    return max(0.0, margin - math.sqrt(d)) ** 2


def _triplet_grads(a, p, n, margin):
    """Loss and gradients w.r.t. (a, p, n)."""
    loss = sq_dist(a, p) - sq_dist(a, n) + margin
    if loss <= 0:
        z = np.zeros_like(a)
        return 0.0, z, z, z
    return loss, 2 * (n - p), -2 * (a - p), 2 * (a - n)


def _contrastive_grads(a, p, n, margin):
    """Positive pair (a, p) plus negative pair (a, n)."""
    ga = 2 * (a - p)
    gp = -ga
    loss = sq_dist(a, p)
    gn = np.zeros_like(a)
    dist = math.sqrt(sq_dist(a, n))
    if dist < margin:
        loss += (margin - dist) ** 2
        if dist > 0:
            g = -2 * (margin - dist) * (a - n) / dist
            ga = ga + g
            gn = -g
    return loss, ga, gp, gn


def mine_hardest_negative(anchor_idx: int, batch_embeddings: Sequence, batch_ids: Sequence[str],
                          positive_sets: Mapping[str, set]) -> int:
    """Index of the closest in-batch candidate that is neither the anchor nor one of its positives.

    Ties go to the lowest index.
    """
    emb = np.stack([_vec(e) for e in batch_embeddings])
    anchor_id = batch_ids[anchor_idx]
    excluded = positive_sets.get(anchor_id, set())
    best, best_d = -1, math.inf
    for c in range(len(emb)):
        if c == anchor_idx or batch_ids[c] == anchor_id or batch_ids[c] in excluded:
            continue
        d = sq_dist(emb[anchor_idx], emb[c])
        if d < best_d:
            best, best_d = c, d
    if best < 0:
        raise MiningError(f"no valid negative in batch for anchor {anchor_id!r}")
    return best


# ---------------------------------------------------------------------------
# data


@dataclass
class TrainingSet:
    graphs: Mapping[str, VideoGraph]
    pairs: list[tuple[str, str]]  # (anchor id, positive id)
    positive_sets: dict[str, set[str]]

    @classmethod
    def from_relevance(cls, graphs: Mapping[str, VideoGraph], relevance: Iterable) -> "TrainingSet":
        """Anchors are queries, positives their labelled positives (symmetric label map)."""
        pairs = []
        pos: dict[str, set[str]] = {}
        for rel in relevance:
            group = {rel.query_id, *rel.positive_ids}
            for p in sorted(rel.positive_ids):
                if rel.query_id in graphs and p in graphs:
                    pairs.append((rel.query_id, p))
            for vid in group:
                pos.setdefault(vid, set()).update(group - {vid})
        return cls(graphs, pairs, pos)


@dataclass
class TripletBatch:
    anchors: list[str]
    positives: list[str]
    negatives: list[str]

    @property
    def size(self) -> int:
        return len(self.anchors)


def epoch_batches(pairs: Sequence[tuple[str, str]], batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(pairs))
    for start in range(0, len(order), batch_size):
        yield [pairs[i] for i in order[start:start + batch_size]]


def _fill_candidates(pairs, data: TrainingSet, rng: np.random.Generator) -> list[str]:
    """Unique batch video ids; random non-positives are added for any anchor lacking a negative."""
    ids = list(dict.fromkeys(v for pair in pairs for v in pair))
    all_ids = sorted(data.graphs)
    for anchor, _ in pairs:
        blocked = data.positive_sets.get(anchor, set()) | {anchor}
        if any(v not in blocked for v in ids):
            continue
        pool = [v for v in all_ids if v not in blocked]
        if not pool:
            raise MiningError(f"training set has no negative for anchor {anchor!r}")
        ids.append(pool[int(rng.integers(len(pool)))])
    return ids


def batch_loss_and_grads(model: GnnModel, data: TrainingSet, pairs: Sequence[tuple[str, str]],
                         loss: LossConfig, extra_ids: Sequence[str] = (),
                         negatives: Sequence[str] | None = None):
    """Mean batch loss, gradients w.r.t. ``model.parameters()`` and the triplet batch used.

    When ``negatives`` is None they are mined from the batch; passing them
    fixes the triplets (for finite-difference checks).
    """
    ids = list(dict.fromkeys([v for pair in pairs for v in pair] + list(extra_ids)))
    fwd = {vid: forward(data.graphs[vid], model) for vid in ids}
    emb = {vid: f[0].vector for vid, f in fwd.items()}
    if negatives is None:
        batch = [emb[v] for v in ids]
        negatives = [ids[mine_hardest_negative(ids.index(a), batch, ids, data.positive_sets)] for a, _ in pairs]
    d_emb = {vid: np.zeros_like(e) for vid, e in emb.items()}
    total = 0.0
    b = len(pairs)
    step = _triplet_grads if loss.kind == "triplet" else _contrastive_grads
    for (a, p), n in zip(pairs, negatives):
        value, ga, gp, gn = step(emb[a], emb[p], emb[n], loss.margin)
        total += value
        d_emb[a] += ga / b
        d_emb[p] += gp / b
        d_emb[n] += gn / b
    grads = [np.zeros(w.shape) for w in model.parameters()]
    for vid in ids:
        if not np.any(d_emb[vid]):
            continue
        for acc, g in zip(grads, backward(fwd[vid][1], model, d_emb[vid])):
            acc += g
    batch = TripletBatch([a for a, _ in pairs], [p for _, p in pairs], list(negatives))
    return total / b, grads, batch


# ---------------------------------------------------------------------------
# optimizer and state


@dataclass
class Adam:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        if not self.m:
            self.m = [np.zeros(p.shape) for p in params]
            self.v = [np.zeros(p.shape) for p in params]
        self.t += 1
        out = []
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            update = self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            out.append((p.astype(np.float64) - update).astype(np.float32))
        return out


@dataclass
class TrainState:
    model: GnnModel
    optimizer: Adam
    epoch: int = 0
    step: int = 0
    seed: int = 0
    best_val_map: float = -1.0
    last_epoch_loss: float = math.nan


def new_state(model: GnnModel, lr: float = 1e-4, seed: int = 0) -> TrainState:
    return TrainState(model, Adam(lr=lr), seed=seed)


def _weight_norms(model: GnnModel) -> list[float]:
    return [float(np.linalg.norm(p)) for p in model.parameters()]


def train_epoch(state: TrainState, data: TrainingSet, loss: LossConfig, batch_size: int = 128,
                log_file=None) -> TrainState:
    """One pass over the anchor-positive pairs, one Adam step per mini-batch."""
    if not data.pairs:
        raise InputError("training set has no anchor-positive pairs")
    rng = np.random.default_rng([state.seed, state.epoch])
    losses = []
    for pairs in epoch_batches(data.pairs, batch_size, rng):
        ids = _fill_candidates(pairs, data, rng)
        extra = ids[len(dict.fromkeys(v for pr in pairs for v in pr)):]
        value, grads, batch = batch_loss_and_grads(state.model, data, pairs, loss, extra)
        if not math.isfinite(value):
            raise NumericError(
                f"non-finite loss at step {state.step}; batch anchors={batch.anchors}; "
                f"weight norms={_weight_norms(state.model)}"
            )
        state.model = state.model.with_parameters(state.optimizer.step(state.model.parameters(), grads))
        state.step += 1
        losses.append(value)
        if log_file is not None:
            log_file.write(json.dumps({"step": state.step, "loss": value, "lr": state.optimizer.lr,
                                       "timestamp": time.time()}) + "\n")
    state.epoch += 1
    state.last_epoch_loss = float(np.mean(losses))
    log.info("epoch %d loss %.6f", state.epoch, state.last_epoch_loss)
    return state


def fit(state: TrainState, data: TrainingSet, loss: LossConfig, batch_size: int = 128, max_epochs: int = 100,
        patience: int = 5, validate: Callable[[GnnModel], float] | None = None,
        log_path: Path | None = None) -> tuple[TrainState, TrainState]:
    """Train until validation mAP stops improving for ``patience`` epochs.

    Returns the final state and a snapshot of the best-validation state (the
    final state when no validator is given).
    """
    best = copy.deepcopy(state)
    stale = 0
    fh = open(log_path, "a") if log_path is not None else None
    try:
        while state.epoch < max_epochs:
            state = train_epoch(state, data, loss, batch_size, fh)
            if validate is None:
                best = copy.deepcopy(state)
                continue
            score = validate(state.model)
            if score > state.best_val_map:
                state.best_val_map = score
                best = copy.deepcopy(state)
                stale = 0
            else:
                stale += 1
                if stale >= patience:
                    break
    finally:
        if fh is not None:
            fh.close()
    return state, best


# ---------------------------------------------------------------------------
# checkpoint: model block followed by an optimizer block

_ADAM = struct.Struct("<4sHddddQIQQdd")
ADAM_VERSION = 1


def encode_state(state: TrainState, config_hash: str = "0" * 64) -> bytes:
    opt = state.optimizer
    parts = [encode_model(state.model, config_hash),
             _ADAM.pack(b"ADAM", ADAM_VERSION, opt.lr, opt.beta1, opt.beta2, opt.eps, opt.t, state.epoch,
                        state.step, state.seed, state.best_val_map, state.last_epoch_loss),
             struct.pack("<B", 1 if opt.m else 0)]
    if opt.m:
        parts += [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in opt.m + opt.v]
    return b"".join(parts)


def decode_state(data: bytes) -> tuple[TrainState, str]:
    model, config_hash, pos = decode_model(data)
    try:
        (magic, version, lr, b1, b2, eps, t, epoch, step, seed, best,
         last) = _ADAM.unpack_from(data, pos)
    except struct.error as exc:
        raise InputError("checkpoint has no optimizer state") from exc
    if magic != b"ADAM" or version != ADAM_VERSION:
        raise InputError("corrupt optimizer block")
    pos += _ADAM.size
    (has_moments,) = struct.unpack_from("<B", data, pos)
    pos += 1
    m, v = [], []
    if has_moments:
        shapes = [p.shape for p in model.parameters()]
        arrays = []
        for shape in shapes + shapes:
            count = int(np.prod(shape))
            arrays.append(np.frombuffer(data, "<f8", count, pos).reshape(shape).astype(np.float64))
            pos += 8 * count
        m, v = arrays[: len(shapes)], arrays[len(shapes):]
    if pos != len(data):
        raise InputError("trailing bytes in checkpoint")
    opt = Adam(lr, b1, b2, eps, t, m, v)
    return TrainState(model, opt, epoch, step, seed, best, last), config_hash


def save_state(path: Path, state: TrainState, config_hash: str = "0" * 64) -> None:
    atomic_write(Path(path), encode_state(state, config_hash))


def load_state(path: Path) -> tuple[TrainState, str]:
    return decode_state(Path(path).read_bytes())
