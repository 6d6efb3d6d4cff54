"""Self-attention heat maps.

Each region node is scored by the cosine between the video embedding and the
node's own (centered, normalized) feature.  Scores are spread back onto the
backbone grid: a cell takes the mean score of the windows covering it.  Maps
are normalized by the per-video maximum so emphasis is comparable across
frames.

``static`` mode scores raw region features against the static-pooling
embedding; ``star_gnn`` mode scores the GNN node outputs against the GNN
embedding.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np

from .errors import ContractViolation
from .gnn import GnnModel, VideoEmbedding, embed_video, node_states, static_embedding
from .graphbuild import VideoGraph
from .ingest import CROP_SIZE, scale_layout

MODES = ("star_gnn", "static")


@dataclass
class AttentionMap:
    frame_index: int
    grid: np.ndarray
    mode: str


def _unit_cos(row: Sequence[float], e: Sequence[float]) -> float:
    # fsum keeps the result independent of memory layout: equal rows give equal bits.
    mean = math.fsum(row) / len(row)
    centered = [x - mean for x in row]
    norm = math.sqrt(math.fsum(c * c for c in centered))
    if norm == 0.0:
        return 0.0
    return math.fsum(c * v for c, v in zip(centered, e)) / norm


def node_attention(embedding: VideoEmbedding | np.ndarray, node_outputs: np.ndarray) -> np.ndarray:
    e = embedding.vector if isinstance(embedding, VideoEmbedding) else np.asarray(embedding, dtype=np.float64)
    nodes = np.asarray(node_outputs, dtype=np.float64)
    if nodes.ndim != 2 or nodes.shape[1] != e.shape[0]:
        raise ContractViolation(f"node outputs {nodes.shape} do not match embedding dim {e.shape[0]}")
    e_list = e.tolist()
    scores = [_unit_cos(row, e_list) for row in nodes.tolist()]
    return np.clip(np.asarray(scores), 0.0, 1.0)


def cover_counts(grid_shape: tuple[int, int], scales: Sequence[tuple[int, int]]) -> np.ndarray:
    counts = np.zeros(grid_shape)
    for windows in scale_layout(grid_shape, scales):
        for top, left, win in windows:
            counts[top:top + win, left:left + win] += 1
    return counts


def accumulate(scores: Sequence[float], grid_shape: tuple[int, int], scales: Sequence[tuple[int, int]]) -> np.ndarray:
    """Sum of the scores of every window covering each cell."""
    total = np.zeros(grid_shape)
    windows = [w for ws in scale_layout(grid_shape, scales) for w in ws]
    if len(scores) != len(windows):
        raise ContractViolation(f"{len(scores)} scores for {len(windows)} regions")
    for s, (top, left, win) in zip(scores, windows):
        total[top:top + win, left:left + win] += s
    return total


def project_to_grid(scores: Sequence[float], frame: int, scales: Sequence[tuple[int, int]],
                    grid_shape: tuple[int, int] = (7, 7), mode: str = "star_gnn") -> AttentionMap:
    """Cover-count-normalized accumulation of one frame's region scores (not yet video-normalized)."""
    counts = cover_counts(grid_shape, scales)
    total = accumulate(scores, grid_shape, scales)
    grid = np.divide(total, counts, out=np.zeros(grid_shape), where=counts > 0)
    return AttentionMap(frame, grid, mode)


def normalize_per_video(maps: list[AttentionMap]) -> list[AttentionMap]:
    peak = max((float(m.grid.max()) for m in maps), default=0.0)
    if peak <= 0:
        return [AttentionMap(m.frame_index, np.zeros_like(m.grid), m.mode) for m in maps]
    return [AttentionMap(m.frame_index, m.grid / peak, m.mode) for m in maps]


def video_attention(g: VideoGraph, model: GnnModel | None, mode: str, scales: Sequence[tuple[int, int]],
                    grid_shape: tuple[int, int] = (7, 7)) -> list[AttentionMap]:
    if mode not in MODES:
        raise ContractViolation(f"mode must be one of {MODES}")
    if mode == "static":
        emb = static_embedding(g)
        outputs = np.asarray(g.features, dtype=np.float64)
    else:
        if model is None:
            raise ContractViolation("star_gnn attention needs a model")
        emb = embed_video(g, model)
        outputs = node_states(g, model)
    scores = node_attention(emb, outputs)
    frames = g.frame_of()
    maps = [project_to_grid(scores[frames == f], int(f), scales, grid_shape, mode) for f in np.unique(frames)]
    return normalize_per_video(maps)


def heat_intensity(grid: np.ndarray, size: int = CROP_SIZE) -> np.ndarray:
    """Bilinear upsampling of a grid in [0,1] to ``size`` x ``size`` uint8 intensities."""
    up = cv2.resize(np.asarray(grid, np.float32), (size, size), interpolation=cv2.INTER_LINEAR)
    return np.round(np.clip(up, 0, 1) * 255).astype(np.uint8)


def overlay(frame_rgb: np.ndarray, intensity: np.ndarray, colormap: str = "jet", alpha: float = 0.5) -> np.ndarray:
    from matplotlib import colormaps

    colors = (colormaps[colormap](intensity / 255.0)[..., :3] * 255).astype(np.float32)
    out = (1 - alpha) * frame_rgb.astype(np.float32) + alpha * colors
    return np.clip(out, 0, 255).astype(np.uint8)


def render_sequence(video_id: str, frames: Sequence[np.ndarray], maps: Sequence[AttentionMap], out_dir: Path,
                    colormap: str = "jet", alpha: float = 0.5) -> list[np.ndarray]:
    """Write ``{id}_{frame:04d}_{mode}.png`` overlays and a ``{id}_{mode}.json`` sidecar.

    ``frames`` are 224x224 RGB uint8 images aligned with ``maps``.  Returns
    the uint8 heat intensities that were rendered.
    """
    if len(frames) != len(maps):
        raise ContractViolation(f"{len(frames)} frames but {len(maps)} attention maps")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mode = maps[0].mode if maps else "static"
    intensities = []
    for frame, amap in zip(frames, maps):
        heat = heat_intensity(amap.grid, frame.shape[0])
        img = overlay(frame, heat, colormap, alpha)
        cv2.imwrite(str(out_dir / f"{video_id}_{amap.frame_index:04d}_{mode}.png"), cv2.cvtColor(img, cv2.COLOR_RGB2BGR))
        intensities.append(heat)
    sidecar = {
        "video_id": video_id,
        "mode": mode,
        "colormap": colormap,
        "alpha": alpha,
        "grids": [{"frame_index": m.frame_index, "grid": m.grid.tolist()} for m in maps],
    }
    (out_dir / f"{video_id}_{mode}.json").write_text(json.dumps(sidecar))
    return intensities
