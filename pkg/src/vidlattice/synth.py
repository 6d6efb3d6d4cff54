"""Synthetic near-duplicate video corpus.

Base clips are moving textured shapes over a background drawn from a small
shared pool, so unrelated clips often share most of their pixels.  Each base
clip gets near-duplicate variants (crop, overlay, frame shuffle, logo
insertion) whose nuisance content is also shared across clips: the same
logos and subtitle bars show up in unrelated videos.  Unlabelled distractor
clips are drawn the same way.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import cv2
import numpy as np

from .ingest import VideoClip
from .retrieval import QueryRelevance, write_relevance

FRAME_H, FRAME_W = 240, 320
TRANSFORMS = ("crop", "overlay", "shuffle", "logo")


def _background(rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:FRAME_H, 0:FRAME_W].astype(np.float32)
    c0, c1 = rng.uniform(40, 215, 3), rng.uniform(40, 215, 3)
    angle = rng.uniform(0, np.pi)
    t = (np.cos(angle) * xx + np.sin(angle) * yy)
    t = (t - t.min()) / (t.max() - t.min())
    img = c0[None, None] * (1 - t[..., None]) + c1[None, None] * t[..., None]
    freq = rng.uniform(0.03, 0.12)
    phi = rng.uniform(0, np.pi)
    stripes = np.sin(freq * (np.cos(phi) * xx + np.sin(phi) * yy))
    img += rng.uniform(15, 35) * stripes[..., None]
    return np.clip(img, 0, 255)


@dataclass
class _Shape:
    kind: int
    color: np.ndarray
    stripe_color: np.ndarray
    size: np.ndarray
    start: np.ndarray
    velocity: np.ndarray
    stripe_freq: float


def _random_shape(rng: np.random.Generator) -> _Shape:
    return _Shape(
        kind=int(rng.integers(3)),
        color=rng.uniform(0, 255, 3),
        stripe_color=rng.uniform(0, 255, 3),
        size=rng.uniform(30, 70, 2),
        start=np.array([rng.uniform(40, FRAME_W - 40), rng.uniform(40, FRAME_H - 40)]),
        velocity=rng.uniform(-14, 14, 2),
        stripe_freq=float(rng.uniform(0.2, 0.6)),
    )


def _draw_shape(img: np.ndarray, shape: _Shape, t: int) -> None:
    cx, cy = shape.start + shape.velocity * t
    cx = float(np.clip(cx, 20, FRAME_W - 20))
    cy = float(np.clip(cy, 20, FRAME_H - 20))
    w, h = shape.size
    mask = np.zeros((FRAME_H, FRAME_W), np.uint8)
    if shape.kind == 0:
        cv2.rectangle(mask, (int(cx - w / 2), int(cy - h / 2)), (int(cx + w / 2), int(cy + h / 2)), 1, -1)
    elif shape.kind == 1:
        cv2.ellipse(mask, (int(cx), int(cy)), (int(w / 2), int(h / 2)), 0, 0, 360, 1, -1)
    else:
        pts = np.array([[cx, cy - h / 2], [cx - w / 2, cy + h / 2], [cx + w / 2, cy + h / 2]], np.int32)
        cv2.fillPoly(mask, [pts], 1)
    yy, xx = np.nonzero(mask)
    stripe = (np.sin(shape.stripe_freq * (xx + yy)) > 0)[:, None]
    img[yy, xx] = np.where(stripe, shape.stripe_color, shape.color)


def make_clip(rng: np.random.Generator, background: np.ndarray, n_frames: int, n_shapes: int = 3) -> list[np.ndarray]:
    shapes = [_random_shape(rng) for _ in range(n_shapes)]
    frames = []
    for t in range(n_frames):
        img = background.copy()
        for s in shapes:
            _draw_shape(img, s, t)
        frames.append(np.clip(img, 0, 255).astype(np.uint8))
    return frames


def make_logo(rng: np.random.Generator, size: int = 56) -> np.ndarray:
    logo = np.zeros((size, size, 3), np.float32)
    logo[:] = rng.uniform(0, 255, 3)
    c = rng.uniform(0, 255, 3)
    yy, xx = np.mgrid[0:size, 0:size]
    pattern = ((xx // 8 + yy // 8) % 2 == 0) if rng.random() < 0.5 else (np.hypot(xx - size / 2, yy - size / 2) < size / 3)
    logo[pattern] = c
    return logo


def _noise(rng: np.random.Generator, frames: list[np.ndarray], amplitude: int = 6) -> list[np.ndarray]:
    """Uniform integer pixel noise in [-amplitude, amplitude]."""
    out = []
    for f in frames:
        n = rng.integers(-amplitude, amplitude + 1, f.shape, dtype=np.int16)
        out.append(np.clip(f.astype(np.int16) + n, 0, 255).astype(np.uint8))
    return out


def t_crop(rng, frames, assets):
    frac = rng.uniform(0.75, 0.88)
    ch, cw = int(FRAME_H * frac), int(FRAME_W * frac)
    y0, x0 = int(rng.integers(0, FRAME_H - ch + 1)), int(rng.integers(0, FRAME_W - cw + 1))
    return [cv2.resize(f[y0:y0 + ch, x0:x0 + cw], (FRAME_W, FRAME_H), interpolation=cv2.INTER_LINEAR) for f in frames]


def t_overlay(rng, frames, assets):
    tint = assets["tints"][int(rng.integers(len(assets["tints"])))]
    band = assets["bands"][int(rng.integers(len(assets["bands"])))]
    out = []
    for f in frames:
        g = f.astype(np.float32) * 0.7 + tint * 0.3
        g[-band.shape[0]:] = band
        out.append(np.clip(g, 0, 255).astype(np.uint8))
    return out


def t_shuffle(rng, frames, assets):
    order = rng.permutation(len(frames))
    return [frames[i] for i in order]


def t_logo(rng, frames, assets):
    i = int(rng.integers(len(assets["logos"])))
    logo = assets["logos"][i]
    s = logo.shape[0]
    corners = [(8, 8), (8, FRAME_W - s - 8), (FRAME_H - s - 8, 8), (FRAME_H - s - 8, FRAME_W - s - 8)]
    y, x = corners[i % 4]
    out = []
    for f in frames:
        g = f.copy()
        g[y:y + s, x:x + s] = logo.astype(np.uint8)
        out.append(g)
    return out


TRANSFORM_FNS: dict[str, Callable] = {"crop": t_crop, "overlay": t_overlay, "shuffle": t_shuffle, "logo": t_logo}


def _assets(rng: np.random.Generator, n_backgrounds: int, n_logos: int) -> dict:
    bands = []
    for _ in range(3):
        band = np.full((40, FRAME_W, 3), rng.uniform(0, 60), np.float32)
        for _ in range(int(rng.integers(4, 9))):
            x = int(rng.integers(0, FRAME_W - 30))
            band[10:30, x:x + int(rng.integers(10, 30))] = 235
        bands.append(band)
    return {
        "backgrounds": [_background(rng) for _ in range(n_backgrounds)],
        "logos": [make_logo(rng) for _ in range(n_logos)],
        "tints": [rng.uniform(0, 255, 3).astype(np.float32) for _ in range(4)],
        "bands": bands,
    }


@dataclass
class SyntheticCorpus:
    clips: dict[str, VideoClip]
    split: dict[str, str]
    train_queries: list[QueryRelevance]
    test_queries: list[QueryRelevance]
    distractors: list[str] = field(default_factory=list)

    @property
    def train_ids(self) -> list[str]:
        return sorted(v for v, s in self.split.items() if s == "train")

    @property
    def test_ids(self) -> list[str]:
        return sorted(v for v, s in self.split.items() if s == "test")


def _queries(groups: dict[str, list[str]]) -> list[QueryRelevance]:
    everything = {v for vids in groups.values() for v in vids}
    out = []
    for query, vids in sorted(groups.items()):
        positives = set(vids) - {query}
        out.append(QueryRelevance(query, positives, everything - set(vids)))
    return out


def make_corpus(n_base: int = 60, n_test: int = 24, n_frames: int = 8, n_distractors: int = 0,
                n_backgrounds: int = 6, n_logos: int = 4, seed: int = 0,
                transforms: tuple[str, ...] = TRANSFORMS) -> SyntheticCorpus:
    """Base clips with near-duplicate variants; the last ``n_test`` bases form the test split."""
    rng = np.random.default_rng(seed)
    assets = _assets(rng, n_backgrounds, n_logos)
    clips: dict[str, VideoClip] = {}
    split: dict[str, str] = {}
    groups: dict[str, dict[str, list[str]]] = {"train": {}, "test": {}}
    for b in range(n_base):
        part = "test" if b >= n_base - n_test else "train"
        bg = assets["backgrounds"][int(rng.integers(n_backgrounds))]
        base = make_clip(rng, bg, n_frames)
        qid = f"b{b:03d}_orig"
        clips[qid] = VideoClip(_noise(rng, base), 1.0)
        vids = [qid]
        for name in transforms:
            vid = f"b{b:03d}_{name}"
            clips[vid] = VideoClip(_noise(rng, TRANSFORM_FNS[name](rng, base, assets)), 1.0)
            vids.append(vid)
        for vid in vids:
            split[vid] = part
        groups[part][qid] = vids
    distractors = []
    for d in range(n_distractors):
        bg = assets["backgrounds"][int(rng.integers(n_backgrounds))]
        frames = make_clip(rng, bg, n_frames)
        name = transforms[int(rng.integers(len(transforms)))]
        vid = f"d{d:04d}"
        clips[vid] = VideoClip(_noise(rng, TRANSFORM_FNS[name](rng, frames, assets)), 1.0)
        split[vid] = "distractor"
        distractors.append(vid)
    return SyntheticCorpus(clips, split, _queries(groups["train"]), _queries(groups["test"]), distractors)


def write_corpus(corpus: SyntheticCorpus, out_dir: Path, fps: float = 1.0) -> Path:
    """Write every clip as an mp4, plus manifest.jsonl, relevance_{train,test}.jsonl and distractors.json."""
    out_dir = Path(out_dir)
    (out_dir / "videos").mkdir(parents=True, exist_ok=True)
    records = []
    for vid in sorted(corpus.clips):
        path = out_dir / "videos" / f"{vid}.mp4"
        clip = corpus.clips[vid]
        writer = cv2.VideoWriter(str(path), cv2.VideoWriter_fourcc(*"mp4v"), fps, (FRAME_W, FRAME_H))
        for frame in clip.frames:
            writer.write(cv2.cvtColor(frame, cv2.COLOR_RGB2BGR))
        writer.release()
        records.append({"id": vid, "path": f"videos/{vid}.mp4", "split": corpus.split[vid]})
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("".join(json.dumps(r) + "\n" for r in records))
    write_relevance(out_dir / "relevance_train.jsonl", corpus.train_queries)
    write_relevance(out_dir / "relevance_test.jsonl", corpus.test_queries)
    (out_dir / "distractors.json").write_text(json.dumps(corpus.distractors))
    return manifest
