"""Frame sampling, backbone feature maps and multi-scale regional features.

A video becomes a stack of backbone activation grids (one per sampled frame),
and every grid is cut into sliding-window regions that are max-pooled per
channel.  Under the default scales a 7x7 grid yields 9 + 4 + 1 = 14 regions.
"""

from __future__ import annotations

import hashlib
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import cv2
import numpy as np

from .config import DEFAULT_SCALES, PipelineConfig
from .errors import ConfigurationError, ContractViolation, EmptyVideoError, InputError

log = logging.getLogger(__name__)

RESIZE_SHORT_EDGE = 256
CROP_SIZE = 224
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class FrameTensor:
    pixels: np.ndarray  # (224, 224, 3) float32, RGB, backbone-normalized
    frame_index: int
    timestamp_s: float


@dataclass
class FeatureMap:
    grid: np.ndarray  # (H_f, W_f, C)
    frame_index: int


@dataclass
class RegionNode:
    frame_index: int
    scale_index: int  # 1-based, in the order of the configured scales
    position_index: int  # row-major window position within the scale
    feature: np.ndarray

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.frame_index, self.scale_index, self.position_index)


@dataclass
class BackboneSpec:
    name: str
    output_channels: int
    output_grid: tuple[int, int]
    preprocessing: dict = field(default_factory=dict)

    def preprocessing_hash(self) -> str:
        payload = repr((self.name, self.output_channels, self.output_grid, sorted(self.preprocessing.items())))
        return hashlib.sha256(payload.encode()).hexdigest()


@dataclass
class VideoClip:
    """Decoded frames held in memory (RGB uint8, H x W x 3) with their frame rate."""

    frames: list[np.ndarray]
    fps: float

    @property
    def duration_s(self) -> float:
        return len(self.frames) / self.fps


# ---------------------------------------------------------------------------
# frame sampling


def sample_times(duration_s: float, rate_hz: float, max_frames: int) -> list[float]:
    """Timestamps at fixed 1/rate_hz spacing, thinned uniformly to max_frames.

    Always returns at least one timestamp (t=0), even for clips shorter than
    one sampling interval.
    """
    if rate_hz <= 0 or max_frames < 1:
        raise ContractViolation("rate_hz must be > 0 and max_frames >= 1")
    step = 1.0 / rate_hz
    count = max(1, int(np.ceil(duration_s * rate_hz - 1e-9)))
    times = [i * step for i in range(count)]
    if len(times) > max_frames:
        keep = np.linspace(0, len(times) - 1, max_frames).round().astype(int)
        times = [times[i] for i in keep]
    return times


def preprocess_frame(rgb: np.ndarray, mean: Sequence[float] = (0.0, 0.0, 0.0),
                     std: Sequence[float] = (1.0, 1.0, 1.0)) -> np.ndarray:
    """Resize the smaller edge to 256, center-crop 224x224, scale to [0,1], normalize."""
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise InputError(f"expected an H x W x 3 frame, got shape {rgb.shape}")
    h, w = rgb.shape[:2]
    scale = RESIZE_SHORT_EDGE / min(h, w)
    nh, nw = max(RESIZE_SHORT_EDGE, round(h * scale)), max(RESIZE_SHORT_EDGE, round(w * scale))
    resized = cv2.resize(rgb, (nw, nh), interpolation=cv2.INTER_AREA if scale < 1 else cv2.INTER_LINEAR)
    top, left = (nh - CROP_SIZE) // 2, (nw - CROP_SIZE) // 2
    crop = resized[top:top + CROP_SIZE, left:left + CROP_SIZE].astype(np.float32) / 255.0
    return (crop - np.asarray(mean, np.float32)) / np.asarray(std, np.float32)


def _decode(path: Path, wanted: Iterable[int]) -> dict[int, np.ndarray]:
    wanted = set(wanted)
    cap = cv2.VideoCapture(str(path))
    out: dict[int, np.ndarray] = {}
    try:
        idx = 0
        last = max(wanted)
        while idx <= last:
            ok, frame = cap.read()
            if not ok:
                break
            if idx in wanted:
                out[idx] = cv2.cvtColor(frame, cv2.COLOR_BGR2RGB)
            idx += 1
    finally:
        cap.release()
    return out


def _probe(path: Path) -> tuple[float, int]:
    if not Path(path).is_file():
        raise InputError(f"video not found: {path}")
    cap = cv2.VideoCapture(str(path))
    try:
        if not cap.isOpened():
            raise InputError(f"cannot decode video: {path}")
        fps = cap.get(cv2.CAP_PROP_FPS) or 0.0
        count = int(cap.get(cv2.CAP_PROP_FRAME_COUNT) or 0)
        if count <= 0:
            while cap.read()[0]:
                count += 1
    finally:
        cap.release()
    if fps <= 0:
        raise InputError(f"video has no usable frame rate: {path}")
    if count == 0:
        raise EmptyVideoError(f"no decodable frames in {path}")
    return fps, count


def sample_frames(video: str | Path | VideoClip, rate_hz: float = 1.0, max_frames: int = 64,
                  backbone: BackboneSpec | None = None) -> list[FrameTensor]:
    """Sample frames every 1/rate_hz seconds and preprocess them to 224x224."""
    if isinstance(video, VideoClip):
        fps, count = video.fps, len(video.frames)
        if count == 0:
            raise EmptyVideoError("clip has no frames")
    else:
        fps, count = _probe(Path(video))
    times = sample_times(count / fps, rate_hz, max_frames)
    indices = [min(count - 1, int(np.floor(t * fps + 1e-6))) for t in times]

    if isinstance(video, VideoClip):
        decoded = {i: video.frames[i] for i in set(indices)}
    else:
        decoded = _decode(Path(video), indices)
        if not decoded:
            raise EmptyVideoError(f"no decodable frames in {video}")
        # Container frame counts can overstate; fall back to the last decoded frame.
        top = max(decoded)
        indices = [i if i in decoded else top for i in indices]

    prep = backbone.preprocessing if backbone is not None else {}
    mean, std = prep.get("mean", (0.0, 0.0, 0.0)), prep.get("std", (1.0, 1.0, 1.0))
    return [FrameTensor(preprocess_frame(decoded[i], mean, std), n, t)
            for n, (i, t) in enumerate(zip(indices, times))]


# ---------------------------------------------------------------------------
# backbones


class Backbone:
    """Maps a batch of preprocessed frames (B, 224, 224, 3) to grids (B, H_f, W_f, C)."""

    spec: BackboneSpec

    def __call__(self, pixels: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def _patches(pixels: np.ndarray, grid: int) -> np.ndarray:
    b, h, w, c = pixels.shape
    p = h // grid
    x = pixels[:, : p * grid, : p * grid].reshape(b, grid, p, grid, p, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, grid, grid, p * p * c)


class RandomPatchBackbone(Backbone):
    """Deterministic stand-in: ReLU of a fixed random projection of 32x32 patches."""

    def __init__(self, channels: int = 512, seed: int = 0, grid: int = 7):
        self.grid = grid
        patch_dim = (CROP_SIZE // grid) ** 2 * 3
        rng = np.random.default_rng(seed)
        self.projection = (rng.standard_normal((patch_dim, channels)) / np.sqrt(patch_dim)).astype(np.float32)
        self.spec = BackboneSpec(
            name=f"mock-patchproj-{channels}-s{seed}",
            output_channels=channels,
            output_grid=(grid, grid),
            preprocessing={"resize": RESIZE_SHORT_EDGE, "crop": CROP_SIZE, "mean": (0.5,) * 3, "std": (0.25,) * 3},
        )

    def __call__(self, pixels: np.ndarray) -> np.ndarray:
        out = _patches(np.asarray(pixels, np.float32), self.grid) @ self.projection
        return np.maximum(out, 0.0, out=out)


class PatchMeanBackbone(Backbone):
    """Per-patch channel means; C = 3.  Zero in, zero out."""

    def __init__(self, grid: int = 7):
        self.grid = grid
        self.spec = BackboneSpec(
            name="mock-patchmean",
            output_channels=3,
            output_grid=(grid, grid),
            preprocessing={"resize": RESIZE_SHORT_EDGE, "crop": CROP_SIZE, "mean": (0.0,) * 3, "std": (1.0,) * 3},
        )

    def __call__(self, pixels: np.ndarray) -> np.ndarray:
        pixels = np.asarray(pixels, np.float32)
        b = pixels.shape[0]
        p = CROP_SIZE // self.grid
        x = pixels.reshape(b, self.grid, p, self.grid, p, 3)
        return x.mean(axis=(2, 4))


class Vgg16Backbone(Backbone):
    """Convolutional trunk of VGG16 (output of the last conv block, 7x7x512)."""

    def __init__(self, weights: str | None = "imagenet"):
        try:
            import torch
            import torchvision
        except ImportError as exc:  # pragma: no cover - depends on environment
            raise ConfigurationError("the vgg16 backbone needs torch and torchvision installed") from exc
        self._torch = torch
        if weights is None:
            model = torchvision.models.vgg16(weights=None)
        elif weights == "imagenet":
            try:
                model = torchvision.models.vgg16(weights=torchvision.models.VGG16_Weights.IMAGENET1K_V1)
            except Exception as exc:
                raise ConfigurationError(
                    "pretrained VGG16 weights are unavailable; set backbone_weights to a local state-dict file"
                ) from exc
        else:
            model = torchvision.models.vgg16(weights=None)
            try:
                model.load_state_dict(torch.load(weights, map_location="cpu"))
            except Exception as exc:
                raise ConfigurationError(f"cannot load VGG16 weights from {weights}: {exc}") from exc
        self.trunk = model.features.eval()
        self.spec = BackboneSpec(
            name="vgg16" if weights is not None else "vgg16-untrained",
            output_channels=512,
            output_grid=(7, 7),
            preprocessing={"resize": RESIZE_SHORT_EDGE, "crop": CROP_SIZE, "mean": IMAGENET_MEAN, "std": IMAGENET_STD},
        )

    def __call__(self, pixels: np.ndarray) -> np.ndarray:
        torch = self._torch
        x = torch.from_numpy(np.ascontiguousarray(np.asarray(pixels, np.float32).transpose(0, 3, 1, 2)))
        with torch.no_grad():
            y = self.trunk(x)
        return y.numpy().transpose(0, 2, 3, 1).copy()


def make_backbone(config: PipelineConfig) -> Backbone:
    name = config.backbone
    if name == "vgg16":
        return Vgg16Backbone(config.backbone_weights or "imagenet")
    if name == "mock":
        return RandomPatchBackbone(config.backbone_channels, config.backbone_seed)
    if name == "patchmean":
        return PatchMeanBackbone()
    raise ConfigurationError(f"unknown backbone {name!r} (expected vgg16, mock or patchmean)")


def extract_feature_map(frame: FrameTensor, backbone: Backbone) -> FeatureMap:
    if frame.pixels.shape != (CROP_SIZE, CROP_SIZE, 3):
        raise ContractViolation(f"frame must be preprocessed to 224x224x3, got {frame.pixels.shape}")
    grid = backbone(frame.pixels[None])[0]
    return FeatureMap(grid, frame.frame_index)


def extract_feature_maps(frames: Sequence[FrameTensor], backbone: Backbone, batch: int = 32) -> np.ndarray:
    """Batched backbone pass; returns (F, H_f, W_f, C) float32."""
    grids = []
    for start in range(0, len(frames), batch):
        chunk = np.stack([f.pixels for f in frames[start:start + batch]])
        grids.append(backbone(chunk))
    out = np.concatenate(grids).astype(np.float32, copy=False)
    if not np.all(np.isfinite(out)):
        raise InputError("backbone produced non-finite activations")
    return out


# ---------------------------------------------------------------------------
# regions


def window_starts(size: int, window: int, stride: int) -> list[int]:
    if window > size:
        raise ConfigurationError(f"window {window} larger than feature grid {size}")
    if stride < 1:
        raise ConfigurationError("stride must be >= 1")
    return list(range(0, size - window + 1, stride))


def scale_layout(grid_shape: tuple[int, int], scales: Sequence[tuple[int, int]]) -> list[list[tuple[int, int, int]]]:
    """Per scale, the (top, left, window) of every window in row-major order."""
    h, w = grid_shape
    layout = []
    for window, stride in scales:
        rows, cols = window_starts(h, window, stride), window_starts(w, window, stride)
        layout.append([(r, c, window) for r in rows for c in cols])
    return layout


def regions_per_frame(grid_shape: tuple[int, int], scales: Sequence[tuple[int, int]] = DEFAULT_SCALES) -> int:
    return sum(len(s) for s in scale_layout(grid_shape, scales))


def region_features(grids: np.ndarray, scales: Sequence[tuple[int, int]] = DEFAULT_SCALES) -> np.ndarray:
    """Max-pooled window features for a stack of grids: (F, H, W, C) -> (F, R, C)."""
    grids = np.asarray(grids)
    if grids.ndim == 3:
        grids = grids[None]
    out = []
    for windows in scale_layout(grids.shape[1:3], scales):
        for top, left, win in windows:
            out.append(grids[:, top:top + win, left:left + win].max(axis=(1, 2)))
    return np.stack(out, axis=1)


def extract_regions(fmap: FeatureMap, scales: Sequence[tuple[int, int]] = DEFAULT_SCALES) -> list[RegionNode]:
    feats = region_features(fmap.grid[None], scales)[0]
    nodes = []
    r = 0
    for k, windows in enumerate(scale_layout(fmap.grid.shape[:2], scales), start=1):
        for j in range(len(windows)):
            nodes.append(RegionNode(fmap.frame_index, k, j, feats[r]))
            r += 1
    return nodes


def regions_from_array(feats: np.ndarray, grid_shape: tuple[int, int],
                       scales: Sequence[tuple[int, int]] = DEFAULT_SCALES) -> list[RegionNode]:
    """RegionNodes in (frame, scale, position) order from a (F, R, C) region array."""
    counts = [len(w) for w in scale_layout(grid_shape, scales)]
    nodes = []
    for i in range(feats.shape[0]):
        r = 0
        for k, n in enumerate(counts, start=1):
            for j in range(n):
                nodes.append(RegionNode(i, k, j, feats[i, r]))
                r += 1
    return nodes


# ---------------------------------------------------------------------------
# feature cache ("STRF")

_STRF = struct.Struct("<4sHIHHH")
STRF_VERSION = 1


def atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_feature_maps(grids: np.ndarray) -> bytes:
    f, h, w, c = grids.shape
    return _STRF.pack(b"STRF", STRF_VERSION, f, h, w, c) + np.ascontiguousarray(grids, dtype="<f4").tobytes()


def decode_feature_maps(data: bytes) -> np.ndarray:
    if len(data) < _STRF.size:
        raise InputError("feature cache truncated")
    magic, version, f, h, w, c = _STRF.unpack_from(data)
    if magic != b"STRF" or version != STRF_VERSION:
        raise InputError("not a feature cache file")
    expected = _STRF.size + 4 * f * h * w * c
    if len(data) != expected:
        raise InputError(f"feature cache size {len(data)} != expected {expected}")
    return np.frombuffer(data, dtype="<f4", offset=_STRF.size).reshape(f, h, w, c).astype(np.float32)


def _safe_id(video_id: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in video_id)


def cache_path(root: Path, video_id: str, backbone_name: str, prep_hash: str) -> Path:
    return Path(root) / "features" / f"{_safe_id(video_id)}__{_safe_id(backbone_name)}__{prep_hash[:16]}.strf"


def save_feature_maps(path: Path, grids: np.ndarray) -> None:
    atomic_write(Path(path), encode_feature_maps(grids))


def load_feature_maps(path: Path) -> np.ndarray:
    return decode_feature_maps(Path(path).read_bytes())


def is_valid_cache(path: Path) -> bool:
    try:
        load_feature_maps(path)
    except (OSError, InputError):
        return False
    return True


def video_feature_maps(video: str | Path | VideoClip, config: PipelineConfig, backbone: Backbone) -> np.ndarray:
    """Sample, preprocess and run the backbone for one video: (F, H_f, W_f, C)."""
    frames = sample_frames(video, config.rate_hz, config.max_frames, backbone.spec)
    grids = extract_feature_maps(frames, backbone)
    h, w = grids.shape[1:3]
    if max(win for win, _ in config.scales) > min(h, w):
        raise ConfigurationError("largest region window exceeds the backbone output grid")
    return grids
