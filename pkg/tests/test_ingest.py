import struct

import cv2
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vidlattice.config import DEFAULT_SCALES, PipelineConfig
from vidlattice.errors import ConfigurationError, EmptyVideoError, InputError
from vidlattice.ingest import (
    FeatureMap,
    PatchMeanBackbone,
    RandomPatchBackbone,
    VideoClip,
    decode_feature_maps,
    encode_feature_maps,
    extract_feature_map,
    extract_feature_maps,
    extract_regions,
    preprocess_frame,
    region_features,
    regions_per_frame,
    sample_frames,
    sample_times,
    video_feature_maps,
    window_starts,
)


def clip(seconds, fps=2.0, h=240, w=320, seed=0):
    rng = np.random.default_rng(seed)
    n = int(round(seconds * fps))
    return VideoClip([rng.integers(0, 256, (h, w, 3), dtype=np.uint8) for _ in range(n)], fps)


# -- sampling ----------------------------------------------------------------


def test_ten_second_clip_gives_ten_frames():
    frames = sample_frames(clip(10), rate_hz=1, max_frames=64)
    assert len(frames) == 10
    assert [f.frame_index for f in frames] == list(range(10))
    assert [f.timestamp_s for f in frames] == [float(i) for i in range(10)]


def test_long_clip_capped_and_uniform():
    times = sample_times(300.0, 1.0, 64)
    assert len(times) == 64
    assert times[0] == 0.0 and times[-1] == 299.0
    gaps = np.diff(times)
    assert gaps.max() - gaps.min() <= 1.0


def test_short_clip_yields_one_frame():
    frames = sample_frames(clip(0.5), rate_hz=1, max_frames=64)
    assert len(frames) == 1


def test_frames_are_224_square():
    for f in sample_frames(clip(3, h=300, w=500), 1.0, 64):
        assert f.pixels.shape == (224, 224, 3)
        assert f.pixels.dtype == np.float32


def test_preprocess_resizes_short_edge_then_center_crops():
    # A frame whose center 10% is white: after resize(256)+crop(224) the white block stays centered.
    img = np.zeros((480, 640, 3), np.uint8)
    img[216:264, 296:344] = 255
    out = preprocess_frame(img)
    ys, xs = np.nonzero(out[..., 0] > 0.5)
    assert abs(ys.mean() - 111.5) < 1.5 and abs(xs.mean() - 111.5) < 1.5
    # short edge 480 -> 256 scales the 48px block to ~25.6px
    assert 23 <= ys.max() - ys.min() + 1 <= 28


def test_sampling_from_video_file(tmp_path):
    path = tmp_path / "v.mp4"
    writer = cv2.VideoWriter(str(path), cv2.VideoWriter_fourcc(*"mp4v"), 4.0, (320, 240))
    for i in range(20):
        writer.write(np.full((240, 320, 3), i * 10, np.uint8))
    writer.release()
    frames = sample_frames(path, rate_hz=1.0, max_frames=64)
    assert len(frames) == 5
    # frame t is the 4t-th written frame, of gray level 40t
    levels = [float(f.pixels.mean()) * 255 for f in frames]
    assert np.allclose(levels, [0, 40, 80, 120, 160], atol=6)


def test_undecodable_video(tmp_path):
    bad = tmp_path / "bad.mp4"
    bad.write_bytes(b"not a video at all")
    with pytest.raises(InputError):
        sample_frames(bad)
    with pytest.raises(InputError):
        sample_frames(tmp_path / "missing.mp4")


def test_empty_clip():
    with pytest.raises(EmptyVideoError):
        sample_frames(VideoClip([], 1.0))


# -- backbones -----------------------------------------------------------------


def test_patchmean_zero_frame_gives_zero_grid():
    bb = PatchMeanBackbone()
    frame = sample_frames(VideoClip([np.zeros((240, 320, 3), np.uint8)], 1.0), backbone=bb.spec)[0]
    fmap = extract_feature_map(frame, bb)
    assert fmap.grid.shape == (7, 7, 3)
    assert np.all(fmap.grid == 0)


def test_identical_frames_identical_maps():
    bb = RandomPatchBackbone(32, seed=3)
    img = np.random.default_rng(1).integers(0, 256, (240, 320, 3), dtype=np.uint8)
    frames = sample_frames(VideoClip([img, img], 1.0), backbone=bb.spec)
    grids = extract_feature_maps(frames, bb)
    assert grids.shape == (2, 7, 7, 32)
    assert np.array_equal(grids[0], grids[1])
    assert np.all(grids >= 0)


def test_random_patch_backbone_is_seeded():
    a, b = RandomPatchBackbone(16, seed=5), RandomPatchBackbone(16, seed=5)
    assert np.array_equal(a.projection, b.projection)
    assert not np.array_equal(a.projection, RandomPatchBackbone(16, seed=6).projection)


def test_vgg16_trunk_geometry():
    pytest.importorskip("torchvision")
    from vidlattice.ingest import Vgg16Backbone

    bb = Vgg16Backbone(weights=None)
    frame = sample_frames(clip(1), backbone=bb.spec)[0]
    fmap = extract_feature_map(frame, bb)
    assert fmap.grid.shape == (7, 7, 512)
    assert np.all(np.isfinite(fmap.grid))


def test_vgg16_missing_weights_is_configuration_error(tmp_path):
    pytest.importorskip("torchvision")
    from vidlattice.ingest import Vgg16Backbone

    with pytest.raises(ConfigurationError):
        Vgg16Backbone(weights=str(tmp_path / "nope.pth"))


def test_window_larger_than_grid_rejected():
    cfg = PipelineConfig(backbone="patchmean", scales=[(9, 1)])
    with pytest.raises(ConfigurationError):
        video_feature_maps(clip(1), cfg, PatchMeanBackbone())


# -- regions -------------------------------------------------------------------


def test_default_scales_give_14_regions():
    grid = np.random.default_rng(0).random((7, 7, 5))
    regions = extract_regions(FeatureMap(grid, 0), DEFAULT_SCALES)
    assert len(regions) == 14
    per_scale = {}
    for r in regions:
        per_scale.setdefault(r.scale_index, []).append(r.position_index)
    assert sorted(len(v) for v in per_scale.values()) == [1, 4, 9]
    assert window_starts(7, 3, 2) == [0, 2, 4]
    assert window_starts(7, 4, 3) == [0, 3]
    assert window_starts(7, 7, 1) == [0]


def test_constant_grid_gives_constant_regions():
    grid = np.full((7, 7, 4), 2.5)
    for r in extract_regions(FeatureMap(grid, 0)):
        assert np.array_equal(r.feature, np.full(4, 2.5))


def test_single_peak_brute_force():
    grid = np.zeros((7, 7, 1))
    grid[0, 0, 0] = 5.0
    regions = extract_regions(FeatureMap(grid, 0))
    # brute-force oracle: enumerate every window of every scale and test whether it covers (0, 0)
    expected = []
    for window, stride in DEFAULT_SCALES:
        tops = [t for t in range(0, 7) if t + window <= 7 and t % stride == 0]
        for top in tops:
            for left in tops:
                expected.append(5.0 if top <= 0 < top + window and left <= 0 < left + window else 0.0)
    assert [float(r.feature[0]) for r in regions] == expected
    assert sum(v == 5.0 for v in expected) == 3  # one window per scale


@settings(max_examples=60, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12), data=st.data())
def test_region_count_formula(h, w, data):
    n_scales = data.draw(st.integers(1, 3))
    scales = []
    for _ in range(n_scales):
        win = data.draw(st.integers(1, min(h, w)))
        scales.append((win, data.draw(st.integers(1, 4))))
    count = sum((((h - win) // s) + 1) * (((w - win) // s) + 1) for win, s in scales)
    assert regions_per_frame((h, w), scales) == count
    assert region_features(np.zeros((h, w, 2)), scales).shape == (1, count, 2)


def test_region_count_default_is_14():
    assert regions_per_frame((7, 7)) == 14


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), bump=st.floats(0.0, 10.0))
def test_maxpool_monotone(seed, bump):
    rng = np.random.default_rng(seed)
    grid = rng.random((7, 7, 3))
    before = region_features(grid)
    i, j, c = rng.integers(7), rng.integers(7), rng.integers(3)
    grid[i, j, c] += bump
    assert np.all(region_features(grid) >= before)


def test_nested_scale_dominance():
    rng = np.random.default_rng(4)
    grid = rng.random((7, 7, 6))
    feats = region_features(grid)[0]
    # row order: 9 (3x3), 4 (4x4), 1 (7x7)
    assert np.array_equal(feats[13], feats[:9].max(axis=0))


def test_extraction_is_deterministic():
    cfg = PipelineConfig(backbone="mock", backbone_channels=8)
    bb = RandomPatchBackbone(8, 0)
    c = clip(3, seed=9)
    a = region_features(video_feature_maps(c, cfg, bb))
    b = region_features(video_feature_maps(c, cfg, RandomPatchBackbone(8, 0)))
    assert a.tobytes() == b.tobytes()


# -- feature cache -------------------------------------------------------------


def test_feature_cache_format_round_trip():
    grids = np.random.default_rng(0).random((3, 7, 7, 5)).astype(np.float32)
    data = encode_feature_maps(grids)
    assert data[:4] == b"STRF"
    assert struct.unpack_from("<HIHHH", data, 4) == (1, 3, 7, 7, 5)
    assert len(data) == 4 + 2 + 4 + 2 + 2 + 2 + grids.size * 4
    assert np.array_equal(np.frombuffer(data[16:], "<f4"), grids.ravel())
    assert np.array_equal(decode_feature_maps(data), grids)


def test_truncated_cache_rejected():
    data = encode_feature_maps(np.zeros((1, 7, 7, 2), np.float32))
    with pytest.raises(InputError):
        decode_feature_maps(data[:-4])
    with pytest.raises(InputError):
        decode_feature_maps(b"XXXX" + data[4:])
