import json

import cv2
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_regions
from vidlattice.attnviz import (
    cover_counts,
    heat_intensity,
    node_attention,
    overlay,
    project_to_grid,
    render_sequence,
    video_attention,
)
from vidlattice.config import DEFAULT_SCALES
from vidlattice.errors import ContractViolation
from vidlattice.gnn import GnnModel
from vidlattice.graphbuild import build_graph
from vidlattice.ingest import RegionNode


def brute_cover(cell, scales=DEFAULT_SCALES, size=7):
    r, c = cell
    count = 0
    for window, stride in scales:
        starts = [s for s in range(0, size - window + 1) if s % stride == 0]
        count += sum(1 for top in starts for left in starts if top <= r < top + window and left <= c < left + window)
    return count


def test_node_attention_parallel_and_orthogonal():
    e = np.array([1.0, -1.0, 0.0, 0.0]) / np.sqrt(2)
    nodes = np.array([[3.0, 1.0, 2.0, 2.0],   # centered (1,-1,0,0): parallel
                      [2.0, 2.0, 3.0, 1.0]])  # centered (0,0,1,-1): orthogonal
    assert np.allclose(node_attention(e, nodes), [1.0, 0.0])


def test_node_attention_hand_cosines():
    rng = np.random.default_rng(0)
    e = rng.normal(size=5)
    e = (e - e.mean()) / np.linalg.norm(e - e.mean())
    nodes = rng.random((14, 5))
    expected = []
    for row in nodes:
        c = row - row.mean()
        expected.append(min(1.0, max(0.0, float(c @ e / np.linalg.norm(c)))))
    assert np.allclose(node_attention(e, nodes), expected, atol=1e-12)


def test_node_attention_dimension_mismatch():
    with pytest.raises(ContractViolation):
        node_attention(np.ones(3), np.ones((2, 4)))


def test_cover_counts_brute_force():
    counts = cover_counts((7, 7), DEFAULT_SCALES)
    for cell in np.ndindex(7, 7):
        assert counts[cell] == brute_cover(cell)
    # the center is covered by one 3x3 window (start 2), all four 4x4 windows and the global one
    assert counts[3, 3] == 6


def test_uniform_scores_uniform_grid():
    m = project_to_grid([0.37] * 14, 0, DEFAULT_SCALES)
    assert np.allclose(m.grid, 0.37)


def test_global_region_only():
    scores = [0.0] * 13 + [1.0]
    m = project_to_grid(scores, 0, DEFAULT_SCALES)
    counts = cover_counts((7, 7), DEFAULT_SCALES)
    assert np.allclose(m.grid, 1 / counts)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=14, max_size=14))
def test_projection_conserves_mass(scores):
    m = project_to_grid(scores, 0, DEFAULT_SCALES)
    counts = cover_counts((7, 7), DEFAULT_SCALES)
    areas = [9] * 9 + [16] * 4 + [49]
    assert float(np.sum(m.grid * counts)) == pytest.approx(float(np.dot(scores, areas)), abs=1e-6)
    assert np.all((m.grid >= 0) & (m.grid <= 1 + 1e-12))


def identical_frame_graph(seed=0, channels=8):
    regions = random_regions(4, channels, seed=seed)
    # frame 2 repeats frame 0
    frame0 = [r for r in regions if r.frame_index == 0]
    regions = [r for r in regions if r.frame_index != 2]
    regions += [RegionNode(2, r.scale_index, r.position_index, r.feature.copy()) for r in frame0]
    return build_graph(regions, video_id="dup")


def test_static_identical_frames_identical_maps():
    maps = video_attention(identical_frame_graph(), None, "static", DEFAULT_SCALES)
    assert len(maps) == 4
    assert maps[0].grid.tobytes() == maps[2].grid.tobytes()
    assert max(float(m.grid.max()) for m in maps) == pytest.approx(1.0)
    for m in maps:
        assert m.mode == "static" and np.all((m.grid >= 0) & (m.grid <= 1))


def test_star_gnn_maps_are_normalized_per_video():
    g = identical_frame_graph(seed=3)
    maps = video_attention(g, GnnModel.initialize("cluster_gcn", 8, 8, seed=1), "star_gnn", DEFAULT_SCALES)
    assert max(float(m.grid.max()) for m in maps) == pytest.approx(1.0)
    assert all(np.all((m.grid >= 0) & (m.grid <= 1)) for m in maps)


def test_star_gnn_needs_model():
    with pytest.raises(ContractViolation):
        video_attention(identical_frame_graph(), None, "star_gnn", DEFAULT_SCALES)


def test_render_writes_overlays_and_sidecar(tmp_path):
    g = identical_frame_graph()
    maps = video_attention(g, None, "static", DEFAULT_SCALES)
    rng = np.random.default_rng(0)
    frames = [rng.integers(0, 256, (224, 224, 3), dtype=np.uint8) for _ in maps]
    heats = render_sequence("dup", frames, maps, tmp_path, "jet", 0.5)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["dup_0000_static.png", "dup_0001_static.png", "dup_0002_static.png",
                     "dup_0003_static.png", "dup_static.json"]
    side = json.loads((tmp_path / "dup_static.json").read_text())
    for rec, heat, frame in zip(side["grids"], heats, frames):
        again = heat_intensity(np.array(rec["grid"]))
        assert np.max(np.abs(again.astype(int) - heat.astype(int))) <= 1
        png = cv2.cvtColor(cv2.imread(str(tmp_path / f"dup_{rec['frame_index']:04d}_static.png")), cv2.COLOR_BGR2RGB)
        assert np.array_equal(png, overlay(frame, heat, "jet", 0.5))


def test_heat_intensity_range():
    grid = np.random.default_rng(0).random((7, 7))
    heat = heat_intensity(grid)
    assert heat.shape == (224, 224) and heat.dtype == np.uint8
    assert heat.max() <= round(grid.max() * 255) and heat.min() >= round(grid.min() * 255)
