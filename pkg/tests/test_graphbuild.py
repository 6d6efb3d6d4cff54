import itertools
import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import dense_adjacency_oracle, random_graph, random_regions
from vidlattice.errors import ContractViolation, InputError
from vidlattice.graphbuild import (
    build_graph,
    cosine_weight,
    decode_graph,
    encode_graph,
    load_graph,
    permute_frames,
    renormalized_adjacency,
    save_graph,
)
from vidlattice.ingest import RegionNode


def test_cosine_examples():
    assert cosine_weight(np.array([2.0, 3.0]), np.array([2.0, 3.0])) == pytest.approx(1.0)
    assert cosine_weight(np.array([1.0, 0.0]), np.array([0.0, 4.0])) == 0.0
    assert cosine_weight(np.array([1.0, 1.0]), np.array([1.0, 0.0])) == pytest.approx(1 / math.sqrt(2))
    assert cosine_weight(np.array([1.0, 0.0]), np.array([-1.0, 0.0])) == 0.0
    assert cosine_weight(np.zeros(3), np.ones(3)) == 0.0


def test_cosine_dimension_mismatch():
    with pytest.raises(ContractViolation):
        cosine_weight(np.ones(3), np.ones(4))


@pytest.mark.parametrize("frames,edges", [(1, 91), (3, 315)])
def test_edge_counts(frames, edges):
    g = random_graph(frames)
    assert g.num_nodes == 14 * frames
    assert g.num_edges == edges
    assert np.sum(g.edge_kind == 0) == 91 * frames
    assert np.sum(g.edge_kind == 1) == 14 * math.comb(frames, 2)


def test_identical_frames_have_unit_temporal_weights():
    one = random_regions(1, 6, seed=2)
    regions = one + [RegionNode(1, r.scale_index, r.position_index, r.feature) for r in one]
    g = build_graph(regions, weighted=True)
    temporal = g.edge_weight[g.edge_kind == 1]
    assert len(temporal) == 14
    assert np.allclose(temporal, 1.0)


def test_duplicate_region_rejected():
    regions = random_regions(1, 4)
    with pytest.raises(ContractViolation):
        build_graph(regions + [regions[3]])


def test_empty_regions_rejected():
    with pytest.raises(ContractViolation):
        build_graph([])


def test_nodes_are_frame_major():
    g = random_graph(3)
    keys = [n.key for n in g.nodes]
    assert keys == sorted(keys)
    assert list(g.frame_of()) == [i for i in range(3) for _ in range(14)]


@settings(max_examples=25, deadline=None)
@given(frames=st.integers(1, 5), seed=st.integers(0, 1000), weighted=st.booleans())
def test_edge_set_characterization(frames, seed, weighted):
    g = random_graph(frames, channels=3, seed=seed, weighted=weighted)
    edges = {(int(u), int(v)): float(w) for (u, v), w in zip(g.edge_index, g.edge_weight)}
    for a, b in itertools.combinations(range(g.num_nodes), 2):
        na, nb = g.nodes[a], g.nodes[b]
        linked = na.frame_index == nb.frame_index or (
            na.scale_index == nb.scale_index and na.position_index == nb.position_index)
        assert ((a, b) in edges) == linked
        if linked:
            fa, fb = na.feature, nb.feature
            expected = max(0.0, float(fa @ fb) / (np.linalg.norm(fa) * np.linalg.norm(fb))) if weighted else 1.0
            assert edges[(a, b)] == pytest.approx(expected, abs=1e-6)
    assert all(u < v for u, v in edges)


def test_single_node_adjacency():
    g = build_graph([RegionNode(0, 1, 0, np.ones(3))])
    assert np.array_equal(renormalized_adjacency(g), [[1.0]])


def test_unweighted_complete_graph_is_uniform():
    g = random_graph(1, weighted=False)
    adj = renormalized_adjacency(g)
    assert np.allclose(adj, 1 / 14)
    assert np.allclose(adj.sum(axis=1), 1.0)


def test_hand_weighted_adjacency_matches_dense_oracle():
    g = random_graph(2, channels=4, seed=7)
    rng = np.random.default_rng(0)
    g.edge_weight = rng.random(g.num_edges).astype(np.float32)
    g._adjacency = None
    edges = [(int(u), int(v), float(w)) for (u, v), w in zip(g.edge_index, g.edge_weight)]
    assert np.allclose(renormalized_adjacency(g), dense_adjacency_oracle(g.num_nodes, edges), atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(frames=st.integers(1, 4), seed=st.integers(0, 1000))
def test_adjacency_symmetric_with_bounded_spectrum(frames, seed):
    adj = renormalized_adjacency(random_graph(frames, seed=seed))
    assert np.allclose(adj, adj.T, atol=1e-12)
    assert np.all(adj >= 0)
    eig = np.linalg.eigvalsh(adj)
    assert eig.min() >= -1 - 1e-6 and eig.max() <= 1 + 1e-6


def test_unweighted_lattice_rows_sum_to_one():
    # every node has degree 13 + (F-1): the unweighted lattice is regular
    adj = renormalized_adjacency(random_graph(4, weighted=False))
    assert np.allclose(adj.sum(axis=1), 1.0)


def test_sparse_path_matches_dense():
    dense = renormalized_adjacency(random_graph(3, seed=1))
    sparse = renormalized_adjacency(random_graph(3, seed=1, dense_threshold=0))
    assert sp.issparse(sparse)
    assert np.allclose(sparse.toarray(), dense, atol=1e-15)


def test_frame_permutation_isomorphism():
    g = random_graph(4, seed=3)
    order = [2, 0, 3, 1]
    h = permute_frames(g, order)
    # node (i,k,j) of g is node (pos(i),k,j) of h
    pos = {old: new for new, old in enumerate(order)}
    index_h = {n.key: idx for idx, n in enumerate(h.nodes)}
    relabel = [index_h[(pos[n.frame_index], n.scale_index, n.position_index)] for n in g.nodes]
    wg = {tuple(sorted((relabel[u], relabel[v]))): w for (u, v), w in zip(g.edge_index, g.edge_weight)}
    wh = {(int(u), int(v)): w for (u, v), w in zip(h.edge_index, h.edge_weight)}
    assert wg == wh


def test_unweighted_shares_structure():
    w = random_graph(3, seed=5, weighted=True)
    u = random_graph(3, seed=5, weighted=False)
    assert np.array_equal(w.edge_index, u.edge_index)
    assert np.all(u.edge_weight == 1.0)
    assert np.all((w.edge_weight >= 0) & (w.edge_weight <= 1))


def test_graph_round_trip(tmp_path):
    g = random_graph(3, channels=5, seed=2, video_id="clip_7")
    path = tmp_path / "g.strg"
    save_graph(path, g, "ab" * 32)
    h, digest = load_graph(path)
    assert digest == "ab" * 32
    assert h.video_id == "clip_7"
    assert [n.key for n in h.nodes] == [n.key for n in g.nodes]
    assert np.array_equal(h.edge_index, g.edge_index)
    assert np.array_equal(h.edge_weight, g.edge_weight)
    assert np.array_equal(h.features, g.features.astype(np.float32))
    assert h.weighted and h.num_frames == 3
    data = encode_graph(g)
    assert data[:4] == b"STRG"
    with pytest.raises(InputError):
        decode_graph(data[:-10])
