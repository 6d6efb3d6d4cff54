import numpy as np

from vidlattice.config import DEFAULT_SCALES
from vidlattice.graphbuild import build_graph
from vidlattice.ingest import regions_from_array, regions_per_frame


def random_regions(frames, channels, seed=0, scales=DEFAULT_SCALES, grid=(7, 7)):
    rng = np.random.default_rng(seed)
    feats = rng.random((frames, regions_per_frame(grid, scales), channels))
    return regions_from_array(feats, grid, scales)


def random_graph(frames, channels=8, seed=0, weighted=True, video_id="v", **kw):
    return build_graph(random_regions(frames, channels, seed), weighted=weighted, video_id=video_id, **kw)


def dense_adjacency_oracle(n, edges):
    """Straight D^-1/2 (A+I) D^-1/2 from an explicit edge list."""
    a = np.eye(n)
    for u, v, w in edges:
        a[u, v] += w
        a[v, u] += w
    d = np.diag(1.0 / np.sqrt(a.sum(axis=1)))
    return d @ a @ d


def gradient_check(kind, aggregator="mean", seed=0, step=1e-4, loss_kind="triplet", margin=0.5):
    """Max relative error between analytic and central-difference gradients of the batch loss.

    Fixture: B=2 anchor/positive pairs over 2-frame graphs, D=4.
    """
    from vidlattice.gnn import GnnModel
    from vidlattice.train import LossConfig, TrainingSet, batch_loss_and_grads

    graphs = {f"v{i}": random_graph(2, channels=6, seed=seed * 10 + i, video_id=f"v{i}") for i in range(4)}
    data = TrainingSet(graphs, [("v0", "v1"), ("v2", "v3")],
                       {"v0": {"v1"}, "v1": {"v0"}, "v2": {"v3"}, "v3": {"v2"}})
    model = GnnModel.initialize(kind, 6, 4, aggregator=aggregator, sgcn_power=2, seed=seed)
    model = model.with_parameters([p.astype(np.float64) for p in model.parameters()])
    loss = LossConfig(loss_kind, margin)
    value, grads, batch = batch_loss_and_grads(model, data, data.pairs, loss)
    negatives = batch.negatives
    worst = 0.0
    params = model.parameters()
    for pi, p in enumerate(params):
        numeric = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            shifted = []
            for sign in (1, -1):
                q = [x.copy() for x in params]
                q[pi][idx] += sign * step
                shifted.append(batch_loss_and_grads(model.with_parameters(q), data, data.pairs, loss,
                                                    negatives=negatives)[0])
            numeric[idx] = (shifted[0] - shifted[1]) / (2 * step)
        denom = max(np.linalg.norm(numeric), np.linalg.norm(grads[pi]), 1e-12)
        worst = max(worst, float(np.linalg.norm(numeric - grads[pi]) / denom))
    return worst, value
