"""Command-line entry point.

    vidlattice synth   --out DIR
    vidlattice extract --manifest M
    vidlattice graph   --manifest M
    vidlattice train   --manifest M --relevance R --out model.strw
    vidlattice embed   --manifest M --checkpoint model.strw --out emb.stre
    vidlattice index   --out all.stre a.stre b.stre ...
    vidlattice search  --index emb.stre --query ID
    vidlattice eval    --index emb.stre --relevance R [--distractors N]
    vidlattice attn    --manifest M --video ID --mode star_gnn --checkpoint model.strw

Settings come from ``--config`` (JSON), overridden by ``--set key=value``
and the dedicated flags.  Exit codes: 0 ok, 1 usage, 2 data, 3 numeric.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from filelock import FileLock

from . import attnviz, synth
from .config import PipelineConfig
from .errors import (ConfigMismatchError, InputError, LatticeError, LookupFailure, PipelineOrderError,
                     UsageError)
from .gnn import GnnModel, embed_or_fallback, static_embedding
from .graphbuild import VideoGraph, build_graph, load_graph, save_graph
from .ingest import (cache_path, is_valid_cache, load_feature_maps, make_backbone, region_features,
                     regions_from_array, sample_frames, save_feature_maps, video_feature_maps)
from .retrieval import (EmbeddingIndex, QueryRelevance, evaluate_map, evaluate_queries, evaluation_report,
                        index_from_embeddings, load_index, rank, read_relevance, sample_distractors, save_index)
from .train import LossConfig, TrainingSet, fit, load_state, new_state, save_state

log = logging.getLogger("vidlattice")


@dataclass
class ManifestEntry:
    id: str
    path: Path
    split: str


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise InputError(f"cannot read manifest {path}: {exc}") from exc
    entries = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            split = rec.get("split", "test")
            if split not in ("train", "test", "distractor"):
                raise ValueError(f"unknown split {split!r}")
            p = Path(rec["path"])
            entries.append(ManifestEntry(rec["id"], p if p.is_absolute() else path.parent / p, split))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise InputError(f"{path}:{lineno}: bad manifest record ({exc})") from exc
    return entries


# ---------------------------------------------------------------------------
# artifact locations


def feature_file(config: PipelineConfig, video_id: str, backbone_name: str) -> Path:
    return cache_path(config.cache_root(), video_id, backbone_name, config.feature_hash())


def graph_dir(config: PipelineConfig) -> Path:
    return config.cache_root() / "graphs" / config.graph_hash()[:16]


def _lock(config: PipelineConfig) -> FileLock:
    root = config.cache_root()
    root.mkdir(parents=True, exist_ok=True)
    return FileLock(str(root / ".lock"))


def _backbone_name(config: PipelineConfig) -> str:
    # Avoids loading heavyweight weights just to name the cache file.
    return {"mock": f"mock-patchproj-{config.backbone_channels}-s{config.backbone_seed}",
            "patchmean": "mock-patchmean"}.get(config.backbone, config.backbone)


def load_graphs(config: PipelineConfig, ids: Sequence[str]) -> dict[str, VideoGraph]:
    graphs = {}
    gdir = graph_dir(config)
    expected = config.graph_hash()
    for vid in ids:
        path = gdir / f"{vid}.strg"
        if not path.exists():
            raise PipelineOrderError(f"no graph for video {vid!r}; run `vidlattice graph` first")
        g, h = load_graph(path, config.dense_threshold)
        if h != expected:
            raise ConfigMismatchError(f"graph for {vid!r} was built under a different config")
        graphs[vid] = g
    return graphs


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, config: PipelineConfig) -> int:
    corpus = synth.make_corpus(n_base=args.bases, n_test=args.test, n_frames=args.frames,
                               n_distractors=args.distractors, seed=args.seed)
    manifest = synth.write_corpus(corpus, Path(args.out))
    print(f"wrote {len(corpus.clips)} videos; manifest at {manifest}")
    return 0


def cmd_extract(args, config: PipelineConfig) -> dict[str, int]:
    entries = read_manifest(args.manifest)
    name = _backbone_name(config)
    stats = {"computed": 0, "skipped": 0, "failed": 0}
    backbone = None
    with _lock(config):
        for entry in entries:
            path = feature_file(config, entry.id, name)
            if is_valid_cache(path):
                stats["skipped"] += 1
                continue
            if backbone is None:
                backbone = make_backbone(config)
            try:
                grids = video_feature_maps(entry.path, config, backbone)
            except InputError as exc:
                log.error("extract failed for %s: %s", entry.id, exc)
                stats["failed"] += 1
                continue
            save_feature_maps(path, grids)
            stats["computed"] += 1
    print(json.dumps(stats))
    if entries and stats["failed"] == len(entries):
        raise InputError("feature extraction failed for every video")
    return stats


def cmd_graph(args, config: PipelineConfig) -> dict[str, int]:
    entries = read_manifest(args.manifest)
    name = _backbone_name(config)
    gdir = graph_dir(config)
    ghash = config.graph_hash()
    stats = {"built": 0, "skipped": 0}
    with _lock(config):
        for entry in entries:
            out = gdir / f"{entry.id}.strg"
            if out.exists():
                stats["skipped"] += 1
                continue
            fpath = feature_file(config, entry.id, name)
            if not fpath.exists():
                raise PipelineOrderError(f"no features for video {entry.id!r}; run `vidlattice extract` first")
            grids = load_feature_maps(fpath)
            feats = region_features(grids, config.scales)
            g = build_graph(regions_from_array(feats, grids.shape[1:3], config.scales), config.weighted, entry.id,
                            config.dense_threshold)
            save_graph(out, g, ghash)
            stats["built"] += 1
    print(json.dumps(stats))
    return stats


def split_queries(queries: list[QueryRelevance], config: PipelineConfig) -> tuple[list, list]:
    """Seeded (train, validation) split of the training queries, then train-ratio subsampling."""
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(queries))
    n_val = int(round(config.val_fraction * len(queries))) if len(queries) > 1 else 0
    val = [queries[i] for i in sorted(order[:n_val])]
    rest = [queries[i] for i in sorted(order[n_val:])]
    if config.train_ratio < 1.0:
        keep = max(1, math.ceil(config.train_ratio * len(rest)))
        pick = np.random.default_rng([config.seed, 1]).permutation(len(rest))[:keep]
        rest = [rest[i] for i in sorted(pick)]
    return rest, val


def _members(queries: Sequence[QueryRelevance]) -> set[str]:
    return {q.query_id for q in queries} | {p for q in queries for p in q.positive_ids}


def _restrict(queries: Sequence[QueryRelevance], universe: set[str]) -> list[QueryRelevance]:
    return [QueryRelevance(q.query_id, q.positive_ids & universe, q.negative_ids & universe)
            for q in queries if q.positive_ids & universe]


def cmd_train(args, config: PipelineConfig) -> Path:
    entries = read_manifest(args.manifest)
    train_ids = {e.id for e in entries if e.split == "train"}
    queries = [q for q in read_relevance(args.relevance) if q.query_id in train_ids]
    if not queries:
        raise InputError("no training queries with labelled positives")
    train_q, val_q = split_queries(queries, config)
    graphs = load_graphs(config, sorted(_members(train_q) | _members(val_q)))
    data = TrainingSet.from_relevance({v: graphs[v] for v in _members(train_q)}, train_q)

    validate = None
    if val_q:
        val_members = _members(val_q)
        val_q = _restrict(val_q, val_members)

        def validate(model: GnnModel) -> float:
            index = index_from_embeddings([embed_or_fallback(graphs[v], model) for v in sorted(val_members)])
            return evaluate_map(index, val_q)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.resume:
        state, h = load_state(Path(args.resume))
        if h != config.model_hash():
            raise ConfigMismatchError("checkpoint to resume was trained under a different config")
    else:
        in_dim = next(iter(graphs.values())).features.shape[1]
        model = GnnModel.initialize(config.operator_kind, in_dim, config.embed_dim, config.num_layers,
                                    config.aggregator, config.sgcn_power, config.seed)
        state = new_state(model, config.lr, config.seed)
    log_path = out.with_suffix(".log.jsonl")
    state, best = fit(state, data, LossConfig(config.loss_kind, config.margin), config.batch_size,
                      config.max_epochs, config.patience, validate, log_path)
    save_state(out, best, config.model_hash())
    print(json.dumps({"checkpoint": str(out), "epochs": state.epoch, "best_val_map": best.best_val_map,
                      "final_loss": state.last_epoch_loss}))
    return out


def cmd_embed(args, config: PipelineConfig) -> Path:
    entries = read_manifest(args.manifest)
    ids = [e.id for e in entries if args.split is None or e.split in args.split]
    graphs = load_graphs(config, ids)
    if args.static:
        embeddings = [static_embedding(graphs[v]) for v in ids]
        h = config.graph_hash()
    else:
        if not args.checkpoint:
            raise UsageError("--checkpoint is required unless --static is given")
        state, h = load_state(Path(args.checkpoint))
        if h != config.model_hash():
            raise ConfigMismatchError("checkpoint was trained under a different config")
        embeddings = [embed_or_fallback(graphs[v], state.model) for v in ids]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_index(out, index_from_embeddings(embeddings), h)
    print(json.dumps({"index": str(out), "count": len(embeddings)}))
    return out


def cmd_index(args, config: PipelineConfig) -> Path:
    merged = EmbeddingIndex()
    hashes = set()
    for p in args.inputs:
        index, h = load_index(Path(p))
        hashes.add(h)
        for vid, vec in index.entries.items():
            merged.add(vid, vec)
    if len(hashes) > 1:
        raise ConfigMismatchError("embedding stores come from different configs")
    save_index(Path(args.out), merged, hashes.pop() if hashes else "0" * 64)
    print(json.dumps({"index": args.out, "count": len(merged)}))
    return Path(args.out)


def cmd_search(args, config: PipelineConfig) -> list[tuple[str, float]]:
    index, _ = load_index(Path(args.index))
    ranked = rank(index.get(args.query), index, set(index.entries) - {args.query})[: args.top]
    for vid, score in ranked:
        print(f"{vid}\t{score:.6f}")
    return ranked


def cmd_eval(args, config: PipelineConfig) -> dict:
    index, _ = load_index(Path(args.index))
    queries = read_relevance(args.relevance)
    if args.split_manifest:
        keep = {e.id for e in read_manifest(args.split_manifest) if e.split == "test"}
        queries = [q for q in queries if q.query_id in keep]
    labelled = _members(queries) | {n for q in queries for n in q.negative_ids}
    missing = sorted(v for v in labelled if v not in index)
    if missing:
        raise LookupFailure(f"ids missing from index: {', '.join(missing[:20])}")
    pool = sorted(set(index.entries) - labelled)
    distractors = sample_distractors(pool, args.distractors, config.seed) if args.distractors else []
    report = evaluation_report(evaluate_queries(index, queries, distractors), len(distractors), config.seed)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return report


def cmd_attn(args, config: PipelineConfig) -> list[Path]:
    entries = {e.id: e for e in read_manifest(args.manifest)}
    if args.video not in entries:
        raise LookupFailure(f"video {args.video!r} not in manifest")
    gpath = graph_dir(config) / f"{args.video}.strg"
    if not gpath.exists():
        raise PipelineOrderError("no cached features/graph for this video; run `vidlattice extract` and `graph` first")
    g, h = load_graph(gpath, config.dense_threshold)
    if h != config.graph_hash():
        raise ConfigMismatchError("graph was built under a different config")
    model = None
    if args.mode == "star_gnn":
        if not args.checkpoint:
            raise UsageError("--checkpoint is required for star_gnn mode")
        state, mh = load_state(Path(args.checkpoint))
        if mh != config.model_hash():
            raise ConfigMismatchError("checkpoint was trained under a different config")
        model = state.model
    frames = sample_frames(entries[args.video].path, config.rate_hz, config.max_frames)
    pictures = [np.clip(f.pixels * 255, 0, 255).astype(np.uint8) for f in frames]
    grid_shape = _grid_shape(config, g)
    maps = attnviz.video_attention(g, model, args.mode, config.scales, grid_shape)
    out_dir = Path(args.out)
    attnviz.render_sequence(args.video, pictures, maps, out_dir, config.colormap, config.overlay_alpha)
    print(json.dumps({"out": str(out_dir), "frames": len(maps)}))
    return sorted(out_dir.glob(f"{args.video}_*_{args.mode}.png"))


def _grid_shape(config: PipelineConfig, g: VideoGraph) -> tuple[int, int]:
    fpath = feature_file(config, g.video_id, _backbone_name(config))
    if fpath.exists():
        return load_feature_maps(fpath).shape[1:3]
    return (7, 7)


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage errors exit 1
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parse_set(items: Sequence[str]) -> dict[str, Any]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--cache-dir", dest="cache_dir")
    common.add_argument("--backbone")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="vidlattice", description=__doc__.splitlines()[0] if __doc__ else None)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic near-duplicate corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--bases", type=int, default=60)
    s.add_argument("--test", type=int, default=24)
    s.add_argument("--frames", type=int, default=8)
    s.add_argument("--distractors", type=int, default=0)
    s.set_defaults(func=cmd_synth, seed=0)

    s = sub.add_parser("extract", parents=[common], help="cache backbone feature maps")
    s.add_argument("--manifest", required=True)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("graph", parents=[common], help="build lattice graphs from cached features")
    s.add_argument("--manifest", required=True)
    s.set_defaults(func=cmd_graph)

    s = sub.add_parser("train", parents=[common], help="train the GNN with triplet/contrastive loss")
    s.add_argument("--manifest", required=True)
    s.add_argument("--relevance", required=True)
    s.add_argument("--out", default="work/model.strw")
    s.add_argument("--resume")
    s.add_argument("--train-ratio", dest="train_ratio", type=float)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--operator", dest="operator_kind", choices=["vanilla_gcn", "cluster_gcn", "sgcn"])
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("embed", parents=[common], help="embed videos into an index file")
    s.add_argument("--manifest", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--static", action="store_true", help="static pooling baseline instead of the GNN")
    s.add_argument("--split", action="append", choices=["train", "test", "distractor"])
    s.add_argument("--out", default="work/embeddings.stre")
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("index", parents=[common], help="merge embedding stores")
    s.add_argument("--out", required=True)
    s.add_argument("inputs", nargs="+")
    s.set_defaults(func=cmd_index)

    s = sub.add_parser("search", parents=[common], help="rank an index against one query")
    s.add_argument("--index", required=True)
    s.add_argument("--query", required=True)
    s.add_argument("--top", type=int, default=10)
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("eval", parents=[common], help="mAP over a relevance file")
    s.add_argument("--index", required=True)
    s.add_argument("--relevance", required=True)
    s.add_argument("--distractors", type=int, default=0)
    s.add_argument("--split-manifest", dest="split_manifest", help="only evaluate queries in the test split")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("attn", parents=[common], help="render self-attention heat maps")
    s.add_argument("--manifest", required=True)
    s.add_argument("--video", required=True)
    s.add_argument("--mode", choices=attnviz.MODES, default="star_gnn")
    s.add_argument("--checkpoint")
    s.add_argument("--out", default="work/attn")
    s.set_defaults(func=cmd_attn)
    return p


_OVERRIDE_FLAGS = ("cache_dir", "backbone", "seed", "train_ratio", "batch_size", "lr", "operator_kind")


def config_from_args(args) -> PipelineConfig:
    overrides = _parse_set(args.set)
    for name in _OVERRIDE_FLAGS:
        value = getattr(args, name, None)
        if value is not None and args.command != "synth":
            overrides[name] = value
    return PipelineConfig.load(args.config, overrides)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = config_from_args(args)
        args.func(args, config)
    except LatticeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
