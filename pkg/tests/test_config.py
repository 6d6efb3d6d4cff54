import json

import pytest

from vidlattice.config import CACHE_ENV, PipelineConfig
from vidlattice.errors import ConfigurationError


def test_defaults():
    c = PipelineConfig()
    assert c.scales == [(3, 2), (4, 3), (7, 1)]
    assert (c.margin, c.batch_size, c.lr, c.rate_hz, c.max_frames) == (0.5, 128, 1e-4, 1.0, 64)
    assert c.weighted and c.aggregator == "mean" and c.embed_dim == 512 and c.num_layers == 1


def test_precedence(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"lr": 0.01, "margin": 0.2}))
    c = PipelineConfig.load(path, {"lr": 0.5})
    assert c.lr == 0.5 and c.margin == 0.2 and c.batch_size == 128


def test_unknown_and_invalid_keys(tmp_path):
    with pytest.raises(ConfigurationError):
        PipelineConfig.from_dict({"colour": "red"})
    with pytest.raises(ConfigurationError):
        PipelineConfig(margin=-1.0)
    with pytest.raises(ConfigurationError):
        PipelineConfig(aggregator="sum")


def test_round_trip():
    c = PipelineConfig(scales=[(7, 1)], weighted=False, seed=4)
    assert PipelineConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c


def test_staged_hashes():
    base = PipelineConfig()
    lr = base.replace(lr=0.1)
    assert lr.feature_hash() == base.feature_hash() and lr.graph_hash() == base.graph_hash()
    assert lr.model_hash() != base.model_hash()
    unweighted = base.replace(weighted=False)
    assert unweighted.feature_hash() == base.feature_hash()
    assert unweighted.graph_hash() != base.graph_hash()
    assert base.replace(rate_hz=2.0).feature_hash() != base.feature_hash()


def test_cache_root(monkeypatch, tmp_path):
    monkeypatch.delenv(CACHE_ENV, raising=False)
    assert PipelineConfig(work_dir=str(tmp_path)).cache_root() == tmp_path / "cache"
    monkeypatch.setenv(CACHE_ENV, str(tmp_path / "env"))
    assert PipelineConfig().cache_root() == tmp_path / "env"
    assert PipelineConfig(cache_dir=str(tmp_path / "x")).cache_root() == tmp_path / "x"
