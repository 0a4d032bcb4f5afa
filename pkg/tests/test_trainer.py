import math

import numpy as np
import pytest

from detrust_fl.dp import DpConfig, clip_l2, dp_smc_noise
from detrust_fl.errors import DimensionMismatch, PreconditionError
from detrust_fl.trainer import (
    DatasetShard,
    Hyperparams,
    evaluate,
    init_model,
    load_csv_shard,
    local_train,
    make_blobs,
    model_size,
    split_shards,
)


def blobs_shard(n=400, features=2, classes=2, separation=6.0, seed=0):
    X, y = make_blobs(n, features, classes, separation=separation, seed=seed)
    return DatasetShard(X, y, 1)


def test_zero_epochs_returns_global_model():
    shard = blobs_shard()
    g = np.linspace(-1, 1, model_size(2, 2))
    out = local_train(shard, g, 2, Hyperparams(local_epochs=0), seed=1)
    assert np.array_equal(out, g)
    assert out is not g


def test_separable_blobs_reach_high_accuracy():
    shard = blobs_shard()
    model = local_train(shard, init_model(2, 2), 2, Hyperparams(learning_rate=0.05, local_epochs=50), seed=0)
    acc, _ = evaluate(model, shard.features, shard.labels, 2)
    assert acc >= 0.95


def test_training_is_deterministic():
    shard = blobs_shard(classes=3, features=4)
    hp = Hyperparams(local_epochs=2)
    a = local_train(shard, init_model(4, 3), 3, hp, seed=7)
    b = local_train(shard, init_model(4, 3), 3, hp, seed=7)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, local_train(shard, init_model(4, 3), 3, hp, seed=8))


def test_dimension_mismatch():
    shard = blobs_shard()
    with pytest.raises(DimensionMismatch):
        local_train(shard, np.zeros(5), 2, Hyperparams(), seed=0)


def test_shard_rows_must_match():
    with pytest.raises(PreconditionError):
        DatasetShard(np.zeros((3, 2)), np.zeros(2, dtype=int), 1)


def test_split_shards_covers_everything():
    X, y = make_blobs(100, 3, 3, seed=2)
    for partition in ("iid", "label-skew"):
        shards = split_shards(X, y, 4, partition=partition, seed=0)
        assert [s.party_id for s in shards] == [1, 2, 3, 4]
        assert sum(len(s) for s in shards) == 100


def test_csv_loading(tmp_path):
    path = tmp_path / "p1.csv"
    path.write_text("0.5,1.5,0\n-1.0,2.0,1\n3.0,0.0,2\n")
    shard = load_csv_shard(path, 1)
    assert shard.features.shape == (3, 2)
    assert shard.labels.tolist() == [0, 1, 2]
    assert shard.labels.dtype.kind == "i"


def test_dp_disabled_is_identity():
    v = np.arange(4.0)
    assert dp_smc_noise(DpConfig(), v, np.random.default_rng(0)) is v


def test_sigma_split_across_honest_parties():
    eps = math.sqrt(2 * math.log(1.25 / 1e-5))
    cfg = DpConfig(enabled=True, epsilon=eps, delta=1e-5, clip_norm=1.0, honest_count=4)
    assert cfg.sigma_total == pytest.approx(1.0)
    assert cfg.sigma_party == pytest.approx(0.5)


def test_dp_config_validation():
    with pytest.raises(PreconditionError):
        DpConfig(enabled=True, epsilon=0)
    with pytest.raises(PreconditionError):
        DpConfig(enabled=True, delta=1.0)
    with pytest.raises(PreconditionError):
        DpConfig(enabled=True, honest_count=0)
    DpConfig(enabled=False, epsilon=0)


def test_clipping_bounds_the_update():
    v = np.array([3.0, 4.0])
    assert np.allclose(clip_l2(v, 1.0), [0.6, 0.8])
    assert clip_l2(v, 10.0) is v


def test_party_noise_std():
    cfg = DpConfig(enabled=True, epsilon=2.0, clip_norm=1.0, honest_count=4)
    rng = np.random.default_rng(3)
    draws = dp_smc_noise(cfg, np.zeros(10_000), rng)
    assert abs(draws.std() - cfg.sigma_party) <= 0.05 * cfg.sigma_party


def test_noise_is_added_around_the_clipped_update():
    cfg = DpConfig(enabled=True, epsilon=1e6, clip_norm=1.0)
    ref = np.ones(2)
    out = dp_smc_noise(cfg, ref + np.array([30.0, 40.0]), np.random.default_rng(0), reference=ref)
    assert np.allclose(out, ref + [0.6, 0.8], atol=1e-3)
