import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apgcl.knowledge_pool import (
    ClassStatistics,
    GaussianStat,
    KnowledgePool,
    PoolError,
    deserialize_pool,
    load_pool,
    save_pool,
    serialize_pool,
    summarize_class,
)


def centroid_fn(n_p=1):
    return lambda mu: np.tile(np.tanh(mu), (n_p, 1))


def identity_stats(d, mean=None):
    mu = np.zeros(d) if mean is None else np.asarray(mean, float)
    g = GaussianStat(mu.copy(), np.eye(d), 100)
    return ClassStatistics(g, GaussianStat(mu.copy(), np.eye(d), 100), np.zeros((1, d)))


def random_pool(n_classes, d=4, seed=0, n_p=1):
    rng = np.random.default_rng(seed)
    pool = KnowledgePool(seed=seed)
    for c in range(n_classes):
        fl, ff = rng.normal(size=(12, d)), rng.normal(size=(12, d)) * 2
        pool.add(c, summarize_class(fl, ff, centroid_fn(n_p)))
    return pool


def test_single_vector_gives_zero_covariance():
    v = np.array([[1.5, -2.0, 0.25]])
    s = summarize_class(v, v, centroid_fn())
    assert np.array_equal(s.stat_l.mean, v[0]) and not s.stat_l.cov.any()
    assert s.stat_l.sample_count == 1


def test_hand_covariance():
    s = GaussianStat.fit([[0.0, 0.0], [2.0, 0.0]])
    assert s.mean.tolist() == [1.0, 0.0]
    assert s.cov.tolist() == [[2.0, 0.0], [0.0, 0.0]]


def test_equal_features_sample_near_mean():
    mu = np.array([3.0, -1.0, 0.5])
    s = summarize_class(np.tile(mu, (5, 1)), np.tile(mu, (5, 1)), centroid_fn())
    pool = KnowledgePool()
    pool.add(0, s)
    x = pool.sample(0, "l", 500, seed=1)
    jitter = s.stat_l.jitter()
    assert np.abs(x - mu).max() <= 6 * np.sqrt(jitter)


def test_summarize_errors():
    with pytest.raises(PoolError):
        summarize_class(np.zeros((0, 3)), np.zeros((0, 3)), centroid_fn())
    with pytest.raises(PoolError):
        summarize_class(np.zeros((2, 3)), np.zeros((3, 3)), centroid_fn())


def test_prompt_centroid_is_apg_of_layer_l_mean():
    rng = np.random.default_rng(0)
    fl, ff = rng.normal(size=(7, 4)), rng.normal(size=(7, 4))
    seen = []

    def apg(mu):
        seen.append(mu.copy())
        return mu[None] * 2

    s = summarize_class(fl, ff, apg)
    assert np.array_equal(seen[0], fl.mean(0))
    assert np.array_equal(s.prompt_centroid, 2 * fl.mean(0)[None])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 30), st.integers(1, 6), st.integers(0, 10**6))
def test_covariance_symmetric_and_factorable(n, d, seed):
    x = np.random.default_rng(seed).normal(size=(n, d)) * 10.0 ** np.random.default_rng(seed).uniform(-3, 3)
    s = GaussianStat.fit(x)
    assert np.abs(s.cov - s.cov.T).max() <= 1e-8
    chol = s.cholesky()
    assert np.all(np.isfinite(chol))


def test_stats_are_immutable():
    s = GaussianStat.fit(np.eye(3))
    with pytest.raises(ValueError):
        s.mean[0] = 5.0
    with pytest.raises(dataclasses.FrozenInstanceError):
        s.sample_count = 3
    pool = random_pool(2)
    with pytest.raises(PoolError):
        pool.add(0, pool.get(1))


def test_sample_errors_and_determinism():
    pool = random_pool(3)
    with pytest.raises(PoolError):
        pool.sample(9, "l", 2)
    with pytest.raises(PoolError):
        pool.sample(0, "mid", 2)
    assert np.array_equal(pool.sample(1, "final", 10, seed=3), pool.sample(1, "final", 10, seed=3))
    a, b = random_pool(3, seed=4), random_pool(3, seed=4)
    assert np.array_equal(a.sample_classes([0, 2, 2, 1], "l"), b.sample_classes([0, 2, 2, 1], "l"))


def test_cholesky_failure_has_diagnostics():
    bad = GaussianStat(np.zeros(2), np.array([[1.0, 0.0], [0.0, -5.0]]), 3)
    with pytest.raises(PoolError, match="eigenvalue"):
        bad.cholesky()


@pytest.mark.parametrize("d", [2, 8])
def test_sampler_statistics(d):
    pool = KnowledgePool(seed=0)
    mu = np.linspace(-1, 1, d)
    pool.add(0, identity_stats(d, mu))
    x = pool.sample(0, "l", 20_000, seed=7)
    assert np.abs(x.mean(0) - mu).max() <= 0.03
    emp = np.cov(x, rowvar=False)
    target = np.eye(d) * (1 + pool.get(0).stat_l.jitter())
    assert np.linalg.norm(emp - target) / np.linalg.norm(target) <= 0.1


def test_diagonal_mode_drops_off_diagonal():
    x = np.random.default_rng(0).multivariate_normal([0, 0], [[1, 0.9], [0.9, 1]], size=200)
    s = GaussianStat.fit(x, diagonal=True)
    assert s.cov[0, 1] == 0.0 and s.cov[0, 0] > 0.5


def _assert_same(p, q):
    assert p.class_ids == q.class_ids and p.seed == q.seed and p.diagonal == q.diagonal
    for c in p.class_ids:
        a, b = p.get(c), q.get(c)
        for layer in ("l", "final"):
            assert np.array_equal(a.stat(layer).mean, b.stat(layer).mean)
            assert np.array_equal(a.stat(layer).cov, b.stat(layer).cov)
            assert a.stat(layer).sample_count == b.stat(layer).sample_count
        assert np.array_equal(a.prompt_centroid, b.prompt_centroid)


def test_round_trip_empty_and_ten_classes(tmp_path):
    empty = KnowledgePool(seed=3)
    _assert_same(empty, deserialize_pool(serialize_pool(empty)))
    pool = random_pool(10, d=5, n_p=2)
    pool.sample_classes([1, 2, 3], "l")  # advance the stream
    save_pool(pool, tmp_path / "p.pool")
    back = load_pool(tmp_path / "p.pool")
    _assert_same(pool, back)
    # restored stream continues where the original left off
    assert np.array_equal(pool.sample_classes([4, 5], "final"), back.sample_classes([4, 5], "final"))


def test_header_is_little_endian_and_fixed():
    data = serialize_pool(random_pool(2, d=3))
    assert data[:8] == b"APGPOOL\0"
    assert int.from_bytes(data[8:12], "little") == 1
    assert int.from_bytes(data[12:16], "little") == 3
    assert int.from_bytes(data[20:24], "little") == 2


def test_corrupt_and_truncated_data_rejected():
    data = bytearray(serialize_pool(random_pool(3)))
    bad = bytearray(data)
    bad[20:24] = (1000).to_bytes(4, "little")  # class count
    with pytest.raises(PoolError, match="truncated"):
        deserialize_pool(bytes(bad))
    with pytest.raises(PoolError):
        deserialize_pool(bytes(data[:-5]))
    with pytest.raises(PoolError, match="magic"):
        deserialize_pool(b"XXXXXXXX" + bytes(data[8:]))
    ver = bytearray(data)
    ver[8:12] = (99).to_bytes(4, "little")
    with pytest.raises(PoolError, match="version"):
        deserialize_pool(bytes(ver))
    with pytest.raises(PoolError, match="trailing"):
        deserialize_pool(bytes(data) + b"\0")


def test_file_size_linear_in_classes_not_samples():
    sizes = [len(serialize_pool(random_pool(k, d=4, seed=k))) for k in (1, 2, 3, 4)]
    steps = np.diff(sizes)
    assert len(set(steps.tolist())) == 1
    rng = np.random.default_rng(0)
    small, big = KnowledgePool(), KnowledgePool()
    small.add(0, summarize_class(rng.normal(size=(5, 4)), rng.normal(size=(5, 4)), centroid_fn()))
    big.add(0, summarize_class(rng.normal(size=(500, 4)), rng.normal(size=(500, 4)), centroid_fn()))
    assert len(serialize_pool(small)) == len(serialize_pool(big))
