"""Noise streams, fine paths and Brownian-bridge refinement."""

import math

import numpy as np
import pytest

from sdde_lab.errors import DomainError
from sdde_lab.noise import (FinePath, NoiseStream, gaussian_increment,
                            increment_between, splitmix64, stream_key)


def test_zero_increment_draws_nothing():
    s = NoiseStream(1, 0, noise_dim=3)
    np.testing.assert_array_equal(gaussian_increment(s, 0.0), np.zeros(3))
    assert s.pos == 0


def test_increment_mean_clt_bound():
    s = NoiseStream(11, 0, noise_dim=2)
    draws = np.array([gaussian_increment(s, 1.0) for _ in range(100_000)])
    assert np.all(np.abs(draws.mean(axis=0)) <= 3 / math.sqrt(1e5))


def test_increment_variance_interval():
    s = NoiseStream(12, 0)
    draws = np.array([gaussian_increment(s, 0.25)[0] for _ in range(100_000)])
    assert 0.2420 <= draws.var(ddof=1) <= 0.2580


def test_negative_dt_rejected():
    with pytest.raises(ValueError):
        gaussian_increment(NoiseStream(0), -1.0)


def test_stream_replay_and_chunk_invariance():
    a = NoiseStream(5, 3)
    b = NoiseStream(5, 3)
    first = np.concatenate([a.normals(7), a.normals(20_000), a.normals(1)])
    np.testing.assert_array_equal(first, b.normals(20_008))


def test_keys_are_distinct():
    keys = {stream_key(s, i) for s in range(20) for i in range(50)}
    assert len(keys) == 1000
    assert splitmix64(0) == 0xE220A8397B1DCDAF


def test_path_independence_correlation():
    wt = np.array([NoiseStream(99, i).normals(1)[0] for i in range(20_000)])
    r = np.corrcoef(wt[0::2], wt[1::2])[0, 1]
    assert abs(r) < 0.02


# -- fine path ------------------------------------------------------------------------

def test_fine_path_grid_and_start():
    fp = FinePath(1.0, 0.125, NoiseStream(1))
    assert fp.values[0, 0] == 0.0
    assert len(fp.grid) == 9
    np.testing.assert_array_equal(fp.value(0.5), fp.values[4])
    with pytest.raises(ValueError):
        FinePath(1.0, 0.3, NoiseStream(1))


def test_bridge_query_is_idempotent_and_cached_sorted():
    fp = FinePath(1.0, 0.5, NoiseStream(2))
    w1 = fp.value(0.3)
    fp.value(0.1)
    fp.value(0.2)
    assert np.array_equal(fp.value(0.3), w1)
    assert fp.cached_points(0) == [0.1, 0.2, 0.3]
    assert all(0.0 < t < 0.5 for t in fp.cached_points(0))


def test_bridge_domain():
    fp = FinePath(1.0, 0.5, NoiseStream(2))
    with pytest.raises(DomainError):
        fp.value(1.5)
    with pytest.raises(DomainError):
        fp.value(-0.1)


def test_second_query_conditions_on_first():
    a = FinePath(1.0, 0.5, NoiseStream(3))
    b = FinePath(1.0, 0.5, NoiseStream(3))
    a.value(0.2)
    w2 = a.value(0.4)
    w1 = b.value(0.2)
    z = b.stream.normals(1)
    wb = b.values[1]
    expected = w1 + (0.4 - 0.2) / (0.5 - 0.2) * (wb - w1) + math.sqrt(0.2 * 0.1 / 0.3) * z
    np.testing.assert_array_equal(w2, expected)


def test_midpoint_bridge_statistics():
    dev = []
    for i in range(10_000):
        fp = FinePath(1.0, 0.5, NoiseStream(4, i))
        dev.append(fp.value(0.25)[0] - 0.5 * (fp.values[0, 0] + fp.values[1, 0]))
    dev = np.array(dev)
    assert abs(dev.mean()) < 4 * math.sqrt(0.125 / 1e4)
    assert abs(dev.var(ddof=1) - 0.125) < 4 * 0.125 * math.sqrt(2 / 1e4)


def test_bridge_consistency_variance_at_fixed_times():
    times = [0.8, 0.1, 0.55, 0.3, 0.95]
    vals = np.empty((10_000, 5))
    for i in range(10_000):
        fp = FinePath(1.0, 0.25, NoiseStream(6, i))
        for k, s in enumerate(times):
            vals[i, k] = fp.value(s)[0]
    for k, s in enumerate(times):
        assert abs(vals[:, k].var(ddof=1) - s) < 4 * s * math.sqrt(2 / 1e4)


def test_increment_between_identities():
    fp = FinePath(2.0, 0.25, NoiseStream(8))
    np.testing.assert_array_equal(increment_between(fp, fp.stream, 0.7, 0.7), [0.0])
    np.testing.assert_array_equal(increment_between(fp, fp.stream, 0.0, 2.0), fp.values[-1])
    with pytest.raises(DomainError):
        increment_between(fp, fp.stream, 1.0, 0.5)


def test_increment_telescoping_over_random_partition():
    rng = np.random.default_rng(0)
    for seed in range(20):
        fp = FinePath(1.0, 2.0 ** -6, NoiseStream(seed))
        cuts = np.concatenate([[0.0], np.sort(rng.uniform(0, 1, 300)), [1.0]])
        incs = [fp.increment(a, b)[0] for a, b in zip(cuts[:-1], cuts[1:])]
        assert abs(math.fsum(incs) - fp.values[-1, 0]) <= 1e-12
