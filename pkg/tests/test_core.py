import math
import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from mucio.core import (
    BernoulliProcess,
    BlockDomain,
    ContractViolation,
    DimensionError,
    EnumerationCapExceeded,
    GaussianProcess,
    MembershipOracle,
    ParameterError,
    ProductProcess,
    RandomProcess,
    RngStream,
    enumerate_support,
    keyed_uniforms,
    sample_trajectory,
    split_weights,
    threshold_set,
    trajectory_from_json,
    trajectory_to_json,
    weight_vector,
    weighted_hamming,
)


def copy_process():
    """Three bits; block 3 repeats block 1."""
    def support(prefix):
        if len(prefix) < 2:
            return [(0, 0.5), (1, 0.5)]
        return [(0, float(prefix[0] == 0)), (1, float(prefix[0] == 1))]

    def sampler(prefix, rng):
        return prefix[0] if len(prefix) == 2 else int(rng.integers(2))

    return RandomProcess(3, sampler, support)


# weighted Hamming ------------------------------------------------------------


def test_weighted_hamming_examples():
    assert weighted_hamming((0, 1, 1), (0, 1, 1), np.ones(3)) == 0
    assert weighted_hamming((0, 0, 0), (1, 0, 1), np.ones(3)) == 2
    alpha = weight_vector([math.sqrt(1.5), math.sqrt(1.5), 0.0])
    assert weighted_hamming((0, 0, 0), (1, 0, 1), alpha) == pytest.approx(math.sqrt(1.5))


def test_weighted_hamming_length_mismatch():
    with pytest.raises(DimensionError):
        weighted_hamming((0, 1), (0, 1, 1), np.ones(2))
    with pytest.raises(DimensionError):
        weighted_hamming((0, 1), (0, 1), np.ones(3))


def test_float_blocks_compare_bitwise():
    assert weighted_hamming((0.0, 1.0), (-0.0, 1.0)) == 1
    assert weighted_hamming((0.1 + 0.2, 1.0), (0.3, 1.0)) == 1


@pytest.mark.parametrize("bad", [[1.0, 1.0, 1.1], [-1.0, 1.0, math.sqrt(2)], [2.0]])
def test_weight_vector_rejects(bad):
    with pytest.raises(ParameterError):
        weight_vector(bad)


def test_split_weights_normalised():
    a = split_weights(10)
    assert np.sum(a**2) == pytest.approx(10)
    assert set(np.round(a**2, 12)) == {1.5, 0.5}


vectors = st.integers(2, 12).flatmap(
    lambda n: st.tuples(
        *[st.lists(st.integers(0, 2), min_size=n, max_size=n) for _ in range(3)],
        st.lists(st.floats(0.0, 3.0), min_size=n, max_size=n),
    )
)


@given(vectors)
def test_weighted_hamming_is_a_pseudometric(data):
    x, y, z, raw = data
    n = len(x)
    raw = np.asarray(raw) + 1e-3
    alpha = raw * math.sqrt(n / np.sum(raw**2))
    d = lambda u, v: weighted_hamming(u, v, alpha)
    assert d(x, y) == pytest.approx(d(y, x))
    assert d(x, z) <= d(x, y) + d(y, z) + 1e-9
    assert d(x, x) == 0


# processes -------------------------------------------------------------------


def test_single_deterministic_block():
    p = ProductProcess([BlockDomain.finite(["a"])])
    assert sample_trajectory(p, RngStream(1)) == ("a",)


def test_sampling_is_reproducible():
    p = BernoulliProcess(0.5, n=2)
    assert sample_trajectory(p, RngStream(99, ("x",))) == sample_trajectory(p, RngStream(99, ("x",)))


def test_fair_bit_means(gen):
    p = BernoulliProcess(0.5, n=20)
    rows = p.complete((), 100_000, gen)
    assert np.all(np.abs(rows.mean(axis=0) - 0.5) < 0.01)


def test_out_of_support_sampler_raises():
    bad = RandomProcess(2, lambda prefix, rng: 7, lambda prefix: [(0, 0.5), (1, 0.5)])
    with pytest.raises(ContractViolation):
        sample_trajectory(bad, RngStream(0))


def test_gaussian_process_moments(gen):
    rows = GaussianProcess(4, sigma=2.0).complete((), 50_000, gen)
    assert rows.std() == pytest.approx(2.0, rel=0.02)


def test_child_streams_differ_and_repeat():
    root = RngStream(5)
    a = root.child("trial", 3).generator().random(4)
    b = root.child("trial", 4).generator().random(4)
    assert not np.allclose(a, b)
    np.testing.assert_array_equal(a, RngStream(5).child("trial", 3).generator().random(4))


def test_keyed_uniforms_are_pure():
    keys = np.array([1, 2, 3], dtype=np.uint64)
    u = keyed_uniforms(keys, 5)
    np.testing.assert_array_equal(u, keyed_uniforms(keys, 5))
    assert u.shape == (3, 5) and np.all((u >= 0) & (u < 1))
    assert stats.kstest(keyed_uniforms(np.arange(2000, dtype=np.uint64), 10).ravel(), "uniform").pvalue > 0.001


# enumeration -----------------------------------------------------------------


def test_enumerate_two_bits():
    out = enumerate_support(BernoulliProcess(0.5, n=2))
    assert len(out) == 4 and all(p == 0.25 for _, p in out)


def test_enumerate_table():
    p = ProductProcess([BlockDomain.finite("abc", (0.5, 0.3, 0.2))])
    assert enumerate_support(p) == [(("a",), 0.5), (("b",), 0.3), (("c",), 0.2)]


def test_enumerate_dependent_process_lists_zero_branches():
    out = enumerate_support(copy_process())
    assert len(out) == 8
    assert sum(p == 0 for _, p in out) == 4
    assert sum(p for _, p in out) == pytest.approx(1.0, abs=1e-10)
    assert all(x[2] == x[0] for x, p in out if p > 0)


def test_enumeration_cap():
    with pytest.raises(EnumerationCapExceeded) as err:
        enumerate_support(BernoulliProcess(0.5, n=21))
    assert err.value.size == 2**21


def test_sampling_matches_enumeration(gen):
    p = ProductProcess([BlockDomain.finite((0, 1, 2), (0.2, 0.5, 0.3)), BlockDomain.finite((0, 1), (0.9, 0.1))] * 2)
    table = enumerate_support(p)
    index = {x: i for i, (x, _) in enumerate(table)}
    counts = np.zeros(len(table))
    for row in p.complete((), 100_000, gen):
        counts[index[tuple(row.tolist())]] += 1
    expected = np.array([q for _, q in table]) * counts.sum()
    assert stats.chisquare(counts, expected).pvalue > 0.001


def test_product_blocks_do_not_depend_on_prefix(gen):
    p = BernoulliProcess([0.3, 0.7, 0.5], n=None)
    a = np.array(p.sample_blocks((0, 0), 20_000, gen))
    b = np.array(p.sample_blocks((1, 1), 20_000, gen))
    table = [[np.sum(a == 0), np.sum(a == 1)], [np.sum(b == 0), np.sum(b == 1)]]
    assert stats.chi2_contingency(table).pvalue > 0.001


# membership ------------------------------------------------------------------


def test_query_counter_counts_every_decision():
    S = threshold_set(np.ones(3), 2)
    assert S((1, 1, 0)) and not S((1, 0, 0))
    S.test_batch(np.zeros((5, 3)))
    assert S.queries == 7


def test_query_counter_thread_safe():
    S = MembershipOracle(test=lambda x: True)
    threads = [threading.Thread(target=lambda: [S((0,)) for _ in range(500)]) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert S.queries == 4000


def test_trajectory_json_round_trip():
    domains = [BlockDomain.finite("xyz"), BlockDomain.real(lambda r, k: r.random(k))]
    t = ("z", 0.1 + 0.2)
    text = trajectory_to_json(t, domains)
    assert text == '[2, "0.30000000000000004"]'
    assert trajectory_from_json(text, domains) == t


@given(st.lists(st.floats(allow_nan=False, allow_infinity=False), min_size=1, max_size=8))
def test_real_trajectories_round_trip_exactly(xs):
    back = trajectory_from_json(trajectory_to_json(tuple(xs)))
    assert weighted_hamming(back, tuple(xs)) == 0
