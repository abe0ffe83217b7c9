import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from mucio.core import (
    BernoulliProcess,
    BlockDomain,
    EnumerationCapExceeded,
    MembershipOracle,
    ParameterError,
    ProductProcess,
    empty_set,
    table_set,
    threshold_set,
    whole_space,
)
from mucio.oracles import (
    ExactOracle,
    MonteCarloOracle,
    OracleBudget,
    ThresholdOracle,
    approx_max_block,
    audit_conditions,
    exact_partial_expectation,
    mc_partial_expectation,
    oracle_sample_counts,
    threshold_partial_expectation,
)

AND2 = MembershipOracle(test=lambda x: bool(x[0] and x[1]), name="and")


# sample counts ---------------------------------------------------------------


def test_paper_counts():
    b = oracle_sample_counts(0.1, 0.0, 1.0, "paper")
    assert (b.m_eval, b.m_max) == (8000, 100)
    assert oracle_sample_counts(0.5, math.log(2), 0.5, "paper") == OracleBudget(256, 16)


def test_hoeffding_count_follows_the_formula():
    # 2 ln(2/0.1) / 0.1**2 = 599.1
    assert oracle_sample_counts(0.1, 0.0, 1.0, "hoeffding").m_eval == 600


@pytest.mark.parametrize("args", [(0.0, 0.0, 1.0), (0.1, -1.0, 1.0), (0.1, 0.0, 0.0), (1.0, 0.0, 0.5)])
def test_sample_count_domain(args):
    with pytest.raises(ParameterError):
        oracle_sample_counts(*args)


# exact -----------------------------------------------------------------------


def test_exact_and():
    p = BernoulliProcess(0.5, n=2)
    assert exact_partial_expectation(p, AND2, ()) == 0.25
    assert exact_partial_expectation(p, AND2, (1,)) == 0.5
    assert exact_partial_expectation(p, AND2, (1, 1)) == 1.0


def test_exact_oracle_matches_function():
    p = BernoulliProcess([0.2, 0.6, 0.5, 0.9], n=None)
    S = table_set([(1, 0, 1, 1), (0, 0, 0, 0), (1, 1, 1, 1)])
    ex = ExactOracle(p, S)
    for prefix in [(), (1,), (1, 0), (0, 0, 0)]:
        assert ex.value(prefix) == pytest.approx(exact_partial_expectation(p, S, prefix), abs=1e-15)


def test_exact_oracle_refuses_large_processes():
    with pytest.raises(EnumerationCapExceeded):
        ExactOracle(BernoulliProcess(0.5, n=30), whole_space())


# threshold -------------------------------------------------------------------


def test_threshold_examples():
    assert threshold_partial_expectation(4, np.ones(4), 0.5, 3, (1, 1), exact=True) == Fraction(3, 4)
    for prefix in [(), (0,), (0, 0, 0, 0), (1, 0, 1)]:
        assert threshold_partial_expectation(4, np.ones(4), 0.5, 0, prefix) == 1.0


def test_threshold_binomial_tail_frozen():
    got = threshold_partial_expectation(200, np.ones(200), 0.5, 115)
    assert got == pytest.approx(stats.binom.sf(114, 200, 0.5), rel=1e-10)
    assert got == pytest.approx(0.0200186, rel=1e-5)


def test_threshold_direct_sum():
    exact = threshold_partial_expectation(200, np.ones(200), 0.5, 115, exact=True)
    direct = sum(Fraction(math.comb(200, k), 2**200) for k in range(115, 201))
    assert exact == direct


def test_threshold_rejects_fractional_weights():
    with pytest.raises(ParameterError):
        ThresholdOracle(BernoulliProcess(0.5, n=2), weights=[0.5, 1.0], t=1)


def test_threshold_tiny_tail_keeps_relative_accuracy():
    got = threshold_partial_expectation(400, np.ones(400), 0.5, 390)
    assert got == pytest.approx(stats.binom.sf(389, 400, 0.5), rel=1e-8)


threshold_cases = st.integers(1, 12).flatmap(
    lambda n: st.tuples(
        st.just(n),
        st.lists(st.integers(-3, 3), min_size=n, max_size=n),
        st.lists(st.sampled_from([0.0, 0.1, 0.5, 0.73, 1.0]), min_size=n, max_size=n),
        st.integers(-10, 10),
        st.sampled_from([(0, 1), (-1, 1), (2, 5)]),
        st.integers(0, n),
    )
)


@given(threshold_cases)
def test_threshold_equals_enumeration(case):
    n, w, p, t, values, depth = case
    process = BernoulliProcess(p, n=None, values=values)
    S = threshold_set(w, t)
    rng = np.random.default_rng(depth)
    prefix = tuple(int(values[b]) for b in rng.integers(0, 2, depth))
    want = exact_partial_expectation(process, S, prefix)
    got = ThresholdOracle(process, S).value(prefix)
    assert got == pytest.approx(want, abs=1e-9)


def test_threshold_equals_enumeration_at_sixteen():
    process = BernoulliProcess(0.5, n=16)
    S = threshold_set(np.ones(16), 11)
    for prefix in [(), (1,) * 5, (0, 1) * 4]:
        assert ThresholdOracle(process, S).value(prefix) == pytest.approx(exact_partial_expectation(process, S, prefix), abs=1e-9)


# Monte Carlo -----------------------------------------------------------------


@pytest.mark.parametrize("S,want", [(whole_space(), 1.0), (empty_set(), 0.0)])
@pytest.mark.parametrize("m", [1, 7, 500])
def test_mc_constant_sets(S, want, m):
    assert mc_partial_expectation(BernoulliProcess(0.5, n=5), S, (), m, 0) == want


def test_mc_and_estimate(gen):
    assert mc_partial_expectation(BernoulliProcess(0.5, n=2), AND2, (), 100_000, gen) == pytest.approx(0.25, abs=0.005)


@given(st.integers(1, 300), st.integers(0, 3))
def test_mc_query_accounting(m, depth):
    S = threshold_set(np.ones(4), 2)
    before = S.queries
    mc_partial_expectation(BernoulliProcess(0.5, n=4), S, (1,) * depth, m, depth)
    assert S.queries - before == m


def test_mc_oracle_sizing_is_capped():
    mc = MonteCarloOracle(BernoulliProcess(0.5, n=4), whole_space(), gamma=0.01, eps=0.5, max_samples=5000)
    assert mc.budget == OracleBudget(5000, 5000)


# max block ---------------------------------------------------------------------


def test_max_block_all_ones():
    p = BernoulliProcess(0.5, n=3)
    S = table_set([(1, 1, 1)])
    assert approx_max_block(ExactOracle(p, S), ()) == (1, 0.25)


def test_max_block_single_value():
    p = ProductProcess([BlockDomain.finite(["a"]), BlockDomain.finite(["b", "c"])])
    S = table_set([("a", "c")])
    assert approx_max_block(ExactOracle(p, S), ()) == ("a", 0.5)


def test_max_block_whole_space(gen):
    p = BernoulliProcess(0.5, n=4)
    value, est = approx_max_block(MonteCarloOracle(p, whole_space(), OracleBudget(10, 3)), (), rng=gen)
    assert value in (0, 1) and est == 1.0


def test_max_block_never_below_prefix_estimate(gen):
    p = BernoulliProcess(0.5, n=6)
    S = threshold_set(np.ones(6), 4)
    for _ in range(50):
        run = MonteCarloOracle(p, S, OracleBudget(30, 2)).start(gen, (1, 0))
        _, f_star = run.max_block()
        assert f_star >= run.value


def test_child_estimates_cached_within_a_run(gen):
    p = BernoulliProcess(0.5, n=6)
    S = threshold_set(np.ones(6), 3)
    run = MonteCarloOracle(p, S, OracleBudget(50, 4)).start(gen)
    first = run.child(1)
    q = S.queries
    assert run.child(1) == first and S.queries == q


def test_last_block_uses_the_indicator(gen):
    p = BernoulliProcess(0.5, n=3)
    S = table_set([(1, 1, 1)])
    run = MonteCarloOracle(p, S, OracleBudget(5, 2)).start(gen, (1, 1))
    assert run.child(1) == 1.0 and run.child(0) == 0.0


# oracle conditions -----------------------------------------------------------


def test_condition_audit_small_instance():
    p = BernoulliProcess(0.5, n=6)
    S = threshold_set(np.ones(6), 3)
    gamma, tau = 0.2, 0.0
    mc = MonteCarloOracle(p, S, gamma=gamma, tau=tau, eps=0.5, sizing="hoeffding")
    report = audit_conditions(p, S, mc, gamma, tau, rng=3, prefixes=200, draws=200)
    assert report.eligible > 0
    assert report.ok, report
