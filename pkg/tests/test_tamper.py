import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from mucio.core import (
    BernoulliProcess,
    MembershipOracle,
    ParameterError,
    RngStream,
    split_weights,
    table_set,
    threshold_set,
    whole_space,
)
from mucio.oracles import ExactOracle, MonteCarloOracle, OracleBudget, ThresholdOracle
from mucio.tamper import (
    Case,
    TamperParams,
    additive_step,
    average_case_params,
    check_potential,
    check_transcript,
    check_validity,
    find_close_point,
    mucio_abort_step,
    mucio_step,
    run_tampering,
    worst_case_params,
)

THREE = BernoulliProcess(0.5, n=3)
ONES3 = table_set([(1, 1, 1)])


def root_run(S=ONES3, process=THREE):
    return ExactOracle(process, S).start()


# single steps ----------------------------------------------------------------


def test_additive_keeps_on_full_set():
    d = additive_step(root_run(whole_space()), 0, 0.1)
    assert d.case is Case.KEEP and d.value == 0


def test_additive_raise():
    d = additive_step(root_run(), 0, 0.1)
    assert d.case is Case.RAISE and d.value == 1
    assert (d.f_prev, d.f_star) == (0.125, 0.25)


def test_additive_lets_the_estimate_hit_zero():
    d = additive_step(root_run(), 0, 0.2)
    assert d.case is Case.KEEP and d.value == 0 and d.f_u == 0.0


def test_mucio_raise():
    d = mucio_step(root_run(), 0, 0.5)
    assert d.case is Case.RAISE and d.value == 1


def test_mucio_keep_good_block():
    d = mucio_step(root_run(), 1, 1.0)
    assert d.case is Case.KEEP and d.value == 1


def test_mucio_rescue():
    d = mucio_step(root_run(), 0, 1.0)
    assert d.case is Case.RESCUE and d.value == 1


class FakeRun:
    """Hand-set estimates for the abort comparisons."""

    def __init__(self, value, children):
        self.value = value
        self.children = children

    def child(self, x):
        return self.children[x]

    def max_block(self, m_max=None):
        best = max(self.children, key=self.children.get)
        return best, max(self.value, self.children[best])


def test_abort_passthrough():
    d = mucio_abort_step(FakeRun(0.5, {0: 0.5}), 0, 0.1, 1.0, 1.0, 0.5, aborted=True)
    assert d.case is Case.ABORT and d.value == 0


def test_abort_below_floor():
    eps = 0.125
    tau = math.log(eps / 0.05)
    # max gain is small and the honest child is not low enough to rescue, but it is under the floor
    run = FakeRun(0.041, {0: 0.04, 1: 0.042})
    d = mucio_abort_step(run, 0, 0.5, 1.0, tau, eps)
    assert d.case is Case.ABORT and d.value == 0


def test_abort_order_flag():
    run = FakeRun(0.04, {0: 0.01, 1: 0.2})
    assert mucio_abort_step(run, 0, 0.5, 1.0, 0.0, 0.5).case is Case.RAISE
    assert mucio_abort_step(run, 0, 0.5, 1.0, 0.0, 0.5, case0_first=True).case is Case.ABORT


# parameters ------------------------------------------------------------------


def test_average_case_params():
    p = average_case_params(100, math.exp(-2), 0.1)
    assert p.lam == pytest.approx(0.2)
    assert p.tau == pytest.approx(9.798, abs=1e-3)
    assert p.gamma == pytest.approx(4.1667e-7, rel=1e-4)
    assert p.mode == "mucio-abort"


def test_worst_case_params():
    p = worst_case_params(100, math.exp(-2), 0.1)
    assert p.k_cap == pytest.approx(48.58, abs=0.01)
    assert p.lam == pytest.approx(0.2429, abs=1e-4)
    assert p.gamma == pytest.approx(4.1667e-7, rel=1e-4)


@pytest.mark.parametrize("eps,delta", [(1.0, 0.1), (0.5, 0.0), (0.0, 0.5)])
def test_degenerate_parameters(eps, delta):
    with pytest.raises(ParameterError):
        average_case_params(10, eps, delta)


def test_params_validation():
    with pytest.raises(ParameterError):
        TamperParams(lam=0.0)
    with pytest.raises(ParameterError):
        TamperParams(lam=0.1, k_cap=0)
    with pytest.raises(ParameterError):
        TamperParams(lam=0.1, mode="greedy")


# engine ----------------------------------------------------------------------


def test_whole_space_untouched():
    p = BernoulliProcess(0.5, n=8)
    tr = run_tampering(p, whole_space(), ExactOracle(p, whole_space()), TamperParams(lam=0.3), 4)
    assert tr.v == tr.u and tr.budget_used == 0 and tr.success
    assert all(c is Case.KEEP for c in tr.cases)


@pytest.mark.parametrize("seed", range(10))
def test_single_point_set(seed):
    n = 6
    p = BernoulliProcess(0.5, n=n)
    S = table_set([(1,) * n])
    tr = run_tampering(p, S, ExactOracle(p, S), TamperParams(lam=0.01), seed)
    assert tr.v == (1,) * n
    assert tr.budget_used == tr.u.count(0)


def test_single_point_expected_budget():
    n = 6
    p = BernoulliProcess(0.5, n=n)
    S = table_set([(1,) * n])
    ex = ExactOracle(p, S)
    budgets = [run_tampering(p, S, ex, TamperParams(lam=0.3), k).budget_used for k in range(2000)]
    assert np.mean(budgets) == pytest.approx(n / 2, abs=4 * np.std(budgets) / math.sqrt(2000))


@pytest.mark.parametrize("seed", range(10))
def test_dictator(seed):
    p = BernoulliProcess(0.5, n=5)
    S = MembershipOracle(test=lambda x: x[0] == 1)
    tr = run_tampering(p, S, ExactOracle(p, S), TamperParams(lam=0.2), seed)
    assert tr.success
    assert tr.budget_used <= 1
    assert tr.corrupted in ([], [0])


def test_empty_set_returns_zero_budget():
    p = BernoulliProcess(0.5, n=4)
    S = MembershipOracle(test=lambda x: False)
    tr = run_tampering(p, S, ExactOracle(p, S), TamperParams(lam=0.2), 0)
    assert tr.budget_used == 0 and not tr.success and tr.v == tr.u


def test_cap_is_never_exceeded():
    n = 40
    p = BernoulliProcess(0.5, n=n)
    S = threshold_set(np.ones(n), 33)
    params = TamperParams(lam=0.3, k_cap=4.0)
    oracle = ThresholdOracle(p, S)
    capped = 0
    for k in range(200):
        tr = run_tampering(p, S, oracle, params, k)
        assert tr.budget_used <= 4.0
        assert check_transcript(tr, params) == []
        capped += tr.capped
    assert capped > 0


def test_external_u_is_used():
    p = BernoulliProcess(0.5, n=5)
    u = (0, 1, 0, 0, 1)
    tr = run_tampering(p, whole_space(), ExactOracle(p, whole_space()), TamperParams(lam=0.2), 0, external_u=u)
    assert tr.u == u


def test_reproducible_transcripts():
    p = BernoulliProcess(0.5, n=30)
    S = threshold_set(np.ones(30), 19)
    mc = MonteCarloOracle(p, S, OracleBudget(50, 4))
    params = average_case_params(30, 0.05, 0.1)
    a = run_tampering(p, S, mc, params, RngStream(7, ("t",)))
    b = run_tampering(p, S, mc, params, RngStream(7, ("t",)))
    assert a.v == b.v and a.trace == b.trace and a.queries == b.queries


def test_query_count_matches_membership_counter():
    p = BernoulliProcess(0.5, n=10)
    S = threshold_set(np.ones(10), 7)
    before = S.queries
    tr = run_tampering(p, S, MonteCarloOracle(p, S, OracleBudget(20, 3)), TamperParams(lam=0.3), 1)
    assert tr.queries == S.queries - before > 0


def test_weighted_budget_sums_alpha():
    n = 12
    alpha = split_weights(n)
    p = BernoulliProcess(0.5, n=n)
    S = threshold_set(np.ones(n), 9)
    params = TamperParams(lam=0.3, alpha=alpha)
    tr = run_tampering(p, S, ThresholdOracle(p, S), params, 2)
    assert tr.budget_used == pytest.approx(alpha[tr.tampered].sum())
    assert check_transcript(tr, params) == []


def random_instance(seed):
    g = np.random.default_rng(seed)
    n = int(g.integers(1, 9))
    p = BernoulliProcess(g.choice([0.2, 0.5, 0.7], size=n), n=None)
    table = {tuple(int(b) for b in row) for row in g.integers(0, 2, size=(int(g.integers(1, 6)), n))}
    return p, table_set(table), n


@given(st.integers(0, 10_000), st.floats(0.05, 2.0))
def test_exact_oracle_always_succeeds(seed, lam):
    p, S, n = random_instance(seed)
    ex = ExactOracle(p, S)
    if ex.value(()) == 0:
        return
    params = TamperParams(lam=lam)
    tr = run_tampering(p, S, ex, params, seed)
    assert tr.success
    assert check_potential(tr, params) == []
    assert check_validity(tr, p) == []
    assert check_transcript(tr, params) == []


@given(st.integers(0, 10_000))
def test_abort_is_absorbing(seed):
    p = BernoulliProcess(0.5, n=12)
    S = threshold_set(np.ones(12), 10)
    params = TamperParams(lam=0.05, tau=0.2, mode="mucio-abort")
    tr = run_tampering(p, S, MonteCarloOracle(p, S, OracleBudget(8, 2)), params, seed)
    if Case.ABORT in tr.cases:
        first = tr.cases.index(Case.ABORT)
        assert all(c is Case.ABORT for c in tr.cases[first:])
        assert not tr.tampered[first:].any()
    assert check_transcript(tr, params) == []


def test_internal_honest_blocks_follow_the_measure():
    p = BernoulliProcess([0.3, 0.5, 0.8], n=None)
    S = table_set([(1, 1, 1)])
    ex = ExactOracle(p, S)
    counts = np.zeros(8)
    for k in range(4000):
        u = run_tampering(p, S, ex, TamperParams(lam=0.5), k).u
        counts[u[0] * 4 + u[1] * 2 + u[2]] += 1
    probs = np.array([(0.7, 0.3)[a] * (0.5, 0.5)[b] * (0.2, 0.8)[c] for a in (0, 1) for b in (0, 1) for c in (0, 1)])
    assert stats.chisquare(counts, probs * 4000).pvalue > 0.001


# find_close_point ------------------------------------------------------------


def test_find_close_point_whole_space():
    p = BernoulliProcess(0.5, n=10)
    x = tuple(int(b) for b in np.random.default_rng(0).integers(0, 2, 10))
    assert find_close_point(p, whole_space(), 0.5, 0.1, x, 1) == x


def test_find_close_point_single_point():
    n = 8
    p = BernoulliProcess(0.5, n=n)
    S = table_set([(1,) * n])
    x = (0, 1, 1, 0, 0, 1, 0, 1)
    tr = find_close_point(p, S, 0.5**n, 0.1, x, 3, oracle=ExactOracle(p, S), return_transcript=True)
    assert tr.v == (1,) * n and tr.budget_used == x.count(0)


def test_find_close_point_threshold_statistics():
    n, t, trials = 200, 115, 2000
    p = BernoulliProcess(0.5, n=n)
    S = threshold_set(np.ones(n), t)
    oracle = ThresholdOracle(p, S)
    eps = oracle.value(())
    gen = np.random.default_rng(11)
    wins, dist = 0, []
    for k in range(trials):
        x = tuple(int(b) for b in gen.integers(0, 2, n))
        tr = find_close_point(p, S, eps, 0.1, x, k, oracle=oracle, return_transcript=True)
        wins += tr.success
        dist.append(tr.budget_used)
    assert wins / trials >= 0.9
    assert np.mean(dist) <= math.sqrt(2 * n * math.log(1 / eps)) + 1


def test_find_close_point_rejects_points_outside_support():
    with pytest.raises(ParameterError):
        find_close_point(BernoulliProcess(0.5, n=2), whole_space(), 0.5, 0.1, (0, 3), 0)
