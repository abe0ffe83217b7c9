"""Partial-expectation oracles.

Given a process ``w`` and a set indicator ``f``, the partial expectation of a
prefix is ``E[f(w) | w starts with prefix]``. Three estimators are provided:

* :class:`ExactOracle` enumerates the support (small finite processes);
* :class:`ThresholdOracle` handles ``{x : sum(w * x) >= t}`` over independent
  two-valued blocks with a suffix-sum dynamic program;
* :class:`MonteCarloOracle` averages ``f`` over random completions.

A tampering run talks to an :class:`OracleRun`, which tracks the current prefix
and caches one estimate per child so nested comparisons stay consistent.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Sequence

import numpy as np

from .core import (
    DEFAULT_ENUMERATION_CAP,
    BernoulliProcess,
    EnumerationCapExceeded,
    MembershipOracle,
    ParameterError,
    RandomProcess,
    RngStream,
    _size_estimate,
    as_generator,
    enumerate_support,
)

DEFAULT_MAX_SAMPLES = 20_000


@dataclass(frozen=True)
class OracleBudget:
    """Samples per estimate (``m_eval``) and candidates per maximisation (``m_max``)."""

    m_eval: int
    m_max: int

    def __post_init__(self):
        if self.m_eval < 1 or self.m_max < 1:
            raise ParameterError("sample counts must be positive")


def oracle_sample_counts(gamma: float, tau: float, eps_tilde: float, sizing: str = "paper") -> OracleBudget:
    """Sample counts for the Monte-Carlo oracle.

    ``paper`` sizing: ``m_eval = ceil(8 / (g**3 * e**-tau * eps))`` and
    ``m_max = ceil(1 / (g**2 * e**-tau * eps))``.

    ``hoeffding`` sizing keeps ``m_max`` and sets
    ``m_eval = ceil(2 ln(2/g) / (g * e**-tau * eps)**2)``, enough for additive
    error at most ``g * e**-tau * eps / 2`` except with probability ``g``.
    """
    if not 0 < gamma < 1:
        raise ParameterError(f"gamma must lie in (0, 1), got {gamma}")
    if tau < 0:
        raise ParameterError(f"tau must be non-negative, got {tau}")
    if not 0 < eps_tilde <= 1:
        raise ParameterError(f"root estimate must lie in (0, 1], got {eps_tilde}")
    floor = math.exp(-tau) * eps_tilde
    m_max = math.ceil(1.0 / (gamma**2 * floor) - 1e-9)
    if sizing == "paper":
        m_eval = math.ceil(8.0 / (gamma**3 * floor) - 1e-9)
    elif sizing == "hoeffding":
        m_eval = math.ceil(2.0 * math.log(2.0 / gamma) / (gamma * floor) ** 2 - 1e-9)
    else:
        raise ParameterError(f"unknown sizing {sizing!r}")
    return OracleBudget(m_eval, m_max)


def _value_key(value: Any) -> Any:
    if isinstance(value, float):
        return ("f", np.float64(value).view(np.uint64).item())
    return value


# ---------------------------------------------------------------------------
# per-run state


class OracleRun:
    """An oracle positioned at a prefix of one tampering run.

    ``value`` is the estimate for the current prefix. ``child(x)`` estimates
    the prefix extended by ``x`` and is cached until :meth:`advance`.
    """

    def __init__(self, oracle: "PartialExpectationOracle", rng: np.random.Generator, prefix: Sequence = ()):
        self.oracle = oracle
        self.process = oracle.process
        self.n = oracle.process.n
        self.rng = rng
        self.prefix: list = list(prefix)
        self._children: dict = {}
        self._init_state()
        self.value = self._root()

    @property
    def depth(self) -> int:
        return len(self.prefix)

    @property
    def done(self) -> bool:
        return len(self.prefix) == self.n

    # hooks
    def _init_state(self) -> None:
        pass

    def _root(self) -> float:
        raise NotImplementedError

    def _estimate(self, value: Any) -> float:
        raise NotImplementedError

    def _candidates(self, m_max: int | None) -> list:
        raise NotImplementedError

    def _push(self, value: Any) -> None:
        pass

    def _exact(self, value: Any) -> float:
        return float(bool(self.oracle.membership(tuple(self.prefix) + (value,))))

    # public
    def child(self, value: Any) -> float:
        if self.done:
            raise IndexError("trajectory is already complete")
        key = _value_key(value)
        if key not in self._children:
            if self.depth + 1 == self.n and self.oracle.membership is not None:
                est = self._exact(value)
            else:
                est = self._estimate(value)
            self._children[key] = min(1.0, max(0.0, float(est)))
        return self._children[key]

    def max_block(self, m_max: int | None = None) -> tuple[Any, float]:
        """Best candidate next block and the clamped estimate ``max(value, best)``."""
        best_value, best = None, -math.inf
        for cand in self._candidates(m_max):
            est = self.child(cand)
            if est > best:  # strict: the first candidate wins ties
                best_value, best = cand, est
        return best_value, max(self.value, best)

    def advance(self, value: Any, estimate: float | None = None) -> float:
        """Append ``value`` to the prefix.

        ``estimate`` overrides the cached child estimate (used to store the
        clamped maximum); it is ignored on the last block, where the estimate is
        always the exact indicator.
        """
        est = self.child(value)
        if estimate is not None and self.depth + 1 < self.n:
            est = float(estimate)
        self.prefix.append(value)
        self._push(value)
        self._children = {}
        self.value = est
        return est

    def skip(self, value: Any) -> None:
        """Append without estimating (after an abort or a cap hit)."""
        self.prefix.append(value)
        self._push(value)
        self._children = {}
        self.value = math.nan


class PartialExpectationOracle:
    """Base class. ``membership`` may be ``None`` for purely analytic oracles."""

    mode = "abstract"

    def __init__(self, process: RandomProcess, membership: MembershipOracle | None):
        self.process = process
        self.membership = membership

    def start(self, rng: RngStream | np.random.Generator | int | None = None, prefix: Sequence = ()) -> OracleRun:
        raise NotImplementedError

    def estimate(self, prefix: Sequence, rng: RngStream | np.random.Generator | int | None = None) -> float:
        prefix = tuple(prefix)
        if len(prefix) == self.process.n:
            if self.membership is not None:
                return float(bool(self.membership(prefix)))
        return self.start(rng, prefix).value


# ---------------------------------------------------------------------------
# exact


def exact_partial_expectation(
    process: RandomProcess, f: MembershipOracle, prefix: Sequence = (), cap: int = DEFAULT_ENUMERATION_CAP
) -> float:
    """Exact conditional probability that a completion of ``prefix`` lies in ``f``."""
    prefix = tuple(prefix)
    if len(prefix) == process.n:
        return float(bool(f(prefix)))
    support = [(x, p) for x, p in enumerate_support(process, prefix, cap=cap) if p > 0]
    if not support:
        return 0.0
    rows = np.array([x for x, _ in support], dtype=object)
    try:
        rows = rows.astype(process.dtype)
    except (TypeError, ValueError):
        pass
    hits = f.test_batch(rows)
    probs = np.array([p for _, p in support])
    return float(np.dot(probs, hits))


class ExactOracle(PartialExpectationOracle):
    """Enumeration oracle with a memo shared by every run on the same set."""

    mode = "exact"

    def __init__(self, process: RandomProcess, membership: MembershipOracle, cap: int = DEFAULT_ENUMERATION_CAP):
        if not process.is_finite:
            raise ParameterError("exact oracle needs an enumerable process")
        size = _size_estimate(process, ())
        if size > cap:
            raise EnumerationCapExceeded(size, cap)
        super().__init__(process, membership)
        self._memo: dict[tuple, float] = {}

    def value(self, prefix: tuple) -> float:
        memo = self._memo
        if prefix in memo:
            return memo[prefix]
        if len(prefix) == self.process.n:
            out = float(bool(self.membership(prefix)))
        else:
            out = 0.0
            for v, p in self.process.block_support(prefix):
                if p > 0:
                    out += p * self.value(prefix + (v,))
            out = min(1.0, out)
        memo[prefix] = out
        return out

    def start(self, rng=None, prefix: Sequence = ()) -> OracleRun:
        return _ExactRun(self, as_generator(rng), prefix)


class _ExactRun(OracleRun):
    oracle: ExactOracle

    def _root(self) -> float:
        return self.oracle.value(tuple(self.prefix))

    def _estimate(self, value: Any) -> float:
        return self.oracle.value(tuple(self.prefix) + (value,))

    def _exact(self, value: Any) -> float:
        return self.oracle.value(tuple(self.prefix) + (value,))

    def _candidates(self, m_max: int | None) -> list:
        return [v for v, p in self.process.block_support(self.prefix) if p > 0]


# ---------------------------------------------------------------------------
# threshold sets over independent two-valued blocks


def _integer_weights(weights: Sequence[float]) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if not np.all(np.isfinite(w)) or np.any(w != np.round(w)):
        raise ParameterError("the threshold oracle needs integer weights")
    return w.astype(np.int64)


class ThresholdOracle(PartialExpectationOracle):
    """Analytic oracle for ``S = {x : sum_j w_j x_j >= t}``.

    Blocks are independent with values ``(lo, hi)``, ``hi`` taken with
    probability ``p_j``. ``w`` must be integer-valued (any sign). With
    ``exact=True`` the tables hold :class:`fractions.Fraction` values.
    """

    mode = "threshold"

    def __init__(
        self,
        process: BernoulliProcess,
        membership: MembershipOracle | None = None,
        weights: Sequence[float] | None = None,
        t: float | None = None,
        exact: bool = False,
    ):
        if not isinstance(process, BernoulliProcess):
            raise ParameterError("the threshold oracle needs independent two-valued blocks")
        if weights is None:
            weights = getattr(membership, "weights", None)
        if t is None:
            t = getattr(membership, "threshold", None)
        if weights is None or t is None:
            raise ParameterError("threshold oracle needs weights and a threshold")
        super().__init__(process, membership)
        self.w = _integer_weights(weights)
        if self.w.size != process.n:
            raise ParameterError("weights and process disagree on n")
        lo, hi = process.values
        if hi <= lo:
            raise ParameterError("block values must be increasing (lo, hi)")
        self.lo, self.d = lo, hi - lo
        self.t = Fraction(t)
        self.exact = exact
        self._tail_w = np.r_[np.cumsum(self.w[::-1])[::-1], 0]
        self._build(process.p)

    def _build(self, p: np.ndarray) -> None:
        w = self.w
        self.kmin = int(w[w < 0].sum())
        self.kmax = int(w[w > 0].sum())
        width = self.kmax - self.kmin + 1
        dtype = object if self.exact else float
        zero = Fraction(0) if self.exact else 0.0
        one = Fraction(1) if self.exact else 1.0
        pmf = np.full(width, zero, dtype=dtype)
        pmf[-self.kmin] = one
        sf = np.empty((self.process.n + 1, width), dtype=dtype)
        sf[-1] = self._survival(pmf)
        for i in range(self.process.n - 1, -1, -1):
            q = Fraction(float(p[i])) if self.exact else float(p[i])
            shifted = np.full(width, zero, dtype=dtype)
            wi = int(w[i])
            if wi >= 0:
                shifted[wi:] = pmf[: width - wi]
            else:
                shifted[:wi] = pmf[-wi:]
            pmf = (one - q) * pmf + q * shifted
            sf[i] = self._survival(pmf)
        self._sf = sf

    @staticmethod
    def _survival(pmf: np.ndarray) -> np.ndarray:
        # summing from the top keeps the small upper tail accurate
        return np.cumsum(pmf[::-1])[::-1]

    def tail(self, i: int, partial: int) -> float | Fraction:
        """Probability that blocks ``i..n-1`` lift the partial sum ``partial`` to at least ``t``."""
        need = (self.t - partial - self.lo * int(self._tail_w[i])) / self.d
        k = math.ceil(need)
        if k <= self.kmin:
            return Fraction(1) if self.exact else 1.0
        if k > self.kmax:
            return Fraction(0) if self.exact else 0.0
        out = self._sf[i, k - self.kmin]
        return out if self.exact else min(1.0, float(out))

    def partial_sum(self, prefix: Sequence) -> int:
        return int(sum(int(self.w[j]) * int(x) for j, x in enumerate(prefix)))

    def value(self, prefix: Sequence) -> float | Fraction:
        for x in prefix:
            if x not in self.process.values:
                raise ParameterError(f"block value {x!r} is not one of {self.process.values}")
        return self.tail(len(prefix), self.partial_sum(prefix))

    def start(self, rng=None, prefix: Sequence = ()) -> OracleRun:
        return _ThresholdRun(self, as_generator(rng), prefix)


class _ThresholdRun(OracleRun):
    oracle: ThresholdOracle

    def _init_state(self) -> None:
        self.s = self.oracle.partial_sum(self.prefix)

    def _root(self) -> float:
        return float(self.oracle.tail(self.depth, self.s))

    def _estimate(self, value: Any) -> float:
        i = self.depth
        return float(self.oracle.tail(i + 1, self.s + int(self.oracle.w[i]) * int(value)))

    _exact = _estimate  # the analytic value on a full trajectory is the indicator itself

    def _candidates(self, m_max: int | None) -> list:
        p = self.process.p[self.depth]
        lo, hi = self.process.values
        return [v for v, q in ((lo, 1 - p), (hi, p)) if q > 0]

    def _push(self, value: Any) -> None:
        self.s += int(self.oracle.w[self.depth - 1]) * int(value)


def threshold_partial_expectation(
    n: int,
    weights: Sequence[float],
    bias: Sequence[float] | float,
    t: float,
    prefix: Sequence = (),
    values: tuple[int, int] = (0, 1),
    exact: bool = False,
) -> float | Fraction:
    """``Pr[sum_{j>i} w_j x_j >= t - sum_{j<=i} w_j v_j]`` over independent blocks."""
    process = BernoulliProcess(bias, n=n, values=values)
    return ThresholdOracle(process, weights=weights, t=t, exact=exact).value(tuple(prefix))


# ---------------------------------------------------------------------------
# Monte Carlo


def mc_partial_expectation(
    process: RandomProcess,
    f: MembershipOracle,
    prefix: Sequence,
    m_eval: int,
    rng: RngStream | np.random.Generator | int | None,
) -> float:
    """Mean of ``f`` over ``m_eval`` random completions; exactly ``m_eval`` queries."""
    if m_eval < 1:
        raise ParameterError("m_eval must be at least 1")
    rows = process.complete(tuple(prefix), m_eval, as_generator(rng))
    return float(np.mean(f.test_batch(rows)))


class MonteCarloOracle(PartialExpectationOracle):
    """Sampling oracle.

    Sample counts come from ``budget`` when given, otherwise from
    :func:`oracle_sample_counts` with the declared ``eps`` standing in for the
    root estimate, each capped at ``max_samples``.
    """

    mode = "mc"

    def __init__(
        self,
        process: RandomProcess,
        membership: MembershipOracle,
        budget: OracleBudget | None = None,
        gamma: float | None = None,
        tau: float = 0.0,
        eps: float | None = None,
        sizing: str = "paper",
        max_samples: int = DEFAULT_MAX_SAMPLES,
    ):
        super().__init__(process, membership)
        if budget is None:
            if gamma is None or eps is None:
                raise ParameterError("give either a budget or (gamma, eps) for sizing")
            raw = oracle_sample_counts(gamma, tau, eps, sizing)
            budget = OracleBudget(min(raw.m_eval, max_samples), min(raw.m_max, max_samples))
        self.budget = budget

    def start(self, rng=None, prefix: Sequence = ()) -> OracleRun:
        return _MonteCarloRun(self, as_generator(rng), prefix)


class _MonteCarloRun(OracleRun):
    oracle: MonteCarloOracle

    def _mean(self, prefix: Sequence) -> float:
        return mc_partial_expectation(self.process, self.oracle.membership, prefix, self.oracle.budget.m_eval, self.rng)

    def _root(self) -> float:
        if self.done:
            return float(bool(self.oracle.membership(tuple(self.prefix))))
        return self._mean(self.prefix)

    def _estimate(self, value: Any) -> float:
        return self._mean(self.prefix + [value])

    def _candidates(self, m_max: int | None) -> list:
        m = self.oracle.budget.m_max if m_max is None else m_max
        return self.process.sample_blocks(self.prefix, m, self.rng)


def approx_max_block(
    oracle: PartialExpectationOracle,
    prefix: Sequence,
    m_max: int | None = None,
    rng: RngStream | np.random.Generator | int | None = None,
) -> tuple[Any, float]:
    """Best sampled next block for ``prefix`` and its estimate, clamped up to the prefix estimate."""
    return oracle.start(rng, prefix).max_block(m_max)


def make_oracle(
    kind: str,
    process: RandomProcess,
    membership: MembershipOracle,
    budget: OracleBudget | None = None,
    **kwargs,
) -> PartialExpectationOracle:
    if kind == "exact":
        return ExactOracle(process, membership)
    if kind == "threshold":
        return ThresholdOracle(process, membership, exact=kwargs.get("exact", False))
    if kind == "mc":
        return MonteCarloOracle(process, membership, budget=budget, **kwargs)
    raise ParameterError(f"unknown oracle kind {kind!r}")


# ---------------------------------------------------------------------------
# auditing the promised conditions against an exact oracle


@dataclass
class ConditionAudit:
    """Outcome of checking a sampling oracle against exact values on random prefixes.

    ``accuracy_rate`` is the fraction of eligible prefixes (exact value at
    least ``e**-tau * eps_tilde``) whose log-estimate is within ``gamma``.
    ``overshoot_rate`` is the fraction of honest next blocks whose estimate
    beats the clamped maximum; ``overshoot_allowance`` is ``2 * gamma`` times
    the mean prefix estimate over the same draws.
    """

    gamma: float
    eligible: int
    accuracy_rate: float
    overshoot_draws: int
    overshoot_rate: float
    overshoot_allowance: float

    @property
    def accuracy_ok(self) -> bool:
        return self.eligible > 0 and self.accuracy_rate >= 1 - 2 * self.gamma

    @property
    def overshoot_ok(self) -> bool:
        return self.overshoot_rate <= self.overshoot_allowance

    @property
    def ok(self) -> bool:
        return self.accuracy_ok and self.overshoot_ok


def _random_prefix(process: RandomProcess, gen: np.random.Generator) -> tuple:
    depth = int(gen.integers(0, process.n))
    out: list = []
    for _ in range(depth):
        out.append(process.sample_block(out, gen))
    return tuple(out)


def audit_conditions(
    process: RandomProcess,
    membership: MembershipOracle,
    oracle: MonteCarloOracle,
    gamma: float,
    tau: float,
    rng: RngStream | np.random.Generator | int | None,
    prefixes: int = 1000,
    draws: int = 1000,
) -> ConditionAudit:
    """Compare ``oracle`` with exact enumeration on random prefixes of ``process``."""
    gen = as_generator(rng)
    exact = ExactOracle(process, membership)
    eps_tilde = oracle.start(gen).value
    floor = math.exp(-tau) * eps_tilde
    eligible = good = 0
    for _ in range(prefixes):
        prefix = _random_prefix(process, gen)
        truth = exact.value(prefix)
        if truth < floor or truth <= 0:
            continue
        eligible += 1
        est = oracle.start(gen, prefix).value
        good += est > 0 and abs(math.log(est) - math.log(truth)) <= gamma
    over = 0
    base = 0.0
    for _ in range(draws):
        prefix = _random_prefix(process, gen)
        run = oracle.start(gen, prefix)
        _, f_star = run.max_block()
        u = process.sample_block(list(prefix), gen)
        over += run.child(u) > f_star
        base += run.value
    return ConditionAudit(
        gamma=gamma,
        eligible=eligible,
        accuracy_rate=good / eligible if eligible else math.nan,
        overshoot_draws=draws,
        overshoot_rate=over / draws,
        overshoot_allowance=2 * gamma * base / draws,
    )
