"""Coin-tossing bias attacks and query-limited attacks on random half-spaces."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import (
    BernoulliProcess,
    MembershipOracle,
    ParameterError,
    RandomProcess,
    RngStream,
    as_generator,
    threshold_set,
)
from .harness import summarize
from .oracles import MonteCarloOracle, OracleBudget, PartialExpectationOracle
from .tamper import TamperParams, TamperTranscript, average_case_params, default_oracle, run_tampering


# ---------------------------------------------------------------------------
# coin tossing


@dataclass
class CoinTossProtocol:
    """``n`` parties send one message each (sampled by ``process``); ``output`` maps the transcript to a bit.

    ``sets`` optionally gives the membership oracles of ``{b = 0}`` and
    ``{b = 1}``; otherwise they are derived from ``output``.
    """

    n: int
    process: RandomProcess
    output: Callable[[Sequence], int]
    sets: tuple[MembershipOracle, MembershipOracle] | None = None
    name: str = "custom"

    def target_set(self, bit: int) -> MembershipOracle:
        if self.sets is not None:
            return self.sets[bit]
        return MembershipOracle(test=lambda x: int(self.output(x)) == bit, name=f"b={bit}")

    def run_honest(self, rng: RngStream | np.random.Generator) -> tuple[tuple, int]:
        t = self.process.sample_trajectory(rng)
        return t, int(self.output(t))


def majority_protocol(n: int) -> CoinTossProtocol:
    """Majority of ``n`` fair bits with party 1 breaking ties.

    ``b = [3 m_1 + 2 (m_2 + ... + m_n) >= n + 1]``, so ``Pr[b = 1] = 1/2`` exactly
    for every ``n``.
    """
    w = np.full(n, 2)
    w[0] = 3
    process = BernoulliProcess(0.5, n=n)
    ones = threshold_set(w, n + 1, name="b=1")
    # b = 0  <=>  w @ m <= n  <=>  (-w) @ m >= -n
    zeros = threshold_set(-w, -n, name="b=0")
    return CoinTossProtocol(n, process, lambda m: int(np.dot(w, np.asarray(m)) >= n + 1), (zeros, ones), "majority")


def constant_protocol(n: int, bit: int = 1) -> CoinTossProtocol:
    return CoinTossProtocol(n, BernoulliProcess(0.5, n=n), lambda m: bit, name=f"constant-{bit}")


@dataclass
class CoinTossResult:
    transcript: tuple
    corrupted: list[int]
    output: int
    tamper: TamperTranscript


def strong_adaptive_cointoss_attack(
    protocol: CoinTossProtocol,
    params: TamperParams,
    rng: RngStream | int,
    target: int = 1,
    oracle: PartialExpectationOracle | None = None,
) -> CoinTossResult:
    """Bias the protocol towards ``target`` by replacing messages after seeing them."""
    S = protocol.target_set(target)
    oracle = oracle or default_oracle(protocol.process, S)
    tr = run_tampering(protocol.process, S, oracle, params, rng)
    return CoinTossResult(tr.v, tr.corrupted, int(protocol.output(tr.v)), tr)


def cointoss_params(n: int, eps: float = 0.5, delta: float = 0.1, cap_const: float = 3.0) -> TamperParams:
    """Average-case parameters with a corruption cap of ``cap_const * sqrt(n ln(1/(eps*delta)))``."""
    base = average_case_params(n, eps, delta)
    return base.replace(k_cap=cap_const * math.sqrt(n * math.log(1 / (eps * delta))))


@dataclass
class BiasEstimate:
    rate: float
    low: float
    high: float
    successes: int
    trials: int


def measure_bias(
    protocol: CoinTossProtocol,
    attacker: Callable[[CoinTossProtocol, RngStream], int] | None,
    trials: int,
    rng: RngStream | int,
) -> BiasEstimate:
    """Frequency of ``b = 1`` over ``trials`` runs (attacked when ``attacker`` is given), with a Wilson interval."""
    if trials < 1:
        raise ParameterError("trials must be at least 1")
    stream = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    ones = 0
    for k in range(trials):
        s = stream.child("trial", k)
        ones += attacker(protocol, s) if attacker is not None else protocol.run_honest(s)[1]
    rate, (lo, hi) = summarize(ones, trials)
    return BiasEstimate(rate, lo, hi, ones, trials)


# ---------------------------------------------------------------------------
# half-spaces and query-limited attacks


@dataclass(frozen=True)
class HalfSpace:
    """``{z in {-1, 1}^n : a @ z <= 0}``."""

    a: np.ndarray

    @property
    def n(self) -> int:
        return self.a.size

    def margin(self, z: Sequence) -> int:
        return int(np.dot(self.a, np.asarray(z, dtype=np.int64)))

    def __contains__(self, z: Sequence) -> bool:
        return self.margin(z) <= 0

    def membership(self) -> MembershipOracle:
        a = self.a.astype(float)
        # a @ z <= 0  <=>  (-a) @ z >= 0
        return threshold_set(-a, 0.0, name="halfspace")


def random_halfspace(n: int, rng: RngStream | np.random.Generator | int | None) -> HalfSpace:
    gen = as_generator(rng)
    return HalfSpace(gen.choice(np.array([-1, 1], dtype=np.int64), size=n))


def sign_cube(n: int) -> BernoulliProcess:
    return BernoulliProcess(0.5, n=n, values=(-1, 1))


def flip_subsets(x: np.ndarray, r: int, m: int, gen: np.random.Generator) -> np.ndarray:
    """``m`` copies of the sign vector ``x`` with a uniformly random ``r``-subset negated in each."""
    n = x.size
    rows = np.tile(x, (m, 1))
    if r:
        idx = np.argpartition(gen.random((m, n)), r - 1, axis=1)[:, :r]
        rows[np.arange(m)[:, None], idx] *= -1
    return rows


@dataclass
class QueryAttackResult:
    success: bool
    hit: np.ndarray | None
    queries: int


def _first_hit(S: MembershipOracle, rows: np.ndarray, chunk: int) -> tuple[int | None, int]:
    used = 0
    for start in range(0, rows.shape[0], chunk):
        block = rows[start:start + chunk]
        hits = np.flatnonzero(S.test_batch(block))
        if hits.size:
            return start + int(hits[0]), used + int(hits[0]) + 1
        used += block.shape[0]
    return None, used


def iid_query_attack(
    x: Sequence[int],
    S: MembershipOracle,
    m: int,
    r: int,
    rng: RngStream | np.random.Generator | int | None,
    chunk: int = 250,
) -> QueryAttackResult:
    """Query ``x`` and then ``m`` independent radius-``r`` flips of it; stop at the first member of ``S``."""
    x = np.asarray(x, dtype=np.int64)
    if not 0 <= r <= x.size:
        raise ParameterError(f"radius must lie in [0, {x.size}]")
    gen = as_generator(rng)
    if S.test_batch(x[None])[0]:
        return QueryAttackResult(True, x, 1)
    rows = flip_subsets(x, r, m, gen)
    at, used = _first_hit(S, rows, chunk)
    return QueryAttackResult(at is not None, None if at is None else rows[at], used + 1)


def nonadaptive_attack(
    x: Sequence,
    S: MembershipOracle,
    list_generator: Callable[[np.ndarray, np.random.Generator], np.ndarray],
    rng: RngStream | np.random.Generator | int | None,
    chunk: int = 250,
) -> QueryAttackResult:
    """Build the whole query list from ``x`` and randomness, then query it in order."""
    gen = as_generator(rng)
    before = S.queries
    rows = np.atleast_2d(np.asarray(list_generator(np.asarray(x), gen)))
    if S.queries != before:
        raise RuntimeError("the query list generator touched the membership oracle")
    if rows.size == 0:
        return QueryAttackResult(False, None, 0)
    at, used = _first_hit(S, rows, chunk)
    return QueryAttackResult(at is not None, None if at is None else rows[at], used)


class QueryRecorder:
    """Attach to a :class:`MembershipOracle` to keep every queried point."""

    def __init__(self, S: MembershipOracle):
        self.rows: list[np.ndarray] = []
        S.listeners.append(self._record)

    def _record(self, rows: np.ndarray) -> None:
        self.rows.append(np.array(rows, copy=True))

    def all(self) -> np.ndarray:
        return np.concatenate(self.rows) if self.rows else np.empty((0, 0))


def margin_bucket(margin: int, n: int) -> str:
    s = math.sqrt(n)
    if margin <= 0:
        return "inside"
    if margin < s:
        return "(0,sqrt n)"
    if margin < 2 * s:
        return "[sqrt n,2 sqrt n)"
    return ">=2 sqrt n"


@dataclass
class LowerBoundTrial:
    margin: int
    bucket: str
    iid_success: bool
    iid_queries: int
    mucio_success: bool
    mucio_budget: float
    mucio_queries: int
    outside_output_ball: float
    outside_radius_ball: float


@dataclass
class LowerBoundReport:
    n: int
    radius: int
    queries: int
    trials: list[LowerBoundTrial] = field(default_factory=list)

    def rate(self, attr: str, bucket: str | None = None) -> tuple[float, int]:
        rows = [t for t in self.trials if bucket is None or t.bucket == bucket]
        if not rows:
            return math.nan, 0
        return float(np.mean([getattr(t, attr) for t in rows])), len(rows)

    def summary(self) -> dict:
        out = {
            "n": self.n,
            "radius": self.radius,
            "queries": self.queries,
            "trials": len(self.trials),
            "iid_success": self.rate("iid_success")[0],
            "mucio_success": self.rate("mucio_success")[0],
            "mucio_budget_mean": self.rate("mucio_budget")[0],
            "min_outside_output_ball": min((t.outside_output_ball for t in self.trials), default=math.nan),
            "buckets": {},
        }
        for b in ("inside", "(0,sqrt n)", "[sqrt n,2 sqrt n)", ">=2 sqrt n"):
            iid, k = self.rate("iid_success", b)
            out["buckets"][b] = {"trials": k, "iid_success": iid, "mucio_success": self.rate("mucio_success", b)[0]}
        return out


def lowerbound_trial(
    n: int,
    radius: int,
    m: int,
    rng: RngStream,
    eps: float = 0.5,
    delta: float = 0.1,
    cap_const: float = 3.0,
    budget: OracleBudget = OracleBudget(500, 8),
) -> LowerBoundTrial:
    H = random_halfspace(n, rng.child("halfspace"))
    process = sign_cube(n)
    x = np.asarray(process.sample_trajectory(rng.child("x")), dtype=np.int64)
    margin = H.margin(x)

    iid = iid_query_attack(x, H.membership(), m, radius, rng.child("iid"))

    S = H.membership()
    rec = QueryRecorder(S)
    params = cointoss_params(n, eps, delta, cap_const)
    tr = run_tampering(process, S, MonteCarloOracle(process, S, budget=budget), params, rng.child("mucio"), external_u=x.tolist())
    queried = rec.all()
    dist = np.count_nonzero(queried != x, axis=1)
    out_radius = int(np.count_nonzero(np.asarray(tr.v) != x))
    return LowerBoundTrial(
        margin=margin,
        bucket=margin_bucket(margin, n),
        iid_success=iid.success,
        iid_queries=iid.queries,
        mucio_success=tr.success,
        mucio_budget=tr.budget_used,
        mucio_queries=tr.queries,
        outside_output_ball=float(np.mean(dist > out_radius)),
        outside_radius_ball=float(np.mean(dist > radius)),
    )


def lowerbound_experiment(
    n: int,
    radius_exponent: float,
    m: int,
    trials: int,
    rng: RngStream | int,
    **kwargs,
) -> LowerBoundReport:
    """Fresh half-space and start point per trial; i.i.d. radius-``n**exp`` attack against capped MUCIO."""
    stream = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    radius = min(n, int(round(n**radius_exponent)))
    report = LowerBoundReport(n, radius, m)
    for k in range(trials):
        report.trials.append(lowerbound_trial(n, radius, m, stream.child("trial", k), **kwargs))
    return report
