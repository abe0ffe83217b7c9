"""Online tampering: the additive rule, the multiplicative rule and its abort variant."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .core import (
    BernoulliProcess,
    MembershipOracle,
    ParameterError,
    ProductProcess,
    RandomProcess,
    RngStream,
    _same,
    as_generator,
    blocks_differ,
    weighted_hamming,
)
from .oracles import (
    ExactOracle,
    MonteCarloOracle,
    OracleBudget,
    OracleRun,
    PartialExpectationOracle,
    ThresholdOracle,
)

MODES = ("additive", "mucio", "mucio-abort")


class Case(enum.IntEnum):
    ABORT = 0
    RAISE = 1  # a candidate lifts the estimate enough
    RESCUE = 2  # the honest block would sink the estimate
    KEEP = 3

    @property
    def label(self) -> str:
        return f"case{int(self)}"


@dataclass(frozen=True)
class StepDecision:
    case: Case
    value: Any
    f_prev: float
    f_star: float
    f_u: float

    @property
    def tampers(self) -> bool:
        return self.case in (Case.RAISE, Case.RESCUE)


@dataclass(frozen=True)
class TamperParams:
    """Attack parameters.

    ``lam`` is the per-unit-weight step threshold, ``tau`` the abort depth and
    ``gamma`` the oracle accuracy. ``eps`` and ``delta`` are the declared set
    measure and failure tolerance. ``k_cap`` optionally caps the weighted
    budget; ``alpha`` holds the block weights (``None`` means all ones).
    """

    lam: float
    tau: float = 0.0
    gamma: float = 0.0
    eps: float = 0.5
    delta: float = 0.1
    k_cap: float | None = None
    mode: str = "mucio"
    alpha: tuple | None = None
    case0_first: bool = False

    def __post_init__(self):
        if not self.lam > 0:
            raise ParameterError(f"lam must be positive, got {self.lam}")
        if self.tau < 0:
            raise ParameterError(f"tau must be non-negative, got {self.tau}")
        if not (0 < self.eps < 1 and 0 < self.delta < 1):
            raise ParameterError("eps and delta must lie in (0, 1)")
        if self.k_cap is not None and not self.k_cap > 0:
            raise ParameterError("k_cap must be positive when set")
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}")
        if self.alpha is not None:
            object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))

    def weights(self, n: int) -> np.ndarray:
        if self.alpha is None:
            return np.ones(n)
        if len(self.alpha) != n:
            raise ParameterError(f"alpha has length {len(self.alpha)}, process has {n} blocks")
        return np.asarray(self.alpha)

    def replace(self, **changes) -> "TamperParams":
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields.update(changes)
        return TamperParams(**fields)


@dataclass
class TamperTranscript:
    u: tuple
    v: tuple
    tampered: np.ndarray
    cases: list[Case]
    decisions: list[StepDecision]
    budget_used: float
    aborted: bool
    capped: bool
    success: bool
    queries: int
    eps_tilde: float
    trace: list[float] = field(default_factory=list)

    @property
    def case_counts(self) -> dict[str, int]:
        counts = {c.label: 0 for c in Case}
        for c in self.cases:
            counts[c.label] += 1
        return counts

    @property
    def corrupted(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.tampered)]


# ---------------------------------------------------------------------------
# step rules


def additive_step(run: OracleRun, u: Any, lam: float) -> StepDecision:
    """Tamper when some block adds ``lam`` to the estimate or ``u`` would subtract it."""
    f_prev = run.value
    best, f_star = run.max_block()
    if f_star >= f_prev + lam:
        return StepDecision(Case.RAISE, best, f_prev, f_star, math.nan)
    f_u = run.child(u)
    if f_u <= f_prev - lam:
        return StepDecision(Case.RESCUE, best, f_prev, f_star, f_u)
    return StepDecision(Case.KEEP, u, f_prev, f_star, f_u)


def mucio_step(run: OracleRun, u: Any, lam: float, alpha_i: float = 1.0) -> StepDecision:
    """Tamper when some block multiplies the estimate by ``e**(lam*alpha_i)``
    or ``u`` would divide it by the same factor."""
    f_prev = run.value
    grow = math.exp(lam * alpha_i)
    best, f_star = run.max_block()
    if f_star >= grow * f_prev:
        return StepDecision(Case.RAISE, best, f_prev, f_star, math.nan)
    f_u = run.child(u)
    if f_u <= f_prev / grow:
        return StepDecision(Case.RESCUE, best, f_prev, f_star, f_u)
    return StepDecision(Case.KEEP, u, f_prev, f_star, f_u)


def mucio_abort_step(
    run: OracleRun,
    u: Any,
    lam: float,
    alpha_i: float,
    tau: float,
    eps_tilde: float,
    aborted: bool = False,
    case0_first: bool = False,
) -> StepDecision:
    """Multiplicative rule that gives up once the honest child falls below ``e**-tau * eps_tilde``.

    By default the abort test runs only when neither tampering case fires;
    ``case0_first`` tests it before anything else.
    """
    if aborted:
        return StepDecision(Case.ABORT, u, math.nan, math.nan, math.nan)
    floor = math.exp(-tau) * eps_tilde
    if case0_first:
        f_u = run.child(u)
        if f_u <= floor:
            return StepDecision(Case.ABORT, u, run.value, math.nan, f_u)
    d = mucio_step(run, u, lam, alpha_i)
    if d.case is Case.KEEP and d.f_u <= floor:
        return StepDecision(Case.ABORT, u, d.f_prev, d.f_star, d.f_u)
    return d


# ---------------------------------------------------------------------------
# engine


def _budget_slack(k_cap: float) -> float:
    return 1e-12 * max(1.0, k_cap)


def run_tampering(
    process: RandomProcess,
    f: MembershipOracle,
    oracle: PartialExpectationOracle,
    params: TamperParams,
    rng: RngStream | int,
    external_u: Sequence | None = None,
) -> TamperTranscript:
    """Run one online tampering attack and return its transcript.

    Honest blocks come from ``external_u`` (product processes only) or are
    sampled from ``process`` given the tampered prefix. The membership query
    count in the transcript covers everything ``f`` answered during the run,
    including the final success check.
    """
    n = process.n
    alpha = params.weights(n)
    stream = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    honest = stream.child("honest").generator()
    q0 = f.queries

    if external_u is not None:
        if not process.is_product:
            raise ParameterError("an external honest trajectory needs a product process")
        if len(external_u) != n:
            raise ParameterError(f"external trajectory has length {len(external_u)}, expected {n}")
        pre_u = list(external_u)
    elif process.is_product and isinstance(process, ProductProcess):
        pre_u = process.sample_suffix(0, 1, honest)[0].tolist()
    else:
        pre_u = None

    run = oracle.start(stream.child("oracle").generator())
    eps_tilde = run.value
    u: list = []
    v: list = []
    decisions: list[StepDecision] = []
    trace = [eps_tilde]
    budget = 0.0
    aborted = capped = False

    if eps_tilde <= 0:
        u = pre_u if pre_u is not None else list(process.sample_trajectory(honest))
        v = list(u)
        decisions = [StepDecision(Case.KEEP, x, 0.0, 0.0, math.nan) for x in u]
        success = bool(f(tuple(v)))
        return TamperTranscript(
            tuple(u), tuple(v), np.zeros(n, dtype=bool), [d.case for d in decisions], decisions,
            0.0, False, False, success, f.queries - q0, eps_tilde, trace,
        )

    for i in range(n):
        ui = pre_u[i] if pre_u is not None else process.sample_block(v, honest)
        u.append(ui)
        if aborted:
            d = StepDecision(Case.ABORT, ui, math.nan, math.nan, math.nan)
        elif capped:
            d = StepDecision(Case.KEEP, ui, math.nan, math.nan, math.nan)
        elif params.mode == "additive":
            d = additive_step(run, ui, params.lam)
        elif params.mode == "mucio":
            d = mucio_step(run, ui, params.lam, alpha[i])
        else:
            d = mucio_abort_step(run, ui, params.lam, alpha[i], params.tau, eps_tilde, case0_first=params.case0_first)

        if d.tampers and not _same(d.value, ui) and params.k_cap is not None:
            if budget + alpha[i] > params.k_cap + _budget_slack(params.k_cap):
                capped = True
                d = StepDecision(Case.KEEP, ui, d.f_prev, d.f_star, d.f_u)

        if d.case is Case.ABORT:
            aborted = True
        if aborted or capped:
            run.skip(d.value)
            trace.append(math.nan)
        else:
            trace.append(run.advance(d.value, d.f_star if d.tampers else None))
        if d.tampers and not _same(d.value, ui):
            budget += alpha[i]
        v.append(d.value)
        decisions.append(d)

    tampered = blocks_differ(u, v)
    success = bool(f(tuple(v)))
    return TamperTranscript(
        u=tuple(u),
        v=tuple(v),
        tampered=tampered,
        cases=[d.case for d in decisions],
        decisions=decisions,
        budget_used=float(alpha[tampered].sum()),
        aborted=aborted,
        capped=capped,
        success=success,
        queries=f.queries - q0,
        eps_tilde=eps_tilde,
        trace=trace,
    )


# ---------------------------------------------------------------------------
# parameter instantiation


def _tau(n: int, eps: float, delta: float) -> float:
    radicand = 4.0 * math.log(delta / (2 * n)) * math.log(eps)
    if not radicand > 0:
        raise ParameterError(f"abort-depth radicand is {radicand:.3g}; need eps, delta in (0, 1) and delta < 2n")
    return math.log(1.0 / eps) + math.sqrt(radicand)


def _check(n: int, eps: float, delta: float) -> None:
    if n < 1:
        raise ParameterError("n must be positive")
    if not (0 < eps < 1 and 0 < delta < 1):
        raise ParameterError(f"eps and delta must lie in (0, 1), got eps={eps}, delta={delta}")


def average_case_params(n: int, eps: float, delta: float, alpha: Sequence[float] | None = None) -> TamperParams:
    """Average-budget instantiation with abort."""
    _check(n, eps, delta)
    return TamperParams(
        lam=math.sqrt(2 * math.log(1 / eps) / n),
        tau=_tau(n, eps, delta),
        gamma=delta / (24 * n**2),
        eps=eps,
        delta=delta,
        mode="mucio-abort",
        alpha=alpha,
    )


def worst_case_k(n: int, eps: float, delta: float) -> float:
    radicand = 2 * n * math.log(delta / 8) * math.log(eps / 2)
    if not radicand > 0:
        raise ParameterError(f"budget-cap radicand is {radicand:.3g}")
    return math.sqrt(radicand)


def worst_case_params(n: int, eps: float, delta: float, alpha: Sequence[float] | None = None) -> TamperParams:
    """Hard-capped instantiation: ``k = sqrt(2n ln(delta/8) ln(eps/2))``, ``lam = k / 2n``."""
    _check(n, eps, delta)
    k = worst_case_k(n, eps, delta)
    return TamperParams(
        lam=k / (2 * n),
        tau=_tau(n, eps, delta),
        gamma=min(delta / (24 * n**2), eps / (4 * n)),
        eps=eps,
        delta=delta,
        k_cap=k,
        mode="mucio-abort",
        alpha=alpha,
    )


def default_oracle(
    process: RandomProcess, S: MembershipOracle, budget: OracleBudget | None = None
) -> PartialExpectationOracle:
    """Analytic when ``S`` is a threshold set over independent bits, exact when small, else sampling."""
    if isinstance(process, BernoulliProcess) and hasattr(S, "weights"):
        try:
            return ThresholdOracle(process, S)
        except ParameterError:
            pass
    if process.is_finite and process.n <= 16:
        return ExactOracle(process, S)
    return MonteCarloOracle(process, S, budget=budget or OracleBudget(400, 8))


def find_close_point(
    process: RandomProcess,
    S: MembershipOracle,
    eps: float,
    delta: float,
    x: Sequence,
    rng: RngStream | int,
    oracle: PartialExpectationOracle | None = None,
    regime: str = "average",
    alpha: Sequence[float] | None = None,
    return_transcript: bool = False,
):
    """Map ``x`` to a nearby point that lands in ``S`` with probability about ``1 - delta``."""
    if not process.is_product:
        raise ParameterError("find_close_point needs a product measure")
    if process.is_finite:
        for i, xi in enumerate(x):
            if not process.in_support(list(x[:i]), xi):
                raise ParameterError(f"x[{i}]={xi!r} is outside the support")
    if regime == "average":
        params = average_case_params(process.n, eps, delta, alpha)
    elif regime == "worst":
        params = worst_case_params(process.n, eps, delta, alpha)
    else:
        raise ParameterError(f"unknown regime {regime!r}")
    oracle = oracle or default_oracle(process, S)
    tr = run_tampering(process, S, oracle, params, rng, external_u=x)
    return tr if return_transcript else tr.v


# ---------------------------------------------------------------------------
# audits


def check_potential(tr: TamperTranscript, params: TamperParams, rtol: float = 1e-12) -> list[str]:
    """Per-step potential rules; returns a list of violation messages (empty when clean).

    The raise/rescue rules are skipped on the last block, whose estimate is the
    exact indicator rather than the stored clamp.
    """
    problems = []
    n = len(tr.v)
    alpha = params.weights(n)
    for i, d in enumerate(tr.decisions):
        before, after = tr.trace[i], tr.trace[i + 1]
        if math.isnan(after) or math.isnan(before):
            continue
        last = i == n - 1
        if params.mode == "additive":
            continue
        grow = math.exp(params.lam * alpha[i])
        if d.case is Case.RAISE and not last and after < grow * before * (1 - rtol):
            problems.append(f"block {i}: raise step ended at {after} < {grow * before}")
        elif d.case is Case.RESCUE and not last and after < before * (1 - rtol):
            problems.append(f"block {i}: rescue step lowered the estimate {before} -> {after}")
        elif d.case is Case.KEEP and not after > before / grow:
            problems.append(f"block {i}: kept block sank the estimate {before} -> {after}")
    return problems


def check_validity(tr: TamperTranscript, process: RandomProcess) -> list[str]:
    """Every output block lies in the support of its block given the tampered prefix."""
    if not process.is_finite:
        return []
    problems = []
    for i, vi in enumerate(tr.v):
        if not process.in_support(list(tr.v[:i]), vi):
            problems.append(f"block {i}: {vi!r} outside the support")
    return problems


def check_transcript(tr: TamperTranscript, params: TamperParams) -> list[str]:
    """Bookkeeping invariants: budget sum, tamper/case agreement, nothing after an abort."""
    problems = []
    alpha = params.weights(len(tr.u))
    expect = weighted_hamming(tr.u, tr.v, alpha)
    if not math.isclose(expect, tr.budget_used, rel_tol=1e-9, abs_tol=1e-12):
        problems.append(f"budget {tr.budget_used} != weighted distance {expect}")
    seen_abort = False
    for i, (t, c) in enumerate(zip(tr.tampered, tr.cases)):
        if t and c not in (Case.RAISE, Case.RESCUE):
            problems.append(f"block {i}: tampered under {c.label}")
        if seen_abort and (t or c is not Case.ABORT):
            problems.append(f"block {i}: activity after abort")
        seen_abort |= c is Case.ABORT
    if params.k_cap is not None and tr.budget_used > params.k_cap + _budget_slack(params.k_cap):
        problems.append(f"budget {tr.budget_used} exceeds cap {params.k_cap}")
    return problems
