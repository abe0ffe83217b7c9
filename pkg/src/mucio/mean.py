"""Moving a random point to a function value near the mean."""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import BernoulliProcess, MembershipOracle, ParameterError, ProductProcess, RngStream, as_generator
from .oracles import MonteCarloOracle, OracleBudget, PartialExpectationOracle, ThresholdOracle
from .tamper import TamperTranscript, average_case_params, run_tampering, worst_case_params


class RealFunctionOracle:
    """Counting access to a real function with per-coordinate sensitivities.

    ``linear`` optionally declares ``f(x) = linear @ x``, which lets threshold
    sets of ``f`` use the analytic oracle.
    """

    def __init__(
        self,
        fn: Callable[[Sequence], float] | None,
        lipschitz_weights: Sequence[float],
        batch: Callable[[np.ndarray], np.ndarray] | None = None,
        linear: Sequence[float] | None = None,
    ):
        self.alpha = np.asarray(lipschitz_weights, dtype=float)
        if np.any(self.alpha < 0):
            raise ParameterError("sensitivities must be non-negative")
        self.linear = None if linear is None else np.asarray(linear, dtype=float)
        if fn is None and batch is None:
            if self.linear is None:
                raise ParameterError("need fn, batch or linear")
            batch = lambda rows: np.asarray(rows, dtype=float) @ self.linear
        self._fn = fn
        self._batch = batch
        self._lock = threading.Lock()
        self._count = 0

    @classmethod
    def from_linear(cls, weights: Sequence[float], span: float = 1.0) -> "RealFunctionOracle":
        """``f(x) = w @ x`` for blocks whose values span an interval of length ``span``."""
        w = np.asarray(weights, dtype=float)
        return cls(None, np.abs(w) * span, linear=w)

    @classmethod
    def constant(cls, c: float, n: int) -> "RealFunctionOracle":
        return cls(lambda x: c, np.zeros(n), batch=lambda rows: np.full(len(rows), float(c)))

    @property
    def n(self) -> int:
        return self.alpha.size

    @property
    def a(self) -> float:
        return float(np.linalg.norm(self.alpha))

    @property
    def queries(self) -> int:
        return self._count

    def _add(self, k: int) -> None:
        with self._lock:
            self._count += k

    def __call__(self, x: Sequence) -> float:
        self._add(1)
        if self._fn is not None:
            return float(self._fn(x))
        return float(self._batch(np.asarray([x]))[0])

    def evaluate_batch(self, rows: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows)
        self._add(rows.shape[0])
        if self._batch is not None:
            return np.asarray(self._batch(rows), dtype=float)
        return np.array([float(self._fn(tuple(r.tolist()))) for r in rows])

    def below(self, c: float) -> MembershipOracle:
        """Membership oracle for ``{x : f(x) <= c}`` (queries are counted on both oracles)."""
        m = MembershipOracle(
            test=lambda x: self(x) <= c,
            batch=lambda rows: self.evaluate_batch(rows) <= c,
            name=f"f<={c:g}",
        )
        if self.linear is not None:
            # f <= c  <=>  (-w) @ x >= -c
            m.weights = -self.linear
            m.threshold = -float(c)
        return m


def mean_sample_count(n: int, eps: float, delta: float) -> int:
    """``ceil(2 n ln(20/delta) / eps**2)`` samples for the mean estimate."""
    if not (eps > 0 and 0 < delta < 1):
        raise ParameterError("need eps > 0 and delta in (0, 1)")
    return math.ceil(2 * n * math.log(20 / delta) / eps**2)


def estimate_mean(
    f: RealFunctionOracle,
    process: ProductProcess,
    ell: int,
    rng: RngStream | np.random.Generator | int | None,
    chunk: int = 4096,
) -> float:
    """Average of ``f`` over ``ell`` independent draws from ``process``."""
    if ell < 1:
        raise ParameterError("ell must be at least 1")
    gen = as_generator(rng)
    total, done = 0.0, 0
    while done < ell:
        m = min(chunk, ell - done)
        total += float(f.evaluate_batch(process.complete((), m, gen)).sum())
        done += m
    return total / ell


def mcdiarmid_eps(eps: float) -> float:
    """Measure lower bound ``1 - exp(-2 eps**2)`` for ``{f <= E f + eps * a}``."""
    return -math.expm1(-2 * eps**2)


@dataclass
class McDiarmidResult:
    point: tuple
    eta_estimate: float
    threshold: float
    eps_fed: float
    transcript: TamperTranscript | None
    in_set: bool

    @property
    def budget(self) -> float:
        return 0.0 if self.transcript is None else self.transcript.budget_used


def mcdiarmid_map(
    x: Sequence,
    f: RealFunctionOracle,
    process: ProductProcess,
    eps: float,
    delta: float,
    rng: RngStream | int,
    ell: int | None = None,
    oracle: PartialExpectationOracle | None = None,
    budget: OracleBudget | None = None,
    regime: str = "average",
) -> McDiarmidResult:
    """Move ``x`` into ``{f <= eta' + eps*a - eps*a/10}`` where ``eta'`` estimates the mean of ``f``."""
    stream = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    if not process.is_product:
        raise ParameterError("needs a product measure")
    if not 0 < eps < 1 or not 0 < delta < 1:
        raise ParameterError("eps and delta must lie in (0, 1)")
    x = tuple(x)
    a = f.a
    if a == 0:
        return McDiarmidResult(x, f(x), f(x), 0.0, None, True)
    ell = ell or mean_sample_count(process.n, eps, delta)
    eta = estimate_mean(f, process, ell, stream.child("mean"))
    c = eta + eps * a - a * eps / 10
    S = f.below(c)
    eps_fed = mcdiarmid_eps(eps)
    if oracle is None:
        if isinstance(process, BernoulliProcess) and f.linear is not None and np.all(f.linear == np.round(f.linear)):
            oracle = ThresholdOracle(process, S)
        else:
            oracle = MonteCarloOracle(process, S, budget=budget or OracleBudget(400, 8))
    params = average_case_params(process.n, eps_fed, delta, f.alpha * math.sqrt(process.n) / a)
    if regime == "worst":
        params = worst_case_params(process.n, eps_fed, delta, params.alpha)
    tr = run_tampering(process, S, oracle, params, stream.child("tamper"), external_u=x)
    return McDiarmidResult(tr.v, eta, c, eps_fed, tr, tr.success)


@dataclass
class RefineResult:
    point: tuple
    reverts: int
    in_band: bool
    values: list[float]


def refine_to_band(
    x: Sequence, y: Sequence, f: RealFunctionOracle, band: tuple[float, float]
) -> RefineResult:
    """Revert coordinates of ``y`` back to ``x`` one at a time until ``f`` enters ``band``.

    Needs unit sensitivities and a band at least one unit wide. If the walk
    never enters the band, ``y`` is returned with ``in_band=False``.
    """
    lo, hi = band
    if hi - lo < 1:
        raise ParameterError("the band must be at least 1 wide")
    if not np.allclose(f.alpha, 1.0):
        raise ParameterError("refinement needs unit sensitivities")
    x, y = tuple(x), tuple(y)
    cur = list(y)
    val = f(cur)
    values = [val]
    if lo <= val <= hi:
        return RefineResult(y, 0, True, values)
    diff = [i for i in range(len(x)) if x[i] != y[i]]
    for k, i in enumerate(diff, start=1):
        cur[i] = x[i]
        val = f(cur)
        values.append(val)
        if lo <= val <= hi:
            return RefineResult(tuple(cur), k, True, values)
    return RefineResult(y, 0, False, values)
