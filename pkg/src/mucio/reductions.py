"""Transporting the cube attack to Gaussian space and the sphere.

The cube embedding works at a reference scale ``SIGMA_REF``: a coordinate
``x`` is rounded to a lattice index ``a`` in ``0..n`` whose cell has width
``CELL = 2 * SIGMA_REF / sqrt(n)``, and block ``i`` of the cube point gets
exactly ``a`` ones. The way back draws ``x`` from the reference Gaussian
restricted to the cell of the block's ones count. Callers working at another
isotropic scale ``sigma`` pass it and coordinates are rescaled on the way in
and out.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from scipy import special, stats

from .core import (
    BernoulliProcess,
    GaussianProcess,
    MembershipOracle,
    ParameterError,
    RngStream,
    hash_rows,
    keyed_uniforms,
)
from .oracles import MonteCarloOracle, OracleBudget
from .tamper import TamperParams, TamperTranscript, average_case_params, run_tampering, worst_case_params

SIGMA_REF = 0.25


@dataclass(frozen=True)
class MetricProbabilitySpace:
    name: str
    metric: Callable[[np.ndarray, np.ndarray], float]
    sampler: Callable[[np.random.Generator], np.ndarray]

    def check_triangle(self, rng: np.random.Generator, trials: int = 100, tol: float = 1e-9) -> bool:
        for _ in range(trials):
            x, y, z = self.sampler(rng), self.sampler(rng), self.sampler(rng)
            d = self.metric
            if d(x, x) != 0 or not math.isclose(d(x, y), d(y, x), rel_tol=1e-12):
                return False
            if d(x, z) > d(x, y) + d(y, z) + tol:
                return False
        return True


def l1(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.abs(np.asarray(x, float) - np.asarray(y, float)).sum())


def l2(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(x, float) - np.asarray(y, float)))


def hamming(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.count_nonzero(np.asarray(x) != np.asarray(y)))


@dataclass(frozen=True)
class CCReduction:
    """Randomized maps ``f: space1 -> space2`` and ``g: space2 -> space1``.

    ``g`` is driven by explicit uniforms, ``g(rows, U)`` with ``U`` of shape
    ``(len(rows), g_dim)``, so that keyed draws make membership in the pulled
    back set a pure function of the point. ``key(rows)`` returns the part of a
    row ``g`` actually reads (defaults to the row itself); when ``g_stat`` is
    set, ``g(rows, U) == g_stat(key(rows), U)`` and the pullback reuses the key.
    """

    f: Callable[[np.ndarray, np.random.Generator], np.ndarray]
    g: Callable[[np.ndarray, np.ndarray], np.ndarray]
    g_dim: int
    alpha: float
    b: float
    w: float
    space1: MetricProbabilitySpace | None = None
    space2: MetricProbabilitySpace | None = None
    key: Callable[[np.ndarray], np.ndarray] | None = None
    g_stat: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None

    def g_sample(self, rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        rows = np.atleast_2d(rows)
        return self.g(rows, rng.random((rows.shape[0], self.g_dim)))

    def pullback(self, S: MembershipOracle, m_g: int, salt: int = 0) -> MembershipOracle:
        """Majority-vote approximation of ``{y : Pr[g(y) in S] >= 1/2}``.

        Each row gets ``m_g`` keyed draws of ``g``; ties count as members.
        """
        if m_g < 1:
            raise ParameterError("m_g must be positive")
        keyfn = self.key or (lambda rows: rows)

        def batch(rows: np.ndarray) -> np.ndarray:
            rows = np.atleast_2d(rows)
            stat = keyfn(rows)
            U = keyed_uniforms(hash_rows(stat, salt), m_g * self.g_dim).reshape(rows.shape[0], m_g, self.g_dim)
            if self.g_stat is not None:
                pts = self.g_stat(np.repeat(stat, m_g, axis=0), U.reshape(-1, self.g_dim))
            else:
                pts = self.g(np.repeat(rows, m_g, axis=0), U.reshape(-1, self.g_dim))
            votes = S.test_batch(pts).reshape(rows.shape[0], m_g).sum(axis=1)
            return 2 * votes >= m_g

        return MembershipOracle(batch=batch, name=f"pullback({S.name})")


def identity_reduction(space: MetricProbabilitySpace | None = None) -> CCReduction:
    return CCReduction(
        f=lambda x, rng: np.asarray(x).copy(),
        g=lambda rows, U: np.asarray(rows).copy(),
        g_dim=1,
        alpha=0.0,
        b=0.0,
        w=1.0,
        space1=space,
        space2=space,
    )


# ---------------------------------------------------------------------------
# Gaussian <-> cube


def cell_width(n: int) -> float:
    return 2 * SIGMA_REF / math.sqrt(n)


def _check_even(n: int) -> None:
    if n < 2 or n % 2:
        raise ParameterError(f"the cube embedding needs an even dimension, got {n}")


def lattice_index(x: np.ndarray, n: int) -> np.ndarray:
    """Nearest lattice index ``a`` (possibly outside ``0..n``) for reference-scale coordinates."""
    return np.floor(np.asarray(x, float) / cell_width(n) + n / 2 + 0.5).astype(np.int64)


def cell_bounds(a: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    w = cell_width(n)
    a = np.asarray(a, float)
    return (a - n / 2 - 0.5) * w, (a - n / 2 + 0.5) * w


def in_range(x: np.ndarray, sigma: float = SIGMA_REF) -> bool:
    x = np.asarray(x, float) * (SIGMA_REF / sigma)
    a = lattice_index(x, x.size)
    return bool(np.all((a >= 0) & (a <= x.size)))


def gauss_to_cube(x: Sequence[float], rng: RngStream | np.random.Generator, sigma: float = SIGMA_REF) -> np.ndarray:
    """Embed ``x`` (dimension ``n``) into ``{0,1}^(n*n)``.

    Block ``i`` has ``a_i`` ones at uniformly random positions. Points whose
    lattice index leaves ``0..n`` map to the all-zero vector.
    """
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    x = np.asarray(x, float) * (SIGMA_REF / sigma)
    n = x.size
    _check_even(n)
    a = lattice_index(x, n)
    out = np.zeros((n, n), dtype=np.int8)
    if np.any((a < 0) | (a > n)):
        return out.ravel()
    ranks = np.argsort(gen.random((n, n)), axis=1)
    out[ranks < a[:, None]] = 1
    return out.ravel()


def block_counts(rows: np.ndarray, n: int) -> np.ndarray:
    rows = np.atleast_2d(rows)
    if rows.dtype == np.int8:
        # int8 rows sum exactly in int16 for n <= 32767
        return rows.reshape(rows.shape[0], n, n).sum(axis=2, dtype=np.int16).astype(np.intp)
    return rows.reshape(rows.shape[0], n, n).sum(axis=2).astype(np.intp)


@functools.lru_cache(maxsize=64)
def _cell_table(n: int) -> tuple[np.ndarray, ...]:
    """Per lattice index: reflection flag, sampling bounds and their normal CDF values."""
    lo, hi = cell_bounds(np.arange(n + 1), n)
    flip = (lo + hi) > 0
    a = np.where(flip, -hi, lo) / SIGMA_REF
    b = np.where(flip, -lo, hi) / SIGMA_REF
    return flip, a, b, special.ndtr(a), special.ndtr(b)


def counts_to_gauss(counts: np.ndarray, u: np.ndarray, n: int) -> np.ndarray:
    """Reference-scale Gaussian draws restricted to the cells of ``counts``, driven by uniforms ``u``."""
    # cells right of the origin are sampled reflected, where ndtr keeps relative precision;
    # reflection turns [lo, hi) into (-hi, -lo], hence the nudge off the left end
    flip, a, b, pa, pb = (t[counts] for t in _cell_table(n))
    z = special.ndtri(pa + u * (pb - pa))
    z = np.clip(z, a, np.nextafter(b, -np.inf))
    z = np.where(flip & (z == a), np.nextafter(a, np.inf), z)
    return SIGMA_REF * np.where(flip, -z, z)


def cube_to_gauss(y: Sequence[int], rng: RngStream | np.random.Generator, sigma: float = SIGMA_REF) -> np.ndarray:
    """Inverse map: each block's ones count picks a cell, then a Gaussian draw inside it."""
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    y = np.asarray(y)
    n = math.isqrt(y.size)
    if n * n != y.size:
        raise ParameterError(f"cube dimension {y.size} is not a perfect square")
    counts = block_counts(y, n)[0]
    return counts_to_gauss(counts, gen.random(n), n) * (sigma / SIGMA_REF)


def gauss_cube_reduction(n: int, sigma: float = SIGMA_REF) -> CCReduction:
    """The Gaussian/cube pair at scale ``sigma``; ``w`` and ``b`` are in units of ``sigma / SIGMA_REF``."""
    _check_even(n)
    scale = sigma / SIGMA_REF
    return CCReduction(
        f=lambda x, rng: gauss_to_cube(x, rng, sigma),
        g=lambda rows, U: counts_to_gauss(block_counts(rows, n), U, n) * scale,
        g_dim=n,
        alpha=0.0,
        b=scale * math.sqrt(n) / 2,
        w=scale / math.sqrt(n),
        space1=MetricProbabilitySpace("gauss-l1", l1, lambda r: sigma * r.standard_normal(n)),
        space2=MetricProbabilitySpace("cube", hamming, lambda r: r.integers(0, 2, n * n, dtype=np.int8)),
        key=lambda rows: block_counts(rows, n),
        g_stat=lambda counts, U: counts_to_gauss(counts, U, n) * scale,
    )


# ---------------------------------------------------------------------------
# attacks


@dataclass
class AttackResult:
    point: np.ndarray
    success: bool
    budget: float
    displacement: float
    queries: int
    in_range: bool = True
    aborted: bool = False
    capped: bool = False
    extra: dict = field(default_factory=dict)


def lift_attack(
    red: CCReduction,
    inner_attack: Callable[[MembershipOracle, np.ndarray, RngStream], TamperTranscript],
    S: MembershipOracle,
    x1: np.ndarray,
    m_g: int,
    rng: RngStream,
    draws: int | None = None,
) -> tuple[np.ndarray, TamperTranscript]:
    """Move ``x1`` towards ``S`` by attacking the pulled-back set in the second space.

    ``draws`` final samples of ``g`` are tried (default: the first-space
    dimension); the first one inside ``S`` is returned, else the last.
    """
    gen = rng.child("map").generator()
    x2 = red.f(np.asarray(x1), gen)
    S2 = red.pullback(S, m_g, salt=rng.child("pullback").key())
    tr = inner_attack(S2, x2, rng.child("inner"))
    x2p = np.asarray(tr.v)
    tries = draws if draws is not None else max(1, np.asarray(x1).size)
    y = None
    for _ in range(tries):
        y = red.g_sample(x2p, gen)[0]
        if S(y):
            break
    return y, tr


def mucio_cube_attack(
    dim: int,
    eps: float,
    delta: float,
    budget: OracleBudget,
    regime: str = "worst",
) -> Callable[[MembershipOracle, np.ndarray, RngStream], TamperTranscript]:
    """Inner attack: MUCIO over ``dim`` fair bits with a sampling oracle."""
    process = BernoulliProcess(0.5, n=dim)
    params = worst_case_params(dim, eps, delta) if regime == "worst" else average_case_params(dim, eps, delta)

    def attack(S2: MembershipOracle, x2: np.ndarray, rng: RngStream) -> TamperTranscript:
        oracle = MonteCarloOracle(process, S2, budget=budget)
        return run_tampering(process, S2, oracle, params, rng, external_u=np.asarray(x2).tolist())

    attack.params = params
    return attack


def gaussian_l1_attack(
    S: MembershipOracle,
    eps: float,
    delta: float,
    x: Sequence[float],
    rng: RngStream,
    sigma: float = SIGMA_REF,
    m_g: int = 7,
    budget: OracleBudget = OracleBudget(400, 4),
) -> AttackResult:
    """Gaussian attack under l1 through the cube embedding.

    The inner attack uses the worst-case instantiation on the ``n*n`` cube with
    declared measure ``eps / 2``, so its budget never exceeds its cap.
    """
    x = np.asarray(x, float)
    n = x.size
    red = gauss_cube_reduction(n, sigma)
    q0 = S.queries
    inner = mucio_cube_attack(n * n, eps / 2, delta, budget)
    y, tr = lift_attack(red, inner, S, x, m_g, rng)
    return AttackResult(
        point=y,
        success=bool(S.test_batch(y[None])[0]),
        budget=tr.budget_used,
        displacement=l1(x, y),
        queries=S.queries - q0,
        in_range=in_range(x, sigma),
        aborted=tr.aborted,
        capped=tr.capped,
        extra={"k_cap": inner.params.k_cap, "w": red.w, "b": red.b},
    )


def clamp_window(n: int, eps: float, delta: float) -> float:
    return math.sqrt(2 * math.log(4 * n / min(eps, delta)))


def gaussian_l2_attack(
    S: MembershipOracle,
    eps: float,
    delta: float,
    x: Sequence[float],
    rng: RngStream,
    sigma: float = 1.0,
    budget: OracleBudget = OracleBudget(200, 4),
    regime: str = "average",
) -> AttackResult:
    """Tamper directly with the real coordinates of ``x`` against ``S`` clipped to a cube window.

    Points with a coordinate beyond the window are returned unchanged and
    reported as failures.
    """
    x = np.asarray(x, float)
    n = x.size
    C = clamp_window(n, eps, delta) * sigma
    q0 = S.queries
    if np.any(np.abs(x) > C):
        return AttackResult(x.copy(), False, 0.0, 0.0, 0, in_range=False, extra={"window": C})

    def windowed(rows: np.ndarray) -> np.ndarray:
        rows = np.atleast_2d(rows)
        inside = np.all(np.abs(rows) <= C, axis=1)
        out = np.zeros(rows.shape[0], dtype=bool)
        if inside.any():
            out[inside] = S.test_batch(rows[inside])
        return out

    S_C = MembershipOracle(batch=windowed, name=f"window({S.name})")
    process = GaussianProcess(n, sigma)
    params = average_case_params(n, eps, delta) if regime == "average" else worst_case_params(n, eps, delta)
    oracle = MonteCarloOracle(process, S_C, budget=budget)
    tr = run_tampering(process, S_C, oracle, params, rng, external_u=x.tolist())
    y = np.asarray(tr.v, float)
    return AttackResult(
        point=y,
        success=tr.success,
        budget=tr.budget_used,
        displacement=l2(x, y),
        queries=S.queries - q0,
        aborted=tr.aborted,
        capped=tr.capped,
        extra={"window": C, "bound": 2 * C * math.sqrt(tr.budget_used)},
    )


def radial_band(n: int, eps: float, delta: float) -> tuple[float, float]:
    """Chi quantiles leaving mass ``min(eps, delta) / 4`` outside, split evenly."""
    q = min(eps, delta) / 4
    return float(stats.chi.ppf(q / 2, n)), float(stats.chi.isf(q / 2, n))


def sphere_attack(
    S: MembershipOracle,
    eps: float,
    delta: float,
    x: Sequence[float],
    rng: RngStream,
    budget: OracleBudget = OracleBudget(200, 4),
    max_retries: int = 8,
) -> AttackResult:
    """Attack on the unit sphere: lift to Gaussian space with a chi radius, attack, project."""
    x = np.asarray(x, float)
    n = x.size
    if not math.isclose(float(np.linalg.norm(x)), 1.0, abs_tol=1e-9):
        raise ParameterError("x must be a unit vector")
    lo, hi = radial_band(n, eps, delta)
    q0 = S.queries

    def lifted(rows: np.ndarray) -> np.ndarray:
        rows = np.atleast_2d(rows)
        r = np.linalg.norm(rows, axis=1)
        ok = (r >= lo) & (r <= hi)
        out = np.zeros(rows.shape[0], dtype=bool)
        if ok.any():
            out[ok] = S.test_batch(rows[ok] / r[ok, None])
        return out

    S_lift = MembershipOracle(batch=lifted, name=f"lift({S.name})")
    eps_lift = max(eps - min(eps, delta) / 4, 1e-12)
    for attempt in range(max_retries):
        stream = rng.child("sphere", attempt)
        r = float(np.linalg.norm(stream.child("radius").generator().standard_normal(n)))
        inner = gaussian_l2_attack(S_lift, eps_lift, delta, r * x, stream.child("l2"), budget=budget)
        norm = float(np.linalg.norm(inner.point))
        if norm > 0:
            break
    else:
        raise RuntimeError("lifted point collapsed to the origin on every retry")
    y = inner.point / norm
    return AttackResult(
        point=y,
        success=bool(S.test_batch(y[None])[0]),
        budget=inner.budget,
        displacement=l2(x, y),
        queries=S.queries - q0,
        in_range=inner.in_range,
        aborted=inner.aborted,
        extra={
            "radius": r,
            "band": (lo, hi),
            "legs": (l2(x, r * x / math.sqrt(n)), l2(r * x, inner.point) / math.sqrt(n), l2(inner.point / math.sqrt(n), y)),
        },
    )


def halfspace_set(a: Sequence[float], t: float = 0.0, name: str = "halfspace") -> MembershipOracle:
    """``{x : a . x <= t}`` on real vectors."""
    a = np.asarray(a, float)
    return MembershipOracle(
        test=lambda x: float(np.dot(a, x)) <= t,
        batch=lambda rows: np.atleast_2d(rows) @ a <= t,
        name=name,
    )
