"""Block-structured probability spaces, membership oracles and randomness streams.

A trajectory is a length-``n`` sequence of block values. Finite blocks hold
hashable values (usually small ints); real blocks hold float64 values and are
compared bitwise when counting budget.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import math
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

DEFAULT_ENUMERATION_CAP = 2**20


class DimensionError(ValueError):
    pass


class ContractViolation(RuntimeError):
    """A callback broke its declared contract (e.g. sampled outside the support)."""


class EnumerationCapExceeded(ValueError):
    def __init__(self, size: float, cap: int):
        super().__init__(f"support has ~{size:.3g} trajectories, above the cap of {cap}")
        self.size = size
        self.cap = cap


class ParameterError(ValueError):
    pass


# ---------------------------------------------------------------------------
# randomness


def _label_to_int(label: int | str) -> int:
    if isinstance(label, (int, np.integer)) and label >= 0:
        return int(label)
    digest = hashlib.blake2b(str(label).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class RngStream:
    """A reproducible randomness source addressed by ``(seed, path)``.

    Children are derived by label, so trial ``k`` of an experiment gets the
    same numbers no matter which worker runs it or in which order.
    """

    seed: int
    path: tuple = ()

    def child(self, *labels: int | str) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(labels))

    def generator(self) -> np.random.Generator:
        key = tuple(_label_to_int(label) for label in self.path)
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=key)))

    def key(self) -> int:
        """64-bit integer digest of the stream address (for keyed hashing)."""
        h = hashlib.blake2b(repr((self.seed, self.path)).encode(), digest_size=8).digest()
        return int.from_bytes(h, "little")


def as_generator(rng: RngStream | np.random.Generator | int | None) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    return np.random.default_rng(rng)


_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def hash_rows(rows: np.ndarray, salt: int = 0) -> np.ndarray:
    """Order-sensitive 64-bit hash of each row of an integer matrix."""
    rows = np.asarray(rows)
    h = np.full(rows.shape[0], np.uint64(salt & 0xFFFFFFFFFFFFFFFF), dtype=np.uint64)
    for j in range(rows.shape[1]):
        col = rows[:, j].astype(np.int64).view(np.uint64)
        h = _splitmix64(h ^ _splitmix64(col + np.uint64(j)))
    return h


def keyed_uniforms(keys: np.ndarray, count: int) -> np.ndarray:
    """Uniforms in [0, 1) that are a pure function of ``(key, index)``.

    Returns an array of shape ``keys.shape + (count,)``.
    """
    keys = np.asarray(keys, dtype=np.uint64)
    idx = np.arange(count, dtype=np.uint64)
    z = _splitmix64(keys[..., None] ^ _splitmix64(idx + np.uint64(0x632BE59BD9B4E019)))
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


# ---------------------------------------------------------------------------
# trajectories and distances


def blocks_differ(u: Sequence, v: Sequence) -> np.ndarray:
    """Per-block inequality; floats are compared by their bit pattern."""
    a = np.asarray(u)
    b = np.asarray(v)
    if a.shape != b.shape:
        raise DimensionError(f"trajectory lengths differ: {a.shape} vs {b.shape}")
    if a.dtype.kind == "f" and b.dtype.kind == "f":
        return a.astype(np.float64).view(np.uint64) != b.astype(np.float64).view(np.uint64)
    if a.dtype == object or b.dtype == object:
        return np.array([not _same(x, y) for x, y in zip(a, b)], dtype=bool)
    return a != b


def _same(x: Any, y: Any) -> bool:
    if isinstance(x, float) and isinstance(y, float):
        return np.float64(x).view(np.uint64) == np.float64(y).view(np.uint64)
    return x == y


def weight_vector(values: Iterable[float], rtol: float = 1e-9) -> np.ndarray:
    """Validate a weight vector: non-negative entries with ``sum(a**2) == n``."""
    alpha = np.array(list(values), dtype=float)
    if alpha.ndim != 1 or alpha.size == 0:
        raise ParameterError("weights must be a non-empty vector")
    if np.any(alpha < 0) or not np.all(np.isfinite(alpha)):
        raise ParameterError("weights must be finite and non-negative")
    n = alpha.size
    if not math.isclose(float(np.sum(alpha**2)), n, rel_tol=rtol):
        raise ParameterError(f"sum of squared weights is {np.sum(alpha**2)!r}, expected {n}")
    alpha.setflags(write=False)
    return alpha


def uniform_weights(n: int) -> np.ndarray:
    return weight_vector(np.ones(n))


def split_weights(n: int, high: float = 1.5, low: float = 0.5) -> np.ndarray:
    """First half of the blocks weighted ``sqrt(high)``, second half ``sqrt(low)``."""
    if n % 2:
        raise ParameterError("split weights need an even block count")
    if not math.isclose(high + low, 2.0):
        raise ParameterError("high + low must equal 2 so that sum(a**2) == n")
    return weight_vector(np.r_[np.full(n // 2, math.sqrt(high)), np.full(n // 2, math.sqrt(low))])


def weighted_hamming(u: Sequence, v: Sequence, alpha: Sequence[float] | None = None) -> float:
    diff = blocks_differ(u, v)
    if alpha is None:
        return float(diff.sum())
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != diff.shape:
        raise DimensionError(f"weights have length {alpha.size}, trajectories {diff.size}")
    return float(alpha[diff].sum())


# ---------------------------------------------------------------------------
# block domains and processes


@dataclass(frozen=True)
class BlockDomain:
    """Value space of one block: a finite alphabet or a real line with a sampler."""

    values: tuple | None = None
    probs: tuple | None = None
    sampler: Callable[[np.random.Generator, int], np.ndarray] | None = None

    def __post_init__(self):
        if self.values is None:
            if self.sampler is None:
                raise ParameterError("a real domain needs a sampler")
            return
        if len(self.values) == 0:
            raise ParameterError("finite domains must be non-empty")
        if len(set(self.values)) != len(self.values):
            raise ParameterError("finite domain values must be distinct")
        probs = self.probs
        if probs is None:
            probs = tuple([1.0 / len(self.values)] * len(self.values))
            object.__setattr__(self, "probs", probs)
        if len(probs) != len(self.values) or min(probs) < 0 or not math.isclose(sum(probs), 1.0, abs_tol=1e-12):
            raise ParameterError("probabilities must be non-negative, match the values and sum to 1")

    @classmethod
    def finite(cls, values: Sequence, probs: Sequence[float] | None = None) -> "BlockDomain":
        return cls(values=tuple(values), probs=None if probs is None else tuple(float(p) for p in probs))

    @classmethod
    def real(cls, sampler: Callable[[np.random.Generator, int], np.ndarray]) -> "BlockDomain":
        return cls(sampler=sampler)

    @property
    def is_finite(self) -> bool:
        return self.values is not None

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.is_finite:
            idx = rng.choice(len(self.values), size=size, p=np.asarray(self.probs))
            return np.asarray(self.values, dtype=_values_dtype(self.values))[idx]
        return np.asarray(self.sampler(rng, size), dtype=float)

    def support(self) -> list[tuple[Any, float]]:
        if not self.is_finite:
            raise ParameterError("real domains cannot be enumerated")
        return list(zip(self.values, self.probs))


def _values_dtype(values: Sequence) -> Any:
    if all(isinstance(v, (bool, int, np.integer)) for v in values):
        return np.int64
    if all(isinstance(v, (int, float, np.integer, np.floating)) for v in values):
        return np.float64
    return object


class RandomProcess:
    """An online sampler for a joint distribution over ``n`` blocks.

    ``sampler(prefix, rng)`` returns one draw of block ``len(prefix)`` given the
    prefix. ``support(prefix)``, when given, lists ``(value, probability)`` for
    that block (zero-probability entries allowed) and makes the process
    enumerable.
    """

    dtype: Any = object

    def __init__(
        self,
        n: int,
        sampler: Callable[[tuple, np.random.Generator], Any],
        support: Callable[[tuple], list[tuple[Any, float]]] | None = None,
        is_product: bool = False,
    ):
        if n < 1:
            raise ParameterError("a process needs at least one block")
        self.n = n
        self._sampler = sampler
        self._support = support
        self.is_product = is_product

    @property
    def is_finite(self) -> bool:
        return self._support is not None

    def block_support(self, prefix: Sequence) -> list[tuple[Any, float]] | None:
        if self._support is None:
            return None
        return list(self._support(tuple(prefix)))

    def in_support(self, prefix: Sequence, value: Any) -> bool:
        support = self.block_support(prefix)
        if support is None:
            return True
        return any(_same(value, s) and p > 0 for s, p in support)

    def sample_block(self, prefix: Sequence, rng: np.random.Generator) -> Any:
        value = self._sampler(tuple(prefix), rng)
        if self._support is not None and not self.in_support(prefix, value):
            raise ContractViolation(f"sampler returned {value!r} outside the support at block {len(prefix)}")
        return value

    def sample_blocks(self, prefix: Sequence, size: int, rng: np.random.Generator) -> list:
        """``size`` independent draws of the next block given ``prefix``."""
        return [self.sample_block(prefix, rng) for _ in range(size)]

    def sample_trajectory(self, rng: RngStream | np.random.Generator) -> tuple:
        gen = as_generator(rng)
        out: list = []
        for _ in range(self.n):
            out.append(self.sample_block(out, gen))
        return tuple(out)

    def complete(self, prefix: Sequence, m: int, rng: np.random.Generator) -> np.ndarray:
        """``m`` independent completions of ``prefix``, as an ``(m, n)`` array."""
        rows = np.empty((m, self.n), dtype=self.dtype)
        i = len(prefix)
        for r in range(m):
            row = list(prefix)
            while len(row) < self.n:
                row.append(self.sample_block(row, rng))
            rows[r] = row
        return rows if i <= self.n else rows


class ProductProcess(RandomProcess):
    """Independent blocks, each with its own :class:`BlockDomain`."""

    def __init__(self, blocks: Sequence[BlockDomain]):
        blocks = list(blocks)
        self.blocks = blocks
        super().__init__(
            len(blocks),
            sampler=lambda prefix, rng: self._one(len(prefix), rng),
            support=(lambda prefix: blocks[len(prefix)].support()) if all(b.is_finite for b in blocks) else None,
            is_product=True,
        )
        if all(b.is_finite for b in blocks):
            self.dtype = _values_dtype([v for b in blocks for v in b.values])
        else:
            self.dtype = np.float64 if all(not b.is_finite for b in blocks) else object

    def _one(self, i: int, rng: np.random.Generator) -> Any:
        value = self.blocks[i].sample(rng, 1)[0]
        return value.item() if isinstance(value, np.generic) else value

    def sample_block(self, prefix: Sequence, rng: np.random.Generator) -> Any:
        return self._one(len(prefix), rng)

    def sample_blocks(self, prefix: Sequence, size: int, rng: np.random.Generator) -> list:
        return self.blocks[len(prefix)].sample(rng, size).tolist()

    def sample_suffix(self, start: int, m: int, rng: np.random.Generator) -> np.ndarray:
        out = np.empty((m, self.n - start), dtype=self.dtype)
        for j in range(start, self.n):
            out[:, j - start] = self.blocks[j].sample(rng, m)
        return out

    def sample_trajectory(self, rng: RngStream | np.random.Generator) -> tuple:
        return tuple(self.sample_suffix(0, 1, as_generator(rng))[0].tolist())

    def complete(self, prefix: Sequence, m: int, rng: np.random.Generator) -> np.ndarray:
        i = len(prefix)
        rows = np.empty((m, self.n), dtype=self.dtype)
        if i:
            rows[:, :i] = np.asarray(prefix, dtype=self.dtype)
        if i < self.n:
            rows[:, i:] = self.sample_suffix(i, m, rng)
        return rows


class BernoulliProcess(ProductProcess):
    """Independent two-valued blocks; block ``i`` equals ``values[1]`` w.p. ``p[i]``."""

    def __init__(self, p: Sequence[float] | float, n: int | None = None, values: tuple[int, int] = (0, 1)):
        if np.isscalar(p):
            if n is None:
                raise ParameterError("scalar bias needs n")
            p = np.full(n, float(p))
        self.p = np.asarray(p, dtype=float)
        if np.any((self.p < 0) | (self.p > 1)):
            raise ParameterError("biases must lie in [0, 1]")
        self.values = tuple(int(v) for v in values)
        lo, hi = self.values
        super().__init__([BlockDomain.finite(self.values, (1 - q, q)) for q in self.p])
        self.dtype = np.int8 if -128 <= min(lo, hi) and max(lo, hi) <= 127 else np.int64
        self._fair = bool(np.all(self.p == 0.5))

    def _bits(self, rng: np.random.Generator, shape: tuple, start: int) -> np.ndarray:
        if self._fair:
            return rng.integers(0, 2, size=shape, dtype=np.int8)
        return (rng.random(shape) < self.p[start:start + shape[-1]]).astype(np.int8)

    def _one(self, i: int, rng: np.random.Generator) -> int:
        return self.values[1] if rng.random() < self.p[i] else self.values[0]

    def sample_blocks(self, prefix: Sequence, size: int, rng: np.random.Generator) -> list:
        i = len(prefix)
        bits = (rng.random(size) < self.p[i])
        return [self.values[1] if b else self.values[0] for b in bits]

    def sample_suffix(self, start: int, m: int, rng: np.random.Generator) -> np.ndarray:
        bits = self._bits(rng, (m, self.n - start), start)
        lo, hi = self.values
        if (lo, hi) == (0, 1):
            return bits
        return (lo + (hi - lo) * bits).astype(self.dtype)


def fair_bits(n: int, values: tuple[int, int] = (0, 1)) -> BernoulliProcess:
    return BernoulliProcess(0.5, n=n, values=values)


class GaussianProcess(ProductProcess):
    """``n`` independent centred Gaussian coordinates with standard deviation ``sigma``."""

    def __init__(self, n: int, sigma: float = 1.0):
        self.sigma = float(sigma)
        sampler = lambda rng, size: self.sigma * rng.standard_normal(size)
        super().__init__([BlockDomain.real(sampler)] * n)
        self.dtype = np.float64

    def _one(self, i: int, rng: np.random.Generator) -> float:
        return float(self.sigma * rng.standard_normal())

    def sample_blocks(self, prefix: Sequence, size: int, rng: np.random.Generator) -> list:
        return (self.sigma * rng.standard_normal(size)).tolist()

    def sample_suffix(self, start: int, m: int, rng: np.random.Generator) -> np.ndarray:
        return self.sigma * rng.standard_normal((m, self.n - start))


def sample_trajectory(process: RandomProcess, rng: RngStream | np.random.Generator) -> tuple:
    return process.sample_trajectory(rng)


def enumerate_support(
    process: RandomProcess, prefix: Sequence = (), cap: int = DEFAULT_ENUMERATION_CAP
) -> list[tuple[tuple, float]]:
    """Every completion of ``prefix`` with its conditional probability.

    Zero-probability branches of the declared block alphabets are listed too,
    so a dependent process still shows the full product grid.
    """
    if not process.is_finite:
        raise ParameterError("process has real-valued blocks and cannot be enumerated")
    prefix = tuple(prefix)
    estimate = 1.0
    probe = list(prefix)
    for _ in range(len(prefix), process.n):
        support = process.block_support(probe)
        estimate *= len(support)
        if estimate > cap:
            raise EnumerationCapExceeded(_size_estimate(process, prefix), cap)
        probe.append(support[0][0])

    out: list[tuple[tuple, float]] = []

    def walk(path: list, prob: float) -> None:
        if len(path) == process.n:
            out.append((tuple(path), prob))
            if len(out) > cap:
                raise EnumerationCapExceeded(len(out), cap)
            return
        for value, p in process.block_support(path):
            path.append(value)
            walk(path, prob * p)
            path.pop()

    walk(list(prefix), 1.0)
    return out


def _size_estimate(process: RandomProcess, prefix: tuple) -> float:
    size = 1.0
    probe = list(prefix)
    for _ in range(len(prefix), process.n):
        support = process.block_support(probe)
        size *= len(support)
        probe.append(support[0][0])
    return size


# ---------------------------------------------------------------------------
# membership


class MembershipOracle:
    """Counting query access to a set ``S`` of trajectories.

    ``test`` decides one trajectory; ``batch`` (optional) decides the rows of a
    2-D array at once. Every decided trajectory counts as one query.
    """

    def __init__(
        self,
        test: Callable[[Any], bool] | None = None,
        batch: Callable[[np.ndarray], np.ndarray] | None = None,
        name: str = "S",
    ):
        if test is None and batch is None:
            raise ParameterError("need test or batch")
        self._test = test
        self._batch = batch
        self.name = name
        self._lock = threading.Lock()
        self._count = 0
        self.listeners: list[Callable[[np.ndarray], None]] = []

    @property
    def queries(self) -> int:
        return self._count

    def _add(self, k: int) -> None:
        with self._lock:
            self._count += k

    def __call__(self, x: Sequence) -> bool:
        self._add(1)
        for listener in self.listeners:
            listener(np.asarray([x]))
        if self._test is not None:
            return bool(self._test(x))
        return bool(self._batch(np.asarray([x]))[0])

    def test_batch(self, rows: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows)
        self._add(rows.shape[0])
        for listener in self.listeners:
            listener(rows)
        if self._batch is not None:
            return np.asarray(self._batch(rows), dtype=bool)
        return np.array([bool(self._test(tuple(r.tolist()))) for r in rows], dtype=bool)

    def fresh(self) -> "MembershipOracle":
        """Same set, zeroed counter."""
        return MembershipOracle(self._test, self._batch, self.name)


def threshold_set(weights: Sequence[float], t: float, name: str = "threshold") -> MembershipOracle:
    """``S = {x : sum(w * x) >= t}``."""
    w = np.asarray(weights, dtype=float)
    m = MembershipOracle(
        test=lambda x: float(np.dot(w, np.asarray(x, dtype=float))) >= t,
        batch=lambda rows: np.asarray(rows, dtype=float) @ w >= t,
        name=name,
    )
    m.weights = w
    m.threshold = float(t)
    return m


def whole_space(name: str = "everything") -> MembershipOracle:
    return MembershipOracle(test=lambda x: True, batch=lambda rows: np.ones(len(rows), dtype=bool), name=name)


def empty_set(name: str = "nothing") -> MembershipOracle:
    return MembershipOracle(test=lambda x: False, batch=lambda rows: np.zeros(len(rows), dtype=bool), name=name)


def table_set(members: Iterable[tuple], name: str = "table") -> MembershipOracle:
    """A set given by an explicit list of member trajectories."""
    table = {tuple(m) for m in members}
    return MembershipOracle(test=lambda x: tuple(x) in table, name=name)


# ---------------------------------------------------------------------------
# serialization


def trajectory_to_json(trajectory: Sequence, domains: Sequence[BlockDomain] | None = None) -> str:
    """Finite values are written as indices into their domain; reals as exact decimal strings."""
    out = []
    for i, value in enumerate(trajectory):
        if domains is not None and domains[i].is_finite:
            out.append(domains[i].values.index(value))
        elif isinstance(value, (float, np.floating)):
            out.append(repr(float(value)))
        else:
            out.append(value.item() if isinstance(value, np.generic) else value)
    return json.dumps(out)


def trajectory_from_json(text: str, domains: Sequence[BlockDomain] | None = None) -> tuple:
    raw = json.loads(text)
    out = []
    for i, item in enumerate(raw):
        if domains is not None and domains[i].is_finite:
            out.append(domains[i].values[item])
        elif isinstance(item, str):
            out.append(float(item))
        else:
            out.append(item)
    return tuple(out)


def product_grid(domains: Sequence[Sequence]) -> Iterable[tuple]:
    return itertools.product(*domains)
