"""Experiment configs, seeded trial execution, summaries and scaling sweeps."""
from __future__ import annotations

import dataclasses
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
from scipy import stats

WORKERS_ENV = "MUCIO_WORKERS"
KINDS = ("tamper", "oracle-check", "reduce-l1", "gauss-l2", "sphere", "mcdiarmid", "cointoss", "lowerbound")


class ConfigError(ValueError):
    def __init__(self, problems: dict[str, str]):
        super().__init__("; ".join(f"{k}: {v}" for k, v in problems.items()))
        self.problems = problems


def summarize(successes: int, trials: int, z: float = 1.96) -> tuple[float, tuple[float, float]]:
    """Success rate with its Wilson score interval."""
    if trials < 1:
        raise ValueError("trials must be at least 1")
    if not 0 <= successes <= trials:
        raise ValueError(f"successes must lie in [0, {trials}], got {successes}")
    p = successes / trials
    z2 = z * z
    denom = 1 + z2 / trials
    centre = (p + z2 / (2 * trials)) / denom
    half = z * math.sqrt(p * (1 - p) / trials + z2 / (4 * trials**2)) / denom
    lo = 0.0 if successes == 0 else max(0.0, centre - half)
    hi = 1.0 if successes == trials else min(1.0, centre + half)
    return p, (lo, hi)


# ---------------------------------------------------------------------------
# config


@dataclass
class ExperimentConfig:
    kind: str = "tamper"
    n: int = 200
    epsilon: float = 0.02
    delta: float = 0.1
    mode: str = "mucio-abort"
    oracle: str = "mc"
    sizing: str = "fixed"
    m_eval: int = 400
    m_max: int = 8
    max_samples: int = 20_000
    weights: str = "uniform"
    cap: str = "none"
    case0_first: bool = False
    set: str = "halfspace"
    function: str = "sum"
    band: float | None = None
    m_g: int = 7
    radius_exp: float = 0.5
    queries: int = 1000
    budget_const: float = 3.0
    protocol: str = "majority"
    audit: bool = False
    trials: int = 100
    seed: int = 0
    workers: int = 1
    output: str | None = None

    def validate(self) -> "ExperimentConfig":
        problems = {}
        if self.kind not in KINDS:
            problems["kind"] = f"must be one of {KINDS}"
        if self.n < 1:
            problems["n"] = "must be positive"
        if not 0 < self.epsilon < 1:
            problems["epsilon"] = "must lie in (0, 1)"
        if not 0 < self.delta < 1:
            problems["delta"] = "must lie in (0, 1)"
        if self.mode not in ("additive", "mucio", "mucio-abort"):
            problems["mode"] = "must be additive, mucio or mucio-abort"
        if self.oracle not in ("exact", "threshold", "mc"):
            problems["oracle"] = "must be exact, threshold or mc"
        if self.sizing not in ("paper", "hoeffding", "fixed"):
            problems["sizing"] = "must be paper, hoeffding or fixed"
        if self.m_eval < 1 or self.m_max < 1 or self.max_samples < 1 or self.m_g < 1:
            problems["m_eval"] = "sample counts must be positive"
        if self.cap not in ("none", "worst"):
            problems["cap"] = "must be none or worst"
        if self.trials < 0:
            problems["trials"] = "must be non-negative"
        if self.workers < 1:
            problems["workers"] = "must be positive"
        if self.weights not in ("uniform", "split") and not Path(self.weights).is_file():
            problems["weights"] = "must be uniform, split or a readable file"
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError({k: "unknown field" for k in sorted(unknown)})
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class TrialRecord:
    trial: int
    success: bool
    budget: float
    aborted: bool = False
    queries: int = 0
    displacement: float | None = None
    capped: bool = False
    cases: dict | None = None
    extra: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def to_dict(self, wall_time: bool = True) -> dict:
        d = dataclasses.asdict(self)
        if not wall_time:
            d.pop("wall_time")
        return d


# ---------------------------------------------------------------------------
# experiment setups (cached per process so trials share oracles and tables)


def _load_weights(cfg: ExperimentConfig):
    from .core import split_weights, uniform_weights, weight_vector

    if cfg.weights == "uniform":
        return uniform_weights(cfg.n)
    if cfg.weights == "split":
        return split_weights(cfg.n)
    return weight_vector(np.loadtxt(cfg.weights, ndmin=1))


def binomial_threshold(n: int, eps: float) -> tuple[int, float]:
    """Integer ``t`` whose upper tail ``Pr[Bin(n, 1/2) >= t]`` is closest to ``eps`` (in log scale)."""
    t = np.arange(n + 2)
    tails = stats.binom.sf(t - 1, n, 0.5)
    ok = tails > 0
    best = int(t[ok][np.argmin(np.abs(np.log(tails[ok]) - math.log(eps)))])
    return best, float(stats.binom.sf(best - 1, n, 0.5))


@lru_cache(maxsize=8)
def _tamper_setup(cfg_json: str):
    from .core import BernoulliProcess, threshold_set
    from .oracles import ExactOracle, MonteCarloOracle, OracleBudget, ThresholdOracle
    from .tamper import average_case_params, worst_case_params

    cfg = ExperimentConfig.from_json(cfg_json)
    process = BernoulliProcess(0.5, n=cfg.n)
    t, measure = binomial_threshold(cfg.n, cfg.epsilon)
    S = threshold_set(np.ones(cfg.n), t)
    alpha = _load_weights(cfg)
    if cfg.cap == "worst":
        params = worst_case_params(cfg.n, measure, cfg.delta, alpha)
    else:
        params = average_case_params(cfg.n, measure, cfg.delta, alpha)
    if cfg.mode == "additive":
        params = params.replace(lam=1 / math.sqrt(cfg.n))
    params = params.replace(mode=cfg.mode, case0_first=cfg.case0_first)
    if cfg.oracle == "exact":
        oracle = ExactOracle(process, S)
    elif cfg.oracle == "threshold":
        oracle = ThresholdOracle(process, S)
    else:
        budget = OracleBudget(cfg.m_eval, cfg.m_max) if cfg.sizing == "fixed" else None
        oracle = MonteCarloOracle(
            process, S, budget=budget, gamma=params.gamma, tau=params.tau, eps=measure,
            sizing=cfg.sizing if cfg.sizing != "fixed" else "paper", max_samples=cfg.max_samples,
        )
    info = {"threshold": t, "measure": measure, "lam": params.lam, "tau": params.tau, "k_cap": params.k_cap}
    return process, S, oracle, params, info


def _tamper_trial(cfg: ExperimentConfig, k: int, stream) -> TrialRecord:
    from .oracles import ExactOracle
    from .tamper import run_tampering

    process, S, oracle, params, _ = _tamper_setup(cfg.to_json())
    if isinstance(oracle, ExactOracle):
        # a fresh memo keeps per-trial query counts independent of trial order
        oracle = ExactOracle(process, S)
    tr = run_tampering(process, S, oracle, params, stream)
    extra = {"violations": _audit(tr, params, process, cfg.oracle != "mc")} if cfg.audit else {}
    return TrialRecord(k, tr.success, tr.budget_used, tr.aborted, tr.queries, tr.budget_used, tr.capped, tr.case_counts, extra)


def _audit(tr, params, process, exact: bool = False) -> list[str]:
    from .tamper import check_potential, check_transcript, check_validity

    problems = check_transcript(tr, params) + check_potential(tr, params) + check_validity(tr, process)
    # with exact estimates and no abort or cap, the multiplicative rule cannot fail
    if exact and params.mode == "mucio" and params.k_cap is None and tr.eps_tilde > 0 and not tr.success:
        problems.append("exact-oracle run without abort or cap failed")
    return problems


def _oracle_check_trial(cfg: ExperimentConfig, k: int, stream) -> TrialRecord:
    from .core import BernoulliProcess, MembershipOracle
    from .oracles import ExactOracle, MonteCarloOracle, audit_conditions

    n = min(cfg.n, 10)
    gen = stream.child("instance").generator()
    process = BernoulliProcess(0.5, n=n)
    table = np.zeros(2**n, dtype=bool)
    while table.mean() < 0.1:
        table = gen.random(2**n) < gen.uniform(0.1, 0.6)
    powers = 1 << np.arange(n - 1, -1, -1)
    S = MembershipOracle(batch=lambda rows: table[np.asarray(rows, dtype=np.int64) @ powers], name="random")
    measure = ExactOracle(process, S).value(())
    gamma, tau = 0.2, math.log(2)
    oracle = MonteCarloOracle(process, S, gamma=gamma, tau=tau, eps=measure, sizing=cfg.sizing if cfg.sizing != "fixed" else "hoeffding", max_samples=cfg.max_samples)
    audit = audit_conditions(process, S, oracle, gamma, tau, stream.child("audit"), prefixes=cfg.queries, draws=cfg.queries)
    extra = dataclasses.asdict(audit)
    extra["measure"] = measure
    return TrialRecord(k, audit.ok, 0.0, queries=S.queries, extra=extra)


def _halfspace_for(cfg: ExperimentConfig, n: int, sphere: bool = False):
    from .reductions import halfspace_set

    if cfg.set == "dictator":
        # {x : x_1 >= 0}
        return halfspace_set(-np.eye(n)[0], 0.0, name="dictator")
    if sphere:
        return halfspace_set(np.eye(n)[0], 0.0, name="hemisphere")
    return halfspace_set(np.ones(n), 0.0, name="halfspace")


def _reduce_l1_trial(cfg: ExperimentConfig, k: int, stream) -> TrialRecord:
    from .oracles import OracleBudget
    from .reductions import SIGMA_REF, gaussian_l1_attack

    S = _halfspace_for(cfg, cfg.n)
    x = SIGMA_REF * stream.child("x").generator().standard_normal(cfg.n)
    r = gaussian_l1_attack(S, cfg.epsilon, cfg.delta, x, stream.child("attack"), m_g=cfg.m_g, budget=OracleBudget(cfg.m_eval, cfg.m_max))
    bound = r.extra["w"] * r.extra["k_cap"] + 2 * r.extra["b"]
    return TrialRecord(k, r.success, r.budget, r.aborted, r.queries, r.displacement, r.capped,
                       extra={"in_range": r.in_range, "bound": bound})


def _gauss_l2_trial(cfg: ExperimentConfig, k: int, stream) -> TrialRecord:
    from .oracles import OracleBudget
    from .reductions import gaussian_l2_attack

    S = _halfspace_for(cfg, cfg.n)
    x = stream.child("x").generator().standard_normal(cfg.n)
    r = gaussian_l2_attack(S, cfg.epsilon, cfg.delta, x, stream.child("attack"), budget=OracleBudget(cfg.m_eval, cfg.m_max))
    return TrialRecord(k, r.success, r.budget, r.aborted, r.queries, r.displacement, r.capped,
                       extra={"in_range": r.in_range, "bound": r.extra.get("bound")})


def _sphere_trial(cfg: ExperimentConfig, k: int, stream) -> TrialRecord:
    from .oracles import OracleBudget
    from .reductions import sphere_attack

    S = _halfspace_for(cfg, cfg.n, sphere=True)
    x = stream.child("x").generator().standard_normal(cfg.n)
    x /= np.linalg.norm(x)
    r = sphere_attack(S, cfg.epsilon, cfg.delta, x, stream.child("attack"), budget=OracleBudget(cfg.m_eval, cfg.m_max))
    legs = r.extra["legs"]
    return TrialRecord(k, r.success, r.budget, r.aborted, r.queries, r.displacement, r.capped,
                       extra={"in_range": r.in_range, "legs": list(legs), "radius": r.extra["radius"]})


def _mcdiarmid_trial(cfg: ExperimentConfig, k: int, stream) -> TrialRecord:
    from .core import BernoulliProcess
    from .mean import RealFunctionOracle, mcdiarmid_map, refine_to_band

    n = cfg.n
    process = BernoulliProcess(0.5, n=n)
    if cfg.function == "weighted-sum":
        w = np.where(np.arange(n) < n // 2, 2.0, 1.0)
    else:
        w = np.ones(n)
    f = RealFunctionOracle.from_linear(w)
    eta = float(w.sum() / 2)
    x = process.sample_trajectory(stream.child("x"))
    r = mcdiarmid_map(x, f, process, cfg.epsilon, cfg.delta, stream.child("map"))
    fy = f(r.point)
    extra = {"f_x": f(x), "f_y": fy, "eta": eta, "eta_estimate": r.eta_estimate, "threshold": r.threshold,
             "above": fy > eta + cfg.epsilon * f.a}
    if cfg.band is not None and cfg.function == "sum":
        lo, hi = eta - cfg.band, eta + cfg.band
        fx = extra["f_x"]
        if min(fx, fy) <= hi and max(fx, fy) >= lo:
            rr = refine_to_band(x, r.point, f, (lo, hi))
            extra.update(refined=True, refined_in_band=rr.in_band, reverts=rr.reverts)
        else:
            extra.update(refined=False)
    return TrialRecord(k, r.in_set, r.budget, r.transcript.aborted if r.transcript else False,
                       r.transcript.queries if r.transcript else 0, abs(extra["f_x"] - fy), extra=extra)


def _cointoss_trial(cfg: ExperimentConfig, k: int, stream) -> TrialRecord:
    from .adversarial import cointoss_params, strong_adaptive_cointoss_attack

    protocol = _protocol(cfg.n)
    params = cointoss_params(cfg.n, cfg.epsilon, cfg.delta, cfg.budget_const)
    r = strong_adaptive_cointoss_attack(protocol, params, stream)
    extra = {"k_cap": params.k_cap}
    if cfg.audit:
        extra["violations"] = _audit(r.tamper, params, protocol.process, exact=True)
    return TrialRecord(k, r.output == 1, len(r.corrupted), r.tamper.aborted, r.tamper.queries, None, r.tamper.capped,
                       r.tamper.case_counts, extra=extra)


@lru_cache(maxsize=4)
def _protocol(n: int):
    from .adversarial import majority_protocol

    return majority_protocol(n)


def _lowerbound_trial(cfg: ExperimentConfig, k: int, stream) -> TrialRecord:
    from .adversarial import lowerbound_trial
    from .oracles import OracleBudget

    radius = min(cfg.n, int(round(cfg.n**cfg.radius_exp)))
    t = lowerbound_trial(cfg.n, radius, cfg.queries, stream, cfg.epsilon, cfg.delta, cfg.budget_const,
                         OracleBudget(cfg.m_eval, cfg.m_max))
    extra = dataclasses.asdict(t)
    return TrialRecord(k, t.mucio_success, t.mucio_budget, False, t.mucio_queries, None, extra=extra)


TRIALS: dict[str, Callable] = {
    "tamper": _tamper_trial,
    "oracle-check": _oracle_check_trial,
    "reduce-l1": _reduce_l1_trial,
    "gauss-l2": _gauss_l2_trial,
    "sphere": _sphere_trial,
    "mcdiarmid": _mcdiarmid_trial,
    "cointoss": _cointoss_trial,
    "lowerbound": _lowerbound_trial,
}


def run_trial(cfg: ExperimentConfig, k: int) -> TrialRecord:
    """Trial ``k`` of ``cfg``; a pure function of ``(cfg, k)`` apart from ``wall_time``."""
    from .core import RngStream

    t0 = time.perf_counter()
    rec = TRIALS[cfg.kind](cfg, k, RngStream(cfg.seed).child(cfg.kind, "trial", k))
    rec.wall_time = time.perf_counter() - t0
    return rec


def _run_trial_json(cfg_json: str, k: int) -> TrialRecord:
    return run_trial(ExperimentConfig.from_json(cfg_json), k)


# ---------------------------------------------------------------------------
# summaries and output


def _clean(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        value = float(value)
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def record_line(rec: TrialRecord | dict, wall_time: bool = True) -> str:
    d = rec.to_dict(wall_time) if isinstance(rec, TrialRecord) else dict(rec)
    if not wall_time:
        d.pop("wall_time", None)
    d["type"] = "trial"
    return json.dumps(_clean(d), sort_keys=True)


def summarize_records(records: Sequence[TrialRecord | dict]) -> dict:
    """Aggregate statistics; works on records or on parsed trial lines."""
    rows = [r.to_dict() if isinstance(r, TrialRecord) else r for r in records]
    out: dict[str, Any] = {"type": "summary", "trials": len(rows)}
    if not rows:
        return out
    succ = sum(bool(r["success"]) for r in rows)
    rate, (lo, hi) = summarize(succ, len(rows))
    budgets = np.array([r["budget"] for r in rows], dtype=float)
    out.update(
        successes=succ,
        success_rate=rate,
        success_wilson=[lo, hi],
        budget_mean=float(budgets.mean()),
        budget_std=float(budgets.std(ddof=1)) if len(rows) > 1 else 0.0,
        budget_quantiles=[float(q) for q in np.quantile(budgets, [0.1, 0.5, 0.9])],
        budget_max=float(budgets.max()),
        abort_rate=float(np.mean([bool(r["aborted"]) for r in rows])),
        cap_rate=float(np.mean([bool(r.get("capped", False)) for r in rows])),
        total_queries=int(sum(int(r["queries"]) for r in rows)),
    )
    disp = [r["displacement"] for r in rows if r.get("displacement") is not None]
    if disp:
        d = np.array(disp, dtype=float)
        out.update(displacement_mean=float(d.mean()), displacement_median=float(np.median(d)), displacement_max=float(d.max()))
    return _clean(out)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list[TrialRecord]
    summary: dict
    path: Path | None = None


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def run_experiment(cfg: ExperimentConfig, info: dict | None = None) -> ExperimentResult:
    """Run every trial of ``cfg`` and write one JSON line per trial plus a summary line.

    Output is written to ``cfg.output`` when set. Records come back in trial
    order whatever the worker count.
    """
    cfg.validate()
    path = Path(cfg.output) if cfg.output else None
    if path is not None:
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.touch()
        except OSError as exc:
            raise OSError(f"cannot write results to {path}: {exc}") from exc
    if cfg.workers > 1 and cfg.trials > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            records = list(pool.map(_run_trial_json, [cfg.to_json()] * cfg.trials, range(cfg.trials)))
    else:
        records = [run_trial(cfg, k) for k in range(cfg.trials)]
    summary = summarize_records(records)
    summary["config"] = cfg.to_dict()
    if cfg.kind == "tamper":
        summary["setup"] = _clean(_tamper_setup(cfg.to_json())[4])
    if info:
        summary.update(_clean(info))
    if path is not None:
        with path.open("w") as fh:
            for rec in records:
                fh.write(record_line(rec) + "\n")
            fh.write(json.dumps(_clean(summary), sort_keys=True) + "\n")
    return ExperimentResult(cfg, records, summary, path)


def read_results(path: str | Path) -> tuple[list[dict], dict | None]:
    trials, summary = [], None
    for line in Path(path).read_text().splitlines():
        d = json.loads(line)
        if d.get("type") == "trial":
            trials.append(d)
        elif d.get("type") == "summary":
            summary = d
    return trials, summary


# ---------------------------------------------------------------------------
# scaling


@dataclass
class OriginFit:
    slope: float
    residuals: list[float]
    flagged: list[bool]

    @property
    def any_flagged(self) -> bool:
        return any(self.flagged)


def fit_through_origin(x: Sequence[float], y: Sequence[float], flag_rel: float = 0.15) -> OriginFit:
    """Least-squares ``y ~ slope * x``; residuals beyond ``flag_rel * |y|`` are flagged."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    slope = float(x @ y / (x @ x))
    res = y - slope * x
    flags = np.abs(res) > flag_rel * np.maximum(np.abs(y), 1e-12)
    return OriginFit(slope, res.tolist(), flags.tolist())


@dataclass
class SweepReport:
    n_values: list[int]
    mean_budgets: list[float]
    scale: list[float]
    fit: OriginFit
    summaries: list[dict]


def sweep_scale(n: int, eps: float, delta: float) -> float:
    return math.sqrt(n * math.log(1 / (eps * delta)))


def scaling_sweep(base: ExperimentConfig, n_values: Sequence[int]) -> SweepReport:
    """Run ``base`` at each ``n`` and fit mean budget against ``sqrt(n ln(1/(eps*delta)))``."""
    ns = sorted(set(int(n) for n in n_values))
    if len(ns) < 3:
        raise ConfigError({"n_values": "need at least three distinct values"})
    means, scale, summaries = [], [], []
    for n in ns:
        out = base.output and str(Path(base.output).with_suffix(f".n{n}.jsonl"))
        res = run_experiment(base.replace(n=n, output=out))
        means.append(res.summary["budget_mean"])
        measure = res.summary.get("setup", {}).get("measure", base.epsilon)
        scale.append(sweep_scale(n, measure, base.delta))
        summaries.append(res.summary)
    return SweepReport(ns, means, scale, fit_through_origin(scale, means), summaries)
