"""Monte Carlo study harness: replicated benchmarks and interval coverage.

run_replications redraws the sample from one synthetic population K times,
runs every estimator of the plan's grid on each draw, and reduces to
per-area bias/MSE plus a ranked summary. run_coverage scores bootstrap
intervals (single and double scheme from the same replicates) against the
population's true effects. Replication k is fully determined by
(population, master_seed, k): samples, fold seeds and bootstrap seeds come
from disjoint, per-k seed streams, so results are identical for any worker
count and any partition of the replication range.

Per-replication timings cover the estimation (or interval) calls only and
are reported separately from the result rows, which keeps result files
byte-reproducible across machines and worker counts.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from multiprocessing import get_context

import numpy as np

from .bootstrap import _check_args as _check_bootstrap_args
from .bootstrap import double_bootstrap_ci
from .errors import AreaEffectError, ConfigError
from .estimators import (EstimationContext, EstimationSession, EstimatorSpec,
                         estimate)
from .simulate import SyntheticPopulation, draw_sample, replication_seed

# seed streams, disjoint from the generator's population/treatment/sample
# streams (1, 2 and (3, k)); one independent stream per replication
_BOOT_STREAM = 4
_FOLD_STREAM = 5

_IMPUTING = ("OR", "IPW", "NIPW", "AIPW", "CrossfitAIPW")
_WEIGHTING = ("IPW", "NIPW", "AIPW", "CrossfitAIPW", "SurveyIPW")
_AUGMENTED = ("OR", "AIPW", "CrossfitAIPW")


def stream_seed(master_seed: int, stream: int, k: int) -> int:
    ss = np.random.SeedSequence(master_seed, spawn_key=(stream, k))
    return int(ss.generate_state(1, np.uint64)[0])


def _area_labels(population) -> tuple:
    return tuple(np.unique(population.area).tolist())


@dataclass(frozen=True)
class BootstrapSettings:
    """Interval settings used by run_coverage and the ci tool."""

    B: int = 1000
    C: int = 100
    alpha: float = 0.05
    level1: str = "pooled"

    def __post_init__(self):
        _check_bootstrap_args(self.B, self.alpha, self.level1, self.C)


@dataclass(frozen=True)
class ReplicationPlan:
    """A replicated study: estimator grid, replication range and seeding.

    Replication indices are offset .. offset + replications - 1, which lets
    a single replication be reproduced in isolation.
    """

    specs: tuple
    replications: int
    master_seed: int = 0
    workers: int = 1
    offset: int = 0
    bootstrap: BootstrapSettings | None = None

    def __post_init__(self):
        object.__setattr__(self, "specs", tuple(self.specs))
        if not self.specs:
            raise ConfigError("plan needs at least one estimator spec")
        for s in self.specs:
            if not isinstance(s, EstimatorSpec):
                raise ConfigError(f"grid entries must be estimator specs, got {s!r}")
        labels = [s.label + "|" + s.nuisance.tag for s in self.specs]
        if len(set(labels)) != len(labels):
            raise ConfigError("duplicate estimator specs in the grid")
        if not isinstance(self.replications, int) or self.replications < 1:
            raise ConfigError("replications must be a positive integer")
        if not isinstance(self.workers, int) or self.workers < 1:
            raise ConfigError("workers must be a positive integer")
        if not isinstance(self.offset, int) or self.offset < 0:
            raise ConfigError("offset must be a nonnegative integer")

    @property
    def ks(self) -> range:
        return range(self.offset, self.offset + self.replications)


@dataclass
class SpecResult:
    """Reduced benchmark row for one estimator spec."""

    spec: EstimatorSpec
    bias: np.ndarray
    mse: np.ndarray
    counts: np.ndarray
    sq_sum: np.ndarray
    failures: int
    failure_rate: float
    valid: bool
    mean_mse: float
    mean_bias: float
    pct_err: float
    seconds_total: float
    seconds_per_rep: float

    @property
    def label(self) -> str:
        return self.spec.label


@dataclass
class CoverageRow:
    """Reduced coverage row: both schemes scored from one interval run."""

    spec: EstimatorSpec
    covered_double: np.ndarray
    covered_single: np.ndarray
    scored_double: np.ndarray
    scored_single: np.ndarray
    failures: int
    failure_rate: float
    valid: bool
    coverage_double: float
    coverage_single: float
    mean_length_double: float
    mean_length_single: float
    seconds_total: float
    seconds_per_rep: float

    @property
    def label(self) -> str:
        return self.spec.label


@dataclass
class ResultsTable:
    kind: str
    areas: tuple
    tau: np.ndarray
    replications: int
    rows: list
    replicate_tau: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# per-replication work; module state is inherited by forked workers

_STATE = None
_DONOR = None


def _init_state(state):
    global _STATE, _DONOR
    _STATE = state
    _DONOR = None


def _replication_session(population, plan, k):
    sampled = draw_sample(population, seed=replication_seed(plan.master_seed, k))
    frame = sampled.frame
    ctx = EstimationContext(frame)
    global _DONOR
    if _DONOR is not None:
        # population-level design matrices and propensity fits are identical
        # across sample redraws, so reuse whatever an earlier replication
        # in this process already paid for
        ctx.adopt_population_caches(_DONOR)
    return frame, ctx, EstimationSession(frame, context=ctx)


def _harvest(ctx):
    global _DONOR
    if _DONOR is None:
        _DONOR = ctx
    elif ctx is not _DONOR:
        for kind, pred in ctx._propensity.items():
            _DONOR._propensity.setdefault(kind, pred)


def _bench_one(k):
    population, plan, engine = _STATE
    frame, ctx, session = _replication_session(population, plan, k)
    m = frame.m
    S = len(plan.specs)
    tau = np.full((S, m), np.nan)
    flagged = np.zeros((S, m), dtype=bool)
    secs = np.zeros(S)
    fold_seed = stream_seed(plan.master_seed, _FOLD_STREAM, k)
    for i, spec in enumerate(plan.specs):
        t0 = time.perf_counter()
        try:
            ests = engine(frame, spec, seed=fold_seed, session=session)
        except (AreaEffectError, np.linalg.LinAlgError):
            secs[i] = time.perf_counter() - t0
            flagged[i, :] = True
            continue
        secs[i] = time.perf_counter() - t0
        if len(ests) != m:
            raise ConfigError(
                f"engine returned {len(ests)} area estimates, expected {m}")
        for j, est in enumerate(ests):
            tau[i, j] = est.tau
            flagged[i, j] = est.flag is not None
    _harvest(ctx)
    return k, tau, flagged, secs


def _coverage_one(k):
    population, plan, intervals = _STATE
    frame, ctx, session = _replication_session(population, plan, k)
    m = frame.m
    S = len(plan.specs)
    bs = plan.bootstrap
    cov_d = np.zeros((S, m), dtype=bool)
    cov_s = np.zeros((S, m), dtype=bool)
    sc_d = np.zeros((S, m), dtype=bool)
    sc_s = np.zeros((S, m), dtype=bool)
    len_d = np.zeros((S, m))
    len_s = np.zeros((S, m))
    secs = np.zeros(S)
    seed = stream_seed(plan.master_seed, _BOOT_STREAM, k)
    tau = population.tau
    for i, spec in enumerate(plan.specs):
        t0 = time.perf_counter()
        try:
            res = intervals(frame, spec, B=bs.B, C=bs.C, alpha=bs.alpha,
                            seed=seed, workers=1, level1=bs.level1,
                            include_single=True, session=session)
        except (AreaEffectError, np.linalg.LinAlgError):
            secs[i] = time.perf_counter() - t0
            continue
        secs[i] = time.perf_counter() - t0
        for scheme, cov, sc, ln in ((res, cov_d, sc_d, len_d),
                                    (res.single, cov_s, sc_s, len_s)):
            if scheme is None:
                continue
            lo = np.asarray(scheme.lower, dtype=float)
            hi = np.asarray(scheme.upper, dtype=float)
            # infinite endpoints are legitimate (if useless) intervals;
            # only NaN marks a cell the scheme could not score
            ok = ~np.isnan(lo) & ~np.isnan(hi)
            sc[i] = ok
            cov[i] = ok & (lo <= tau) & (tau <= hi)
            ln[i] = np.where(ok, hi - lo, 0.0)
    _harvest(ctx)
    return k, cov_d, cov_s, sc_d, sc_s, len_d, len_s, secs


def _run_ks(plan: ReplicationPlan, state, worker):
    """Map the per-replication worker over the plan's range, in k order."""
    ks = list(plan.ks)
    if plan.workers == 1 or len(ks) == 1:
        _init_state(state)
        try:
            return [worker(k) for k in ks]
        finally:
            _init_state(None)
    ctx = get_context("fork")
    procs = min(plan.workers, len(ks))
    with ctx.Pool(procs, initializer=_init_state, initargs=(state,)) as pool:
        return pool.map(worker, ks)


# ---------------------------------------------------------------------------
# reductions


def _spec_usage(spec: EstimatorSpec):
    nz = spec.nuisance
    uses_mu = spec.family in _IMPUTING and not (
        spec.strategy == "global" and spec.family == "OR")
    uses_e1 = spec.family in _WEIGHTING
    uses_mu_a = spec.family in _AUGMENTED
    return (nz.mu if uses_mu else "-",
            nz.e1 if uses_e1 else "-",
            nz.mu_a if uses_mu_a else "-")


def _attach_pct_err(rows):
    """%err against the best valid row; the zero-MSE edge gets an inf marker."""
    best = min((r.mean_mse for r in rows if r.valid), default=np.nan)
    for r in rows:
        if not r.valid or not np.isfinite(best):
            r.pct_err = np.nan
        elif best == 0.0:
            r.pct_err = 0.0 if r.mean_mse == 0.0 else np.inf
        else:
            r.pct_err = (r.mean_mse - best) / best * 100.0


def run_replications(plan: ReplicationPlan, population: SyntheticPopulation,
                     engine=estimate) -> ResultsTable:
    """Benchmark the plan's grid over K fresh sample draws.

    Flagged or failed area estimates count toward a spec's failure rate and
    are excluded from its error averages; a spec whose failure rate reaches
    1%, or that has an area with no valid replicate at all, is marked
    invalid and excluded from the %err baseline.
    """
    rows_raw = _run_ks(plan, (population, plan, engine), _bench_one)
    m = population.tau.shape[0]
    K = plan.replications
    S = len(plan.specs)
    tau_true = population.tau
    sq_sum = np.zeros((S, m))
    err_sum = np.zeros((S, m))
    cnt = np.zeros((S, m), dtype=np.int64)
    secs = np.zeros(S)
    rep_tau = np.full((K, S, m), np.nan)
    for pos, (k, tau, flagged, sec) in enumerate(rows_raw):
        scored = np.isfinite(tau) & ~flagged
        err = np.where(scored, tau - tau_true[None, :], 0.0)
        sq_sum += err * err
        err_sum += err
        cnt += scored
        secs += sec
        rep_tau[pos] = tau
    rows = []
    for i, spec in enumerate(plan.specs):
        ci = cnt[i]
        with np.errstate(invalid="ignore"):
            mse = np.divide(sq_sum[i], ci, out=np.full(m, np.nan),
                            where=ci > 0)
            bias = np.divide(err_sum[i], ci, out=np.full(m, np.nan),
                             where=ci > 0)
        failures = int(m * K - ci.sum())
        rate = failures / (m * K)
        valid = rate < 0.01 and bool((ci > 0).all())
        rows.append(SpecResult(
            spec=spec, bias=bias, mse=mse, counts=ci, sq_sum=sq_sum[i],
            failures=failures, failure_rate=rate, valid=valid,
            mean_mse=float(mse.mean()) if valid else
            (float(np.nanmean(mse)) if np.isfinite(mse).any() else np.nan),
            mean_bias=float(bias.mean()) if valid else np.nan,
            pct_err=np.nan,
            seconds_total=float(secs[i]),
            seconds_per_rep=float(secs[i]) / K,
        ))
    _attach_pct_err(rows)
    return ResultsTable("benchmark", _area_labels(population),
                        tau_true.copy(), K, rows, replicate_tau=rep_tau)


def run_coverage(plan: ReplicationPlan, population: SyntheticPopulation,
                 intervals=double_bootstrap_ci) -> ResultsTable:
    """Score single- and double-scheme interval coverage over K draws.

    Coverage is the pooled share of (area, replication) cells whose interval
    contains the area's true effect; one interval run per spec and
    replication scores both schemes from the same outer replicates.
    """
    if plan.bootstrap is None:
        raise ConfigError("coverage runs need bootstrap settings in the plan")
    rows_raw = _run_ks(plan, (population, plan, intervals), _coverage_one)
    m = population.tau.shape[0]
    K = plan.replications
    S = len(plan.specs)
    cov_d = np.zeros((S, m), dtype=np.int64)
    cov_s = np.zeros((S, m), dtype=np.int64)
    sc_d = np.zeros((S, m), dtype=np.int64)
    sc_s = np.zeros((S, m), dtype=np.int64)
    len_d = np.zeros((S, m))
    len_s = np.zeros((S, m))
    secs = np.zeros(S)
    for k, cd, cs, sd, ss, ld, ls, sec in rows_raw:
        cov_d += cd
        cov_s += cs
        sc_d += sd
        sc_s += ss
        len_d += ld
        len_s += ls
        secs += sec
    rows = []
    for i, spec in enumerate(plan.specs):
        scored = int(sc_d[i].sum())
        scored_s = int(sc_s[i].sum())
        failures = int(m * K - scored)
        rate = failures / (m * K)
        valid = rate < 0.01 and bool((sc_d[i] > 0).all())
        rows.append(CoverageRow(
            spec=spec,
            covered_double=cov_d[i], covered_single=cov_s[i],
            scored_double=sc_d[i], scored_single=sc_s[i],
            failures=failures, failure_rate=rate, valid=valid,
            coverage_double=cov_d[i].sum() / scored if scored else np.nan,
            coverage_single=cov_s[i].sum() / scored_s if scored_s else np.nan,
            mean_length_double=float(len_d[i].sum() / scored) if scored else np.nan,
            mean_length_single=float(len_s[i].sum() / scored_s) if scored_s else np.nan,
            seconds_total=float(secs[i]),
            seconds_per_rep=float(secs[i]) / K,
        ))
    return ResultsTable("coverage", _area_labels(population),
                        population.tau.copy(), K, rows)


# ---------------------------------------------------------------------------
# presentation


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float) and np.isnan(x):
        return "nan"
    return format(x, ".12g") if isinstance(x, (int, float, np.floating)) else str(x)


def ranked_rows(table: ResultsTable) -> list:
    """Valid rows by ascending mean MSE (labels break ties), then invalid
    rows in grid order."""
    if table.kind == "benchmark":
        good = sorted((r for r in table.rows if r.valid),
                      key=lambda r: (r.mean_mse, r.label))
    else:
        good = sorted((r for r in table.rows if r.valid),
                      key=lambda r: r.label)
    return good + [r for r in table.rows if not r.valid]


def table_csv_rows(table: ResultsTable) -> list:
    """Header + data rows for the results file; no timing columns, so the
    emission is identical for any worker count."""
    if table.kind == "benchmark":
        head = ["estimator", "mu", "e1", "mu_a", "mean_mse", "pct_err",
                "mean_bias", "failure_rate", "valid"]
        rows = [head]
        for r in ranked_rows(table):
            mu, e1, mu_a = _spec_usage(r.spec)
            rows.append([r.label, mu, e1, mu_a, _fmt(r.mean_mse),
                         _fmt(r.pct_err), _fmt(r.mean_bias),
                         _fmt(r.failure_rate), str(int(r.valid))])
        return rows
    head = ["estimator", "mu", "e1", "mu_a", "coverage_double",
            "coverage_single", "mean_length_double", "mean_length_single",
            "failure_rate", "valid"]
    rows = [head]
    for r in ranked_rows(table):
        mu, e1, mu_a = _spec_usage(r.spec)
        rows.append([r.label, mu, e1, mu_a, _fmt(r.coverage_double),
                     _fmt(r.coverage_single), _fmt(r.mean_length_double),
                     _fmt(r.mean_length_single), _fmt(r.failure_rate),
                     str(int(r.valid))])
    return rows


def timing_csv_rows(table: ResultsTable) -> list:
    rows = [["estimator", "seconds_total", "seconds_per_replication"]]
    for r in ranked_rows(table):
        rows.append([r.label, _fmt(r.seconds_total), _fmt(r.seconds_per_rep)])
    return rows


def rank_table(table: ResultsTable, include_time: bool = True) -> str:
    """Aligned text summary; the time column is optional so persisted copies
    can stay byte-reproducible."""
    if table.kind == "benchmark":
        head = ["estimator", "mu", "e1", "mu_a", "mean MSE", "%err", "bias"]
        cols = []
        for r in ranked_rows(table):
            mu, e1, mu_a = _spec_usage(r.spec)
            row = [r.label, mu, e1, mu_a, f"{r.mean_mse:.6g}",
                   "invalid" if not r.valid else f"{r.pct_err:.1f}",
                   f"{r.mean_bias:.4g}"]
            if include_time:
                row.append(f"{r.seconds_per_rep:.3f}")
            cols.append(row)
    else:
        head = ["estimator", "mu", "e1", "mu_a", "cov(double)",
                "cov(single)", "len(double)", "len(single)"]
        cols = []
        for r in ranked_rows(table):
            mu, e1, mu_a = _spec_usage(r.spec)
            row = [r.label, mu, e1, mu_a, f"{r.coverage_double:.4f}",
                   f"{r.coverage_single:.4f}", f"{r.mean_length_double:.4g}",
                   f"{r.mean_length_single:.4g}"]
            if include_time:
                row.append(f"{r.seconds_per_rep:.3f}")
            cols.append(row)
    if include_time:
        head = head + ["s/rep"]
    widths = [max(len(head[c]), *(len(row[c]) for row in cols)) if cols
              else len(head[c]) for c in range(len(head))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(head, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for row in cols:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip())
    return "\n".join(lines)
