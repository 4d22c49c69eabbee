"""Residual block bootstrap confidence intervals for area effect estimates.

Single bootstrap: fit the imputation model once on the sampled part, split
its residuals into area means (level 2) and within-area remainders (level 1),
then rebuild sampled outcomes per replicate as

    Y*_ij = mu_hat(X_ij) + r2*_j + r1*_ij

where r2* is drawn with replacement from the m area means (one value per
area) and r1* from the pooled remainders (or within each area when
level1="within"). Covariates, treatment, sampling flags and the unsampled
part stay fixed; every replicate re-runs the full estimation pipeline,
including re-imputation, on the rebuilt outcomes. Intervals are debiased
percentile intervals: order statistics of the bias-shifted replicates.

Double bootstrap: each outer replicate additionally refits the imputation
model on its own rebuilt outcomes, decomposes the new residuals, and runs C
inner replicates to estimate the bias of the outer bias estimate; the
interval shift becomes 2*bias - mean(bias*). The outer replicate stream is
unchanged, so the single-scheme intervals derived from the same outer
replicates (include_single=True) match a plain bootstrap_ci run exactly.

Randomness contract (relied on by the replay tests): replicate b draws from
default_rng(SeedSequence(seed, spawn_key=(b,))) -- first the m level-2
indices via integers(0, m, size=m), then the level-1 indices: pooled mode
draws integers(0, n, size=n); within mode draws integers(0, n_j, size=n_j)
per area j in ascending order. Inner replicate c of outer replicate b uses
spawn_key=(b, c) with the same draw order. Each draw depends only on
(seed, b[, c]), so results are identical for any worker count.

Residuals are deliberately not rescaled; the double bootstrap is the
accuracy correction. A replicate whose estimator fails is dropped (NaN row)
with a diagnostic; an area whose drop rate exceeds 5% is flagged "unstable".
Population-structure caches (design matrices, propensity fits) are shared
across replicates because they never read outcomes.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from multiprocessing import get_context

import numpy as np

from .errors import AreaEffectError, ConfigError, DataError
from .estimators import (EstimationSession, EstimatorSpec, estimate,
                         make_session)
from .frames import PopulationFrame
from .learners import fit_regression, predict

LEVEL1_MODES = ("pooled", "within")
_MAX_LOGGED_ERRORS = 10


@dataclass(frozen=True)
class ResidualSets:
    """Sampled-part residuals split into area means and remainders.

    marginal = r1 + r2[area] by construction; r2 holds exact per-area means
    of the marginal residuals and r1 sums to zero within each area.
    """

    r1: np.ndarray
    r2: np.ndarray
    marginal: np.ndarray


def decompose_residuals(marginal, area, m: int) -> ResidualSets:
    """Split marginal residuals into per-area means and centered remainders."""
    marginal = np.asarray(marginal, dtype=float)
    area = np.asarray(area)
    n_per = np.bincount(area, minlength=m)
    if (n_per == 0).any():
        j = int(np.argmax(n_per == 0))
        raise DataError(f"area index {j} has no residuals")
    r2 = np.bincount(area, weights=marginal, minlength=m) / n_per
    return ResidualSets(marginal - r2[area], r2, marginal)


def compute_residuals(frame: PopulationFrame, mu_kind: str,
                      session: EstimationSession | None = None) -> ResidualSets:
    """Residuals of the imputation model on the sampled part.

    The model is the same fit the imputation step uses (same learner kind,
    same design, trained on the sampled part); here it is evaluated on its
    own training rows. Every area must have at least one sampled unit.
    """
    ses = session if session is not None else make_session(frame)
    f, ctx = ses.frame, ses.ctx
    c = f.counts
    if (c.n == 0).any():
        label = f.area_labels[int(np.argmax(c.n == 0))]
        raise DataError(f"area {label!r} has no sampled units")
    bkey = "arm" if mu_kind == "H2m" else "mu"
    rows = ctx.rows("sampled")
    M_s = ctx.matrix(bkey, "sampled")
    af = f.a[rows].astype(float)
    fit = fit_regression(mu_kind, M_s, f.y[rows], area=f.area[rows], a=af,
                         n_areas=f.m)
    fitted = predict(fit, M_s, area=f.area[rows], a=af)
    return decompose_residuals(f.y[rows] - fitted, f.area[rows], f.m)


def percentile_indices(B: int, alpha: float) -> tuple[int, int]:
    """0-based order-statistic indices of the percentile interval.

    1-based positions are floor(alpha/2*B)+1 and floor((1-alpha/2)*B)+1; the
    upper one equals B - ceil(alpha/2*B) + 1 exactly, which avoids the float
    rounding of (1-alpha/2)*B. Tiny epsilons absorb the representation error
    of alpha itself.
    """
    x = alpha * B / 2.0
    lo = int(np.floor(x + 1e-9))
    hi = B - int(np.ceil(x - 1e-9))
    return lo, hi


def replicate_interval(col: np.ndarray, shift: float,
                       alpha: float) -> tuple[float, float, int]:
    """(lower, upper, kept) from one area's replicate column.

    NaN entries are dropped; the remaining values are shifted down by
    ``shift`` and the interval endpoints are their order statistics.
    """
    kept = col[np.isfinite(col)]
    if kept.size == 0 or not np.isfinite(shift):
        return np.nan, np.nan, int(kept.size)
    srt = np.sort(kept - shift)
    lo, hi = percentile_indices(kept.size, alpha)
    return float(srt[lo]), float(srt[hi]), int(kept.size)


@dataclass
class BootstrapResult:
    """Replicate matrix, debiasing shifts and per-area percentile intervals.

    ``replicates`` has exactly B rows; dropped replicates appear as NaN.
    ``bias`` is the shift actually applied before taking order statistics
    (the plain bias for the single scheme, the doubly-corrected bias for the
    double scheme). ``single`` carries the single-scheme result derived from
    the same outer replicates when a double run asked for it.
    """

    estimates: list
    replicates: np.ndarray
    tau_hat: np.ndarray
    bias: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    scheme: str
    B: int
    C: int | None
    alpha: float
    flags: list
    diagnostics: dict = field(default_factory=dict)
    single: "BootstrapResult | None" = None


def _check_args(B: int, alpha: float, level1: str, C: int | None = None):
    if B < 20:
        raise ConfigError("B must be >= 20")
    if not 0.0 < alpha < 1.0:
        raise ConfigError("alpha must be in (0, 1)")
    if level1 not in LEVEL1_MODES:
        raise ConfigError(f"level1 must be one of {LEVEL1_MODES}, got {level1!r}")
    if C is not None and C < 2:
        # the inner level only feeds a bias estimate that is averaged over
        # all B*C draws, so it tolerates far smaller counts than B does
        raise ConfigError("C must be >= 2")


def _draw_outcomes(rng, mu_hat, r1, r2, sarea, level1: str) -> np.ndarray:
    """One replicate's rebuilt sampled outcomes; see the module docstring
    for the documented draw order."""
    m = r2.shape[0]
    n = r1.shape[0]
    r2_star = r2[rng.integers(0, m, size=m)]
    if level1 == "pooled":
        r1_star = r1[rng.integers(0, n, size=n)]
    else:
        r1_star = np.empty(n)
        for j in range(m):
            mask = sarea == j
            pool = r1[mask]
            r1_star[mask] = pool[rng.integers(0, pool.size, size=pool.size)]
    return mu_hat + r2_star[sarea] + r1_star


def _area_flag(base_flag, kept: int, B: int, shift: float):
    """Interval flag policy: the point estimate's flag wins; otherwise an
    area is unstable when its interval cannot be formed or when more than 5%
    of replicates were dropped."""
    if base_flag is not None:
        return base_flag
    if kept == 0 or not np.isfinite(shift):
        return "unstable"
    if (B - kept) > 0.05 * B:
        return "unstable"
    return None


# ---------------------------------------------------------------------------
# replicate execution (shared by the inline and worker-pool paths)

_STATE: dict | None = None


def _set_state(state):
    global _STATE
    _STATE = state


def _estimate_taus(frame, st) -> tuple[np.ndarray, EstimationSession]:
    ses = EstimationSession(frame, st["ctx"])
    ests = estimate(frame, st["spec"], seed=st["seed"], session=ses)
    return np.array([e.tau for e in ests]), ses


def _outer_task(b: int):
    """(tau row, inner bias row or None, inner drop count, error or None)."""
    st = _STATE
    m = st["res"].r2.shape[0]
    nan_row = np.full(m, np.nan)
    rng = np.random.default_rng(np.random.SeedSequence(st["seed"],
                                                       spawn_key=(b,)))
    y_star = _draw_outcomes(rng, st["mu_hat"], st["res"].r1, st["res"].r2,
                            st["sarea"], st["level1"])
    fb = st["frame"].with_outcomes(y_star)
    try:
        tau_b, ses_b = _estimate_taus(fb, st)
    except (AreaEffectError, np.linalg.LinAlgError) as exc:
        return nan_row, (nan_row if st["C"] else None), 0, f"outer b={b}: {exc}"
    if not st["C"]:
        return tau_b, None, 0, None
    try:
        inner = compute_residuals(fb, st["spec"].nuisance.mu, session=ses_b)
    except (AreaEffectError, np.linalg.LinAlgError) as exc:
        return tau_b, nan_row, 0, f"refit b={b}: {exc}"
    mu_b = fb.y[st["srows"]] - inner.marginal
    sums = np.zeros(m)
    counts = np.zeros(m)
    dropped = 0
    err = None
    for c in range(st["C"]):
        rng_c = np.random.default_rng(np.random.SeedSequence(st["seed"],
                                                             spawn_key=(b, c)))
        y_cc = _draw_outcomes(rng_c, mu_b, inner.r1, inner.r2, st["sarea"],
                              st["level1"])
        fcc = st["frame"].with_outcomes(y_cc)
        try:
            tau_cc, _ = _estimate_taus(fcc, st)
        except (AreaEffectError, np.linalg.LinAlgError) as exc:
            dropped += 1
            if err is None:
                err = f"inner b={b} c={c}: {exc}"
            continue
        ok = np.isfinite(tau_cc)
        sums[ok] += tau_cc[ok]
        counts[ok] += 1.0
    bias_star = np.where(counts > 0, sums / np.maximum(counts, 1.0),
                         np.nan) - tau_b
    return tau_b, bias_star, dropped, err


def _run_outer(B: int, workers: int, state: dict) -> list:
    _set_state(state)
    try:
        if workers <= 1:
            return [_outer_task(b) for b in range(B)]
        with get_context("fork").Pool(processes=workers) as pool:
            return pool.map(_outer_task, range(B))
    finally:
        _set_state(None)


# ---------------------------------------------------------------------------
# assembly


def _column_means(mat: np.ndarray) -> np.ndarray:
    counts = np.isfinite(mat).sum(axis=0)
    sums = np.where(np.isfinite(mat), mat, 0.0).sum(axis=0)
    return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


def _assemble(base_est, tau_hat, rep, shift, alpha, scheme, B, C,
              diagnostics) -> BootstrapResult:
    m = tau_hat.shape[0]
    lower = np.full(m, np.nan)
    upper = np.full(m, np.nan)
    flags = []
    kept_counts = []
    ests = []
    for j in range(m):
        lo, hi, kept = replicate_interval(rep[:, j], shift[j], alpha)
        lower[j], upper[j] = lo, hi
        kept_counts.append(kept)
        flag = _area_flag(base_est[j].flag, kept, B, shift[j])
        flags.append(flag)
        diag = dict(base_est[j].diagnostics)
        diag["replicates_kept"] = kept
        diag["bias"] = float(shift[j]) if np.isfinite(shift[j]) else np.nan
        ests.append(dataclasses.replace(
            base_est[j], flag=flag,
            lower=float(lo) if np.isfinite(lo) else None,
            upper=float(hi) if np.isfinite(hi) else None,
            diagnostics=diag))
    diagnostics = dict(diagnostics)
    diagnostics["kept"] = kept_counts
    return BootstrapResult(ests, rep, tau_hat, np.asarray(shift, dtype=float),
                           lower, upper, scheme, B, C, alpha, flags,
                           diagnostics)


def _prepare(frame, spec, seed, level1, C, session):
    ses = session if session is not None else make_session(frame)
    f, ctx = ses.frame, ses.ctx
    base_est = estimate(f, spec, seed=seed, session=ses)
    tau_hat = np.array([e.tau for e in base_est])
    res = compute_residuals(f, spec.nuisance.mu, session=ses)
    srows = ctx.rows("sampled")
    state = dict(frame=f, ctx=ctx, spec=spec, seed=seed, res=res,
                 mu_hat=f.y[srows] - res.marginal, sarea=f.area[srows],
                 srows=srows, level1=level1, C=C)
    return base_est, tau_hat, state


def bootstrap_ci(frame: PopulationFrame, spec: EstimatorSpec, B: int = 1000,
                 alpha: float = 0.05, seed: int = 0, workers: int = 1,
                 level1: str = "pooled",
                 session: EstimationSession | None = None) -> BootstrapResult:
    """Debiased percentile intervals from B residual-bootstrap replicates."""
    _check_args(B, alpha, level1)
    base_est, tau_hat, state = _prepare(frame, spec, seed, level1, 0, session)
    rows = _run_outer(B, workers, state)
    rep = np.vstack([r[0] for r in rows])
    errors = [r[3] for r in rows if r[3] is not None]
    bias = _column_means(rep) - tau_hat
    diagnostics = {"level1": level1, "dropped": len(errors),
                   "errors": errors[:_MAX_LOGGED_ERRORS]}
    return _assemble(base_est, tau_hat, rep, bias, alpha, "single", B, None,
                     diagnostics)


def _count_stage(errors: list, stage: str) -> int:
    return sum(1 for e in errors if e.startswith(stage))


def double_bootstrap_ci(frame: PopulationFrame, spec: EstimatorSpec,
                        B: int = 1000, C: int = 100, alpha: float = 0.05,
                        seed: int = 0, workers: int = 1,
                        level1: str = "pooled", include_single: bool = True,
                        session: EstimationSession | None = None) -> BootstrapResult:
    """Double-bootstrap intervals: the debiasing shift is 2*bias - mean(bias*),
    where bias* is each outer replicate's own inner-bootstrap bias.

    With include_single=True the result also carries the single-scheme
    intervals computed from the same outer replicates (identical to a
    bootstrap_ci run with the same seed) under ``.single``.
    """
    _check_args(B, alpha, level1, C)
    base_est, tau_hat, state = _prepare(frame, spec, seed, level1, C, session)
    rows = _run_outer(B, workers, state)
    rep = np.vstack([r[0] for r in rows])
    bias_star = np.vstack([r[1] for r in rows])
    inner_dropped = sum(r[2] for r in rows)
    errors = [r[3] for r in rows if r[3] is not None]
    bias = _column_means(rep) - tau_hat
    mean_bias_star = _column_means(bias_star)
    biasc = 2.0 * bias - mean_bias_star
    diagnostics = {"level1": level1,
                   "dropped": _count_stage(errors, "outer"),
                   "refit_failed": _count_stage(errors, "refit"),
                   "inner_dropped": inner_dropped,
                   "errors": errors[:_MAX_LOGGED_ERRORS],
                   "bias_outer": bias, "bias_inner_mean": mean_bias_star}
    result = _assemble(base_est, tau_hat, rep, biasc, alpha, "double", B, C,
                       diagnostics)
    if include_single:
        single_diag = {"level1": level1, "dropped": diagnostics["dropped"],
                       "errors": errors[:_MAX_LOGGED_ERRORS]}
        result.single = _assemble(base_est, tau_hat, rep, bias, alpha,
                                  "single", B, None, single_diag)
    return result
