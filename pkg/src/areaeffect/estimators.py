"""Area-level treatment effect estimators.

Two imputation-backed strategies plus direct survey baselines:

- global: nuisances fitted once on the sampled part (propensity on the whole
  population), then averaged per area over the imputed population;
- local: outcomes imputed first, then every nuisance refitted inside each
  area on its imputed rows, with area-constant covariates dropped;
- direct: Hajek and survey-weighted IPW contrasts on the sampled part only.

CrossfitAIPW is the local AIPW with per-area K-fold sample splitting applied
after imputation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .design import DesignBuilder, DesignMatrix
from .errors import AreaEffectError, ConfigError, DataError
from .frames import AreaEstimate, ImputedFrame, PopulationFrame, complete_frame
from .learners import (LmmWorkspace, NuisanceTriple, fit_propensity,
                       fit_regression, predict)

STRATEGIES = ("global", "local", "direct")
FAMILIES = ("OR", "IPW", "NIPW", "AIPW", "Hajek", "SurveyIPW", "CrossfitAIPW")
_DIRECT_FAMILIES = ("Hajek", "SurveyIPW")
_LOCAL_ARM_KINDS = ("L", "M", "Gb")
_FOLD_STREAM = 0xCF  # namespaces fold seeds away from bootstrap streams


@dataclass(frozen=True)
class EstimatorSpec:
    """What to estimate and with which nuisance learners."""

    strategy: str
    family: str
    nuisance: NuisanceTriple = field(default_factory=NuisanceTriple)
    folds: int = 5
    allow_erratic: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.family not in FAMILIES:
            raise ConfigError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if (self.family in _DIRECT_FAMILIES) != (self.strategy == "direct"):
            raise ConfigError(
                f"family {self.family!r} requires strategy "
                f"{'direct' if self.family in _DIRECT_FAMILIES else 'global or local'}")
        if self.family == "CrossfitAIPW" and self.strategy != "local":
            raise ConfigError("CrossfitAIPW is a local-strategy estimator")
        if self.family == "IPW" and not self.allow_erratic:
            raise ConfigError(
                "unnormalized IPW is erratic and disabled by default; "
                "set allow_erratic=True to compute it anyway")
        if self.folds < 1:
            raise ConfigError("folds must be >= 1")
        if self.strategy == "local" and self.family in ("OR", "AIPW", "CrossfitAIPW") \
                and self.nuisance.mu_a not in _LOCAL_ARM_KINDS:
            raise ConfigError(
                f"local arm models must be one of {_LOCAL_ARM_KINDS} "
                f"(area random effects are meaningless inside one area), "
                f"got {self.nuisance.mu_a!r}")

    @property
    def label(self) -> str:
        if self.strategy == "direct":
            return self.family
        if self.family == "CrossfitAIPW":
            return f"local-CrossfitAIPW(k={self.folds})"
        return f"{self.strategy}-{self.family}"


# ---------------------------------------------------------------------------
# caching layers


class EstimationContext:
    """Outcome-independent reusables for one population structure.

    Safe to share across frames that differ only in outcome values (bootstrap
    replicates built via with_outcomes), which is checked cheaply through
    array identity.
    """

    def __init__(self, frame: PopulationFrame, mu_interactions: bool = True):
        self.frame = frame
        self.mu_interactions = mu_interactions
        self._builders: dict = {}
        self._matrices: dict = {}
        self._propensity: dict = {}
        self._survey_propensity: dict = {}
        self._workspaces: dict = {}
        self._folds: dict = {}
        self._weights = None

    def compatible(self, frame: PopulationFrame) -> bool:
        base = self.frame
        return frame is base or (
            frame.a is base.a and frame.s is base.s
            and frame.w_ind is base.w_ind and frame.w_ctx is base.w_ctx)

    def builder(self, key: str) -> DesignBuilder:
        if key not in self._builders:
            if key == "mu":
                b = DesignBuilder(self.frame, treatment=True,
                                  interactions=self.mu_interactions)
            elif key == "arm":
                b = DesignBuilder(self.frame)
            elif key == "local":
                b = DesignBuilder(self.frame, contextual=False)
            else:
                raise KeyError(key)
            self._builders[key] = b
        return self._builders[key]

    def matrix(self, key: str, rows: str = "all") -> DesignMatrix:
        mkey = (key, rows)
        if mkey not in self._matrices:
            b = self.builder(key)
            sel = None if rows == "all" else self._row_selector(rows)
            self._matrices[mkey] = b.matrix(sel)
        return self._matrices[mkey]

    def _row_selector(self, rows: str) -> np.ndarray:
        f = self.frame
        if rows == "sampled":
            return np.flatnonzero(f.sampled)
        if rows == "unsampled":
            return np.flatnonzero(~f.sampled)
        if rows in ("s1", "s0"):
            arm = 1 if rows == "s1" else 0
            return np.flatnonzero(f.sampled & (f.a == arm))
        raise KeyError(rows)

    def rows(self, key: str) -> np.ndarray:
        ckey = ("rows", key)
        if ckey not in self._matrices:
            self._matrices[ckey] = self._row_selector(key)
        return self._matrices[ckey]

    def propensity_raw(self, kind: str) -> np.ndarray:
        """Population propensity predictions, fitted on population (X, A)."""
        if kind not in self._propensity:
            M = self.matrix("arm")
            model = fit_propensity(kind, M, self.frame.a.astype(float))
            self._propensity[kind] = predict(model, M)
        return self._propensity[kind]

    def propensity(self, kind: str, clip: tuple):
        raw = self.propensity_raw(kind)
        clipped_mask = (raw < clip[0]) | (raw > clip[1])
        return np.clip(raw, clip[0], clip[1]), clipped_mask

    def survey_propensity_raw(self, kind: str) -> np.ndarray:
        """Sampled-part propensity predictions on sampled rows only."""
        if kind not in self._survey_propensity:
            M = self.matrix("arm", "sampled")
            a = self.frame.a[self.rows("sampled")].astype(float)
            model = fit_propensity(kind, M, a)
            self._survey_propensity[kind] = predict(model, M)
        return self._survey_propensity[kind]

    def design_weights(self) -> np.ndarray:
        if self._weights is None:
            self._weights = self.frame.design_weights()
        return self._weights

    def adopt_population_caches(self, other: "EstimationContext") -> None:
        """Copy sample-independent caches (population design matrices and the
        population propensity fits) from a context whose frame describes the
        same population; only the sampling indicator and outcomes may differ.
        Useful across replications that redraw the sample from one population.
        """
        f, g = self.frame, other.frame
        same = (f.area_labels == g.area_labels
                and np.array_equal(f.area, g.area)
                and np.array_equal(f.a, g.a)
                and np.array_equal(f.w_ind, g.w_ind)
                and np.array_equal(f.w_ctx, g.w_ctx))
        if not same:
            raise ConfigError("contexts describe different populations")
        if self.mu_interactions != other.mu_interactions:
            raise ConfigError("contexts use different outcome designs")
        self._propensity.update(other._propensity)
        for mkey, M in other._matrices.items():
            if mkey[0] != "rows" and mkey[1] == "all":
                self._matrices.setdefault(mkey, M)

    def lmm_workspace(self, bkey: str, rows_key: str, variant: str):
        """Cached REML gram workspace; depends on the design and grouping
        only, so bootstrap outcome vectors share it."""
        key = (bkey, rows_key, variant)
        if key not in self._workspaces:
            M = self.matrix(bkey, rows_key)
            rows = self.rows(rows_key)
            if variant == "H2r":
                Z = np.column_stack([np.ones(M.n_rows),
                                     self.frame.a[rows].astype(float)])
            else:
                Z = np.ones((M.n_rows, 1))
            self._workspaces[key] = LmmWorkspace(M.values, Z,
                                                 self.frame.area[rows],
                                                 self.frame.m)
        return self._workspaces[key]

    def fold_assignment(self, seed: int, j: int, k_folds: int, n_rows: int,
                        attempt: int) -> np.ndarray:
        key = (seed, j, k_folds, attempt)
        if key not in self._folds:
            rng = np.random.default_rng(
                np.random.SeedSequence(seed, spawn_key=(_FOLD_STREAM, j, attempt)))
            fold = np.empty(n_rows, dtype=np.int64)
            fold[rng.permutation(n_rows)] = np.arange(n_rows) % k_folds
            self._folds[key] = fold
        return self._folds[key]


class EstimationSession:
    """Outcome-dependent memo for one frame: shared mu/arm fits across specs."""

    def __init__(self, frame: PopulationFrame, context: EstimationContext | None = None):
        if context is None:
            context = EstimationContext(frame)
        elif not context.compatible(frame):
            raise ConfigError("estimation context built for a different population")
        self.frame = frame
        self.ctx = context
        self._imputed: dict = {}
        self._arm_preds: dict = {}

    def imputed(self, mu_kind: str) -> ImputedFrame:
        if mu_kind not in self._imputed:
            self._imputed[mu_kind] = impute_outcomes(self.frame, mu_kind,
                                                     session=self)
        return self._imputed[mu_kind]

    def arm_predictions(self, kind: str):
        """Population-wide predictions of the two arm models fitted on the
        sampled part."""
        if kind not in self._arm_preds:
            f, ctx = self.frame, self.ctx
            M_all = ctx.matrix("arm")
            preds = []
            for rows_key, arm in (("s1", 1), ("s0", 0)):
                rows = ctx.rows(rows_key)
                M = ctx.matrix("arm", rows_key)
                y = f.y[rows]
                base = "H1r" if kind in ("H1r", "H2m") else kind
                ws = (ctx.lmm_workspace("arm", rows_key, "H1r")
                      if base == "H1r" and rows.size else None)
                fit = fit_regression(base, M, y, area=f.area[rows],
                                     n_areas=f.m, workspace=ws)
                preds.append(predict(fit, M_all, area=f.area))
            self._arm_preds[kind] = tuple(preds)
        return self._arm_preds[kind]


def make_session(frame: PopulationFrame,
                 context: EstimationContext | None = None) -> EstimationSession:
    return EstimationSession(frame, context)


# ---------------------------------------------------------------------------
# imputation


def impute_outcomes(frame: PopulationFrame, mu_kind: str,
                    session: EstimationSession | None = None) -> ImputedFrame:
    """Complete the population: observed Y on the sampled part, model
    predictions at the unit's own treatment elsewhere."""
    ses = session if session is not None else make_session(frame)
    f, ctx = ses.frame, ses.ctx
    if not f.sampled.any():
        raise DataError("cannot impute from an empty sample")
    if f.sampled.all():
        return complete_frame(f, np.zeros(f.n_units))
    # H2m is a per-arm model, so the treatment column would be constant
    # within each fit; its design carries covariates only
    bkey = "arm" if mu_kind == "H2m" else "mu"
    rows = ctx.rows("sampled")
    M_s = ctx.matrix(bkey, "sampled")
    ws = None
    if mu_kind in ("H1r", "H2r"):
        ws = ctx.lmm_workspace(bkey, "sampled", mu_kind)
    elif mu_kind == "H2m":
        a_s = f.a[rows]
        if (a_s == 1).any() and (a_s == 0).any():
            ws = {1: ctx.lmm_workspace("arm", "s1", "H1r"),
                  0: ctx.lmm_workspace("arm", "s0", "H1r")}
    fit = fit_regression(mu_kind, M_s, f.y[rows], area=f.area[rows],
                         a=f.a[rows].astype(float), n_areas=f.m, workspace=ws)
    off = ctx.rows("unsampled")
    if off.size:
        M_off = ctx.matrix(bkey, "unsampled")
        pred_off = predict(fit, M_off, area=f.area[off],
                           a=f.a[off].astype(float))
    else:
        pred_off = np.empty(0)
    predictions = np.zeros(f.n_units)
    predictions[off] = pred_off
    return complete_frame(f, predictions)


# ---------------------------------------------------------------------------
# the estimator formulas, as a pure function of unit-level inputs


def area_components(a, y=None, e1=None, mu1=None, mu0=None,
                    family: str = "AIPW"):
    """Arm means (tau1, tau0) of one area's estimator from unit-level arrays.

    OR uses mu1/mu0 only; IPW and NIPW use y and e1; AIPW uses everything.
    """
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    if family == "OR":
        return float(np.mean(mu1)), float(np.mean(mu0))
    e1 = np.asarray(e1, dtype=float)
    e0 = 1.0 - e1
    if family == "IPW":
        return (float(np.sum(a * y / e1) / n),
                float(np.sum((1.0 - a) * y / e0) / n))
    if family == "NIPW":
        return (float(np.sum(a * y / e1) / np.sum(a / e1)),
                float(np.sum((1.0 - a) * y / e0) / np.sum((1.0 - a) / e0)))
    if family in ("AIPW", "CrossfitAIPW"):
        t1 = a / e1 * (y - mu1) + mu1
        t0 = (1.0 - a) / e0 * (y - mu0) + mu0
        return float(np.mean(t1)), float(np.mean(t0))
    raise ConfigError(f"unknown family {family!r}")


def _done(label, spec: EstimatorSpec, t1: float, t0: float,
          diagnostics: dict) -> AreaEstimate:
    return AreaEstimate(label, t1 - t0, t1, t0, spec.strategy, spec.family,
                        spec.nuisance.tag, diagnostics=diagnostics)


def _flagged(label, spec: EstimatorSpec, flag: str,
             diagnostics: dict) -> AreaEstimate:
    return AreaEstimate(label, np.nan, np.nan, np.nan, spec.strategy,
                        spec.family, spec.nuisance.tag, flag=flag,
                        diagnostics=diagnostics)


# ---------------------------------------------------------------------------
# strategies


def estimate_global(frame: PopulationFrame, spec: EstimatorSpec,
                    session: EstimationSession | None = None) -> list[AreaEstimate]:
    ses = session if session is not None else make_session(frame)
    f, nz = ses.frame, spec.nuisance
    need_e1 = spec.family in ("IPW", "NIPW", "AIPW")
    need_mu_a = spec.family in ("OR", "AIPW")
    y_hat = ses.imputed(nz.mu).y_hat if need_e1 else None
    mu1 = mu0 = e1 = clipped = None
    if need_mu_a:
        mu1, mu0 = ses.arm_predictions(nz.mu_a)
    if need_e1:
        e1, clipped = ses.ctx.propensity(nz.e1, nz.clip)
    c = f.counts
    out = []
    for j in range(f.m):
        label = f.area_labels[j]
        sl = f.area_slice(j)
        diag = {}
        if need_e1:
            diag["e1_clipped"] = int(clipped[sl].sum())
        if spec.family == "IPW":
            diag["warning"] = "erratic"
        if need_e1 and (c.N1[j] == 0 or c.N0[j] == 0):
            out.append(_flagged(label, spec, "degenerate-arm", diag))
            continue
        t1, t0 = area_components(
            f.a[sl],
            None if y_hat is None else y_hat[sl],
            None if e1 is None else e1[sl],
            None if mu1 is None else mu1[sl],
            None if mu0 is None else mu0[sl],
            spec.family)
        out.append(_done(label, spec, t1, t0, diag))
    return out


def _fit_local_nuisances(Vj, names, aj, yj, nz: NuisanceTriple, need_mu_a,
                         need_e1, train=None, evaluate=None):
    """Fit within-area nuisances on `train` rows, predict on `evaluate` rows."""
    tr = slice(None) if train is None else train
    ev = slice(None) if evaluate is None else evaluate
    Xev = DesignMatrix(Vj[ev], names)
    mu1 = mu0 = e1 = None
    if need_mu_a:
        preds = []
        for arm in (1, 0):
            rows = np.flatnonzero((aj == arm) if train is None
                                  else (aj == arm) & train)
            fit = fit_regression(nz.mu_a, DesignMatrix(Vj[rows], names),
                                 yj[rows])
            preds.append(predict(fit, Xev))
        mu1, mu0 = preds
    if need_e1:
        Xtr = DesignMatrix(Vj[tr], names)
        fit = fit_propensity(nz.e1, Xtr, aj[tr].astype(float))
        e1 = predict(fit, Xev)
    return mu1, mu0, e1


def estimate_local(frame: PopulationFrame, spec: EstimatorSpec,
                   session: EstimationSession | None = None) -> list[AreaEstimate]:
    ses = session if session is not None else make_session(frame)
    f, nz = ses.frame, spec.nuisance
    need_e1 = spec.family in ("IPW", "NIPW", "AIPW")
    need_mu_a = spec.family in ("OR", "AIPW")
    y_hat = ses.imputed(nz.mu).y_hat
    Mloc = ses.ctx.matrix("local")
    c = f.counts
    out = []
    for j in range(f.m):
        label = f.area_labels[j]
        sl = f.area_slice(j)
        diag = {}
        if spec.family == "IPW":
            diag["warning"] = "erratic"
        if c.N1[j] == 0 or c.N0[j] == 0:
            out.append(_flagged(label, spec, "degenerate-arm", diag))
            continue
        aj = f.a[sl]
        yj = y_hat[sl]
        try:
            mu1, mu0, e1 = _fit_local_nuisances(
                Mloc.values[sl], Mloc.names, aj, yj, nz, need_mu_a, need_e1)
        except AreaEffectError as exc:
            diag["error"] = str(exc)
            out.append(_flagged(label, spec, f"local-fit-failed(area={label})",
                                diag))
            continue
        if need_e1:
            clipped = (e1 < nz.clip[0]) | (e1 > nz.clip[1])
            diag["e1_clipped"] = int(clipped.sum())
            e1 = np.clip(e1, nz.clip[0], nz.clip[1])
        t1, t0 = area_components(aj, yj, e1, mu1, mu0, spec.family)
        out.append(_done(label, spec, t1, t0, diag))
    return out


def estimate_crossfit_aipw(frame: PopulationFrame, spec: EstimatorSpec,
                           seed: int = 0,
                           session: EstimationSession | None = None) -> list[AreaEstimate]:
    """Local AIPW with per-area K-fold cross-fitting after imputation.

    Nuisances are fitted out-of-fold and evaluated in-fold; K determines the
    split (K=1 means fit and evaluate on all rows, K=N_j is leave-one-out).
    A fold failure triggers one refold with a fresh stream; a second failure
    flags the area.
    """
    ses = session if session is not None else make_session(frame)
    f, nz = ses.frame, spec.nuisance
    y_hat = ses.imputed(nz.mu).y_hat
    Mloc = ses.ctx.matrix("local")
    c = f.counts
    out = []
    for j in range(f.m):
        label = f.area_labels[j]
        sl = f.area_slice(j)
        diag = {}
        if c.N1[j] == 0 or c.N0[j] == 0:
            out.append(_flagged(label, spec, "degenerate-arm", diag))
            continue
        aj = f.a[sl]
        yj = y_hat[sl]
        Vj = Mloc.values[sl]
        n_j = Vj.shape[0]
        k = min(spec.folds, n_j)
        result = None
        for attempt in (0, 1):
            try:
                if k == 1:
                    result = _fit_local_nuisances(Vj, Mloc.names, aj, yj, nz,
                                                  True, True)
                else:
                    fold = ses.ctx.fold_assignment(seed, j, k, n_j, attempt)
                    mu1 = np.empty(n_j)
                    mu0 = np.empty(n_j)
                    e1 = np.empty(n_j)
                    for kk in range(k):
                        te = fold == kk
                        tr = ~te
                        m1, m0, e = _fit_local_nuisances(
                            Vj, Mloc.names, aj, yj, nz, True, True,
                            train=tr, evaluate=te)
                        mu1[te], mu0[te], e1[te] = m1, m0, e
                    result = (mu1, mu0, e1)
                break
            except AreaEffectError as exc:
                diag["error"] = str(exc)
                if attempt == 1 or k == 1:
                    break
        if result is None:
            out.append(_flagged(label, spec, f"local-fit-failed(area={label})",
                                diag))
            continue
        mu1, mu0, e1 = result
        clipped = (e1 < nz.clip[0]) | (e1 > nz.clip[1])
        diag["e1_clipped"] = int(clipped.sum())
        e1 = np.clip(e1, nz.clip[0], nz.clip[1])
        t1, t0 = area_components(aj, yj, e1, mu1, mu0, "AIPW")
        out.append(_done(label, spec, t1, t0, diag))
    return out


# ---------------------------------------------------------------------------
# direct (sampled-part) baselines


def estimate_hajek(frame: PopulationFrame,
                   spec: EstimatorSpec | None = None) -> list[AreaEstimate]:
    """Weighted arm-mean contrast on the sampled part, weights 1/pi."""
    if spec is None:
        spec = EstimatorSpec("direct", "Hajek")
    f = frame
    w = f.design_weights()
    c = f.counts
    out = []
    for j in range(f.m):
        label = f.area_labels[j]
        sl = f.area_slice(j)
        if c.n1[j] == 0 or c.n0[j] == 0:
            out.append(_flagged(label, spec, "degenerate-arm", {}))
            continue
        s = f.sampled[sl]
        aj = f.a[sl]
        parts = []
        for arm in (1, 0):
            rows = s & (aj == arm)
            wa = w[sl][rows]
            parts.append(float(np.sum(wa * f.y[sl][rows]) / np.sum(wa)))
        out.append(_done(label, spec, parts[0], parts[1], {}))
    return out


def estimate_survey_ipw(frame: PopulationFrame,
                        spec: EstimatorSpec | None = None,
                        session: EstimationSession | None = None) -> list[AreaEstimate]:
    """Self-normalized inverse-propensity contrast on the sampled part, with
    the propensity fitted on sampled units only."""
    if spec is None:
        spec = EstimatorSpec("direct", "SurveyIPW")
    ses = session if session is not None else make_session(frame)
    f, nz = ses.frame, spec.nuisance
    raw = ses.ctx.survey_propensity_raw(nz.e1)
    clipped_mask = (raw < nz.clip[0]) | (raw > nz.clip[1])
    e1_s = np.clip(raw, nz.clip[0], nz.clip[1])
    srows = ses.ctx.rows("sampled")
    sample_area = f.area[srows]
    c = f.counts
    out = []
    for j in range(f.m):
        label = f.area_labels[j]
        in_j = sample_area == j
        diag = {"e1_clipped": int(clipped_mask[in_j].sum())}
        if c.n1[j] == 0 or c.n0[j] == 0:
            out.append(_flagged(label, spec, "degenerate-arm", diag))
            continue
        aj = f.a[srows][in_j].astype(float)
        yj = f.y[srows][in_j]
        ej = e1_s[in_j]
        t1 = float(np.sum(aj * yj / ej) / np.sum(aj / ej))
        t0 = float(np.sum((1 - aj) * yj / (1 - ej))
                   / np.sum((1 - aj) / (1 - ej)))
        out.append(_done(label, spec, t1, t0, diag))
    return out


# ---------------------------------------------------------------------------
# dispatch


def estimate(frame: PopulationFrame, spec: EstimatorSpec, *, seed: int = 0,
             session: EstimationSession | None = None) -> list[AreaEstimate]:
    """Per-area estimates for one estimator specification."""
    if spec.family == "Hajek":
        return estimate_hajek(frame, spec)
    if spec.family == "SurveyIPW":
        return estimate_survey_ipw(frame, spec, session)
    if spec.family == "CrossfitAIPW":
        return estimate_crossfit_aipw(frame, spec, seed, session)
    if spec.strategy == "global":
        return estimate_global(frame, spec, session)
    return estimate_local(frame, spec, session)
