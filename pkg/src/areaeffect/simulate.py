"""Synthetic populations with known area-level treatment effects.

Potential outcomes follow a log-scale surface with area-varying coefficients:

    Y(a) = log( c_j^a + g_j + X'b_a1_j + exp(X'b_a2_j) + eps(a) )

with equicorrelated covariates X, an area-level covariate g_j, uniform
area intercepts (treated intercepts shifted up), and per-area coefficient
vectors; the treated-arm coefficients add mean-shifted increments to the
control-arm ones. All second parameters of normal distributions in this
module are variances. Treatment is a per-unit Bernoulli draw from a logistic
propensity in (X, g_j) with area-varying coefficients. Sampling is stratified
by (area, arm): a fixed share of each area's treated units (rounded down)
and a per-area multiple of that count from the controls (rounded up), drawn
uniformly without replacement, with design weights N_ja / n_ja.

The log argument must stay positive: offending units have (X, eps(0),
eps(1)) redrawn jointly up to a capped number of rounds, after which the
argument is clamped to a small floor and counted in diagnostics. The capped
redraw preserves the stated covariate structure except on the clamped set.
By default the treated-arm exp-term increment has mean zero: a mean-shifted
exp term makes realized var(Y(1)) explode, contradicting the variance range
this generator is expected to produce; the shift is configurable.

Randomness: the population (coefficients, covariates, noise) uses
SeedSequence(master_seed, spawn_key=(1,)); treatment assignment uses
spawn_key=(2,); sample draws take their own seed so replications can redraw
only the sample while the population stays fixed.

Potential outcomes, true effects, and true propensities live on
SyntheticPopulation, never on the estimator-facing PopulationFrame.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataError
from .frames import PopulationFrame

_POP_STREAM = 1
_TREAT_STREAM = 2
_SAMPLE_STREAM = 3


@dataclass(frozen=True)
class SimConfig:
    """Generator knobs; defaults give 41 areas of 1000 units each."""

    m: int = 41
    area_size: int = 1000
    n_covariates: int = 10
    cov_diag: float = 1.0
    cov_offdiag: float = 0.5
    context_var: float = 2.6
    coef_var: float = 3.0
    lin_shift_mean: float = 4.0
    lin_shift_scale: float = 2.0
    exp_shift_mean: float = 0.0
    exp_scale: float = 0.1
    c0_range: tuple = (1.0, 2.0)
    c1_range: tuple = (2.0, 3.0)
    alpha_mean: float = 2.0
    alpha_var: float = 6.0
    alpha_last_var: float = 0.25
    alpha_context_var: float = 0.25
    treated_rate: float = 0.02
    segments: tuple = ((25, 0.01, 0.5), (10, 0.51, 1.0), (6, 0.9, 1.0))
    noise_sd: float = 1.0
    shared_noise: bool = False
    positivity_max_redraws: int = 400
    positivity_floor: float = 1e-6
    master_seed: int = 0

    def __post_init__(self):
        if self.m < 1 or self.area_size < 1 or self.n_covariates < 1:
            raise ConfigError("m, area_size and n_covariates must be positive")
        counts = sum(int(c) for c, *_ in self.segments)
        if counts != self.m:
            raise ConfigError(
                f"segment counts sum to {counts}, expected m={self.m}")
        for c, lo, hi in self.segments:
            if c < 0 or not (0.0 < lo <= hi <= 1.0):
                raise ConfigError(
                    f"segment ({c}, {lo}, {hi}) must have rates in (0, 1]")
        if not 0.0 < self.treated_rate <= 1.0:
            raise ConfigError("treated_rate must be in (0, 1]")
        d, o = self.cov_diag, self.cov_offdiag
        if not (d > o >= 0.0 or d == o == 0.0):
            raise ConfigError("covariance needs cov_diag > cov_offdiag >= 0 "
                              "(or both zero)")
        if self.noise_sd < 0 or self.context_var < 0 or self.coef_var < 0:
            raise ConfigError("variances must be nonnegative")
        if self.positivity_max_redraws < 1 or self.positivity_floor <= 0:
            raise ConfigError("positivity guard needs >= 1 round and a "
                              "positive floor")


@dataclass(frozen=True)
class SyntheticPopulation:
    """A generated population plus the truth estimators never see.

    ``frame`` (set once a sample is drawn) is the only estimator-facing
    surface; potential outcomes y0/y1, true effects tau, and true
    propensities e1 stay here.
    """

    config: SimConfig
    area: np.ndarray
    x: np.ndarray
    x_area: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    tau: np.ndarray
    f01: np.ndarray
    c0: np.ndarray
    c1: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    a: np.ndarray | None = None
    e1: np.ndarray | None = None
    alpha: np.ndarray | None = None
    alpha_ctx: np.ndarray | None = None
    shares: np.ndarray | None = None
    s: np.ndarray | None = None
    frame: PopulationFrame | None = None

    @property
    def n_units(self) -> int:
        return self.area.shape[0]


def _treated_count(rate: float, pool: int) -> int:
    # floor with a guard against products like 0.02 * N landing just under
    # the integer they represent exactly
    return int(np.floor(rate * pool + 1e-9))


def _cov_factor(cfg: SimConfig) -> np.ndarray:
    p = cfg.n_covariates
    if cfg.cov_diag == 0.0:
        return np.zeros((p, p))
    sigma = np.full((p, p), cfg.cov_offdiag)
    np.fill_diagonal(sigma, cfg.cov_diag)
    return np.linalg.cholesky(sigma)


def _draw_f01(rng, cfg: SimConfig) -> np.ndarray:
    parts = [rng.uniform(lo, hi, int(c)) for c, lo, hi in cfg.segments]
    return np.concatenate(parts) if parts else np.empty(0)


def generate_population(config: SimConfig) -> SyntheticPopulation:
    """Draw coefficients, covariates and both potential outcomes per area."""
    cfg = config
    rng = np.random.default_rng(
        np.random.SeedSequence(cfg.master_seed, spawn_key=(_POP_STREAM,)))
    p, nj, m = cfg.n_covariates, cfg.area_size, cfg.m
    L = _cov_factor(cfg)
    sd = np.sqrt(cfg.coef_var)
    f01 = _draw_f01(rng, cfg)
    area = np.repeat(np.arange(m), nj)
    x = np.empty((m * nj, p))
    y0 = np.empty(m * nj)
    y1 = np.empty(m * nj)
    x_area = np.empty(m)
    c0s = np.empty(m)
    c1s = np.empty(m)
    clamped = 0
    max_rounds = 0
    for j in range(m):
        c0 = rng.uniform(*cfg.c0_range)
        c1 = rng.uniform(*cfg.c1_range)
        g = rng.normal(0.0, np.sqrt(cfg.context_var))
        b01 = rng.normal(0.0, sd, p)
        b02 = cfg.exp_scale * rng.normal(0.0, sd, p)
        b11 = b01 + cfg.lin_shift_scale * rng.normal(cfg.lin_shift_mean, sd, p)
        b12 = b02 + cfg.exp_scale * rng.normal(cfg.exp_shift_mean, sd, p)
        X = np.empty((nj, p))
        arg0 = np.empty(nj)
        arg1 = np.empty(nj)
        todo = np.arange(nj)
        rounds = 0
        while todo.size:
            rounds += 1
            Z = rng.standard_normal((todo.size, p)) @ L.T
            eps0 = rng.normal(0.0, cfg.noise_sd, todo.size)
            eps1 = eps0 if cfg.shared_noise else rng.normal(
                0.0, cfg.noise_sd, todo.size)
            a0 = c0 + g + Z @ b01 + np.exp(np.clip(Z @ b02, -700, 700)) + eps0
            a1 = c1 + g + Z @ b11 + np.exp(np.clip(Z @ b12, -700, 700)) + eps1
            if rounds >= cfg.positivity_max_redraws:
                clamped += int(((a0 <= 0) | (a1 <= 0)).sum())
                X[todo] = Z
                arg0[todo] = np.maximum(a0, cfg.positivity_floor)
                arg1[todo] = np.maximum(a1, cfg.positivity_floor)
                break
            ok = (a0 > 0) & (a1 > 0)
            keep = todo[ok]
            X[keep] = Z[ok]
            arg0[keep] = a0[ok]
            arg1[keep] = a1[ok]
            todo = todo[~ok]
        max_rounds = max(max_rounds, rounds)
        sl = slice(j * nj, (j + 1) * nj)
        x[sl] = X
        y0[sl] = np.log(arg0)
        y1[sl] = np.log(arg1)
        x_area[j] = g
        c0s[j] = c0
        c1s[j] = c1
    tau = (y1 - y0).reshape(m, nj).mean(axis=1)
    return SyntheticPopulation(
        config=cfg, area=area, x=x, x_area=x_area, y0=y0, y1=y1, tau=tau,
        f01=f01, c0=c0s, c1=c1s,
        diagnostics={"clamped": clamped, "max_redraw_rounds": max_rounds})


def assign_treatment(population: SyntheticPopulation,
                     config: SimConfig | None = None,
                     coefficients: tuple | None = None) -> SyntheticPopulation:
    """Bernoulli treatment from a logistic propensity in (X, area covariate).

    ``coefficients`` overrides the per-area draws with explicit
    (alpha (m, p), alpha_ctx (m,)) arrays, which makes the true propensity a
    chosen quantity (useful for identification studies).
    """
    cfg = config if config is not None else population.config
    pop = population
    rng = np.random.default_rng(
        np.random.SeedSequence(cfg.master_seed, spawn_key=(_TREAT_STREAM,)))
    m, p = cfg.m, cfg.n_covariates
    if coefficients is None:
        alpha = np.empty((m, p))
        alpha_ctx = np.empty(m)
        for j in range(m):
            alpha[j, :p - 1] = rng.normal(cfg.alpha_mean,
                                          np.sqrt(cfg.alpha_var), p - 1)
            alpha[j, p - 1] = rng.normal(0.0, np.sqrt(cfg.alpha_last_var))
            alpha_ctx[j] = rng.normal(0.0, np.sqrt(cfg.alpha_context_var))
    else:
        alpha = np.asarray(coefficients[0], dtype=float)
        alpha_ctx = np.asarray(coefficients[1], dtype=float)
        if alpha.shape != (m, p) or alpha_ctx.shape != (m,):
            raise ConfigError("coefficient override has the wrong shape")
    lin = np.einsum("ij,ij->i", pop.x, alpha[pop.area]) \
        + pop.x_area[pop.area] * alpha_ctx[pop.area]
    e1 = 1.0 / (1.0 + np.exp(-np.clip(lin, -700, 700)))
    a = (rng.random(pop.n_units) < e1).astype(int)
    shares = np.array([a[pop.area == j].mean() for j in range(m)])
    return replace(pop, a=a, e1=e1, alpha=alpha, alpha_ctx=alpha_ctx,
                   shares=shares, s=None, frame=None)


def sample_sizes(population: SyntheticPopulation, j: int) -> tuple[int, int]:
    """(treated, control) sample sizes for area j under the stratified plan."""
    cfg = population.config
    n_treated = int((population.a[population.area == j] == 1).sum())
    n1 = _treated_count(cfg.treated_rate, n_treated)
    n0 = int(np.ceil(population.f01[j] * n1))
    return n1, n0


def draw_sample(population: SyntheticPopulation,
                config: SimConfig | None = None,
                seed=0) -> SyntheticPopulation:
    """Stratified-by-arm sample: S flags, design weights, revealed outcomes.

    Draws use default_rng(seed) (seed may be an int or a SeedSequence), per
    area in ascending order, treated stratum before controls.
    """
    pop = population
    if pop.a is None:
        raise DataError("treatment must be assigned before sampling")
    cfg = config if config is not None else pop.config
    rng = np.random.default_rng(seed)
    n = pop.n_units
    s = np.zeros(n, dtype=int)
    weight = np.full(n, np.nan)
    short = 0
    for j in range(cfg.m):
        rows = np.flatnonzero(pop.area == j)
        arows = rows[pop.a[rows] == 1]
        crows = rows[pop.a[rows] == 0]
        n1 = _treated_count(cfg.treated_rate, arows.size)
        n0 = int(np.ceil(pop.f01[j] * n1))
        if n0 > crows.size:
            short += 1
            n0 = crows.size
        for pool, take in ((arows, n1), (crows, n0)):
            if take == 0:
                continue
            chosen = rng.choice(pool, size=take, replace=False)
            s[chosen] = 1
            weight[chosen] = pool.size / take
    y = np.where(s == 1, np.where(pop.a == 1, pop.y1, pop.y0), np.nan)
    frame = PopulationFrame(pop.area, pop.a, s, y, pop.x,
                            pop.x_area[pop.area].reshape(-1, 1),
                            weight=weight)
    diag = dict(pop.diagnostics)
    if short:
        diag["control_strata_exhausted"] = short
    return replace(pop, s=s, frame=frame, diagnostics=diag)


def simulate(config: SimConfig, sample_seed=None) -> SyntheticPopulation:
    """generate_population + assign_treatment + draw_sample in one call."""
    pop = assign_treatment(generate_population(config), config)
    if sample_seed is None:
        sample_seed = np.random.SeedSequence(config.master_seed,
                                             spawn_key=(_SAMPLE_STREAM, 0))
    return draw_sample(pop, config, sample_seed)


def replication_seed(master_seed: int, k: int) -> np.random.SeedSequence:
    """Sample-redraw stream for replication k of a fixed population."""
    return np.random.SeedSequence(master_seed, spawn_key=(_SAMPLE_STREAM, k))
