import numpy as np
import pytest

from areaeffect.bootstrap import (_area_flag, _draw_outcomes, bootstrap_ci,
                                  compute_residuals, decompose_residuals,
                                  double_bootstrap_ci, percentile_indices,
                                  replicate_interval)
from areaeffect.design import DesignBuilder
from areaeffect.errors import ConfigError, DataError
from areaeffect.estimators import EstimatorSpec
from areaeffect.frames import PopulationFrame

from conftest import random_frame

HAJEK = EstimatorSpec("direct", "Hajek")


def toy_frame():
    """Two areas, four sampled + two unsampled units each, both arms sampled."""
    area = np.repeat([1, 2], 6)
    a = np.array([1, 0, 1, 0, 1, 0,
                  0, 1, 0, 1, 1, 0])
    s = np.array([1, 1, 1, 1, 0, 0,
                  1, 1, 1, 1, 0, 0])
    y = np.where(s == 1,
                 [2.0, 0.5, 3.5, 1.0, 0, 0,
                  4.0, 6.5, 3.0, 5.0, 0, 0], np.nan)
    x = np.array([0.3, -1.2, 0.8, 0.1, 0.5, -0.4,
                  1.4, -0.6, 0.2, 0.9, -1.0, 0.7]).reshape(-1, 1)
    return PopulationFrame(area, a, s, y, x, np.empty((12, 0)))


def exact_fit_frame(rng):
    """Outcomes an exact linear function of the imputation design: residuals
    vanish, so every replicate reproduces the original estimates."""
    frame = random_frame(rng, m=3)
    b = DesignBuilder(frame, treatment=True, interactions=True)
    rows = np.flatnonzero(frame.sampled)
    M = b.matrix(rows)
    coef = np.arange(1, M.values.shape[1] + 1, dtype=float) / 3.0
    return frame.with_outcomes(M.values @ coef)


# -- residual decomposition --------------------------------------------------

def test_decompose_two_area_hand_fixture():
    rs = decompose_residuals([2.0, 4.0, 1.0, 1.0, 1.0], [0, 0, 1, 1, 1], 2)
    assert np.array_equal(rs.r2, [3.0, 1.0])
    assert np.array_equal(rs.r1, [-1.0, 1.0, 0.0, 0.0, 0.0])
    assert np.array_equal(rs.marginal, [2.0, 4.0, 1.0, 1.0, 1.0])


def test_decompose_single_area_centers():
    rs = decompose_residuals([1.0, -1.0], [0, 0], 1)
    assert np.array_equal(rs.r2, [0.0])
    assert np.array_equal(rs.r1, [1.0, -1.0])


def test_decompose_rejects_empty_area():
    with pytest.raises(DataError):
        decompose_residuals([1.0, 2.0], [0, 0], 2)


def test_residuals_match_direct_refit(rng):
    frame = random_frame(rng, m=3)
    res = compute_residuals(frame, "L")
    b = DesignBuilder(frame, treatment=True, interactions=True)
    rows = np.flatnonzero(frame.sampled)
    M = b.matrix(rows)
    coef, *_ = np.linalg.lstsq(M.values, frame.y[rows], rcond=None)
    assert np.allclose(res.marginal, frame.y[rows] - M.values @ coef,
                       atol=1e-9)
    sarea = frame.area[rows]
    for j in range(frame.m):
        msk = sarea == j
        assert abs(res.r2[j] - res.marginal[msk].mean()) < 1e-12
        assert abs(res.r1[msk].sum()) < 1e-10
    assert np.allclose(res.r1 + res.r2[sarea], res.marginal, rtol=0,
                       atol=1e-12)


def test_perfect_fit_gives_zero_residual_sets(rng):
    res = compute_residuals(exact_fit_frame(rng), "L")
    assert np.all(np.abs(res.marginal) < 1e-9)
    assert np.all(np.abs(res.r1) < 1e-9)
    assert np.all(np.abs(res.r2) < 1e-9)


def test_residuals_require_sampled_rows_in_every_area():
    frame = PopulationFrame([1, 1, 1, 1, 2, 2], [0, 1, 0, 1, 0, 1],
                            [1, 1, 1, 1, 0, 0],
                            [1.0, 2.0, 0.5, 1.5, np.nan, np.nan],
                            np.linspace(-1, 1, 6).reshape(-1, 1),
                            np.empty((6, 0)))
    with pytest.raises(DataError, match="no sampled units"):
        compute_residuals(frame, "L")


# -- percentile machinery ----------------------------------------------------

def test_percentile_indices_reference_cases():
    assert percentile_indices(1000, 0.05) == (25, 975)
    assert percentile_indices(200, 0.05) == (5, 195)
    assert percentile_indices(20, 0.2) == (2, 18)
    assert percentile_indices(20, 0.05) == (0, 19)


def test_percentile_indices_valid_and_nested():
    for B in (20, 37, 100, 999, 1000):
        prev = None
        for alpha in (0.01, 0.05, 0.1, 0.25, 0.5, 0.9):
            lo, hi = percentile_indices(B, alpha)
            assert 0 <= lo <= hi < B
            if prev is not None:
                assert lo >= prev[0] and hi <= prev[1]
            prev = (lo, hi)


def test_all_replicates_equal_collapse_to_point_estimate():
    tau_hat = 1.7
    col = np.full(60, 2.3)
    bias = float(col.mean() - tau_hat)
    lo, hi, kept = replicate_interval(col, bias, 0.05)
    assert kept == 60
    assert lo == pytest.approx(tau_hat, abs=1e-12)
    assert hi == pytest.approx(tau_hat, abs=1e-12)


def test_replicate_interval_drops_nan_and_handles_empty():
    col = np.array([np.nan, 3.0, 1.0, 2.0, np.nan] + [1.5] * 20)
    lo, hi, kept = replicate_interval(col, 0.0, 0.1)
    assert kept == 23
    assert lo <= hi
    lo, hi, kept = replicate_interval(np.full(5, np.nan), 0.0, 0.1)
    assert kept == 0 and np.isnan(lo) and np.isnan(hi)
    lo, hi, kept = replicate_interval(np.ones(5), np.nan, 0.1)
    assert np.isnan(lo) and np.isnan(hi)


def test_area_flag_policy():
    assert _area_flag("degenerate-arm", 0, 100, np.nan) == "degenerate-arm"
    assert _area_flag(None, 0, 100, 0.0) == "unstable"
    assert _area_flag(None, 100, 100, np.nan) == "unstable"
    assert _area_flag(None, 950, 1000, 0.0) is None
    assert _area_flag(None, 949, 1000, 0.0) == "unstable"
    assert _area_flag(None, 20, 20, 0.1) is None


def test_argument_validation(rng):
    frame = random_frame(rng)
    with pytest.raises(ConfigError, match="B must"):
        bootstrap_ci(frame, HAJEK, B=19)
    with pytest.raises(ConfigError, match="alpha"):
        bootstrap_ci(frame, HAJEK, B=20, alpha=0.0)
    with pytest.raises(ConfigError, match="alpha"):
        bootstrap_ci(frame, HAJEK, B=20, alpha=1.0)
    with pytest.raises(ConfigError, match="level1"):
        bootstrap_ci(frame, HAJEK, B=20, level1="per-arm")
    with pytest.raises(ConfigError, match="C must"):
        double_bootstrap_ci(frame, HAJEK, B=20, C=1)


# -- seeded replay oracles ---------------------------------------------------

def _hand_hajek(frame, srows, y_star):
    sarea = frame.area[srows]
    a_s = frame.a[srows]
    w = frame.design_weights()[srows]
    taus = np.empty(frame.m)
    for j in range(frame.m):
        inj = sarea == j
        arm = []
        for val in (1, 0):
            sel = inj & (a_s == val)
            arm.append(np.sum(w[sel] * y_star[sel]) / np.sum(w[sel]))
        taus[j] = arm[0] - arm[1]
    return taus


def test_single_bootstrap_matches_replayed_stream():
    frame = toy_frame()
    B, alpha, seed = 20, 0.2, 7
    res = compute_residuals(frame, "L")
    srows = np.flatnonzero(frame.sampled)
    mu_hat = frame.y[srows] - res.marginal
    sarea = frame.area[srows]
    taus = np.empty((B, frame.m))
    for b in range(B):
        g = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(b,)))
        idx2 = g.integers(0, frame.m, size=frame.m)
        idx1 = g.integers(0, srows.size, size=srows.size)
        y_star = mu_hat + res.r2[idx2][sarea] + res.r1[idx1]
        taus[b] = _hand_hajek(frame, srows, y_star)
    tau_hat = _hand_hajek(frame, srows, frame.y[srows])
    debiased = np.sort(taus - (taus.mean(axis=0) - tau_hat), axis=0)
    result = bootstrap_ci(frame, HAJEK, B=B, alpha=alpha, seed=seed)
    assert np.allclose(result.replicates, taus, rtol=0, atol=1e-12)
    assert np.allclose(result.tau_hat, tau_hat, rtol=0, atol=1e-12)
    assert np.allclose(result.lower, debiased[2], rtol=0, atol=1e-12)
    assert np.allclose(result.upper, debiased[18], rtol=0, atol=1e-12)
    assert result.scheme == "single" and result.B == B and result.C is None
    for est in result.estimates:
        assert est.lower is not None and est.lower <= est.upper


def test_within_area_level1_matches_replayed_stream():
    frame = toy_frame()
    B, seed = 20, 13
    res = compute_residuals(frame, "L")
    srows = np.flatnonzero(frame.sampled)
    mu_hat = frame.y[srows] - res.marginal
    sarea = frame.area[srows]
    taus = np.empty((B, frame.m))
    for b in range(B):
        g = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(b,)))
        idx2 = g.integers(0, frame.m, size=frame.m)
        r1_star = np.empty(srows.size)
        for j in range(frame.m):
            msk = sarea == j
            pool = res.r1[msk]
            r1_star[msk] = pool[g.integers(0, pool.size, size=pool.size)]
        y_star = mu_hat + res.r2[idx2][sarea] + r1_star
        taus[b] = _hand_hajek(frame, srows, y_star)
    result = bootstrap_ci(frame, HAJEK, B=B, alpha=0.2, seed=seed,
                          level1="within")
    assert np.allclose(result.replicates, taus, rtol=0, atol=1e-12)
    pooled = bootstrap_ci(frame, HAJEK, B=B, alpha=0.2, seed=seed)
    assert not np.array_equal(pooled.replicates, result.replicates)


# -- interval behaviour ------------------------------------------------------

def test_zero_residuals_collapse_intervals(rng):
    frame = exact_fit_frame(rng)
    spec = EstimatorSpec("global", "OR")
    result = bootstrap_ci(frame, spec, B=25, alpha=0.1, seed=3)
    assert np.allclose(result.replicates,
                       np.broadcast_to(result.tau_hat, (25, frame.m)),
                       atol=1e-8)
    assert np.allclose(result.lower, result.tau_hat, atol=1e-8)
    assert np.allclose(result.upper, result.tau_hat, atol=1e-8)
    assert np.all(np.abs(result.bias) < 1e-8)


def test_debiased_replicates_average_to_point_estimate(rng):
    frame = random_frame(rng, m=3)
    result = bootstrap_ci(frame, HAJEK, B=40, alpha=0.1, seed=11)
    for j in range(frame.m):
        col = result.replicates[:, j]
        col = col[np.isfinite(col)]
        assert np.mean(col - result.bias[j]) == pytest.approx(
            result.tau_hat[j], abs=1e-10)


def test_alpha_nesting(rng):
    frame = random_frame(rng, m=3)
    wide = bootstrap_ci(frame, HAJEK, B=60, alpha=0.05, seed=2)
    narrow = bootstrap_ci(frame, HAJEK, B=60, alpha=0.10, seed=2)
    assert np.array_equal(wide.replicates, narrow.replicates)
    assert np.all(wide.lower <= narrow.lower + 1e-12)
    assert np.all(narrow.upper <= wide.upper + 1e-12)
    assert np.all(wide.lower <= wide.upper)


def test_level1_resample_sums_center_on_zero():
    marg = np.array([2.0, 4.0, 1.5, -0.5, 1.0, 1.0, 1.0, 4.0, -2.0, 0.5])
    sarea = np.array([0, 0, 0, 0, 1, 1, 1, 1, 1, 1])
    res = decompose_residuals(marg, sarea, 2)
    B = 600
    zeros2 = np.zeros(2)
    sums = np.zeros((B, 2))
    for b in range(B):
        g = np.random.default_rng(np.random.SeedSequence(123, spawn_key=(b,)))
        r1_star = _draw_outcomes(g, np.zeros(10), res.r1, zeros2, sarea,
                                 "pooled")
        sums[b] = [r1_star[sarea == j].sum() for j in (0, 1)]
    var_pool = np.mean(res.r1 ** 2)
    for j, nj in ((0, 4), (1, 6)):
        se = np.sqrt(nj * var_pool / B)
        assert abs(sums[:, j].mean()) < 4 * se


# -- determinism and workers -------------------------------------------------

def test_worker_count_invariance(rng):
    frame = random_frame(rng, m=3)
    spec = EstimatorSpec("global", "NIPW")
    one = bootstrap_ci(frame, spec, B=24, alpha=0.1, seed=5, workers=1)
    three = bootstrap_ci(frame, spec, B=24, alpha=0.1, seed=5, workers=3)
    assert np.array_equal(one.replicates, three.replicates, equal_nan=True)
    assert np.array_equal(one.lower, three.lower)
    assert np.array_equal(one.upper, three.upper)
    assert np.array_equal(one.bias, three.bias)


def test_double_worker_count_invariance():
    frame = toy_frame()
    one = double_bootstrap_ci(frame, HAJEK, B=20, C=20, alpha=0.2, seed=9,
                              workers=1)
    two = double_bootstrap_ci(frame, HAJEK, B=20, C=20, alpha=0.2, seed=9,
                              workers=2)
    assert np.array_equal(one.replicates, two.replicates, equal_nan=True)
    assert np.array_equal(one.lower, two.lower)
    assert np.array_equal(one.bias, two.bias)


def test_seed_changes_replicates(rng):
    frame = random_frame(rng, m=3)
    a = bootstrap_ci(frame, HAJEK, B=20, alpha=0.2, seed=1)
    b = bootstrap_ci(frame, HAJEK, B=20, alpha=0.2, seed=2)
    assert not np.array_equal(a.replicates, b.replicates)
    c = bootstrap_ci(frame, HAJEK, B=20, alpha=0.2, seed=1)
    assert np.array_equal(a.replicates, c.replicates)


# -- double bootstrap --------------------------------------------------------

def test_double_single_share_outer_stream_and_shift_identity():
    frame = toy_frame()
    d = double_bootstrap_ci(frame, HAJEK, B=20, C=20, alpha=0.2, seed=9)
    s = bootstrap_ci(frame, HAJEK, B=20, alpha=0.2, seed=9)
    assert d.single is not None and d.single.scheme == "single"
    assert np.array_equal(d.replicates, s.replicates)
    assert np.array_equal(d.single.lower, s.lower)
    assert np.array_equal(d.single.upper, s.upper)
    assert np.array_equal(d.single.bias, s.bias)
    # double and single endpoints differ exactly by the extra bias correction
    assert np.allclose(s.lower - d.lower, d.bias - s.bias, atol=1e-12)
    assert np.allclose(s.upper - d.upper, d.bias - s.bias, atol=1e-12)
    assert d.scheme == "double" and d.C == 20


def test_double_zero_residuals_degenerate(rng):
    frame = exact_fit_frame(rng)
    spec = EstimatorSpec("global", "OR")
    d = double_bootstrap_ci(frame, spec, B=20, C=20, alpha=0.1, seed=4)
    assert np.allclose(d.lower, d.tau_hat, atol=1e-7)
    assert np.allclose(d.upper, d.tau_hat, atol=1e-7)
    assert np.all(np.abs(d.bias) < 1e-7)


def test_double_inner_replay_oracle():
    frame = toy_frame()
    B, C, alpha, seed = 20, 20, 0.2, 21
    res = compute_residuals(frame, "L")
    srows = np.flatnonzero(frame.sampled)
    sarea = frame.area[srows]
    mu_hat = frame.y[srows] - res.marginal
    b_mu = DesignBuilder(frame, treatment=True, interactions=True)
    M_s = b_mu.matrix(srows)
    tau_hat = _hand_hajek(frame, srows, frame.y[srows])
    taus = np.empty((B, frame.m))
    bias_star = np.empty((B, frame.m))
    for b in range(B):
        g = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(b,)))
        idx2 = g.integers(0, frame.m, size=frame.m)
        idx1 = g.integers(0, srows.size, size=srows.size)
        y_star = mu_hat + res.r2[idx2][sarea] + res.r1[idx1]
        taus[b] = _hand_hajek(frame, srows, y_star)
        coef, *_ = np.linalg.lstsq(M_s.values, y_star, rcond=None)
        marg = y_star - M_s.values @ coef
        inner = decompose_residuals(marg, sarea, frame.m)
        mu_b = y_star - inner.marginal
        inner_taus = np.empty((C, frame.m))
        for c in range(C):
            gc = np.random.default_rng(
                np.random.SeedSequence(seed, spawn_key=(b, c)))
            jdx2 = gc.integers(0, frame.m, size=frame.m)
            jdx1 = gc.integers(0, srows.size, size=srows.size)
            y_cc = mu_b + inner.r2[jdx2][sarea] + inner.r1[jdx1]
            inner_taus[c] = _hand_hajek(frame, srows, y_cc)
        bias_star[b] = inner_taus.mean(axis=0) - taus[b]
    bias = taus.mean(axis=0) - tau_hat
    biasc = 2.0 * bias - bias_star.mean(axis=0)
    debiased = np.sort(taus - biasc, axis=0)
    d = double_bootstrap_ci(frame, HAJEK, B=B, C=C, alpha=alpha, seed=seed)
    assert np.allclose(d.replicates, taus, rtol=0, atol=1e-10)
    assert np.allclose(d.bias, biasc, rtol=0, atol=1e-10)
    assert np.allclose(d.lower, debiased[2], rtol=0, atol=1e-10)
    assert np.allclose(d.upper, debiased[18], rtol=0, atol=1e-10)
