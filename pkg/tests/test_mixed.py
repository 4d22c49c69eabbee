import numpy as np
import pytest

from areaeffect.design import DesignMatrix
from areaeffect.errors import FitError
from areaeffect.learners.linear import fit_linear
from areaeffect.learners.mixed import fit_lmm, reml_criterion


def _dm(values, names=None):
    values = np.asarray(values, dtype=float)
    if names is None:
        names = tuple(f"c{k}" for k in range(values.shape[1]))
    return DesignMatrix(values, tuple(names))


def _dense_criterion(V, y, area, sigma_u2, sigma_e2, a=None):
    """Independent -2 restricted likelihood from the full n x n covariance."""
    sigma_u2 = np.atleast_1d(np.asarray(sigma_u2, dtype=float))
    m = int(area.max()) + 1
    cols, var = [], []
    for j in range(m):
        ind = (area == j).astype(float)
        cols.append(ind)
        var.append(sigma_u2[0])
        if sigma_u2.size == 2:
            cols.append(ind * a)
            var.append(sigma_u2[1])
    Zd = np.column_stack(cols)
    C = sigma_e2 * np.eye(len(y)) + (Zd * np.array(var)) @ Zd.T
    Ci = np.linalg.inv(C)
    A = V.T @ Ci @ V
    beta = np.linalg.solve(A, V.T @ Ci @ y)
    r = y - V @ beta
    return (np.linalg.slogdet(C)[1] + np.linalg.slogdet(A)[1]
            + float(r @ Ci @ r))


def _balanced_fixture(seed=3, m=5, n0=6, su=1.3, se=0.8):
    rng = np.random.default_rng(seed)
    area = np.repeat(np.arange(m), n0)
    u = rng.normal(scale=np.sqrt(su), size=m)
    y = 2.0 + u[area] + rng.normal(scale=np.sqrt(se), size=m * n0)
    V = np.ones((m * n0, 1))
    return V, y, area, m, n0


def test_fast_criterion_matches_dense_oracle():
    rng = np.random.default_rng(11)
    area = np.repeat(np.arange(4), [5, 7, 6, 8])
    n = area.size
    V = np.column_stack([np.ones(n), rng.normal(size=n)])
    a = (rng.uniform(size=n) < 0.5).astype(float)
    y = 1.0 + V[:, 1] + rng.normal(size=n)
    X = _dm(V)
    for su2, se2 in [(0.5, 1.0), (2.0, 0.3), (1e-9, 1.7), (0.0, 2.5)]:
        got = reml_criterion(X, y, area, su2, se2)
        want = _dense_criterion(V, y, area, su2, se2)
        assert np.isclose(got, want, rtol=1e-9, atol=1e-8)
    for su2, se2 in [((0.4, 0.9), 1.1), ((2.0, 0.0), 0.6)]:
        got = reml_criterion(X, y, area, su2, se2, a=a)
        want = _dense_criterion(V, y, area, su2, se2, a=a)
        assert np.isclose(got, want, rtol=1e-9, atol=1e-8)


def test_balanced_anova_closed_form():
    V, y, area, m, n0 = _balanced_fixture()
    means = np.array([y[area == j].mean() for j in range(m)])
    msw = sum(((y[area == j] - means[j]) ** 2).sum() for j in range(m)) \
        / (m * (n0 - 1))
    msb = n0 * ((means - y.mean()) ** 2).sum() / (m - 1)
    assert msb > msw  # interior optimum for this seed
    fit = fit_lmm(_dm(V, ("const",)), y, area, "H1r")
    assert np.isclose(fit.sigma_e2, msw, rtol=1e-5)
    assert np.isclose(fit.sigma_u2[0], (msb - msw) / n0, rtol=1e-4)


def test_blup_shrinkage_toward_grand_mean():
    V, y, area, m, n0 = _balanced_fixture()
    fit = fit_lmm(_dm(V, ("const",)), y, area, "H1r")
    gamma = n0 * fit.sigma_u2[0] / (n0 * fit.sigma_u2[0] + fit.sigma_e2)
    means = np.array([y[area == j].mean() for j in range(m)])
    assert np.isclose(fit.coef[0], y.mean(), atol=1e-8)
    assert np.allclose(fit.u[:, 0], gamma * (means - y.mean()), atol=1e-7)
    assert np.all(np.abs(fit.u[:, 0]) < np.abs(means - y.mean()))


def test_equal_area_means_degenerate_to_least_squares():
    rng = np.random.default_rng(5)
    base = rng.normal(size=4)
    y = np.concatenate([base, base, base])  # identical area means and spread
    area = np.repeat(np.arange(3), 4)
    x = np.tile(rng.normal(size=4), 3)
    X = _dm(np.column_stack([np.ones(12), x]))
    fit = fit_lmm(X, y, area, "H1r")
    assert fit.sigma_u2[0] < 1e-6
    assert np.allclose(fit.u, 0.0, atol=1e-6)
    ols = fit_linear(X, y)
    assert np.allclose(fit.predict(X, area), ols.predict(X), atol=1e-8)


def test_h1r_local_optimality_probe():
    rng = np.random.default_rng(42)
    m, n0 = 12, 10
    area = np.repeat(np.arange(m), n0)
    x = rng.normal(size=m * n0)
    y = 0.5 + 1.2 * x + rng.normal(size=m)[area] \
        + rng.normal(size=m * n0)
    X = _dm(np.column_stack([np.ones(m * n0), x]))
    fit = fit_lmm(X, y, area, "H1r")
    assert fit.sigma_u2[0] > 0.05  # interior for this seed
    center = reml_criterion(X, y, area, fit.sigma_u2[0], fit.sigma_e2)
    factors = np.exp(np.linspace(np.log(0.5), np.log(1.5), 5))
    probes = [reml_criterion(X, y, area, f1 * fit.sigma_u2[0],
                             f2 * fit.sigma_e2)
              for f1 in factors for f2 in factors]
    assert center <= min(probes) + 1e-7


def test_h2r_local_optimality_probe():
    rng = np.random.default_rng(9)
    m, n0 = 10, 14
    area = np.repeat(np.arange(m), n0)
    n = m * n0
    a = (rng.uniform(size=n) < 0.5).astype(float)
    x = rng.normal(size=n)
    u0 = rng.normal(scale=1.0, size=m)
    u1 = rng.normal(scale=1.2, size=m)
    y = 0.3 + 0.8 * x + 1.5 * a + u0[area] + u1[area] * a \
        + rng.normal(size=n)
    X = _dm(np.column_stack([np.ones(n), x, a]), ("const", "x", "a"))
    fit = fit_lmm(X, y, area, "H2r", a=a)
    assert np.all(fit.sigma_u2 > 0.05)  # both components interior
    center = reml_criterion(X, y, area, fit.sigma_u2, fit.sigma_e2, a=a)
    draws = np.exp(rng.uniform(np.log(0.5), np.log(1.5), size=(25, 3)))
    probes = [reml_criterion(X, y, area, fit.sigma_u2 * d[:2],
                             fit.sigma_e2 * d[2], a=a)
              for d in draws]
    assert center <= min(probes) + 1e-6


def test_h2m_equals_per_arm_random_intercept_fits():
    rng = np.random.default_rng(17)
    m, n0 = 6, 12
    area = np.repeat(np.arange(m), n0)
    n = m * n0
    a = np.tile(np.array([1, 0]), n // 2).astype(float)
    x = rng.normal(size=n)
    y = 1.0 + x + 2.0 * a + rng.normal(size=m)[area] + rng.normal(size=n)
    X = _dm(np.column_stack([np.ones(n), x]))
    both = fit_lmm(X, y, area, "H2m", a=a, n_areas=m)
    for arm, sub in ((1, both.arm1), (0, both.arm0)):
        rows = a == arm
        solo = fit_lmm(_dm(X.values[rows], X.names), y[rows], area[rows],
                       "H1r", n_areas=m)
        assert np.allclose(sub.coef, solo.coef)
        assert np.allclose(sub.u, solo.u)
        assert np.isclose(sub.sigma_e2, solo.sigma_e2)
    pred = both.predict(X, area, a)
    p1 = both.arm1.predict(X, area)
    p0 = both.arm0.predict(X, area)
    assert np.allclose(pred, np.where(a == 1, p1, p0))


def test_unseen_area_predicts_fixed_effects_only():
    V, y, area, m, n0 = _balanced_fixture()
    X = _dm(V, ("const",))
    fit = fit_lmm(X, y, area, "H1r", n_areas=m)
    novel = np.full(3, m + 4)
    Xn = _dm(np.ones((3, 1)), ("const",))
    assert np.allclose(fit.predict(Xn, novel), fit.coef[0])


def test_row_order_invariance(rng):
    m, n0 = 5, 8
    area = np.repeat(np.arange(m), n0)
    n = m * n0
    x = rng.normal(size=n)
    y = x + rng.normal(size=m)[area] + rng.normal(size=n)
    X = _dm(np.column_stack([np.ones(n), x]))
    fit = fit_lmm(X, y, area, "H1r")
    perm = rng.permutation(n)
    fit_p = fit_lmm(_dm(X.values[perm], X.names), y[perm], area[perm], "H1r")
    assert np.isclose(fit_p.sigma_u2[0], fit.sigma_u2[0], rtol=1e-6, atol=1e-10)
    assert np.allclose(fit_p.predict(X, area), fit.predict(X, area), atol=1e-8)


def test_input_contract_errors():
    X = _dm(np.ones((6, 1)), ("const",))
    y = np.arange(6.0)
    with pytest.raises(FitError):
        fit_lmm(X, y, np.zeros(6, dtype=int), "H1r")  # single area
    with pytest.raises(FitError):
        fit_lmm(X, y, np.repeat([0, 1], 3), "H2r")  # missing treatment
    with pytest.raises(FitError):
        fit_lmm(X, y, np.repeat([0, 1], 3), "H2m", a=np.ones(6))  # empty arm
