"""Linear mixed models with area random effects, fitted by profiled REML.

The covariance of the random part is diagonal: a random intercept (H1r) or
independent random intercept + random treatment slope (H2r). With psi =
sigma_u^2/sigma_e^2 held as the free parameter(s), beta and sigma_e^2 have
closed forms, and the per-area Woodbury identity reduces every criterion
evaluation to O(m p^2) work on cached cross products. H2m is two independent
H1r fits, one per treatment arm.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from ..design import DesignMatrix
from ..errors import FitError, SingularDesignError

_BOUNDARY_SNAP = 1e-8


class LmmWorkspace:
    """Per-area cross products for a fixed design; reusable across y vectors."""

    def __init__(self, V: np.ndarray, Z: np.ndarray, area: np.ndarray,
                 n_areas: int | None = None):
        area = np.asarray(area)
        order = np.argsort(area, kind="stable")
        self.sorted = bool(np.all(order == np.arange(area.shape[0])))
        self.order = None if self.sorted else order
        V = V if self.sorted else V[order]
        Z = Z if self.sorted else Z[order]
        area_s = area if self.sorted else area[order]
        self.V, self.Z = V, Z
        self.n, self.p = V.shape
        self.q = Z.shape[1]
        if self.q not in (1, 2):
            raise FitError("mixed models support 1 or 2 random components")
        self.n_areas = int(n_areas if n_areas is not None else area.max() + 1)
        self.present = np.unique(area_s)
        self.mloc = len(self.present)
        bounds = np.searchsorted(area_s, self.present)
        self.starts = np.append(bounds, area_s.shape[0])
        m, p, q = self.mloc, self.p, self.q
        self.XtX = np.zeros((m, p, p))
        self.XtZ = np.zeros((m, p, q))
        self.ZtZ = np.zeros((m, q, q))
        for i in range(m):
            sl = slice(self.starts[i], self.starts[i + 1])
            self.XtX[i] = V[sl].T @ V[sl]
            self.XtZ[i] = V[sl].T @ Z[sl]
            self.ZtZ[i] = Z[sl].T @ Z[sl]
        self.XtX_sum = self.XtX.sum(axis=0)
        # component views so criterion evaluations stay O(m p^2) with no
        # batched-matmul call overhead
        self.x0 = np.ascontiguousarray(self.XtZ[:, :, 0])
        self.z00 = self.ZtZ[:, 0, 0].copy()
        G00 = self.x0[:, :, None] * self.x0[:, None, :]
        if q == 2:
            self.x1 = np.ascontiguousarray(self.XtZ[:, :, 1])
            self.z01 = self.ZtZ[:, 0, 1].copy()
            self.z11 = self.ZtZ[:, 1, 1].copy()
            G11 = self.x1[:, :, None] * self.x1[:, None, :]
            G01s = (self.x0[:, :, None] * self.x1[:, None, :]
                    + self.x1[:, :, None] * self.x0[:, None, :])
            self.G_flat = np.concatenate([G00, G01s, G11]).reshape(3 * m, p * p)
            self.x_cat = np.concatenate([self.x0, self.x1])
        else:
            self.G_flat = G00.reshape(m, p * p)
            self.x_cat = self.x0

    def stats_for(self, y: np.ndarray):
        y = y if self.sorted else y[self.order]
        heads = self.starts[:-1]
        Xty = np.add.reduceat(self.V * y[:, None], heads, axis=0)
        Zty = np.add.reduceat(self.Z * y[:, None], heads, axis=0)
        yty = np.add.reduceat(y * y, heads)
        return Xty, Zty, yty, Xty.sum(axis=0), float(yty.sum())


def _criterion_core(ws: LmmWorkspace, stats, psi):
    """Profiled -2 REML at variance ratio(s) psi on the unit error scale.

    Returns (crit, coef, quad, mi_parts, s, ld_M, ld_A) with mi_parts the
    per-area entries of the inverse capacitance matrix, kept unassembled so
    line-search evaluations do no array construction beyond m-vectors.
    """
    Xty, Zty, yty, Xty_sum, yty_sum = stats
    s = np.sqrt(psi)
    if ws.q == 1:
        det = 1.0 + psi[0] * ws.z00
        ld_M = float(np.log(det).sum())
        mi_parts = (1.0 / det,)
        w_cat = psi[0] / det
        q_cat = w_cat * Zty[:, 0]
        c = yty_sum - float(q_cat @ Zty[:, 0])
    else:
        d00 = 1.0 + psi[0] * ws.z00
        d11 = 1.0 + psi[1] * ws.z11
        off = s[0] * s[1] * ws.z01
        det = d00 * d11 - off * off
        ld_M = float(np.log(det).sum())
        mi00 = d11 / det
        mi11 = d00 / det
        mi01 = -off / det
        mi_parts = (mi00, mi01, mi11)
        ss = s[0] * s[1]
        w_cat = np.concatenate([psi[0] * mi00, ss * mi01, psi[1] * mi11])
        q0 = psi[0] * mi00 * Zty[:, 0] + ss * mi01 * Zty[:, 1]
        q1 = ss * mi01 * Zty[:, 0] + psi[1] * mi11 * Zty[:, 1]
        q_cat = np.concatenate([q0, q1])
        c = yty_sum - float(q0 @ Zty[:, 0] + q1 @ Zty[:, 1])
    A = (ws.XtX_sum - (w_cat @ ws.G_flat).reshape(ws.p, ws.p))
    b = Xty_sum - q_cat @ ws.x_cat
    try:
        coef = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise SingularDesignError("singular-design: fixed-effect normal equations") from exc
    quad = c - b @ coef
    sign, ld_A = np.linalg.slogdet(A)
    if sign <= 0 or quad <= 0:
        raise SingularDesignError("singular-design: ill-conditioned REML system")
    crit = ld_M + ld_A + (ws.n - ws.p) * np.log(quad)
    return crit, coef, quad, mi_parts, s, ld_M, ld_A


def _assemble_mi(ws: LmmWorkspace, mi_parts) -> np.ndarray:
    if ws.q == 1:
        return mi_parts[0][:, None, None]
    mi00, mi01, mi11 = mi_parts
    Mi = np.empty((ws.mloc, 2, 2))
    Mi[:, 0, 0] = mi00
    Mi[:, 1, 1] = mi11
    Mi[:, 0, 1] = mi01
    Mi[:, 1, 0] = mi01
    return Mi


def _criterion_parts(ws: LmmWorkspace, stats, psi):
    crit, coef, quad, mi_parts, s, ld_M, ld_A = _criterion_core(ws, stats, psi)
    return crit, coef, quad, _assemble_mi(ws, mi_parts), s, ld_M, ld_A


def _criterion_batch(ws: LmmWorkspace, stats, psis: np.ndarray) -> np.ndarray:
    """Criterion values for a batch of candidate ratios, shape (G, q).

    Mirrors _criterion_core exactly; candidates yielding an invalid system
    get +inf instead of raising so grid searches can skip them.
    """
    Xty, Zty, yty, Xty_sum, yty_sum = stats
    G = psis.shape[0]
    psi0 = psis[:, 0:1]
    if ws.q == 1:
        det = 1.0 + psi0 * ws.z00[None, :]
        ld_M = np.log(det).sum(axis=1)
        w_cat = psi0 / det
        q_cat = w_cat * Zty[None, :, 0]
        c = yty_sum - q_cat @ Zty[:, 0]
    else:
        psi1 = psis[:, 1:2]
        s01 = np.sqrt(psis[:, 0] * psis[:, 1])[:, None]
        d00 = 1.0 + psi0 * ws.z00[None, :]
        d11 = 1.0 + psi1 * ws.z11[None, :]
        off = s01 * ws.z01[None, :]
        det = d00 * d11 - off * off
        ld_M = np.log(det).sum(axis=1)
        mi00 = d11 / det
        mi11 = d00 / det
        mi01 = -off / det
        w_cat = np.concatenate(
            [psi0 * mi00, s01 * mi01, psi1 * mi11], axis=1)
        q0 = psi0 * mi00 * Zty[None, :, 0] + s01 * mi01 * Zty[None, :, 1]
        q1 = s01 * mi01 * Zty[None, :, 0] + psi1 * mi11 * Zty[None, :, 1]
        q_cat = np.concatenate([q0, q1], axis=1)
        c = yty_sum - q0 @ Zty[:, 0] - q1 @ Zty[:, 1]
    A = ws.XtX_sum[None] - (w_cat @ ws.G_flat).reshape(G, ws.p, ws.p)
    b = Xty_sum[None] - q_cat @ ws.x_cat
    crit = np.full(G, np.inf)
    try:
        coef = np.linalg.solve(A, b[:, :, None])[:, :, 0]
        sign, ld_A = np.linalg.slogdet(A)
        quad = c - (b * coef).sum(axis=1)
        good = (sign > 0) & (quad > 0) & np.isfinite(det).all(axis=1)
        crit[good] = (ld_M[good] + ld_A[good]
                      + (ws.n - ws.p) * np.log(quad[good]))
    except np.linalg.LinAlgError:
        for g in range(G):
            try:
                crit[g] = _criterion_core(ws, stats, psis[g])[0]
            except SingularDesignError:
                pass
    return crit


def _blups(ws, stats, coef, Mi, s):
    Zty = stats[1]
    ztr = Zty - np.tensordot(ws.XtZ, coef, axes=([1], [0]))
    u_loc = s[None, :] * np.matmul(Mi, (ztr * s[None, :])[:, :, None])[:, :, 0]
    u = np.zeros((ws.n_areas, ws.q))
    u[ws.present] = u_loc
    return u


@dataclass
class MixedModel:
    kind: str
    names: tuple
    coef: np.ndarray
    sigma_u2: np.ndarray
    sigma_e2: float
    u: np.ndarray
    seen: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def predict(self, X: DesignMatrix, area: np.ndarray,
                a: np.ndarray | None = None) -> np.ndarray:
        out = X.values @ self.coef
        inside = area < self.u.shape[0]
        idx = np.where(inside, area, 0)
        out += np.where(inside, self.u[idx, 0], 0.0)
        if self.kind == "H2r":
            if a is None:
                raise FitError("H2r prediction needs the treatment vector")
            out += np.where(inside, self.u[idx, 1], 0.0) * np.asarray(a, dtype=float)
        return out


@dataclass
class TwoArmMixed:
    kind: str
    names: tuple
    arm1: MixedModel
    arm0: MixedModel
    diagnostics: dict = field(default_factory=dict)

    def predict(self, X: DesignMatrix, area: np.ndarray,
                a: np.ndarray | None = None) -> np.ndarray:
        if a is None:
            raise FitError("H2m prediction needs the treatment vector")
        p1 = self.arm1.predict(X, area)
        p0 = self.arm0.predict(X, area)
        return np.where(np.asarray(a) == 1, p1, p0)


def _optimize_h1r(ws, stats, tol):
    def obj(psi):
        return _criterion_core(ws, stats, np.array([psi]))[0]

    res = optimize.minimize_scalar(obj, bounds=(0.0, 1e7), method="bounded",
                                   options={"xatol": tol})
    psi = float(res.x)
    if psi < _BOUNDARY_SNAP and obj(0.0) <= res.fun + 1e-9:
        psi = 0.0
    return np.array([psi]), int(res.nfev), bool(res.success)


_T_GRID = np.array([0.0, 0.02, 0.06, 0.15, 0.35, 0.8, 1.8, 4.0])


def _optimize_h2r(ws, stats, tol):
    """Batched grid search plus Newton polish on the sqrt-ratio scale.

    The criterion is even in each sqrt coordinate, so t = 0 is a smooth
    interior point of the polish and nonnegativity needs no constraint.
    """
    tg = _T_GRID
    T = np.stack(np.meshgrid(tg, tg, indexing="ij"), axis=-1).reshape(-1, 2)
    crit = _criterion_batch(ws, stats, T * T)
    nfev = T.shape[0]
    best = int(np.argmin(crit))
    t = T[best].copy()
    f_t = float(crit[best])
    if not np.isfinite(f_t):
        raise SingularDesignError("singular-design: no valid variance ratio")
    offsets = np.array([(i, j) for i in (-1, 0, 1) for j in (-1, 0, 1)],
                       dtype=float)
    converged = False
    for _ in range(12):
        h = 1e-3 * (np.abs(t) + 1e-2)
        P = t[None, :] + offsets * h[None, :]
        vals = _criterion_batch(ws, stats, P * P)
        nfev += P.shape[0]
        if not np.isfinite(vals).all():
            break
        f = vals.reshape(3, 3)
        g = np.array([(f[2, 1] - f[0, 1]) / (2 * h[0]),
                      (f[1, 2] - f[1, 0]) / (2 * h[1])])
        H = np.array([
            [(f[2, 1] - 2 * f[1, 1] + f[0, 1]) / h[0] ** 2,
             (f[2, 2] - f[2, 0] - f[0, 2] + f[0, 0]) / (4 * h[0] * h[1])],
            [0.0,
             (f[1, 2] - 2 * f[1, 1] + f[1, 0]) / h[1] ** 2]])
        H[1, 0] = H[0, 1]
        evals = np.linalg.eigvalsh(H)
        if evals[0] <= 0:
            # fall back to a damped gradient step when curvature is not PD
            step = -g / max(np.abs(evals).max(), 1e-8)
        else:
            step = -np.linalg.solve(H, g)
        moved = False
        for _ in range(6):
            cand = t + step
            f_new = float(_criterion_batch(ws, stats,
                                           (cand * cand)[None, :])[0])
            nfev += 1
            if np.isfinite(f_new) and f_new <= f_t + 1e-12:
                improved = f_t - f_new
                t, f_t = cand, f_new
                moved = True
                break
            step *= 0.5
        if not moved:
            converged = True
            break
        if np.abs(step).max() <= tol * (1.0 + np.abs(t).max()):
            converged = True
            break
        if moved and improved <= 1e-12 * max(abs(f_t), 1.0):
            converged = True
            break
    psi = t * t
    for k in range(2):
        if 0 < psi[k] < _BOUNDARY_SNAP:
            trial = psi.copy()
            trial[k] = 0.0
            if _criterion_core(ws, stats, trial)[0] <= f_t + 1e-9:
                psi = trial
    return psi, nfev, converged


def fit_lmm_workspace(ws: LmmWorkspace, y: np.ndarray, variant: str,
                      names: tuple, tol: float = 1e-6) -> MixedModel:
    stats = ws.stats_for(y)
    if variant == "H1r":
        psi, nfev, ok = _optimize_h1r(ws, stats, tol)
    else:
        psi, nfev, ok = _optimize_h2r(ws, stats, tol)
    crit, coef, quad, Mi, s, _, _ = _criterion_parts(ws, stats, psi)
    sigma_e2 = quad / (ws.n - ws.p)
    u = _blups(ws, stats, coef, Mi, s)
    seen = np.zeros(ws.n_areas, dtype=bool)
    seen[ws.present] = True
    return MixedModel(variant, names, coef, psi * sigma_e2, float(sigma_e2),
                      u, seen,
                      {"psi": psi.copy(), "criterion": float(crit),
                       "nfev": int(nfev), "converged": ok})


def fit_lmm(X: DesignMatrix, y: np.ndarray, area: np.ndarray, variant: str,
            a: np.ndarray | None = None, n_areas: int | None = None,
            tol: float = 1e-6, workspace=None):
    """REML fit of an area random-effects model.

    variant "H1r": random intercept; "H2r": random intercept + independent
    random treatment slope (a required); "H2m": independent H1r fits per arm.
    Unseen areas predict with zero random effect. sigma_u^2 = 0 at the
    boundary is allowed and degenerates to the least-squares fit.

    workspace: a prebuilt LmmWorkspace for the same design and grouping
    (for H2m, a mapping arm -> workspace); fits on fresh outcome vectors
    reuse its gram matrices.
    """
    area = np.asarray(area)
    if np.unique(area).size < 2 and variant != "H2m":
        raise FitError("mixed model needs at least 2 areas")
    if variant == "H1r":
        ws = workspace if workspace is not None else LmmWorkspace(
            X.values, np.ones((X.n_rows, 1)), area, n_areas)
        return fit_lmm_workspace(ws, y, "H1r", X.names, tol)
    if variant == "H2r":
        if a is None:
            raise FitError("H2r needs the treatment vector")
        if workspace is not None:
            ws = workspace
        else:
            Z = np.column_stack([np.ones(X.n_rows), np.asarray(a, dtype=float)])
            ws = LmmWorkspace(X.values, Z, area, n_areas)
        return fit_lmm_workspace(ws, y, "H2r", X.names, tol)
    if variant == "H2m":
        if a is None:
            raise FitError("H2m needs the treatment vector")
        a = np.asarray(a)
        models = {}
        for arm in (1, 0):
            rows = a == arm
            if not rows.any():
                raise FitError(f"H2m: no units in arm {arm}")
            sub = DesignMatrix(X.values[rows], X.names)
            models[arm] = fit_lmm(sub, y[rows], area[rows], "H1r",
                                  n_areas=n_areas, tol=tol,
                                  workspace=None if workspace is None
                                  else workspace[arm])
        return TwoArmMixed("H2m", X.names, models[1], models[0])
    raise FitError(f"unknown mixed variant {variant!r}")


def reml_criterion(X: DesignMatrix, y: np.ndarray, area: np.ndarray,
                   sigma_u2, sigma_e2: float, a: np.ndarray | None = None) -> float:
    """Unprofiled -2 REML log-likelihood (up to constant) at given components."""
    sigma_u2 = np.atleast_1d(np.asarray(sigma_u2, dtype=float))
    if sigma_u2.size == 1:
        Z = np.ones((X.n_rows, 1))
    else:
        Z = np.column_stack([np.ones(X.n_rows), np.asarray(a, dtype=float)])
    ws = LmmWorkspace(X.values, Z, np.asarray(area))
    stats = ws.stats_for(y)
    psi = sigma_u2 / sigma_e2
    _, _, quad, _, _, ld_M, ld_A = _criterion_parts(ws, stats, psi)
    # V = sigma_e^2 (I + Z Psi Z'): log|V| = n log sigma_e^2 + ld_M, and the
    # unit-scale pieces rescale as below
    n, p = ws.n, ws.p
    return (n - p) * np.log(sigma_e2) + ld_M + ld_A + quad / sigma_e2
