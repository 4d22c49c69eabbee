"""Least-squares and logistic learners."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from ..design import DesignMatrix
from ..errors import SeparationError, SingularDesignError


@dataclass
class LinearModel:
    kind: str
    names: tuple
    coef: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def predict(self, X: DesignMatrix) -> np.ndarray:
        return X.values @ self.coef


def fit_linear(X: DesignMatrix, y: np.ndarray) -> LinearModel:
    """Ordinary least squares; raises on rank deficiency."""
    V = X.values
    if V.shape[0] < V.shape[1]:
        raise SingularDesignError("singular-design: fewer rows than columns")
    coef, _, rank, _ = np.linalg.lstsq(V, y, rcond=None)
    if rank < V.shape[1]:
        raise SingularDesignError("singular-design: rank-deficient design")
    return LinearModel("L", X.names, coef)


@dataclass
class LogisticModel:
    kind: str
    names: tuple
    coef: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def predict(self, X: DesignMatrix) -> np.ndarray:
        return expit(X.values @ self.coef)


def _logistic_nll(V, t, coef, lam):
    eta = V @ coef
    # log(1 + exp(-t*eta)) computed stably; t in {-1, +1}
    z = -t * eta
    nll = np.logaddexp(0.0, z).sum()
    if lam:
        nll += 0.5 * lam * (coef[1:] @ coef[1:])
    return nll


def _fit_logistic_newton(V, a, lam, tol, max_iter, divergence_bound):
    n, k = V.shape
    t = 2.0 * a - 1.0
    coef = np.zeros(k)
    nll = _logistic_nll(V, t, coef, lam)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p = expit(V @ coef)
        grad = V.T @ (a - p)
        if lam:
            grad[1:] -= lam * coef[1:]
        if np.max(np.abs(grad)) < tol:
            converged = True
            break
        w = p * (1.0 - p)
        H = (V * w[:, None]).T @ V
        if lam:
            H[1:, 1:] += lam * np.eye(k - 1)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        new = coef + step
        new_nll = _logistic_nll(V, t, new, lam)
        halvings = 0
        while new_nll > nll and halvings < 30:
            step *= 0.5
            new = coef + step
            new_nll = _logistic_nll(V, t, new, lam)
            halvings += 1
        coef, nll = new, new_nll
        if np.max(np.abs(coef)) > divergence_bound:
            raise SeparationError(
                "separation: coefficients diverging on standardized design; "
                "clip covariates or refit with ridge")
    # every margin correctly signed <=> complete separation: a finite
    # unpenalized optimum always misclassifies some row
    if not lam and np.all(t * (V @ coef) > 0):
        raise SeparationError("separation: all margins correctly signed")
    return coef, nll, converged, it


def fit_logistic(X: DesignMatrix, a: np.ndarray, *, ridge_fallback: bool = False,
                 ridge: float = 0.0, tol: float = 1e-6,
                 max_iter: int = 100) -> LogisticModel:
    """Bernoulli MLE via Newton iterations with step halving.

    Raises "separation" when coefficients diverge (|beta| > 30 on the
    standardized design); with ridge_fallback=True, refits once with a small
    ridge penalty (lambda = 1e-4, intercept unpenalized) instead of raising.
    """
    a = np.asarray(a, dtype=float)
    if not (np.any(a == 1) and np.any(a == 0)):
        raise SeparationError("separation: single-class target")
    try:
        coef, nll, converged, it = _fit_logistic_newton(
            X.values, a, ridge, tol, max_iter, divergence_bound=30.0)
        used_ridge = bool(ridge)
    except SeparationError:
        if not ridge_fallback:
            raise
        coef, nll, converged, it = _fit_logistic_newton(
            X.values, a, 1e-4, tol, max_iter, divergence_bound=np.inf)
        used_ridge = True
    return LogisticModel("L", X.names, coef,
                         {"iterations": it, "converged": converged,
                          "nll": float(nll), "ridge": used_ridge})
