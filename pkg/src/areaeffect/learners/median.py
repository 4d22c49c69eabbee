"""Median (least absolute deviations) regression via smoothed IRLS.

The IRLS weights 1/max(|r|, eps) are the majorize-minimize scheme for the
smoothed loss rho(r) = r^2/(2 eps) + eps/2 for |r| < eps and |r| otherwise,
so that objective is non-increasing across iterations by construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..design import DesignMatrix
from .linear import fit_linear


@dataclass
class MedianModel:
    kind: str
    names: tuple
    coef: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def predict(self, X: DesignMatrix) -> np.ndarray:
        return X.values @ self.coef


def _smoothed_lad(r, eps):
    ar = np.abs(r)
    small = ar < eps
    return float(np.where(small, r * r / (2 * eps) + eps / 2, ar).sum())


def fit_median(X: DesignMatrix, y: np.ndarray, *, tol: float = 1e-6,
               max_iter: int = 200) -> MedianModel:
    """LAD fit warm-started at OLS; the smoothing eps anneals down to
    1e-6 * sd(y) so early iterations take large steps and the reported
    objective is the tightly smoothed one."""
    V = X.values
    sd = float(np.std(y))
    stages = (1e-2 * sd, 1e-4 * sd, 1e-6 * sd) if sd > 0 else (1e-12,)
    coef = fit_linear(X, y).coef
    r = y - V @ coef
    it = 0
    converged = True
    eps = stages[-1]
    obj = _smoothed_lad(r, eps)
    for eps in stages:
        obj = _smoothed_lad(r, eps)
        stage_done = False
        while it < max_iter:
            it += 1
            w = 1.0 / np.maximum(np.abs(r), eps)
            Vw = V * w[:, None]
            try:
                new = np.linalg.solve(Vw.T @ V, Vw.T @ y)
            except np.linalg.LinAlgError:
                new = np.linalg.lstsq(Vw.T @ V, Vw.T @ y, rcond=None)[0]
            r = y - V @ new
            new_obj = _smoothed_lad(r, eps)
            coef = new
            done = abs(obj - new_obj) <= tol * max(abs(obj), 1.0)
            obj = new_obj
            if done:
                stage_done = True
                break
        if not stage_done:
            converged = False
            break
    diag = {"iterations": it, "converged": converged, "objective": obj,
            "lad": float(np.abs(r).sum()), "eps": eps}
    if not converged:
        diag["warning"] = "max-iterations"
    return MedianModel("M", X.names, coef, diag)
