"""Nuisance learner layer: kinds "L", "M", "H1r", "H2r", "H2m", "Gb".

fit_regression / fit_propensity dispatch on the kind strings used in config
files; predict() enforces the fit-time column schema.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..design import DesignMatrix
from ..errors import ConfigError, SchemaMismatchError
from .boosting import GbModel, fit_gb
from .linear import LinearModel, LogisticModel, fit_linear, fit_logistic
from .median import MedianModel, fit_median
from .mixed import (LmmWorkspace, MixedModel, TwoArmMixed, fit_lmm,
                    fit_lmm_workspace, reml_criterion)

REGRESSION_KINDS = ("L", "M", "H1r", "H2r", "H2m", "Gb")
PROPENSITY_KINDS = ("L", "Gb")
ARM_KINDS = ("L", "M", "H1r", "H2m", "Gb")


@dataclass(frozen=True)
class NuisanceTriple:
    """Learner kinds for imputation (mu), propensity (e1), arm means (mu_a)."""

    mu: str = "L"
    e1: str = "L"
    mu_a: str = "L"
    clip: tuple = (0.01, 0.99)

    def __post_init__(self):
        if self.mu not in REGRESSION_KINDS:
            raise ConfigError(f"mu learner must be one of {REGRESSION_KINDS}, got {self.mu!r}")
        if self.e1 not in PROPENSITY_KINDS:
            raise ConfigError(
                f"propensity-learner-unsupported: e1 must be one of {PROPENSITY_KINDS}, "
                f"got {self.e1!r}")
        if self.mu_a not in ARM_KINDS:
            raise ConfigError(f"mu_a learner must be one of {ARM_KINDS}, got {self.mu_a!r}")
        lo, hi = self.clip
        if not (0.0 < lo < hi < 1.0):
            raise ConfigError(f"clip bounds must satisfy 0 < lo < hi < 1, got {self.clip}")

    @property
    def tag(self) -> str:
        return f"{self.mu}/{self.e1}/{self.mu_a}"


def fit_regression(kind: str, X: DesignMatrix, y: np.ndarray, *,
                   area: np.ndarray | None = None,
                   a: np.ndarray | None = None,
                   n_areas: int | None = None,
                   workspace=None):
    if kind == "L":
        return fit_linear(X, y)
    if kind == "M":
        return fit_median(X, y)
    if kind in ("H1r", "H2r", "H2m"):
        return fit_lmm(X, y, area, kind, a=a, n_areas=n_areas,
                       workspace=workspace)
    if kind == "Gb":
        return fit_gb(X, y, loss="squared")
    raise ConfigError(f"unknown regression learner {kind!r}")


def fit_propensity(kind: str, X: DesignMatrix, a: np.ndarray):
    if kind == "L":
        return fit_logistic(X, a, ridge_fallback=True)
    if kind == "Gb":
        return fit_gb(X, a, loss="logistic")
    raise ConfigError(
        f"propensity-learner-unsupported: {kind!r} (allowed: {PROPENSITY_KINDS})")


def predict(learner, X: DesignMatrix, *, area: np.ndarray | None = None,
            a: np.ndarray | None = None) -> np.ndarray:
    """Schema-checked prediction; area/a are consumed by the mixed models."""
    if learner.names != X.names:
        raise SchemaMismatchError(
            f"schema-mismatch: fit columns {learner.names} != predict columns {X.names}")
    if isinstance(learner, (MixedModel, TwoArmMixed)):
        return learner.predict(X, area, a)
    return learner.predict(X)


def predict_propensity(learner, X: DesignMatrix, clip: tuple,
                       area: np.ndarray | None = None) -> np.ndarray:
    raw = predict(learner, X, area=area)
    return np.clip(raw, clip[0], clip[1])


__all__ = [
    "ARM_KINDS", "PROPENSITY_KINDS", "REGRESSION_KINDS",
    "GbModel", "LinearModel", "LogisticModel", "MedianModel", "MixedModel",
    "TwoArmMixed", "LmmWorkspace", "NuisanceTriple",
    "fit_gb", "fit_linear", "fit_logistic", "fit_lmm", "fit_lmm_workspace",
    "fit_median", "fit_propensity", "fit_regression", "predict",
    "predict_propensity", "reml_criterion",
]
