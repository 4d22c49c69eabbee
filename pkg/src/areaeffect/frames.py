"""Finite-population data structures for area-level causal estimation.

A population of N units is partitioned into m areas. Treatment (a) and the
covariates are observed for every unit; the outcome (y) is observed only on
the sampled part (s = 1). PopulationFrame stores the population column-wise,
grouped by area, and is immutable after construction; mutation happens by
building a new frame.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class UnitRecord:
    """One population unit. y must be present exactly when s = 1."""

    area: object
    a: int
    s: int
    w_ind: tuple = ()
    w_ctx: tuple = ()
    y: float | None = None
    weight: float | None = None


@dataclass(frozen=True)
class Violation:
    """A single validation failure; kind is a short machine-readable tag.

    Hard violations break the observability contract and are fatal at
    construction; soft ones (degenerate arms, empty sampled parts) are
    reported and handled downstream by flagging estimates.
    """

    kind: str
    area: object | None = None
    row: int | None = None
    hard: bool = True

    def __str__(self) -> str:
        loc = []
        if self.area is not None:
            loc.append(f"area={self.area}")
        if self.row is not None:
            loc.append(f"row={self.row}")
        return f"{self.kind}({', '.join(loc)})" if loc else self.kind


@dataclass(frozen=True)
class PartitionCounts:
    """Per-area population/sample sizes, total and per arm."""

    labels: tuple
    N: np.ndarray
    n: np.ndarray
    N1: np.ndarray
    N0: np.ndarray
    n1: np.ndarray
    n0: np.ndarray

    @property
    def f(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(self.N > 0, self.n / self.N, 0.0)
        return out

    @property
    def N_total(self) -> int:
        return int(self.N.sum())

    @property
    def n_total(self) -> int:
        return int(self.n.sum())


@dataclass
class AreaEstimate:
    """Per-area point estimate with arm components and optional interval.

    A flagged estimate (flag is not None) carries NaN values; tau = tau1 - tau0
    holds whenever the estimate is not flagged.
    """

    area: object
    tau: float
    tau1: float
    tau0: float
    strategy: str = ""
    family: str = ""
    nuisance: str = ""
    flag: str | None = None
    lower: float | None = None
    upper: float | None = None
    diagnostics: dict = field(default_factory=dict)


def _as_float_col(values, n, name):
    arr = np.asarray(values, dtype=float)
    if arr.shape != (n,):
        raise DataError(f"column {name!r} must be one value per unit")
    return arr


class PopulationFrame:
    """Column-wise immutable population, units grouped by area.

    Areas are remapped to dense indices 0..m-1 in sorted label order;
    ``area_labels`` preserves the external identifiers. Missing outcomes and
    missing weights are stored as NaN internally but exposed through masks.
    """

    __slots__ = (
        "area", "a", "s", "y", "w_ind", "w_ctx", "weight",
        "area_labels", "w_names", "c_names", "starts", "_counts",
    )

    def __init__(self, area, a, s, y, w_ind, w_ctx=None, weight=None,
                 w_names=None, c_names=None, check=True):
        area = np.asarray(area)
        n = area.shape[0]
        if n == 0:
            raise DataError("empty population")
        a = np.asarray(a)
        s = np.asarray(s)
        y = _as_float_col(y, n, "y")
        w_ind = np.asarray(w_ind, dtype=float)
        if w_ind.ndim == 1:
            w_ind = w_ind.reshape(n, -1) if w_ind.size else np.empty((n, 0))
        w_ctx = (np.asarray(w_ctx, dtype=float) if w_ctx is not None
                 else np.empty((n, 0)))
        if w_ctx.ndim == 1:
            w_ctx = w_ctx.reshape(n, -1) if w_ctx.size else np.empty((n, 0))
        if w_ind.shape[0] != n or w_ctx.shape[0] != n:
            raise DataError("covariate blocks must have one row per unit")
        weight = (_as_float_col(weight, n, "weight") if weight is not None
                  else np.full(n, np.nan))

        labels, dense = np.unique(area, return_inverse=True)
        order = np.argsort(dense, kind="stable")

        object.__setattr__(self, "area", np.ascontiguousarray(dense[order].astype(np.int32)))
        object.__setattr__(self, "a", np.ascontiguousarray(a[order].astype(np.int8)))
        object.__setattr__(self, "s", np.ascontiguousarray(s[order].astype(np.int8)))
        object.__setattr__(self, "y", np.ascontiguousarray(y[order]))
        object.__setattr__(self, "w_ind", np.ascontiguousarray(w_ind[order]))
        object.__setattr__(self, "w_ctx", np.ascontiguousarray(w_ctx[order]))
        object.__setattr__(self, "weight", np.ascontiguousarray(weight[order]))
        object.__setattr__(self, "area_labels", tuple(labels.tolist()))
        object.__setattr__(self, "w_names", tuple(w_names) if w_names is not None
                           else tuple(f"x{k + 1}" for k in range(self.w_ind.shape[1])))
        object.__setattr__(self, "c_names", tuple(c_names) if c_names is not None
                           else tuple(f"g{k + 1}" for k in range(self.w_ctx.shape[1])))
        m = len(self.area_labels)
        starts = np.zeros(m + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.area, minlength=m), out=starts[1:])
        object.__setattr__(self, "starts", starts)
        object.__setattr__(self, "_counts", None)
        for name in ("area", "a", "s", "y", "w_ind", "w_ctx", "weight"):
            getattr(self, name).setflags(write=False)
        if len(self.w_names) != self.w_ind.shape[1] or len(self.c_names) != self.w_ctx.shape[1]:
            raise DataError("covariate names do not match covariate columns")
        if check:
            report = [v for v in self.validate() if v.hard]
            if report:
                raise DataError("; ".join(str(v) for v in report[:8])
                                + (f"; +{len(report) - 8} more" if len(report) > 8 else ""))

    def __setattr__(self, name, value):
        raise AttributeError("PopulationFrame is immutable")

    @classmethod
    def from_units(cls, units: Iterable[UnitRecord], w_names=None, c_names=None,
                   check=True) -> "PopulationFrame":
        units = list(units)
        if not units:
            raise DataError("empty population")
        y = [np.nan if u.y is None else float(u.y) for u in units]
        weight = [np.nan if u.weight is None else float(u.weight) for u in units]
        return cls(
            area=[u.area for u in units],
            a=[u.a for u in units],
            s=[u.s for u in units],
            y=y,
            w_ind=np.asarray([u.w_ind for u in units], dtype=float),
            w_ctx=np.asarray([u.w_ctx for u in units], dtype=float),
            weight=weight,
            w_names=w_names,
            c_names=c_names,
            check=check,
        )

    # -- basic geometry -------------------------------------------------
    @property
    def n_units(self) -> int:
        return self.area.shape[0]

    @property
    def m(self) -> int:
        return len(self.area_labels)

    @property
    def sampled(self) -> np.ndarray:
        return self.s == 1

    def area_slice(self, j: int) -> slice:
        return slice(int(self.starts[j]), int(self.starts[j + 1]))

    def label_of(self, j: int):
        return self.area_labels[j]

    # -- bookkeeping -----------------------------------------------------
    @property
    def counts(self) -> PartitionCounts:
        cached = object.__getattribute__(self, "_counts")
        if cached is None:
            m = self.m
            a1 = (self.a == 1).astype(np.int64)
            s1 = (self.s == 1).astype(np.int64)
            N = np.bincount(self.area, minlength=m)
            N1 = np.bincount(self.area, weights=a1, minlength=m).astype(np.int64)
            n = np.bincount(self.area, weights=s1, minlength=m).astype(np.int64)
            n1 = np.bincount(self.area, weights=a1 * s1, minlength=m).astype(np.int64)
            cached = PartitionCounts(self.area_labels, N, n, N1, N - N1, n1, n - n1)
            object.__setattr__(self, "_counts", cached)
        return cached

    def validate(self) -> list[Violation]:
        """Report observability/consistency violations; never raises."""
        out: list[Violation] = []
        bad = ~np.isin(self.a, (0, 1))
        for i in np.flatnonzero(bad):
            out.append(Violation("invalid-treatment", self.area_labels[self.area[i]], int(i)))
        bad = ~np.isin(self.s, (0, 1))
        for i in np.flatnonzero(bad):
            out.append(Violation("invalid-sample-flag", self.area_labels[self.area[i]], int(i)))
        missing_y = (self.s == 1) & np.isnan(self.y)
        for i in np.flatnonzero(missing_y):
            out.append(Violation("missing-outcome-on-sampled",
                                 self.area_labels[self.area[i]], int(i)))
        extra_y = (self.s == 0) & ~np.isnan(self.y)
        for i in np.flatnonzero(extra_y):
            out.append(Violation("outcome-on-unsampled",
                                 self.area_labels[self.area[i]], int(i)))
        bad_w = ~np.isnan(self.weight) & (self.weight <= 0)
        for i in np.flatnonzero(bad_w):
            out.append(Violation("nonpositive-weight",
                                 self.area_labels[self.area[i]], int(i)))
        for j in range(self.m):
            sl = self.area_slice(j)
            ctx = self.w_ctx[sl]
            if ctx.shape[1] and ctx.shape[0] > 1 and not np.all(ctx == ctx[0]):
                out.append(Violation("inconsistent-contextual", self.area_labels[j]))
        c = self.counts
        for j in range(self.m):
            if c.N1[j] == 0:
                out.append(Violation(f"degenerate-arm(area={self.area_labels[j]}, a=1)", hard=False))
            if c.N0[j] == 0:
                out.append(Violation(f"degenerate-arm(area={self.area_labels[j]}, a=0)", hard=False))
            if c.n[j] == 0:
                out.append(Violation(f"empty-sample(area={self.area_labels[j]})", hard=False))
        return out

    # -- derived columns ---------------------------------------------------
    def design_weights(self) -> np.ndarray:
        """Per-unit design weights on sampled units, defaulting to N_j^a/n_j^a."""
        w = self.weight.copy()
        c = self.counts
        fill = np.isnan(w) & (self.s == 1)
        if fill.any():
            Na = np.where(self.a == 1, c.N1[self.area], c.N0[self.area]).astype(float)
            na = np.where(self.a == 1, c.n1[self.area], c.n0[self.area]).astype(float)
            with np.errstate(divide="ignore"):
                default = Na / na
            w[fill] = default[fill]
        return w

    def with_outcomes(self, y_sampled: np.ndarray) -> "PopulationFrame":
        """New frame with sampled outcomes replaced (same structure otherwise)."""
        y_new = self.y.copy()
        y_new[self.sampled] = y_sampled
        return self._replace_y(y_new)

    def _replace_y(self, y_new: np.ndarray) -> "PopulationFrame":
        clone = object.__new__(PopulationFrame)
        for name in self.__slots__:
            object.__setattr__(clone, name, object.__getattribute__(self, name))
        y_new = np.ascontiguousarray(y_new, dtype=float)
        y_new.setflags(write=False)
        object.__setattr__(clone, "y", y_new)
        return clone


def validate(frame: PopulationFrame) -> list[Violation]:
    return frame.validate()


def partition_counts(frame: PopulationFrame) -> PartitionCounts:
    return frame.counts


@dataclass(frozen=True)
class ImputedFrame:
    """A frame completed with outcome predictions for the unsampled part.

    y_hat equals the observed y exactly on sampled units; the provenance mask
    marks the imputed (unsampled) entries.
    """

    base: PopulationFrame
    y_hat: np.ndarray
    imputed: np.ndarray

    def __post_init__(self):
        s = self.base.sampled
        if self.y_hat.shape != (self.base.n_units,):
            raise DataError("y_hat must have one value per unit")
        if not np.all(np.isfinite(self.y_hat)):
            raise DataError("y_hat must be finite everywhere")
        if not np.array_equal(self.y_hat[s], self.base.y[s]):
            raise DataError("y_hat must equal observed y on sampled units")
        if not np.array_equal(self.imputed, ~s):
            raise DataError("provenance mask must mark exactly the unsampled part")
        self.y_hat.setflags(write=False)


def complete_frame(frame: PopulationFrame, predictions: np.ndarray) -> ImputedFrame:
    """Build an ImputedFrame: observed y where sampled, predictions elsewhere."""
    s = frame.sampled
    y_hat = np.where(s, frame.y, predictions)
    return ImputedFrame(frame, y_hat, ~s)
