"""Design matrix construction with population standardization.

Covariates are centered and scaled using moments computed over the full
population (covariates are observed everywhere, so the moments involve no
outcome or sampling information), and the same moments are applied at
prediction time. Columns with zero population variance are dropped so that
the intercept stays the only constant column. Standardization is a
per-column affine map, so fitted predictions are unchanged; the payoff is
that design matrices for one population are identical no matter which
sample was drawn, and caches built on them can be shared.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .frames import PopulationFrame


@dataclass(frozen=True)
class DesignMatrix:
    values: np.ndarray
    names: tuple

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]


class DesignBuilder:
    """Frozen column schema + standardization moments for one frame family.

    The builder may be reused for any frame sharing the original frame's
    covariate/treatment/sample structure (e.g. bootstrap replicates, which
    change outcomes only).
    """

    def __init__(self, frame: PopulationFrame, *, treatment: bool = False,
                 interactions: bool = False, contextual: bool = True):
        if interactions and not treatment:
            raise DataError("interactions require the treatment column")
        cols = [frame.w_ind]
        names = list(frame.w_names)
        n_ind = frame.w_ind.shape[1]
        if contextual and frame.w_ctx.shape[1]:
            cols.append(frame.w_ctx)
            names += list(frame.c_names)
        block = np.hstack(cols) if cols else np.empty((frame.n_units, 0))
        mean = block.mean(axis=0) if block.shape[1] else np.empty(0)
        sd = block.std(axis=0) if block.shape[1] else np.empty(0)
        keep = sd > 0
        self._block = np.ascontiguousarray(block[:, keep])
        self._mean = mean[keep]
        self._sd = sd[keep]
        self.dropped = tuple(nm for nm, k in zip(names, keep) if not k)
        self._cov_names = [nm for nm, k in zip(names, keep) if k]
        self._ind_mask = keep[:n_ind]
        self._n_ind_kept = int(self._ind_mask.sum())
        self.treatment = treatment
        self.interactions = interactions
        self._a = frame.a.astype(float)
        names_out = ["const"] + self._cov_names
        if treatment:
            names_out.append("a")
        if interactions:
            names_out += [f"a:{nm}" for nm in self._cov_names[: self._n_ind_kept]]
        self.names = tuple(names_out)

    def matrix(self, rows=None, a=None) -> DesignMatrix:
        """Design rows; ``rows`` selects units, ``a`` overrides treatment."""
        block = self._block if rows is None else self._block[rows]
        std = (block - self._mean) / self._sd if block.shape[1] else block
        cols = [np.ones((std.shape[0], 1)), std]
        if self.treatment:
            if a is None:
                av = self._a if rows is None else self._a[rows]
            elif np.isscalar(a):
                av = np.full(std.shape[0], float(a))
            else:
                av = np.asarray(a, dtype=float)
            cols.append(av.reshape(-1, 1))
            if self.interactions:
                cols.append(std[:, : self._n_ind_kept] * av.reshape(-1, 1))
        return DesignMatrix(np.ascontiguousarray(np.hstack(cols)), self.names)
