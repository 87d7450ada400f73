"""Truncation intervals of the extended rank likelihood.

For an observed cell the latent value must sit strictly above every latent
whose observed value is smaller, and strictly below every latent whose
observed value is larger.  Equal observed values impose no constraint on one
another, and unobserved cells are unconstrained.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Bounds:
    lo: float
    hi: float


def truncation_bounds(y, observed, z, target: int) -> Bounds:
    """Brute-force O(n) scan for the interval of ``z[target]``."""
    y = np.asarray(y, dtype=float)
    observed = np.asarray(observed, dtype=bool)
    z = np.asarray(z, dtype=float)
    if y.shape != z.shape or y.shape != observed.shape:
        raise ValueError("y, observed and z must have equal length")
    if not observed[target]:
        return Bounds(-np.inf, np.inf)
    yt = y[target]
    below = observed & (y < yt)
    above = observed & (y > yt)
    lo = z[below].max() if below.any() else -np.inf
    hi = z[above].min() if above.any() else np.inf
    return Bounds(float(lo), float(hi))


class ColumnOrder:
    """Sorted group structure of one observed column, built once per chain.

    Rows with equal observed values form a group; groups are indexed
    ``0..G-1`` in ascending order of the value.
    """

    def __init__(self, y, observed):
        y = np.asarray(y, dtype=float)
        observed = np.asarray(observed, dtype=bool)
        self.n = y.size
        self.observed_rows = np.flatnonzero(observed)
        self.missing_rows = np.flatnonzero(~observed)
        vals = y[self.observed_rows]
        order = np.argsort(vals, kind="stable")
        self.sorted_rows = self.observed_rows[order]
        sv = vals[order]
        starts = np.flatnonzero(np.r_[True, sv[1:] != sv[:-1]]) if sv.size else np.array([], int)
        self.group_starts = starts
        self.n_groups = starts.size
        sizes = np.diff(np.r_[starts, sv.size])
        # group index of each entry of sorted_rows
        self.group_of_sorted = np.repeat(np.arange(self.n_groups), sizes)
        self.group_of_row = np.full(self.n, -1, dtype=np.int64)
        self.group_of_row[self.sorted_rows] = self.group_of_sorted

    def group_extrema(self, z):
        zs = np.asarray(z, dtype=float)[self.sorted_rows]
        gmax = np.maximum.reduceat(zs, self.group_starts)
        gmin = np.minimum.reduceat(zs, self.group_starts)
        return gmax, gmin

    def group_bounds(self, z, active=None):
        """Per-group interval from the extrema of the other groups.

        With ``active`` (a boolean mask over groups), only groups where
        ``active`` is False constrain the others; this is what a blocked
        sweep needs when the active groups are redrawn together.
        """
        if self.n_groups == 0:
            empty = np.array([])
            return empty, empty
        gmax, gmin = self.group_extrema(z)
        if active is not None:
            gmax = np.where(active, -np.inf, gmax)
            gmin = np.where(active, np.inf, gmin)
        # running max over strictly lower groups, running min over strictly higher
        lo = np.r_[-np.inf, np.maximum.accumulate(gmax)[:-1]]
        hi = np.r_[np.minimum.accumulate(gmin[::-1])[::-1][1:], np.inf]
        return lo, hi

    def bounds(self, z):
        """Intervals for every row, equal to :func:`truncation_bounds` row by row."""
        lo = np.full(self.n, -np.inf)
        hi = np.full(self.n, np.inf)
        glo, ghi = self.group_bounds(z)
        lo[self.sorted_rows] = glo[self.group_of_sorted]
        hi[self.sorted_rows] = ghi[self.group_of_sorted]
        return lo, hi

    def is_consistent(self, z) -> bool:
        """True when ``y_a < y_b`` implies ``z_a < z_b`` over observed rows."""
        if self.n_groups < 2:
            return True
        gmax, gmin = self.group_extrema(z)
        return bool(np.all(np.maximum.accumulate(gmax)[:-1] < gmin[1:]))

    def violations(self, z) -> int:
        """Number of observed rows whose latent lies outside its interval."""
        zz = np.asarray(z, dtype=float)
        lo, hi = self.bounds(zz)
        rows = self.observed_rows
        return int(np.sum(~((zz[rows] > lo[rows]) & (zz[rows] < hi[rows]))))
