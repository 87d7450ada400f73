"""Combining rules for estimates computed on each of M completed datasets."""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np


class PoolingError(ValueError):
    pass


@dataclass(frozen=True)
class PooledEstimate:
    q_bar: float
    B: float
    W_bar: float
    T: float
    M: int

    @property
    def df(self) -> float:
        """Barnard-Rubin style reference degrees of freedom.

        A standard extension beyond the pooled variance itself; infinite when
        the between-imputation variance is zero.
        """
        if self.B == 0:
            return math.inf
        r = (1 + 1 / self.M) * self.B
        return (self.M - 1) * (1 + self.W_bar / r) ** 2


def pool(q_hats, w_hats) -> PooledEstimate:
    q = np.asarray(q_hats, dtype=float).ravel()
    w = np.asarray(w_hats, dtype=float).ravel()
    if q.size != w.size:
        raise PoolingError("estimates and variances differ in length")
    M = q.size
    if M < 2:
        raise PoolingError("pooling needs at least two imputations")
    if np.any(w < 0):
        raise PoolingError("within-imputation variances must be nonnegative")
    q_bar = float(q.mean())
    B = float(np.sum((q - q_bar) ** 2) / (M - 1))
    W_bar = float(w.mean())
    return PooledEstimate(q_bar, B, W_bar, W_bar + (1 + 1 / M) * B, M)


def pool_from_csv(path) -> dict[str, PooledEstimate]:
    """Pool a long table with columns estimand, imputation_index, estimate, variance.

    Each estimand must list imputation indices ``1..M`` exactly once, with
    the same ``M`` for every estimand.  Estimands keep first-appearance order.
    """
    rows: dict[str, dict[int, tuple[float, float]]] = defaultdict(dict)
    with open(path, encoding="utf-8-sig", newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"estimand", "imputation_index", "estimate", "variance"}
        missing = need - set(reader.fieldnames or [])
        if missing:
            raise PoolingError(f"estimates file lacks columns: {', '.join(sorted(missing))}")
        for line, rec in enumerate(reader, start=2):
            name = rec["estimand"].strip()
            try:
                idx = int(rec["imputation_index"])
                est = float(rec["estimate"])
                var = float(rec["variance"])
            except ValueError as exc:
                raise PoolingError(f"line {line}: {exc}") from None
            if idx in rows[name]:
                raise PoolingError(f"estimand {name!r}: duplicate imputation index {idx}")
            rows[name][idx] = (est, var)

    if not rows:
        raise PoolingError("estimates file has no rows")
    out: dict[str, PooledEstimate] = {}
    sizes = set()
    for name, by_idx in rows.items():
        M = max(by_idx)
        absent = [k for k in range(1, M + 1) if k not in by_idx]
        if absent or min(by_idx) < 1:
            what = absent[0] if absent else min(by_idx)
            raise PoolingError(f"estimand {name!r}: imputation index {what} missing or out of range")
        sizes.add(M)
        ests = [by_idx[k] for k in range(1, M + 1)]
        out[name] = pool([e for e, _ in ests], [v for _, v in ests])
    if len(sizes) > 1:
        raise PoolingError(f"estimands use different numbers of imputations: {sorted(sizes)}")
    return out


def write_pooled_csv(pooled: dict[str, PooledEstimate], path, with_df: bool = True) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["estimand", "M", "q_bar", "B", "W_bar", "T"] + (["df"] if with_df else [])
        w.writerow(header)
        for name, p in pooled.items():
            row = [name, p.M, repr(p.q_bar), repr(p.B), repr(p.W_bar), repr(p.T)]
            if with_df:
                row.append(repr(p.df))
            w.writerow(row)


def mean_estimate(x) -> tuple[float, float]:
    """Sample mean and its squared standard error."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 2:
        raise ValueError("need at least two values")
    return float(x.mean()), float(x.var(ddof=1) / n)


def ols_estimate(y, X, intercept: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares coefficients and their sampling variances."""
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if intercept:
        X = np.column_stack([np.ones(len(y)), X])
    n, k = X.shape
    if n <= k:
        raise ValueError("more coefficients than residual degrees of freedom")
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    sigma2 = resid @ resid / (n - k)
    cov = sigma2 * np.linalg.inv(X.T @ X)
    return coef, np.diag(cov)


def pool_mean(arrays, column: int) -> PooledEstimate:
    """Pool the mean of one column across completed value arrays."""
    ests = [mean_estimate(a[:, column]) for a in arrays]
    return pool([e for e, _ in ests], [v for _, v in ests])
