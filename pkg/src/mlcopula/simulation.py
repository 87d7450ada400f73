"""Artificial clustered mixed-type data, MAR deletion and imputation accuracy.

The generator draws five variables in sequence, each depending on the ones
before it:

* ``X1`` Gamma(shape 3, rate 0.5) (or scale 0.5 with ``gamma_scale=True``)
* ``X2`` binary, ``logit P(X2 = 1) = X1 + e``
* ``X3`` nominal with 4 categories from a 3-utility multinomial probit on
  ``(X1, X2)``
* ``X4`` ordinal with 4 levels, cut from a random-intercept latent at its
  20/30/50% empirical quantiles
* ``X5`` normal, random-intercept regression on ``X1..X4``

Unstated laws are fixed as follows: the probit coefficients, ``beta_x3`` and
``beta_x4`` are iid standard normal, and the probit error correlation is
``QQ^T`` rescaled to unit diagonal with ``Q`` a 3x3 standard normal matrix.
``X3`` and ``X4`` enter later equations through dummies for levels 2..4.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .data import MixedDataset, Schema, parse_schema
from .linalg import cov_to_corr, make_rng

SIM_COLUMNS = ("X1", "X2", "X3", "X4", "X5")


def sim_schema() -> Schema:
    return parse_schema(
        {
            "cluster": "cluster",
            "columns": [
                {"name": "X1", "kind": "continuous"},
                {"name": "X2", "kind": "binary"},
                {"name": "X3", "kind": "nominal", "levels": ["1", "2", "3", "4"]},
                {"name": "X4", "kind": "ordinal"},
                {"name": "X5", "kind": "continuous"},
            ],
        }
    )


@dataclass
class SimConfig:
    m: int = 20
    n_i: int = 50
    rho: float = 0.2
    target_missing: float = 0.3
    seed: int = 0
    gamma_scale: bool = False

    def __post_init__(self):
        if self.m < 1 or self.n_i < 1:
            raise ValueError("cluster count and size must be positive")
        if self.rho < 0:
            raise ValueError("rho must be nonnegative")
        if not 0 <= self.target_missing < 1:
            raise ValueError("target_missing must lie in [0, 1)")


@dataclass
class SimTruth:
    """Everything the generator drew, kept for checking recovery."""

    config: dict
    b_x3: list
    c_x3: list
    beta_x3: list
    beta_x4: list
    x4_thresholds: list
    b_x4: list
    b_x5: list
    latent_x3: np.ndarray = field(repr=False)
    latent_x4: np.ndarray = field(repr=False)

    def to_json(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k not in ("latent_x3", "latent_x4")}
        return out


def icc_from_rho(rho: float) -> float:
    """Intra-class correlation of a random-intercept model with unit residual variance."""
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    return rho / (rho + 1.0)


def _dummies(codes, levels=(2, 3, 4)):
    return np.column_stack([(codes == k).astype(float) for k in levels])


def generate_complete(cfg: SimConfig) -> tuple[MixedDataset, SimTruth]:
    rng = make_rng(cfg.seed)
    m, n_i = cfg.m, cfg.n_i
    n = m * n_i
    cluster = np.repeat(np.arange(m), n_i)

    x1 = rng.gamma(3.0, 0.5 if cfg.gamma_scale else 2.0, size=n)
    x2 = (rng.random(n) < expit(x1 + rng.standard_normal(n))).astype(float)

    b_x3 = rng.standard_normal((2, 3))
    q = rng.standard_normal((3, 3))
    c_x3 = cov_to_corr(q @ q.T)
    l3 = np.column_stack([x1, x2]) @ b_x3 + rng.multivariate_normal(np.zeros(3), c_x3, size=n, method="cholesky")
    arg = np.argmax(l3, axis=1)
    x3 = np.where(l3.max(axis=1) > 0, arg + 1, 4).astype(float)

    beta_x3 = rng.standard_normal(3)
    b4 = rng.normal(0.0, np.sqrt(cfg.rho), size=m)
    l4 = b4[cluster] + x1 + x2 + _dummies(x3) @ beta_x3 + rng.standard_normal(n)
    cuts = np.quantile(l4, [0.2, 0.3, 0.5])
    x4 = 1.0 + np.searchsorted(cuts, l4, side="left")

    beta_x4 = rng.standard_normal(3)
    b5 = rng.normal(0.0, np.sqrt(cfg.rho), size=m)
    x5 = b5[cluster] + x1 + x2 + _dummies(x3) @ beta_x3 + _dummies(x4) @ beta_x4 + rng.standard_normal(n)

    values = np.column_stack([x1, x2, x3, x4, x5])
    schema = sim_schema()
    labels = tuple(str(k + 1) for k in range(m))
    ds = MixedDataset(
        schema=schema,
        values=values,
        mask=np.ones(values.shape, dtype=bool),
        cluster=cluster,
        cluster_labels=labels,
        header=("cluster",) + SIM_COLUMNS,
        category_labels={"X3": ("1", "2", "3", "4")},
    )
    truth = SimTruth(
        config=asdict(cfg),
        b_x3=b_x3.tolist(),
        c_x3=c_x3.tolist(),
        beta_x3=beta_x3.tolist(),
        beta_x4=beta_x4.tolist(),
        x4_thresholds=cuts.tolist(),
        b_x4=b4.tolist(),
        b_x5=b5.tolist(),
        latent_x3=l3,
        latent_x4=l4,
    )
    return ds, truth


def x5_fixed_part(ds: MixedDataset, truth: SimTruth) -> np.ndarray:
    """Known fixed-effect mean of X5, leaving ``b_i + e`` as the remainder."""
    v = ds.values
    return v[:, 0] + v[:, 1] + _dummies(v[:, 2]) @ np.array(truth.beta_x3) + _dummies(v[:, 3]) @ np.array(truth.beta_x4)


def anova_icc(values, cluster) -> float:
    """One-way ANOVA estimator of the intra-class correlation."""
    values = np.asarray(values, dtype=float)
    cluster = np.asarray(cluster)
    labels, inv = np.unique(cluster, return_inverse=True)
    k = labels.size
    n = values.size
    sizes = np.bincount(inv)
    means = np.bincount(inv, weights=values) / sizes
    grand = values.mean()
    msb = np.sum(sizes * (means - grand) ** 2) / (k - 1)
    msw = np.sum((values - means[inv]) ** 2) / (n - k)
    n0 = (n - np.sum(sizes**2) / n) / (k - 1)
    s2b = max((msb - msw) / n0, 0.0)
    return float(s2b / (s2b + msw))


def calibrate_intercept(driver, target: float, slope: float = 1.0, tol: float = 1e-9) -> float:
    """Intercept ``a`` with ``mean(logistic(a + slope * driver)) == target``."""
    if not 0 < target < 1:
        raise ValueError(f"missingness rate {target} is unattainable")
    driver = np.asarray(driver, dtype=float)
    f = lambda a: float(np.mean(expit(a + slope * driver))) - target
    span = 50.0 + np.abs(slope * driver).max()
    return brentq(f, -span, span, xtol=tol)


def impose_mar(ds: MixedDataset, rates, seed: int, driver_col: str = "X5", slope: float = 1.0) -> tuple[MixedDataset, dict]:
    """Delete cells of every column except ``driver_col`` with logistic MAR probabilities.

    ``rates`` maps column names to target missing fractions (a single float
    applies to every non-driver column).  Returns the masked dataset and the
    calibrated intercepts.
    """
    rng = make_rng(seed)
    driver_j = ds.column(driver_col)
    if not ds.mask[:, driver_j].all():
        raise ValueError(f"driver column {driver_col} must be fully observed")
    driver = ds.values[:, driver_j]
    targets = rates if isinstance(rates, dict) else {n: float(rates) for n in ds.names if n != driver_col}
    if driver_col in targets:
        raise ValueError(f"driver column {driver_col} is never deleted")
    mask = ds.mask.copy()
    intercepts = {}
    for name in ds.names:
        if name not in targets:
            continue
        target = float(targets[name])
        if not 0 <= target < 1:
            raise ValueError(f"missingness rate {target} for {name} is unattainable")
        u = rng.random(ds.n_rows)
        if target == 0:
            intercepts[name] = None
            continue
        a0 = calibrate_intercept(driver, target, slope)
        intercepts[name] = a0
        delete = u < expit(a0 + slope * driver)
        j = ds.column(name)
        keep = mask[:, j] & ~delete
        if not keep.any():
            raise ValueError(f"missingness rate {target} deleted every value of {name}")
        mask[:, j] = keep
    out = ds.with_values(ds.values.copy(), mask)
    return out, intercepts


@dataclass
class AccuracyReport:
    """Per-column imputation accuracy; ``None`` when a column had no deleted cells."""

    values: dict[str, float | None]
    kinds: dict[str, str]

    def rows(self):
        for name, v in self.values.items():
            yield name, self.kinds[name], v


def metric_kind(kind: str) -> str:
    return "euclidean" if kind in ("continuous", "ordinal") else "misclassification"


def accuracy_metrics(truth: MixedDataset, imputed: list, mask) -> AccuracyReport:
    """Average over imputations of the per-column discrepancy on deleted cells.

    ``imputed`` is a list of completed datasets (or raw value arrays aligned
    with ``truth``).  Continuous and ordinal columns use the mean squared
    difference, binary and nominal columns the misclassification rate.
    """
    mask = np.asarray(mask, dtype=bool)
    arrays = [np.asarray(getattr(d, "values", d), dtype=float) for d in imputed]
    if not arrays:
        raise ValueError("need at least one imputed dataset")
    values, kinds = {}, {}
    for j, spec in enumerate(truth.columns):
        kind = metric_kind(spec.kind)
        kinds[spec.name] = kind
        deleted = ~mask[:, j]
        k = int(deleted.sum())
        if k == 0:
            values[spec.name] = None
            continue
        t = truth.values[deleted, j]
        per = []
        for arr in arrays:
            x = arr[deleted, j]
            if kind == "euclidean":
                per.append(np.sum((t - x) ** 2) / k)
            else:
                per.append(np.sum(t == x) / k)
        avg = float(np.mean(per))
        values[spec.name] = avg if kind == "euclidean" else 1.0 - avg
    return AccuracyReport(values, kinds)


def marginal_draw_imputations(ds: MixedDataset, M: int, seed: int) -> list[np.ndarray]:
    """Baseline: each missing cell drawn uniformly from its column's observed values."""
    rng = make_rng(seed)
    out = []
    for _ in range(M):
        v = ds.values.copy()
        for j in range(v.shape[1]):
            obs = v[ds.mask[:, j], j]
            miss = ~ds.mask[:, j]
            v[miss, j] = obs[rng.integers(0, obs.size, int(miss.sum()))]
        out.append(v)
    return out
