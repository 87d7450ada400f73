"""Gibbs sampler for the multilevel Gaussian copula with a probit block.

Latent rows are ``x_ij = (z_ij, w_ij)`` with ``z`` the ordered-variable
latents and ``w`` the stacked probit utilities.  Given cluster effects
``b_i`` they are Gaussian with mean ``(0, beta) + b_i`` and correlation
matrix ``Gamma``; the ``b_i`` are Gaussian with covariance ``Psi``.

One iteration updates, in this order: ``z``, ``w``, ``b``, ``beta``,
``Gamma`` (via an unconstrained covariance rescaled to a correlation
matrix) and ``Psi``.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import MixedDataset, latent_init_rank
from .linalg import (
    DEFAULT_JITTER,
    cholesky_psd,
    conditional_coefficients,
    cov_to_corr,
    make_rng,
    sample_inverse_wishart,
    sample_truncated_normal,
    spawn_rngs,
    spd_inverse,
)
from .probit import DEFAULT_MAX_RETRIES, build_blocks, decode_categories, degenerate_decodes, sample_w_rows
from .rank_bounds import ColumnOrder

log = logging.getLogger(__name__)

SWEEPS = ("blocked", "sequential")


class ChainError(RuntimeError):
    def __init__(self, iteration: int, cause: BaseException | str):
        self.iteration = iteration
        super().__init__(f"chain failed at iteration {iteration}: {cause}")


@dataclass
class Priors:
    nu_psi: float
    lambda_psi: np.ndarray
    nu_gamma: float
    lambda_gamma: np.ndarray

    @classmethod
    def default(cls, d: int) -> "Priors":
        return cls(d + 2.0, np.eye(d), d + 2.0, np.eye(d))

    def validate(self, d: int) -> None:
        for label, nu, lam in (("psi", self.nu_psi, self.lambda_psi), ("gamma", self.nu_gamma, self.lambda_gamma)):
            lam = np.asarray(lam)
            if lam.shape != (d, d):
                raise ValueError(f"lambda_{label} must be {d}x{d}, got {lam.shape}")
            if not nu > d - 1:
                raise ValueError(f"nu_{label}={nu} must exceed d - 1 = {d - 1}")
            cholesky_psd(lam)


@dataclass
class ChainConfig:
    burn_in: int = 1000
    n_keep: int = 10
    thin: int = 100
    seed: int = 0
    max_retries: int = DEFAULT_MAX_RETRIES
    jitter: float = DEFAULT_JITTER
    # Gamma-tilde degrees of freedom nu - 1 + N instead of nu + N
    paper_df: bool = False
    # False fixes b = 0 and Psi = 0: the single-level copula
    random_effects: bool = True
    sweep: str = "blocked"

    def __post_init__(self):
        for name in ("burn_in", "n_keep", "thin", "max_retries"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.sweep not in SWEEPS:
            raise ValueError(f"sweep must be one of {SWEEPS}")

    @property
    def total_iterations(self) -> int:
        return self.burn_in + self.n_keep * self.thin

    def retained_iterations(self) -> list[int]:
        return [self.burn_in + k * self.thin for k in range(1, self.n_keep + 1)]


@dataclass
class LatentState:
    Z: np.ndarray
    W: np.ndarray
    B: np.ndarray
    beta: np.ndarray

    def copy(self) -> "LatentState":
        return LatentState(self.Z.copy(), self.W.copy(), self.B.copy(), self.beta.copy())


@dataclass
class ModelParams:
    Gamma: np.ndarray
    Psi: np.ndarray

    def copy(self) -> "ModelParams":
        return ModelParams(self.Gamma.copy(), self.Psi.copy())


@dataclass
class Snapshot:
    iteration: int
    state: LatentState
    params: ModelParams


@dataclass
class Trace:
    """Per-iteration record of the tracked parameters (one column per name)."""

    names: list[str]
    iterations: np.ndarray
    values: np.ndarray

    def series(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {n: self.values[:, k] for k, n in enumerate(self.names)}


@dataclass
class ChainStats:
    constrained_draws: int = 0
    exhausted: int = 0
    degenerate_decodes: int = 0
    seconds: float = 0.0

    @property
    def exhaustion_rate(self) -> float:
        return self.exhausted / self.constrained_draws if self.constrained_draws else 0.0


@dataclass
class ChainResult:
    snapshots: list[Snapshot]
    trace: Trace
    stats: ChainStats
    latent_names: list[str]
    chain: int = 0


REJECTION_SERIES = "probit_exhausted"


class GibbsSampler:
    """Holds the fixed structure of one dataset and performs the updates."""

    def __init__(self, dataset: MixedDataset, priors: Priors | None = None, config: ChainConfig | None = None):
        self.dataset = dataset
        self.config = config or ChainConfig()
        cols = dataset.columns
        self.ordered_cols = [int(j) for j in dataset.ordered_idx]
        self.nominal_cols = [int(j) for j in dataset.nominal_idx]
        self.p = len(self.ordered_cols)
        self.blocks = build_blocks([cols[j].name for j in self.nominal_cols], [cols[j].levels for j in self.nominal_cols])
        self.q = sum(b.width for b in self.blocks)
        self.d = self.p + self.q
        self.N = dataset.n_rows
        self.m = dataset.n_clusters
        self.priors = priors or Priors.default(self.d)
        self.priors.validate(self.d)

        self.cluster = dataset.cluster
        self.cluster_sizes = np.bincount(self.cluster, minlength=self.m)
        self._by_cluster = np.argsort(self.cluster, kind="stable")
        self._cluster_starts = np.r_[0, np.cumsum(self.cluster_sizes)[:-1]]

        self.orders = [ColumnOrder(dataset.values[:, j], dataset.mask[:, j]) for j in self.ordered_cols]
        self.observed_category = [
            np.where(dataset.mask[:, j], np.nan_to_num(dataset.values[:, j]), 0).astype(np.int64)
            for j in self.nominal_cols
        ]
        self.latent_names = [cols[j].name for j in self.ordered_cols] + [
            f"{b.var_name}:{k}" for b in self.blocks for k in range(1, b.K)
        ]
        self.stats = ChainStats()

    # -- initialisation -------------------------------------------------

    def init_state(self) -> tuple[LatentState, ModelParams]:
        ds = self.dataset
        Z = np.zeros((self.N, self.p))
        for k, j in enumerate(self.ordered_cols):
            Z[:, k] = latent_init_rank(ds.values[:, j], ds.mask[:, j])
        state = LatentState(Z, np.zeros((self.N, self.q)), np.zeros((self.m, self.d)), np.zeros(self.q))
        psi = np.eye(self.d) if self.config.random_effects else np.zeros((self.d, self.d))
        return state, ModelParams(np.eye(self.d), psi)

    # -- helpers --------------------------------------------------------

    def _offsets(self, state: LatentState) -> np.ndarray:
        return np.r_[np.zeros(self.p), state.beta]

    def _row_means(self, state: LatentState) -> np.ndarray:
        return state.B[self.cluster] + self._offsets(state)

    def _cluster_sums(self, R: np.ndarray) -> np.ndarray:
        return np.add.reduceat(R[self._by_cluster], self._cluster_starts, axis=0)

    # -- conditional updates ----------------------------------------------

    def update_z(self, state: LatentState, params: ModelParams, rng) -> np.ndarray:
        if self.p == 0:
            return state.Z
        X = np.hstack([state.Z, state.W])
        mu = self._row_means(state)
        for l in range(self.p):
            others = np.r_[0:l, l + 1 : self.d]
            if others.size:
                coef, var = conditional_coefficients(params.Gamma, np.array([l]), others)
                cmean = mu[:, l] + (X[:, others] - mu[:, others]) @ coef[:, 0]
                sd = float(np.sqrt(var[0, 0]))
            else:
                cmean = mu[:, l].copy()
                sd = float(np.sqrt(params.Gamma[0, 0]))
            order = self.orders[l]
            miss = order.missing_rows
            if miss.size:
                X[miss, l] = cmean[miss] + sd * rng.standard_normal(miss.size)
            if self.config.sweep == "blocked":
                self._blocked_sweep(X[:, l], cmean, sd, order, rng)
            else:
                self._sequential_sweep(X[:, l], cmean, sd, order, rng)
        state.Z = X[:, : self.p].copy()
        return state.Z

    @staticmethod
    def _blocked_sweep(col, cmean, sd, order: ColumnOrder, rng) -> None:
        # alternate groups are conditionally independent given the others
        if order.n_groups == 0:
            return
        parity = np.arange(order.n_groups) % 2
        for phase in (0, 1):
            active = parity == phase
            glo, ghi = order.group_bounds(col, active)
            sel = active[order.group_of_sorted]
            rows = order.sorted_rows[sel]
            g = order.group_of_sorted[sel]
            col[rows] = sample_truncated_normal(cmean[rows], sd, glo[g], ghi[g], rng)

    @staticmethod
    def _sequential_sweep(col, cmean, sd, order: ColumnOrder, rng) -> None:
        if order.n_groups == 0:
            return
        _, gmin = order.group_extrema(col)
        suffix_min = np.r_[np.minimum.accumulate(gmin[::-1])[::-1][1:], np.inf]
        ends = np.r_[order.group_starts[1:], order.sorted_rows.size]
        running_max = -np.inf
        for g in range(order.n_groups):
            rows = order.sorted_rows[order.group_starts[g] : ends[g]]
            draw = sample_truncated_normal(cmean[rows], sd, running_max, suffix_min[g], rng)
            col[rows] = draw
            running_max = max(running_max, float(np.max(draw)))

    def update_w(self, state: LatentState, params: ModelParams, rng) -> np.ndarray:
        if self.q == 0:
            return state.W
        X = np.hstack([state.Z, state.W])
        mu = self._row_means(state)
        for block, observed in zip(self.blocks, self.observed_category):
            J = np.arange(self.p + block.latent_offset, self.p + block.latent_offset + block.width)
            others = np.setdiff1d(np.arange(self.d), J)
            if others.size:
                coef, cov = conditional_coefficients(params.Gamma, J, others)
                cmean = mu[:, J] + (X[:, others] - mu[:, others]) @ coef
            else:
                cmean, cov = mu[:, J], params.Gamma[np.ix_(J, J)]
            new, exhausted, _ = sample_w_rows(cmean, cov, observed, X[:, J], self.config.max_retries, rng)
            X[:, J] = new
            self.stats.constrained_draws += int(np.count_nonzero(observed))
            self.stats.exhausted += exhausted
            self.stats.degenerate_decodes += degenerate_decodes(new[observed > 0])
            self._last_exhausted += exhausted
        state.W = X[:, self.p :].copy()
        return state.W

    def update_b(self, state: LatentState, params: ModelParams, rng) -> np.ndarray:
        """Draw ``b_i ~ N(U_i Gamma^-1 sum_j r_ij, U_i)``, ``U_i = (Psi^-1 + n_i Gamma^-1)^-1``."""
        R = np.hstack([state.Z, state.W]) - self._offsets(state)
        sums = self._cluster_sums(R)
        g_inv = spd_inverse(params.Gamma, self.config.jitter)
        p_inv = spd_inverse(params.Psi, self.config.jitter)
        B = np.empty((self.m, self.d))
        for n_i in np.unique(self.cluster_sizes):
            idx = np.flatnonzero(self.cluster_sizes == n_i)
            U = spd_inverse(p_inv + n_i * g_inv, self.config.jitter)
            mean = sums[idx] @ g_inv @ U
            chol = cholesky_psd(U, self.config.jitter)
            B[idx] = mean + rng.standard_normal((idx.size, self.d)) @ chol.T
        state.B = B
        return B

    def update_beta(self, state: LatentState, params: ModelParams, rng) -> np.ndarray:
        if self.q == 0:
            return state.beta
        P = self.p
        Bw = state.B[self.cluster, P:]
        if P:
            coef, cov = conditional_coefficients(params.Gamma, np.arange(P, self.d), np.arange(P))
            resid = state.W - Bw - (state.Z - state.B[self.cluster, :P]) @ coef
        else:
            cov = params.Gamma
            resid = state.W - Bw
        mean = resid.mean(axis=0)
        chol = cholesky_psd(cov / self.N, self.config.jitter)
        state.beta = mean + chol @ rng.standard_normal(self.q)
        return state.beta

    def gamma_df(self) -> float:
        nu = self.priors.nu_gamma
        return nu - 1 + self.N if self.config.paper_df else nu + self.N

    def update_gamma(self, state: LatentState, params: ModelParams, rng) -> np.ndarray:
        E = np.hstack([state.Z, state.W]) - self._offsets(state) - state.B[self.cluster]
        scale = self.priors.lambda_gamma + E.T @ E
        gamma_tilde = sample_inverse_wishart(self.gamma_df(), 0.5 * (scale + scale.T), rng)
        params.Gamma = cov_to_corr(gamma_tilde)
        return params.Gamma

    def update_psi(self, state: LatentState, params: ModelParams, rng) -> np.ndarray:
        scale = self.priors.lambda_psi + state.B.T @ state.B
        params.Psi = sample_inverse_wishart(self.priors.nu_psi + self.m, 0.5 * (scale + scale.T), rng)
        return params.Psi

    def sweep(self, state: LatentState, params: ModelParams, rng) -> None:
        self._last_exhausted = 0
        self.update_z(state, params, rng)
        self.update_w(state, params, rng)
        if self.config.random_effects:
            self.update_b(state, params, rng)
        self.update_beta(state, params, rng)
        self.update_gamma(state, params, rng)
        if self.config.random_effects:
            self.update_psi(state, params, rng)

    # -- tracing and checks -------------------------------------------------

    def trace_names(self) -> list[str]:
        names = self.latent_names
        out = [f"Gamma[{names[a]},{names[b]}]" for a in range(self.d) for b in range(a + 1, self.d)]
        out += [f"Psi[{n}]" for n in names]
        out += [f"beta[{n}]" for n in names[self.p :]]
        out.append(REJECTION_SERIES)
        return out

    def trace_row(self, state: LatentState, params: ModelParams) -> np.ndarray:
        iu = np.triu_indices(self.d, 1)
        return np.r_[params.Gamma[iu], np.diag(params.Psi), state.beta, self._last_exhausted]

    def order_violations(self, state: LatentState) -> int:
        return sum(order.violations(state.Z[:, l]) for l, order in enumerate(self.orders))

    def category_violations(self, state: LatentState) -> int:
        bad = 0
        for block, observed in zip(self.blocks, self.observed_category):
            rows = observed > 0
            dec = decode_categories(state.W[rows][:, block.latent_slice])
            bad += int(np.sum(dec != observed[rows]))
        return bad

    # -- driver ---------------------------------------------------------------

    def run(self, rng=None, callback=None, n_keep: int | None = None) -> ChainResult:
        cfg = self.config
        rng = make_rng(cfg.seed) if rng is None else rng
        n_keep = cfg.n_keep if n_keep is None else n_keep
        total = cfg.burn_in + n_keep * cfg.thin
        keep = set(cfg.burn_in + k * cfg.thin for k in range(1, n_keep + 1))
        state, params = self.init_state()
        self._last_exhausted = 0
        self.stats = ChainStats()
        names = self.trace_names()
        values = np.empty((total, len(names)))
        snapshots: list[Snapshot] = []
        start = time.perf_counter()
        for it in range(1, total + 1):
            try:
                self.sweep(state, params, rng)
            except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
                raise ChainError(it, exc) from exc
            row = self.trace_row(state, params)
            if not (np.all(np.isfinite(row)) and np.all(np.isfinite(state.Z)) and np.all(np.isfinite(state.W))):
                raise ChainError(it, "non-finite value in chain state")
            values[it - 1] = row
            if callback is not None:
                callback(it, state, params)
            if it in keep:
                snapshots.append(Snapshot(it, state.copy(), params.copy()))
        self.stats.seconds = time.perf_counter() - start
        log.debug("chain finished: %d iterations in %.2fs", total, self.stats.seconds)
        trace = Trace(names, np.arange(1, total + 1), values)
        return ChainResult(snapshots, trace, replace(self.stats), list(self.latent_names))


def init_state(dataset: MixedDataset, config: ChainConfig | None = None) -> tuple[LatentState, ModelParams]:
    return GibbsSampler(dataset, config=config).init_state()


def run_chain(dataset: MixedDataset, priors: Priors | None = None, config: ChainConfig | None = None,
              rng=None, callback=None) -> ChainResult:
    """Run one chain and keep ``config.n_keep`` thinned snapshots after burn-in."""
    return GibbsSampler(dataset, priors, config).run(rng=rng, callback=callback)


def _run_one(args):
    dataset, priors, config, seed_seq, n_keep, k = args
    res = GibbsSampler(dataset, priors, config).run(rng=make_rng(seed_seq), n_keep=n_keep)
    res.chain = k
    return res


def run_chains(dataset: MixedDataset, priors: Priors | None = None, config: ChainConfig | None = None,
               n_chains: int = 1, jobs: int = 1) -> list[ChainResult]:
    """Independent chains whose retained snapshots together number ``n_keep``.

    Chain ``k`` gets its own spawned seed and keeps ``n_keep // n_chains``
    snapshots (the first ``n_keep % n_chains`` chains keep one extra).
    Results are ordered by chain index regardless of ``jobs``.
    """
    config = config or ChainConfig()
    if n_chains < 1:
        raise ValueError("n_chains must be at least 1")
    if n_chains == 1:
        return [run_chain(dataset, priors, config)]
    base, extra = divmod(config.n_keep, n_chains)
    if base == 0:
        raise ValueError("n_keep must be at least the number of chains")
    seqs = np.random.SeedSequence(config.seed).spawn(n_chains)
    tasks = [(dataset, priors, config, seqs[k], base + (k < extra), k) for k in range(n_chains)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_one, tasks))
    return [_run_one(t) for t in tasks]


__all__ = [
    "ChainConfig",
    "ChainError",
    "ChainResult",
    "GibbsSampler",
    "LatentState",
    "ModelParams",
    "Priors",
    "Snapshot",
    "Trace",
    "init_state",
    "run_chain",
    "run_chains",
    "spawn_rngs",
]
