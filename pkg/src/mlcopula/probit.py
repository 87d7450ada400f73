"""Multinomial probit encoding of nominal variables.

A nominal variable with ``K`` categories owns ``K - 1`` latent utilities.
Category ``k < K`` is chosen when utility ``k`` is the largest and positive;
the reference category ``K`` when every utility is negative.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import cholesky_psd

DEFAULT_MAX_RETRIES = 1000


@dataclass(frozen=True)
class NominalBlock:
    var_name: str
    K: int
    latent_offset: int

    def __post_init__(self):
        if self.K < 3:
            raise ValueError(f"nominal block {self.var_name!r} needs K >= 3")

    @property
    def width(self) -> int:
        return self.K - 1

    @property
    def latent_slice(self) -> slice:
        return slice(self.latent_offset, self.latent_offset + self.width)


def build_blocks(names, levels) -> list[NominalBlock]:
    """Stack one block per nominal variable into a single latent matrix."""
    blocks, offset = [], 0
    for name, K in zip(names, levels):
        blocks.append(NominalBlock(name, int(K), offset))
        offset += int(K) - 1
    return blocks


def decode_categories(w) -> np.ndarray:
    """Vectorised decode over the last axis; returns categories ``1..K``.

    Ties at the maximum go to the lowest index, and a maximum of exactly 0
    counts as positive.  Both are measure-zero events.
    """
    w = np.asarray(w, dtype=float)
    K = w.shape[-1] + 1
    arg = np.argmax(w, axis=-1)
    mx = np.take_along_axis(w, arg[..., None], axis=-1)[..., 0]
    return np.where(mx >= 0, arg + 1, K)


def decode_category(w) -> int:
    return int(decode_categories(np.asarray(w, dtype=float)[None, :])[0])


def degenerate_decodes(w) -> int:
    """Count rows whose decode needed a tie-break (tied maximum or maximum 0)."""
    w = np.atleast_2d(np.asarray(w, dtype=float))
    mx = w.max(axis=-1, keepdims=True)
    tied = (w == mx).sum(axis=-1) > 1
    return int(np.sum(tied | (mx[..., 0] == 0)))


def sample_w_block(cond_mean, cond_cov, observed_category, max_retries, rng, previous=None):
    """Accept-reject draw of one block of utilities.

    Returns ``(w, accepted)``.  Without an observed category a single
    unconstrained draw is returned.  If no draw matches within
    ``max_retries`` attempts, ``previous`` is handed back unchanged with
    ``accepted=False``.
    """
    cond_mean = np.asarray(cond_mean, dtype=float)
    chol = cholesky_psd(cond_cov)
    d = cond_mean.size
    if observed_category is None:
        return cond_mean + chol @ rng.standard_normal(d), True
    for _ in range(max_retries):
        w = cond_mean + chol @ rng.standard_normal(d)
        if decode_category(w) == observed_category:
            return w, True
    return (None if previous is None else np.asarray(previous, dtype=float)), False


def sample_w_rows(cond_mean, cond_cov, observed, previous, max_retries, rng):
    """Row-batched accept-reject for one nominal block.

    Parameters
    ----------
    cond_mean : (n, K-1) array
        Conditional means, one row per data row.
    cond_cov : (K-1, K-1) array
        Shared conditional covariance.
    observed : (n,) int array
        Observed category per row, 0 for a missing cell.
    previous : (n, K-1) array
        Current utilities, kept for rows whose retries run out.

    Returns
    -------
    w : (n, K-1) array
    exhausted : int
        Constrained rows that kept their previous value.
    tries : (n,) int array
        Draws used per row.
    """
    cond_mean = np.asarray(cond_mean, dtype=float)
    n, d = cond_mean.shape
    chol = cholesky_psd(cond_cov)
    out = np.array(previous, dtype=float, copy=True)
    tries = np.zeros(n, dtype=np.int64)

    free = observed == 0
    nf = int(free.sum())
    if nf:
        out[free] = cond_mean[free] + rng.standard_normal((nf, d)) @ chol.T
        tries[free] = 1

    # Rows still pending get a doubling number of candidates per round; each
    # row keeps its first matching candidate, so the result is the same
    # sequential accept-reject, just with fewer passes.
    pending = np.flatnonzero(~free)
    used, chunk = 0, 1
    while pending.size and used < max_retries:
        k = min(chunk, max_retries - used)
        eps = rng.standard_normal((pending.size, k, d))
        draw = cond_mean[pending][:, None, :] + eps @ chol.T
        ok = decode_categories(draw) == observed[pending][:, None]
        hit = ok.any(axis=1)
        first = ok.argmax(axis=1)
        out[pending[hit]] = draw[hit, first[hit]]
        tries[pending] += np.where(hit, first + 1, k)
        pending = pending[~hit]
        used += k
        chunk *= 2
    return out, int(pending.size), tries
