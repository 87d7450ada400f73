"""Linear algebra helpers and the samplers used by the Gibbs updates.

All random draws go through a :class:`numpy.random.Generator` (PCG64), which
gives bit-identical streams for a given seed across platforms.  Each chain
must own its generator.
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import lapack, solve_triangular
from scipy.special import log_ndtr, ndtr, ndtri, ndtri_exp

DEFAULT_JITTER = 1e-10


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a matrix that must be SPD fails Cholesky factorisation."""

    def __init__(self, pivot: int, message: str | None = None):
        self.pivot = pivot
        super().__init__(message or f"matrix is not positive definite (pivot {pivot})")


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Independent generators for ``n`` concurrent chains."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [make_rng(c) for c in children]


def _potrf(m: np.ndarray) -> tuple[np.ndarray, int]:
    c, info = lapack.dpotrf(m, lower=1, clean=1, overwrite_a=0)
    return c, info


def cholesky_psd(m, jitter: float = DEFAULT_JITTER) -> np.ndarray:
    """Lower Cholesky factor of a symmetric matrix.

    If the plain factorisation fails, ``jitter * trace / d`` is added to the
    diagonal once before giving up.

    Raises
    ------
    NotPositiveDefiniteError
        With the (0-based) index of the failing pivot.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    if not np.allclose(m, m.T, rtol=0, atol=1e-10 * max(1.0, np.abs(m).max())):
        raise ValueError("matrix is not symmetric")
    c, info = _potrf(m)
    if info == 0:
        return c
    d = m.shape[0]
    tr = np.trace(m)
    if jitter > 0 and tr > 0:
        c, info2 = _potrf(m + np.eye(d) * (jitter * tr / d))
        if info2 == 0:
            return c
        info = info2
    if info < 0:
        raise ValueError(f"illegal value in argument {-info} to dpotrf")
    raise NotPositiveDefiniteError(info - 1)


def spd_inverse(m, jitter: float = DEFAULT_JITTER) -> np.ndarray:
    chol = cholesky_psd(m, jitter)
    inv_l = solve_triangular(chol, np.eye(len(chol)), lower=True)
    out = inv_l.T @ inv_l
    return 0.5 * (out + out.T)


def sample_mvn(mean, cov, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw ``mean + L @ eps`` with ``L`` the Cholesky factor of ``cov``.

    ``mean`` may be a single vector or an ``(n, d)`` array of row means; in
    the latter case one draw per row is returned.
    """
    mean = np.asarray(mean, dtype=float)
    chol = cholesky_psd(cov)
    d = chol.shape[0]
    if mean.shape[-1] != d:
        raise ValueError(f"mean has dimension {mean.shape[-1]}, covariance {d}")
    if mean.ndim == 1 and size is None:
        return mean + chol @ rng.standard_normal(d)
    n = size if mean.ndim == 1 else mean.shape[0]
    eps = rng.standard_normal((n, d))
    return mean + eps @ chol.T


def conditional_gaussian(mean, cov, observed_idx, observed_vals):
    """Mean and covariance of the unobserved coordinates given the observed ones.

    ``mean`` may be ``(d,)`` or ``(n, d)``; ``observed_vals`` then has shape
    ``(k,)`` or ``(n, k)`` and the returned conditional mean is batched the
    same way.  The conditional covariance never depends on the values.

    Returns
    -------
    cond_mean, cond_cov
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    d = cov.shape[0]
    obs = np.asarray(observed_idx, dtype=int).ravel()
    if obs.size == 0 or obs.size >= d or len(set(obs.tolist())) != obs.size:
        raise ValueError("observed_idx must be a nonempty proper subset of the coordinates")
    free = np.setdiff1d(np.arange(d), obs)
    coef, cond_cov = conditional_coefficients(cov, free, obs)
    x2 = np.asarray(observed_vals, dtype=float)
    cond_mean = mean[..., free] + (x2 - mean[..., obs]) @ coef
    return cond_mean, cond_cov


def conditional_coefficients(cov, free, obs):
    """Regression matrix ``A`` with ``E[x_free | x_obs] = mu_free + (x_obs - mu_obs) @ A``.

    Returns ``(A, schur)`` where ``schur`` is the conditional covariance.
    """
    s22 = cov[np.ix_(obs, obs)]
    s21 = cov[np.ix_(obs, free)]
    chol = cholesky_psd(s22)
    coef = solve_triangular(chol.T, solve_triangular(chol, s21, lower=True), lower=False)
    schur = cov[np.ix_(free, free)] - s21.T @ coef
    return coef, 0.5 * (schur + schur.T)


def _open_clamp(x, lo, hi):
    above = np.nextafter(lo, np.inf)
    below = np.nextafter(hi, -np.inf)
    return np.minimum(np.maximum(x, above), below)


def truncated_std_normal_ppf(u, a, b):
    """Inverse CDF of N(0, 1) truncated to ``[a, b]`` evaluated at ``u``.

    One-sided intervals are handled in the log domain (and reflected to the
    lower tail), so bounds far out in either tail stay accurate.
    """
    u, a, b = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (u, a, b)))
    out = np.empty(u.shape)
    # reflect the upper tail onto the lower one
    flip = a > 0
    aa = np.where(flip, -b, a)
    bb = np.where(flip, -a, b)
    uu = np.where(flip, 1.0 - u, u)

    lower = bb <= 0
    if np.any(lower):
        la = log_ndtr(aa[lower])
        lb = log_ndtr(bb[lower])
        # log(Phi(a) + u (Phi(b) - Phi(a))) = lb + log1p((1-u) expm1(la - lb))
        logp = lb + np.log1p((1.0 - uu[lower]) * np.expm1(la - lb))
        out[lower] = ndtri_exp(logp)
    mid = ~lower
    if np.any(mid):
        pa = ndtr(aa[mid])
        pb = ndtr(bb[mid])
        out[mid] = ndtri(pa + uu[mid] * (pb - pa))
    out = np.where(flip, -out, out)
    return out


def sample_truncated_normal(mu, sigma, lo, hi, rng: np.random.Generator, size=None):
    """Inverse-CDF draw from N(mu, sigma^2) restricted to ``(lo, hi)``.

    Arguments broadcast; infinite bounds are allowed.  Draws are clamped into
    the open interval so rounding can never put a value on a bound.
    """
    args = [np.asarray(v, dtype=float) for v in (mu, sigma, lo, hi)]
    if size is not None:
        args = [np.broadcast_to(v, size) for v in args]
    mu, sigma, lo, hi = np.broadcast_arrays(*args)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    if np.any(~(lo < hi)):
        raise ValueError("truncation interval is empty: lo >= hi")
    u = rng.random(mu.shape)
    a = (lo - mu) / sigma
    b = (hi - mu) / sigma
    x = mu + sigma * truncated_std_normal_ppf(u, a, b)
    x = _open_clamp(x, lo, hi)
    if x.ndim == 0:
        return float(x)
    return x


def sample_wishart(nu: float, scale, rng: np.random.Generator) -> np.ndarray:
    """Bartlett-decomposition draw from Wishart(nu, scale) (mean ``nu * scale``)."""
    scale = np.asarray(scale, dtype=float)
    d = scale.shape[0]
    if nu <= d - 1:
        raise ValueError(f"degrees of freedom {nu} must exceed d - 1 = {d - 1}")
    chol = cholesky_psd(scale)
    a = np.zeros((d, d))
    a[np.diag_indices(d)] = np.sqrt(rng.chisquare(nu - np.arange(d)))
    lower = np.tril_indices(d, -1)
    a[lower] = rng.standard_normal(len(lower[0]))
    la = chol @ a
    w = la @ la.T
    return 0.5 * (w + w.T)


def sample_inverse_wishart(nu: float, scale, rng: np.random.Generator) -> np.ndarray:
    """Draw from the inverse Wishart with mean ``scale / (nu - d - 1)``.

    Implemented as the inverse of a Bartlett draw from Wishart(nu, scale^-1).
    """
    scale = np.asarray(scale, dtype=float)
    d = scale.shape[0]
    if nu <= d - 1:
        raise ValueError(f"degrees of freedom {nu} must exceed d - 1 = {d - 1}")
    cholesky_psd(scale)
    w = sample_wishart(nu, spd_inverse(scale), rng)
    return spd_inverse(w)


def cov_to_corr(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    diag = np.diag(m)
    if np.any(diag <= 0):
        raise ValueError("covariance has a nonpositive diagonal entry")
    s = 1.0 / np.sqrt(diag)
    out = m * np.outer(s, s)
    out = np.clip(0.5 * (out + out.T), -1.0, 1.0)
    np.fill_diagonal(out, 1.0)
    return out
