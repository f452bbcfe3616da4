"""Unscented-transform primitives: sigma points, weighted moments, PSD square roots.

The array-level kernels (``cholesky_psd``, ``ut_points``, ``weighted_moments``)
accept an ``xp`` namespace so the same code runs under numpy and jax.numpy;
the dataclass API on top of them is numpy only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateVariance, NotPSD

DEFAULT_K = 1.0
PSD_TOL = 1e-9
JITTER_START = 1e-12
JITTER_MAX = 1e-6


# ----------------------------------------------------------------------
# array kernels
# ----------------------------------------------------------------------


def cholesky_psd(A, xp=np, rtol=1e-12):
    """Lower-triangular factor of a (batch of) PSD matrices.

    Zero pivots are allowed: the corresponding column is set to zero, so
    singular covariances such as ``diag(4, 0)`` factor exactly.  Returns
    ``(L, ok)`` where ``ok`` flags matrices whose factorization is
    trustworthy (no negative pivot, no residual left in a dropped column).
    """
    n = A.shape[-1]
    diag = xp.diagonal(A, axis1=-2, axis2=-1)
    scale = xp.max(xp.abs(diag), axis=-1) + 1e-300
    tol = rtol * scale
    rows = xp.arange(n)
    cols = []
    ok = xp.ones(A.shape[:-2], dtype=bool)
    for j in range(n):
        acc = A[..., :, j]
        for k, ck in enumerate(cols):
            acc = acc - ck * ck[..., j : j + 1]
        d = acc[..., j]
        pos = d > tol
        root = xp.sqrt(xp.where(pos, d, 1.0))
        below = rows >= j
        col = xp.where(pos[..., None] & below, acc / root[..., None], 0.0)
        # a dropped column of a PSD matrix carries no off-diagonal mass
        resid = xp.where(below & (rows > j), acc, 0.0)
        bad = (~pos) & (
            (d < -1e3 * tol) | (xp.max(xp.abs(resid), axis=-1) > 1e-6 * scale)
        )
        ok = ok & ~bad
        cols.append(col)
    L = xp.stack(cols, axis=-1)
    return L, ok


def ut_weights(n, k=DEFAULT_K, xp=np):
    w0 = k / (n + k)
    wi = 1.0 / (2.0 * (n + k))
    return xp.concatenate([xp.array([w0]), xp.full((2 * n,), wi)])


def ut_points(mean, cov, k=DEFAULT_K, xp=np, sqrt=None):
    """Symmetric 2n+1 sigma points for a (batch of) mean/cov pairs.

    mean: (..., n), cov: (..., n, n) -> points (..., 2n+1, n), weights (2n+1,)
    """
    n = mean.shape[-1]
    if sqrt is None:
        L, _ = cholesky_psd(cov, xp=xp)
    else:
        L = sqrt(cov)
    spread = xp.sqrt(n + k) * xp.swapaxes(L, -1, -2)  # row i = column i of the factor
    m = mean[..., None, :]
    points = xp.concatenate([m, m + spread, m - spread], axis=-2)
    return points, ut_weights(n, k, xp=xp)


def weighted_moments(points, weights, xp=np):
    """Weighted mean (..., n) and two-pass covariance (..., n, n)."""
    w = weights[..., :, None]
    mean = xp.sum(w * points, axis=-2)
    dev = points - mean[..., None, :]
    cov = xp.einsum("...i,...ij,...ik->...jk", weights, dev, dev)
    cov = 0.5 * (cov + xp.swapaxes(cov, -1, -2))
    return mean, cov


# ----------------------------------------------------------------------
# dataclass API
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianMoments:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.asarray(self.cov, dtype=float)
        if cov.ndim == 0:
            cov = cov.reshape(1, 1)
        n = mean.shape[0]
        if mean.ndim != 1 or cov.shape != (n, n):
            raise ValueError(f"mean {mean.shape} and cov {cov.shape} disagree")
        cov = 0.5 * (cov + cov.T)
        if not np.all(np.isfinite(cov)) or not np.all(np.isfinite(mean)):
            raise NotPSD("non-finite moments")
        lo = np.linalg.eigvalsh(cov)[0] if n else 0.0
        if lo < -PSD_TOL * max(1.0, np.max(np.abs(cov))):
            raise NotPSD(f"covariance has eigenvalue {lo:.3e}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self):
        return self.mean.shape[0]


@dataclass(frozen=True)
class HigherMoments:
    skewness: np.ndarray
    kurtosis: np.ndarray


@dataclass(frozen=True)
class SigmaSet:
    points: np.ndarray
    weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.asarray(self.weights, dtype=float).ravel()
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[0] != w.shape[0]:
            raise ValueError(f"points {pts.shape} and weights {w.shape} disagree")
        if abs(np.sum(w) - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {np.sum(w)!r}, expected 1")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]


def matrix_sqrt(cov):
    """Lower-triangular L with L @ L.T == cov.

    Falls back to adding a growing multiple of the identity (1e-12 up to
    1e-6) when the factorization is unreliable, then gives up with NotPSD.
    """
    cov = np.asarray(cov, dtype=float)
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    L, ok = cholesky_psd(cov)
    if np.all(ok):
        return L
    eye = np.eye(cov.shape[-1])
    lam = JITTER_START
    while lam <= JITTER_MAX * (1 + 1e-9):
        scale = max(1.0, float(np.max(np.abs(cov))))
        L2, ok2 = cholesky_psd(cov + lam * scale * eye)
        L = np.where(ok[..., None, None], L, L2)
        ok = ok | ok2
        if np.all(ok):
            return L
        lam *= 10.0
    raise NotPSD("covariance factorization failed after jitter escalation")


def generate_ut_points(m: GaussianMoments, k: float = DEFAULT_K) -> SigmaSet:
    if not k > 0:
        raise ValueError("k must be positive")
    L = matrix_sqrt(m.cov)
    pts, w = ut_points(m.mean, m.cov, k, sqrt=lambda _: L)
    return SigmaSet(pts, w)


def sample_mean(s: SigmaSet) -> np.ndarray:
    # contiguous last-axis reduction so numpy uses pairwise summation
    terms = np.ascontiguousarray((s.weights[:, None] * s.points).T)
    return np.sum(terms, axis=-1)


def sample_cov(s: SigmaSet) -> np.ndarray:
    dev = s.points - sample_mean(s)
    terms = s.weights[None, None, :] * dev.T[:, None, :] * dev.T[None, :, :]
    cov = np.sum(np.ascontiguousarray(terms), axis=-1)
    return 0.5 * (cov + cov.T)


def sample_moments(s: SigmaSet) -> GaussianMoments:
    return GaussianMoments(sample_mean(s), sample_cov(s))


def sample_higher_moments(s: SigmaSet) -> HigherMoments:
    dev = s.points - sample_mean(s)
    var = s.weights @ dev**2
    if np.any(var <= 1e-12):
        raise DegenerateVariance(f"per-dimension variance {var} underflows")
    sd = np.sqrt(var)
    skew = (s.weights @ dev**3) / sd**3
    kurt = (s.weights @ dev**4) / var**2
    return HigherMoments(skew, kurt)
