"""Multi-step propagation of state distributions.

Expansion maps each sigma point through the state-dependent transition and
replaces it with a child sigma set; compression collapses the enlarged set
back to 2n+1 points with the same first two sample moments.  Monte Carlo and
a first-order successive-Gaussian recursion serve as reference baselines.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import NotPSD
from .rng import chunk_slices, substream, worker_count
from .ut import (
    DEFAULT_K,
    GaussianMoments,
    SigmaSet,
    generate_ut_points,
    matrix_sqrt,
    sample_moments,
    ut_points,
)

MAX_EXPANSION_ONLY_HORIZON = 6


@dataclass(frozen=True)
class HorizonPrediction:
    per_step: list
    step_moments: list

    @property
    def horizon(self):
        return len(self.per_step) - 1


def expand_sigma_points(s: SigmaSet, model, k=DEFAULT_K, step=0, vectorized=True) -> SigmaSet:
    """Replace every point by the UT set of its conditional distribution.

    ``vectorized=False`` evaluates parents one at a time (the literal loop,
    used for timing comparisons and as a cross-check).
    """
    if s.dim != model.state_dim:
        raise ValueError(f"sigma set has dim {s.dim}, model expects {model.state_dim}")
    if vectorized:
        means, covs = model.moments_batch(s.points, step)
        L = matrix_sqrt(covs)
        kids, wk = ut_points(means, covs, k, sqrt=lambda _: L)
        pts = kids.reshape(-1, s.dim)
        w = (s.weights[:, None] * wk[None, :]).ravel()
    else:
        blocks, wts = [], []
        for x, wi in zip(s.points, s.weights):
            child = generate_ut_points(model.conditional_moments(x, step), k)
            blocks.append(child.points)
            wts.append(child.weights * wi)
        pts, w = np.vstack(blocks), np.concatenate(wts)
    return SigmaSet(pts, w / np.sum(w))


def compress_sigma_points(s: SigmaSet, k=DEFAULT_K) -> SigmaSet:
    return generate_ut_points(sample_moments(s), k)


def predict_horizon(x0_moments: GaussianMoments, model, H: int, k=DEFAULT_K, vectorized=True,
                    step_times=None):
    """``step_times``, if a list, receives the wall time (ns) of every step."""
    if H < 1:
        raise ValueError("horizon must be at least 1")
    s = generate_ut_points(x0_moments, k)
    sets, moms = [s], [sample_moments(s)]
    for tau in range(H):
        t0 = time.perf_counter_ns()
        try:
            s = compress_sigma_points(
                expand_sigma_points(s, model, k, step=tau, vectorized=vectorized), k
            )
        except NotPSD as exc:
            raise NotPSD(str(exc), step=tau + 1) from exc
        if step_times is not None:
            step_times.append(time.perf_counter_ns() - t0)
        sets.append(s)
        moms.append(sample_moments(s))
    return HorizonPrediction(sets, moms)


def expansion_only(x0_moments: GaussianMoments, model, H: int, k=DEFAULT_K, vectorized=True,
                   step_times=None):
    """Successive expansions without compression; the set grows as (2n+1)^(tau+1)."""
    if H > MAX_EXPANSION_ONLY_HORIZON:
        raise ValueError(f"expansion-only horizon capped at {MAX_EXPANSION_ONLY_HORIZON}")
    s = generate_ut_points(x0_moments, k)
    sets = [s]
    for tau in range(H):
        t0 = time.perf_counter_ns()
        s = expand_sigma_points(s, model, k, step=tau, vectorized=vectorized)
        if step_times is not None:
            step_times.append(time.perf_counter_ns() - t0)
        sets.append(s)
    return HorizonPrediction(sets, [sample_moments(x) for x in sets])


def monte_carlo_propagate(x0, model, H: int, num_particles: int, seed: int, workers=None,
                          step_times=None):
    """Advance ``num_particles`` copies of x0 for H steps.

    Particles are split into fixed-size chunks; chunk c at step t always draws
    from ``substream(seed, t, c)``, so results do not depend on ``workers``.
    """
    if num_particles < 1:
        raise ValueError("need at least one particle")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    X = np.broadcast_to(x0, (num_particles, x0.shape[0])).copy()
    out = [X.copy()]
    slices = chunk_slices(num_particles)
    nworkers = min(worker_count(workers), len(slices))

    for t in range(H):
        t0 = time.perf_counter_ns()

        def advance(c, t=t, X=X):
            sl = slices[c]
            return model.sample(X[sl], substream(seed, t, c), step=t)

        if nworkers > 1:
            with ThreadPoolExecutor(nworkers) as pool:
                parts = list(pool.map(advance, range(len(slices))))
        else:
            parts = [advance(c) for c in range(len(slices))]
        X = np.vstack(parts)
        if step_times is not None:
            step_times.append(time.perf_counter_ns() - t0)
        out.append(X)
    return out


def particle_moments(X) -> GaussianMoments:
    mean = X.mean(axis=0)
    dev = X - mean
    return GaussianMoments(mean, dev.T @ dev / X.shape[0])


def _mean_jacobian(model, mu, step, h=1e-6):
    n = mu.shape[0]
    E = np.eye(n) * h * np.maximum(1.0, np.abs(mu))[:, None]
    plus, _ = model.moments_batch(mu + E, step)
    minus, _ = model.moments_batch(mu - E, step)
    return ((plus - minus) / (2 * np.diag(E))[:, None]).T


def successive_gaussian_propagate(x0_moments: GaussianMoments, model, H: int, step_times=None):
    """Linearized moment recursion mu+ = m(mu), S+ = J S J^T + C(mu)."""
    mu, S = x0_moments.mean, x0_moments.cov
    out = [x0_moments]
    for t in range(H):
        t0 = time.perf_counter_ns()
        J = _mean_jacobian(model, mu, t)
        m, C = model.moments_batch(mu[None, :], t)
        mu = m[0]
        S = J @ S @ J.T + C[0]
        if step_times is not None:
            step_times.append(time.perf_counter_ns() - t0)
        out.append(GaussianMoments(mu, S))  # raises NotPSD past tolerance
    return out
