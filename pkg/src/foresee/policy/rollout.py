"""Closed-loop rollout through the expansion-compression graph.

The kernel is written against an array namespace and accepts a batch of
parameter vectors ``theta`` of shape ``(..., kappa)``, so the same code
serves plain evaluation, batched finite differences and jax autodiff.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erfinv

from ..errors import PolicyDomainError
from ..propagation import HorizonPrediction
from ..ut import (
    DEFAULT_K,
    GaussianMoments,
    SigmaSet,
    cholesky_psd,
    matrix_sqrt,
    sample_moments,
    ut_points,
    weighted_moments,
)

VAR_FLOOR = 1e-18


def beta_of_epsilon(epsilon: float) -> float:
    """Two-sided Gaussian factor at confidence 1 - epsilon (0.05 -> 1.96)."""
    if not 0.0 < epsilon <= 1.0:
        raise ValueError("epsilon must lie in (0, 1]")
    return float(np.sqrt(2.0) * erfinv(1.0 - epsilon))


@dataclass(frozen=True)
class ConstraintSpec:
    """K constraint functions c(X, U, theta, tau, xp) -> (...), c >= 0 desired.

    Most constraints depend on the state only; U, theta and the step index
    are passed for those that do not (input limits, feasibility margins).

    ``beta`` overrides the quantile factor derived from ``epsilon``.
    """

    c_fns: Sequence[Callable]
    epsilon: float = 0.05
    beta: float | None = None

    @property
    def K(self):
        return len(self.c_fns)

    @property
    def beta_of_epsilon(self):
        return beta_of_epsilon(self.epsilon) if self.beta is None else float(self.beta)

    def evaluate(self, X, U, theta, tau, xp=np):
        return xp.stack([c(X, U, theta, tau, xp) for c in self.c_fns], axis=-1)


@dataclass(frozen=True)
class RolloutResult:
    expected_reward: float
    cf_values: np.ndarray
    prediction: HorizonPrediction | None = field(default=None, repr=False)


def _sqrt_fn(xp):
    if xp is np:
        return matrix_sqrt
    return lambda cov: cholesky_psd(cov, xp=xp)[0]


def _checked_policy(policy, S, theta, tau, xp):
    try:
        U = policy(S, theta, tau, xp)
    except (ArithmeticError, ValueError) as exc:
        raise PolicyDomainError(f"policy failed at step {tau}: {exc}") from exc
    if xp is np and not np.all(np.isfinite(U)):
        raise PolicyDomainError(f"policy returned non-finite input at step {tau}")
    return U


def confidence(c, w, beta, xp=np):
    """CF per constraint from per-point values c (..., N, K) and weights (N,)."""
    mean = xp.einsum("n,...nk->...k", w, c)
    var = xp.einsum("n,...nk->...k", w, (c - mean[..., None, :]) ** 2)
    return mean - beta * xp.sqrt(var + VAR_FLOOR)


@dataclass(frozen=True)
class RolloutProblem:
    """Everything a rollout needs besides theta.

    model.controlled_moments(X, U, tau, xp) -> next-state (mean, cov)
    policy(X, theta, tau, xp) -> U, with theta (..., kappa) broadcast over points
    reward(X_next, U, tau, xp) -> per-point reward, evaluated on the expanded set
    """

    model: object
    policy: Callable
    reward: Callable
    spec: ConstraintSpec
    x0: GaussianMoments
    H: int
    k: float = DEFAULT_K

    def _step(self, S, w, theta, tau, xp, sqrt):
        """One closed-loop step: (next set, per-theta reward, CF at the current set)."""
        batch = theta.shape[:-1]
        n = self.x0.dim
        U = _checked_policy(self.policy, S, theta, tau, xp)
        cf = confidence(self.spec.evaluate(S, U, theta, tau, xp), w, self.spec.beta_of_epsilon, xp)
        mean, cov = self.model.controlled_moments(S, U, tau, xp)
        kids, wk = ut_points(mean, cov, self.k, xp=xp, sqrt=sqrt)
        M = kids.shape[-2]
        Xn = kids.reshape(batch + (-1, n))
        Un = xp.broadcast_to(U[..., None, :], U.shape[:-1] + (M, U.shape[-1]))
        Un = Un.reshape(batch + (-1, U.shape[-1]))
        wexp = (w[:, None] * wk[None, :]).reshape(-1)
        r = xp.einsum("n,...n->...", wexp, self.reward(Xn, Un, tau, xp))
        mu, Sig = weighted_moments(Xn, wexp, xp)
        S, w = ut_points(mu, Sig, self.k, xp=xp, sqrt=sqrt)
        return S, w, r, cf

    def evaluate(self, theta, xp=np, keep_sets=False):
        """Return (expected_reward (...), cf (..., K, H+1)[, sigma sets]).

        With a non-numpy namespace the step loop runs under ``lax.scan`` so
        the traced graph does not grow with the horizon.
        """
        if self.H < 1:
            raise ValueError("horizon must be at least 1")
        theta = xp.asarray(theta)
        batch = theta.shape[:-1]
        sqrt = _sqrt_fn(xp)

        pts0, w = ut_points(self.x0.mean, self.x0.cov, self.k, sqrt=lambda c: matrix_sqrt(c))
        S = xp.broadcast_to(xp.asarray(pts0), batch + pts0.shape)
        w = xp.asarray(w)
        total = xp.zeros(batch)
        if xp is np:
            cfs, sets = [], [(S, w)]
            for tau in range(self.H):
                S, w, r, cf = self._step(S, w, theta, tau, xp, sqrt)
                total = total + r
                cfs.append(cf)
                sets.append((S, w))
            cf_path = xp.stack(cfs, axis=-1)
        else:
            from jax import lax

            # the UT weights depend only on (n, k), so they stay fixed across steps
            def body(carry, tau):
                S, total = carry
                S, _, r, cf = self._step(S, w, theta, tau, xp, sqrt)
                return (S, total + r), cf

            (S, total), cfs = lax.scan(body, (S, total), xp.arange(self.H))
            cf_path = xp.moveaxis(cfs, 0, -1)
            sets = None
        U = _checked_policy(self.policy, S, theta, self.H, xp)
        cf_last = confidence(self.spec.evaluate(S, U, theta, self.H, xp), w, self.spec.beta_of_epsilon, xp)
        cf = xp.concatenate([cf_path, cf_last[..., None]], axis=-1)
        if keep_sets:
            return total, cf, sets
        return total, cf


def rollout(theta, problem: RolloutProblem) -> RolloutResult:
    """Single-theta numpy rollout with the per-step sigma sets retained."""
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1:
        raise ValueError("rollout takes one parameter vector; use evaluate for batches")
    total, cf, sets = problem.evaluate(theta, np, keep_sets=True)
    per_step = [SigmaSet(np.asarray(S), np.asarray(w)) for S, w in sets]
    pred = HorizonPrediction(per_step, [sample_moments(s) for s in per_step])
    return RolloutResult(float(total), np.asarray(cf), pred)
