"""Stochastic transition models and plants for the case studies.

Every model exposes ``moments_arrays(X, step, xp)`` returning the conditional
mean ``(..., n)`` and covariance ``(..., n, n)`` of the next state, written
against an array namespace so the differentiable rollout can reuse it, plus
a seeded ``sample(X, rng, step)`` used by the Monte Carlo baselines.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import CoincidentAgents, NonPositiveShape
from .ut import GaussianMoments, HigherMoments


def _diag_embed(v, xp):
    n = v.shape[-1]
    return v[..., :, None] * xp.eye(n)


class StochasticModel:
    """Base class: subclasses implement ``state_dim``, ``moments_arrays`` and ``sample``."""

    state_dim: int

    def moments_arrays(self, X, step=0, xp=np):
        raise NotImplementedError

    def moments_batch(self, X, step=0):
        X = np.asarray(X, dtype=float)
        return self.moments_arrays(X, step, np)

    def conditional_moments(self, x, step=0) -> GaussianMoments:
        mean, cov = self.moments_batch(np.asarray(x, dtype=float)[None, :], step)
        return GaussianMoments(mean[0], cov[0])

    def sample(self, X, rng: np.random.Generator, step=0):
        """Default Gaussian sampler using a row-wise square root of the covariance."""
        from .ut import matrix_sqrt

        mean, cov = self.moments_batch(X, step)
        L = matrix_sqrt(cov)
        z = rng.standard_normal(mean.shape)
        return mean + np.einsum("...ij,...j->...i", L, z)


# ----------------------------------------------------------------------
# synthetic benchmarks
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class LinearGaussian(StochasticModel):
    """x+ = A x + b + w, w ~ N(0, Q)."""

    A: np.ndarray
    Q: np.ndarray
    b: np.ndarray | None = None

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "Q", np.atleast_2d(np.asarray(self.Q, dtype=float)))
        b = np.zeros(A.shape[0]) if self.b is None else np.asarray(self.b, dtype=float)
        object.__setattr__(self, "b", b)

    @property
    def state_dim(self):
        return self.A.shape[0]

    def moments_arrays(self, X, step=0, xp=np):
        mean = X @ xp.asarray(self.A).T + xp.asarray(self.b)
        cov = xp.broadcast_to(xp.asarray(self.Q), mean.shape + mean.shape[-1:])
        return mean, cov


@dataclass(frozen=True)
class Deterministic(StochasticModel):
    """Zero-noise model x+ = fn(x); ``fn`` must accept (..., n) arrays."""

    fn: Callable
    dim: int

    @property
    def state_dim(self):
        return self.dim

    def moments_arrays(self, X, step=0, xp=np):
        mean = self.fn(X)
        return mean, xp.zeros(mean.shape + mean.shape[-1:])

    def sample(self, X, rng, step=0):
        return self.fn(np.asarray(X, dtype=float))


@dataclass(frozen=True)
class CosSinBenchmark(StochasticModel):
    """x+ ~ N(g(x), 0.01 I + diag(g(x)^2)), g(x) = a [cos x1 + 0.01, sin x2 + 0.01]."""

    a: float = 20.0
    state_dim: int = field(default=2, init=False)

    def g(self, X, xp=np):
        return self.a * xp.stack([xp.cos(X[..., 0]) + 0.01, xp.sin(X[..., 1]) + 0.01], axis=-1)

    def moments_arrays(self, X, step=0, xp=np):
        mean = self.g(X, xp)
        return mean, _diag_embed(0.01 + mean**2, xp)

    def sample(self, X, rng, step=0):
        mean = self.g(np.asarray(X, dtype=float))
        return mean + np.sqrt(0.01 + mean**2) * rng.standard_normal(mean.shape)


def cossin_moments(x, a=20.0) -> GaussianMoments:
    return CosSinBenchmark(a).conditional_moments(x)


def abs_plus_one(x):
    return np.abs(x) + 1.0


def unit_scale(x):
    return np.ones_like(x)


@dataclass(frozen=True)
class GammaBenchmark(StochasticModel):
    """Independent per-dimension gamma transitions with state-dependent shape/scale.

    ``shape_fn`` and ``scale_fn`` map a (..., n) state array to (..., n)
    positive parameters.  The defaults, shape |x| + 1 and unit scale, are a
    modelling choice rather than something the benchmark pins down.
    """

    dim: int = 1
    shape_fn: Callable = abs_plus_one
    scale_fn: Callable = unit_scale

    @property
    def state_dim(self):
        return self.dim

    def params(self, X):
        k = np.asarray(self.shape_fn(X), dtype=float)
        beta = np.asarray(self.scale_fn(X), dtype=float)
        if np.any(k <= 0) or np.any(beta <= 0):
            raise NonPositiveShape("gamma shape and scale must be positive")
        return k, beta

    def moments_arrays(self, X, step=0, xp=np):
        k, beta = self.params(X)
        return k * beta, _diag_embed(k * beta**2, np)

    def sample(self, X, rng, step=0):
        k, beta = self.params(np.asarray(X, dtype=float))
        return rng.standard_gamma(k) * beta


def gamma_distribution_moments(k, beta):
    """Mean, variance, skewness and kurtosis of Gamma(shape k, scale beta)."""
    k = np.asarray(k, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if np.any(k <= 0) or np.any(beta <= 0):
        raise NonPositiveShape("gamma shape and scale must be positive")
    return k * beta, k * beta**2, 2.0 / np.sqrt(k), 6.0 / k + 3.0


def gamma_moments(model: GammaBenchmark, x):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    k, beta = model.params(x)
    mean, var, skew, kurt = gamma_distribution_moments(k, beta)
    return GaussianMoments(mean, np.diag(var)), HigherMoments(skew, kurt)


@dataclass(frozen=True)
class InputAffine:
    """Controlled wrapper around an autonomous model: the input shifts the mean."""

    base: StochasticModel

    @property
    def state_dim(self):
        return self.base.state_dim

    def controlled_moments(self, X, U, tau=0, xp=np):
        mean, cov = self.base.moments_arrays(X, tau, xp)
        return mean + U, cov


# ----------------------------------------------------------------------
# dynamic unicycle
# ----------------------------------------------------------------------


def unicycle_step_mean(x, u, dt=0.05, xp=np):
    """Euler step of the dynamic unicycle, state [px, py, psi, v], input [omega, a]."""
    px, py, psi, v = (x[..., i] for i in range(4))
    omega, acc = u[..., 0], u[..., 1]
    rate = xp.stack([v * xp.cos(psi), v * xp.sin(psi), omega + 0 * v, acc + 0 * v], axis=-1)
    return x + rate * dt


@dataclass(frozen=True)
class DynamicUnicycle:
    """Uncertain unicycle: N(mean, diag[(f(x) - x)^2] / 10).

    ``mean_mode="increment"`` uses x + 1.5 (f(x) - x), i.e. a 50% faster
    nominal increment.  ``mean_mode="literal"`` uses 1.5 f(x), which scales
    the whole state every step and is unstable.
    """

    dt: float = 0.05
    mean_mode: str = "increment"
    state_dim: int = field(default=4, init=False)
    input_dim: int = field(default=2, init=False)

    def __post_init__(self):
        if self.mean_mode not in ("increment", "literal"):
            raise ValueError(f"unknown mean_mode {self.mean_mode!r}")

    def moments_arrays(self, X, U, xp=np):
        f = unicycle_step_mean(X, U, self.dt, xp)
        inc = f - X
        mean = X + 1.5 * inc if self.mean_mode == "increment" else 1.5 * f
        return mean, _diag_embed(inc**2 / 10.0, xp)

    def controlled_moments(self, X, U, tau=0, xp=np):
        return self.moments_arrays(X, U, xp)

    def sample(self, X, U, rng):
        mean, cov = self.moments_arrays(np.asarray(X, dtype=float), np.asarray(U, dtype=float))
        sd = np.sqrt(np.diagonal(cov, axis1=-2, axis2=-1))
        return mean + sd * rng.standard_normal(mean.shape)


@dataclass(frozen=True)
class OpenLoop(StochasticModel):
    """Time-indexed closed loop of a controlled model under a fixed control sequence."""

    plant: DynamicUnicycle
    controls: np.ndarray

    @property
    def state_dim(self):
        return self.plant.state_dim

    def _u(self, X, step, xp=np):
        u = xp.asarray(self.controls)[step]
        return xp.broadcast_to(u, X.shape[:-1] + u.shape)

    def moments_arrays(self, X, step=0, xp=np):
        return self.plant.moments_arrays(X, self._u(X, step, xp), xp)

    def sample(self, X, rng, step=0):
        return self.plant.sample(X, self._u(X, step), rng)


# ----------------------------------------------------------------------
# leader-follower
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class LeaderFollowerPlant:
    """Stochastic single-integrator leader and deterministic unicycle follower.

    Joint state layout: [p_xl, p_yl, p_xf, p_yf, phi].  The leader velocity is
    drawn each step from N(1.25 [u_x, u_y], 0.25 (u_x^2 + u_y^2) I) with
    u_x = 2, u_y = 3 cos(4 pi t), and integrated with one Euler step.
    """

    dt: float = 0.05
    s_min: float = 0.3
    s_max: float = 2.0
    fov: float = np.pi / 3
    u_max: float = 2.5
    omega_max: float = 4.0
    state_dim: int = field(default=5, init=False)

    @staticmethod
    def leader_velocity_moments(t, xp=np):
        ux = 2.0 + 0.0 * t
        uy = 3.0 * xp.cos(4.0 * np.pi * t)
        mean = xp.stack([1.25 * ux, 1.25 * uy], axis=-1)
        var = 0.25 * (ux**2 + uy**2)
        return mean, var

    def leader_step_moments(self, t, xp=np):
        """Mean displacement and covariance of one leader step starting at time t."""
        vmean, var = self.leader_velocity_moments(t, xp)
        return vmean * self.dt, var * self.dt**2 * xp.eye(2)

    def follower_step(self, xf, u, xp=np):
        px, py, phi = xf[..., 0], xf[..., 1], xf[..., 2]
        v, om = u[..., 0], u[..., 1]
        return xp.stack(
            [px + v * xp.cos(phi) * self.dt, py + v * xp.sin(phi) * self.dt, phi + om * self.dt],
            axis=-1,
        )

    def joint_moments(self, X, U, t, xp=np):
        """Next-state moments of the joint state under follower input U (..., 2)."""
        dmean, dcov = self.leader_step_moments(t, xp)
        lead = X[..., :2] + dmean
        fol = self.follower_step(X[..., 2:], U, xp)
        mean = xp.concatenate([lead, fol], axis=-1)
        cov = xp.zeros(mean.shape + (5,))
        cov = cov + xp.pad(dcov, ((0, 3), (0, 3)))
        return mean, cov

    def sample_leader(self, pl, t, rng):
        vmean, var = self.leader_velocity_moments(t)
        v = vmean + np.sqrt(var) * rng.standard_normal(np.shape(pl))
        return pl + self.dt * v

    def constraints(self, X, xp=np):
        """(h1, h2, h3, V) on (..., 5) joint states."""
        return lf_constraints_arrays(X, self.s_min, self.s_max, self.fov, xp)


def lf_constraints_arrays(X, s_min, s_max, fov, xp=np):
    d = X[..., :2] - X[..., 2:4]
    s2 = xp.sum(d**2, axis=-1)
    s = xp.sqrt(s2)
    phi = X[..., 4]
    bearing_dot = (d[..., 0] * xp.cos(phi) + d[..., 1] * xp.sin(phi)) / s
    h1 = s2 - s_min**2
    h2 = s_max**2 - s2
    h3 = bearing_dot - np.cos(fov)
    V = (s - 0.5 * (s_min + s_max)) ** 2
    return h1, h2, h3, V


def lf_constraints(leader, follower, s_min=0.3, s_max=2.0, fov=np.pi / 3):
    """Barriers h1..h3 and Lyapunov V for one leader/follower configuration."""
    leader = np.asarray(leader, dtype=float)
    follower = np.asarray(follower, dtype=float)
    if np.hypot(*(leader - follower[:2])) < 1e-9:
        raise CoincidentAgents("leader and follower positions coincide")
    X = np.concatenate([leader, follower])
    return tuple(float(v) for v in lf_constraints_arrays(X, s_min, s_max, fov))
