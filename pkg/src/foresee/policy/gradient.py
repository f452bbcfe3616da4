"""Gradients of the rollout outputs with respect to theta.

Two interchangeable engines: batched central differences (default) and a
forward-mode jax pass over the same array kernel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import NonFiniteGradient

FD_STEP = 1e-5


@dataclass(frozen=True)
class Gradients:
    reward: float
    cf: np.ndarray  # (K, H+1)
    d_reward: np.ndarray  # (kappa,)
    d_cf: np.ndarray  # (K, H+1, kappa)


def _check(g: Gradients):
    if not (np.all(np.isfinite(g.d_reward)) and np.all(np.isfinite(g.d_cf))):
        raise NonFiniteGradient("gradient contains non-finite entries")
    return g


def fd_gradients(problem, theta, h=FD_STEP) -> Gradients:
    """Central differences, all 2*kappa perturbations in one batched rollout."""
    theta = np.asarray(theta, dtype=float)
    kappa = theta.shape[0]
    E = np.eye(kappa) * h
    batch = np.vstack([theta[None, :], theta + E, theta - E])
    R, CF = problem.evaluate(batch, np)
    dR = (R[1 : kappa + 1] - R[kappa + 1 :]) / (2 * h)
    dCF = (CF[1 : kappa + 1] - CF[kappa + 1 :]) / (2 * h)
    return _check(Gradients(float(R[0]), CF[0], dR, np.moveaxis(dCF, 0, -1)))


_JIT_CACHE: dict = {}


def _jax_fn(problem):
    hit = _JIT_CACHE.get(id(problem))
    if hit is not None and hit[0] is problem:
        return hit[1]
    import jax

    jax.config.update("jax_enable_x64", True)
    import jax.numpy as jnp

    def f(th):
        R, CF = problem.evaluate(th, jnp)
        return R, CF

    def both(th):
        val = f(th)
        jac = jax.jacfwd(f)(th)
        return val, jac

    fn = jax.jit(both)
    if len(_JIT_CACHE) > 16:
        _JIT_CACHE.clear()
    _JIT_CACHE[id(problem)] = (problem, fn)
    return fn


def jax_gradients(problem, theta) -> Gradients:
    """Forward-mode autodiff through the rollout kernel (float64)."""
    import jax

    jax.config.update("jax_enable_x64", True)
    fn = _jax_fn(problem)
    (R, CF), (dR, dCF) = fn(np.asarray(theta, dtype=float))
    return _check(
        Gradients(float(R), np.asarray(CF), np.asarray(dR), np.asarray(dCF))
    )


BACKENDS = {"fd": fd_gradients, "jax": jax_gradients}


def gradients(problem, theta, backend="fd") -> Gradients:
    try:
        fn = BACKENDS[backend]
    except KeyError:
        raise ValueError(f"unknown gradient backend {backend!r}") from None
    return fn(problem, theta)
