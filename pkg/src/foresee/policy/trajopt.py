"""Iterated direction finding with a trust region, for offline trajectory optimization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gradient import gradients
from .sqp import VIOLATION_TOL, classify, foresee_step


@dataclass
class TrajoptResult:
    theta: np.ndarray
    converged: bool
    iterations: int
    history: list = field(default_factory=list)


def _violation(cf):
    v = np.minimum(np.asarray(cf), 0.0)
    return float(np.sum(v * v))


def optimize(problem, theta0, lr=1.0, trust_radius=1.0, backend="fd", max_iter=500,
             tol=1e-4, grow=1.5, shrink=0.5, max_radius=None):
    """Repeat foresee_step, accepting a step only when it helps.

    A feasible iterate accepts a trial that stays feasible and raises the
    expected reward; an infeasible iterate accepts a trial that lowers the
    total squared violation.  Rejected trials shrink the box radius.
    Stops once lr * |d|_inf (or the radius itself) falls below ``tol``.
    """
    theta = np.asarray(theta0, dtype=float).copy()
    radius = float(trust_radius)
    max_radius = max_radius or 10.0 * radius
    g = gradients(problem, theta, backend)
    history = []
    for it in range(max_iter):
        step = foresee_step(problem, theta, lr, radius, backend, it, on_prefix="truncate", grads=g)
        diag = dict(step.diagnostics, radius=radius)
        step_size = lr * diag["d_inf_norm"]
        if step_size < tol or radius < tol:
            diag["accepted"] = False
            history.append(diag)
            return TrajoptResult(theta, True, it, history)
        trial = gradients(problem, step.theta, backend)
        case, first, _ = classify(g.cf)
        if case == "1" and first is None:
            ok = np.all(trial.cf >= -VIOLATION_TOL) and trial.reward > g.reward
        else:
            ok = _violation(trial.cf) < _violation(g.cf)
        diag["accepted"] = bool(ok)
        history.append(diag)
        if ok:
            theta, g = step.theta, trial
            radius = min(radius * grow, max_radius)
        else:
            radius *= shrink
    return TrajoptResult(theta, False, max_iter, history)
