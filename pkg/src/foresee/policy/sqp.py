"""Direction finding and the parameter update loop.

Case 1 (every predicted constraint satisfied) maximizes the first-order
reward gain while keeping each confidence function nonnegative to first
order.  Case 2 (violations confined to the terminal step) minimizes the
linearized terminal slack while keeping every satisfied constraint
satisfied to first order.  Both are LPs inside an infinity-norm box.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InfeasiblePrefix
from .gradient import Gradients, gradients
from .lp import lp_solve

VIOLATION_TOL = 1e-9


@dataclass(frozen=True)
class UpdateDirection:
    d: np.ndarray
    active_slack_set: tuple = ()
    slack_values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    objective: float = 0.0


def _flat(cf, dcf):
    cf = np.asarray(cf, dtype=float)
    dcf = np.asarray(dcf, dtype=float)
    return cf.reshape(-1), dcf.reshape(cf.size, -1)


def _with_extra(A, b, extra):
    if extra is None:
        return A, b
    Ae, be = extra
    return np.vstack([A, Ae]), np.concatenate([b, be])


def sqp_direction_case1(d_reward, cf_values, d_cf, trust_radius=1.0, extra_rows=None) -> UpdateDirection:
    """max d.grad R  s.t.  cf + d.grad cf >= 0,  |d|_inf <= trust_radius.

    ``extra_rows`` = (A, b) adds rows A d <= b (parameter bounds).
    """
    g = np.asarray(d_reward, dtype=float).ravel()
    cf, G = _flat(cf_values, d_cf)
    # tiny negative round-off would make d = 0 infeasible
    b = np.maximum(cf, 0.0)
    A, b = _with_extra(-G, b, extra_rows)
    res = lp_solve(-g, A, b, trust_radius)
    return UpdateDirection(res.x, objective=float(g @ res.x))


def linearized_slack(cf_values, d_cf, J, d):
    """sum over J of (-cf_j - d.grad cf_j)_+^2."""
    cf, G = _flat(cf_values, d_cf)
    J = np.asarray(J, dtype=int)
    r = np.maximum(-cf[J] - G[J] @ d, 0.0)
    return float(r @ r)


def sqp_direction_case2(cf_values, d_cf, violated, trust_radius=1.0, preserved=None,
                        extra_rows=None) -> UpdateDirection:
    """Minimize the linearized squared terminal slack.

    ``violated`` holds flat indices into cf_values (row-major K x (H+1));
    ``preserved`` defaults to every other index.  Each violated constraint is
    additionally kept from getting worse to first order, which makes the
    linearized slack at the returned d no larger than at d = 0.
    """
    cf, G = _flat(cf_values, d_cf)
    J = np.unique(np.asarray(violated, dtype=int))
    if J.size == 0:
        raise ValueError("case 2 needs at least one violated constraint")
    if preserved is None:
        preserved = np.setdiff1d(np.arange(cf.size), J)
    P = np.asarray(preserved, dtype=int)
    delta = -cf[J]
    c = -(delta @ G[J])
    A = np.vstack([-G[P], -G[J]])
    b = np.concatenate([np.maximum(cf[P], 0.0), np.zeros(J.size)])
    A, b = _with_extra(A, b, extra_rows)
    res = lp_solve(c, A, b, trust_radius)
    return UpdateDirection(res.x, tuple(int(j) for j in J), delta, float(c @ res.x))


@dataclass(frozen=True)
class StepResult:
    theta: np.ndarray
    direction: UpdateDirection
    grads: Gradients
    diagnostics: dict


def classify(cf, tol=VIOLATION_TOL):
    """Return ("1" | "2", first prefix violation step or None, terminal violated rows)."""
    cf = np.asarray(cf)
    H = cf.shape[1] - 1
    bad = cf < -tol
    prefix = np.flatnonzero(bad[:, :H].any(axis=0))
    first = int(prefix[0]) if prefix.size else None
    terminal = np.flatnonzero(bad[:, H])
    return ("2" if terminal.size else "1"), first, terminal


def foresee_step(problem, theta, lr=1.0, trust_radius=1.0, backend="fd", iteration=0,
                 on_prefix="raise", grads=None, theta_bounds=None) -> StepResult:
    """One rollout -> gradient -> direction -> theta + lr d update.

    ``on_prefix="truncate"`` handles a violation before the terminal step by
    treating the first violated step as the terminal one and ignoring later
    steps; the default raises InfeasiblePrefix.  ``theta_bounds`` = (lo, hi)
    keeps theta + lr d inside a box (d = 0 is always allowed).
    """
    if not 0.0 < lr <= 1.0:
        raise ValueError("learning rate must lie in (0, 1]")
    theta = np.asarray(theta, dtype=float)
    g = grads if grads is not None else gradients(problem, theta, backend)
    cf = g.cf
    K, H1 = cf.shape
    extra = None
    if theta_bounds is not None:
        lo, hi = (np.broadcast_to(np.asarray(v, dtype=float), theta.shape) for v in theta_bounds)
        eye = np.eye(theta.shape[0])
        extra = (np.vstack([eye, -eye]),
                 np.maximum(np.concatenate([(hi - theta) / lr, (theta - lo) / lr]), 0.0))
    case, first, terminal = classify(cf)
    diag = {
        "iteration": int(iteration),
        "case": case,
        "expected_reward": g.reward,
        "min_cf": float(np.min(cf)),
        "min_cf_per_step": np.min(cf, axis=0),
    }

    if first is not None:
        diag["first_violation"] = first
        if on_prefix != "truncate":
            raise InfeasiblePrefix(
                f"constraint violated at step {first} before the terminal step", first, diag
            )
        T = first
        idx = np.arange(K * H1).reshape(K, H1)
        J = idx[:, T][cf[:, T] < -VIOLATION_TOL]
        P = np.concatenate([idx[:, :T].ravel(), idx[:, T][cf[:, T] >= -VIOLATION_TOL]])
        direction = sqp_direction_case2(cf, g.d_cf, J, trust_radius, preserved=P, extra_rows=extra)
        case = diag["case"] = "2t"
    elif case == "2":
        J = np.ravel_multi_index((terminal, np.full(terminal.size, H1 - 1)), (K, H1))
        direction = sqp_direction_case2(cf, g.d_cf, J, trust_radius, extra_rows=extra)
    else:
        direction = sqp_direction_case1(g.d_reward, cf, g.d_cf, trust_radius, extra)

    d = direction.d
    diag["slack_norm"] = float(np.linalg.norm(direction.slack_values))
    diag["d_inf_norm"] = float(np.max(np.abs(d), initial=0.0))
    diag["predicted_reward_gain"] = float(lr * (g.d_reward @ d))
    if direction.active_slack_set:
        J = direction.active_slack_set
        diag["linearized_slack_before"] = linearized_slack(cf, g.d_cf, J, np.zeros_like(d))
        diag["linearized_slack_after"] = linearized_slack(cf, g.d_cf, J, lr * d)
    return StepResult(theta + lr * d, direction, g, diag)
