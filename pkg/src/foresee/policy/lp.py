"""Box-bounded linear programs for the direction-finding step.

Solved with the HiGHS dual simplex (through scipy) so the returned point is a
basic (vertex) solution; KKT residuals are recomputed from the reported
multipliers rather than trusted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from ..errors import Infeasible, SolverFailure

KKT_TOL = 1e-8


@dataclass(frozen=True)
class LpResult:
    x: np.ndarray
    objective: float
    kkt: dict

    @property
    def kkt_max(self):
        return max(self.kkt.values())


def _kkt(c, A, b, lb, ub, x, y, zl, zu):
    """Scaled residuals of min c.x s.t. A x <= b, lb <= x <= ub.

    y, zl, zu are the nonnegative multipliers of the rows, lower and upper bounds.
    """
    cs = 1.0 + np.max(np.abs(c), initial=0.0)
    stat = c + A.T @ y - zl + zu
    slack = b - A @ x
    bs = 1.0 + np.max(np.abs(b), initial=0.0)
    xs = 1.0 + np.max(np.abs(x), initial=0.0)
    primal = max(
        np.max(-slack, initial=0.0) / bs,
        np.max(lb - x, initial=0.0) / xs,
        np.max(x - ub, initial=0.0) / xs,
    )
    dual = max(np.max(-y, initial=0.0), np.max(-zl, initial=0.0), np.max(-zu, initial=0.0)) / cs
    comp = max(
        np.max(np.abs(y * slack), initial=0.0),
        np.max(np.abs(zl * (x - lb)), initial=0.0),
        np.max(np.abs(zu * (ub - x)), initial=0.0),
    ) / (cs * max(bs, xs))
    return {
        "stationarity": float(np.max(np.abs(stat), initial=0.0) / cs),
        "primal": float(primal),
        "dual": float(dual),
        "complementarity": float(comp),
    }


def _highs(c, A, b, lb, ub):
    res = linprog(
        c,
        A_ub=A if A.shape[0] else None,
        b_ub=b if A.shape[0] else None,
        bounds=np.column_stack([lb, ub]),
        method="highs-ds",
        # HiGHS defaults (1e-7) sit above KKT_TOL
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status == 2:
        raise Infeasible(res.message)
    if res.status != 0:
        raise SolverFailure(f"HiGHS status {res.status}: {res.message}")
    x = np.asarray(res.x, dtype=float)
    y = -np.asarray(res.ineqlin.marginals) if A.shape[0] else np.zeros(0)
    zl = np.asarray(res.lower.marginals)
    zu = -np.asarray(res.upper.marginals)
    return x, float(c @ x), _kkt(c, A, b, lb, ub, x, y, zl, zu)


def _row_scale(A, b):
    nrm = np.max(np.abs(A), axis=1, initial=0.0) if A.shape[0] else np.zeros(0)
    keep = nrm > 0
    s = np.where(keep, nrm, 1.0)
    return A / s[:, None], b / s, keep


def lp_solve(c, A=None, b=None, box=1.0, tie_break=True, check_kkt=True) -> LpResult:
    """Solve min c.x s.t. A x <= b, |x|_inf <= box.

    Rows are normalized to unit max-norm first; an all-zero row is either
    dropped (b >= 0) or proves infeasibility (b < 0).  With ``tie_break`` a
    second LP picks the minimum-l1 point among the optimal ones, so
    coordinates the objective does not care about come back as zero.
    """
    c = np.asarray(c, dtype=float).ravel()
    n = c.shape[0]
    A = np.zeros((0, n)) if A is None else np.atleast_2d(np.asarray(A, dtype=float))
    b = np.zeros(0) if b is None else np.asarray(b, dtype=float).ravel()
    if A.shape != (b.shape[0], n):
        raise ValueError(f"A {A.shape} and b {b.shape} do not match {n} variables")
    if not box > 0:
        raise ValueError("box radius must be positive")
    if not (np.all(np.isfinite(c)) and np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
        raise SolverFailure("non-finite LP data")

    A, b, keep = _row_scale(A, b)
    if np.any(b[~keep] < -1e-12):
        raise Infeasible("zero row with negative right-hand side")
    A, b = A[keep], b[keep]
    cscale = max(1.0, np.max(np.abs(c), initial=0.0))
    cn = c / cscale
    lb, ub = np.full(n, -box), np.full(n, box)

    x, obj, kkt = _highs(cn, A, b, lb, ub)
    if check_kkt and max(kkt.values()) > KKT_TOL:
        raise SolverFailure(f"KKT residuals {kkt} exceed {KKT_TOL}")

    if tie_break and n:
        # split x = p - q, minimize sum(p + q) over the optimal face
        tol = 1e-10 * (1.0 + abs(obj))
        A2 = np.vstack([np.hstack([A, -A]), np.concatenate([cn, -cn])[None, :]])
        b2 = np.concatenate([b, [obj + tol]])
        try:
            pq, _, kkt2 = _highs(np.ones(2 * n), A2, b2, np.zeros(2 * n), np.full(2 * n, box))
            x2 = pq[:n] - pq[n:]
            if max(kkt2.values()) <= KKT_TOL and np.all(A @ x2 <= b + 1e-9):
                x = np.clip(x2, -box, box)
        except (Infeasible, SolverFailure):
            pass
    return LpResult(x, float(c @ x), kkt)
