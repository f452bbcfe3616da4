"""CBF-CLF-QP follower controller and the small dense QP solvers behind it.

Decision vector z = [v, omega, delta].  Every constraint is a row of
``A z <= b``.  The barrier and Lyapunov conditions on the next state are
linearized in the input, which is exact to first order in dt for the
control-affine follower.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import DegenerateActiveSet, NonFiniteRow, QpInfeasible, SolverFailure
from .models import LeaderFollowerPlant

KKT_TOL = 1e-8
ALPHA_MARGIN = 1e-6


# ----------------------------------------------------------------------
# QP data and solvers
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class CbfQpProblem:
    """min (u - u_d)' P (u - u_d) + Q delta^2  s.t.  A [u; delta] <= b."""

    P: np.ndarray
    Q: float
    u_d: np.ndarray
    A: np.ndarray
    b: np.ndarray
    labels: tuple = ()

    def hessian(self):
        m = self.P.shape[0]
        Hm = np.zeros((m + 1, m + 1))
        Hm[:m, :m] = 2.0 * self.P
        Hm[m, m] = 2.0 * self.Q
        return Hm

    def linear(self):
        return np.concatenate([-2.0 * self.P @ self.u_d, [0.0]])

    def objective(self, z):
        du = z[: self.P.shape[0]] - self.u_d
        return float(du @ self.P @ du + self.Q * z[-1] ** 2)


@dataclass(frozen=True)
class QpSolution:
    z: np.ndarray
    status: str
    kkt_residual: float
    multipliers: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))
    active: tuple = ()

    @property
    def u(self):
        return self.z[:-1]

    @property
    def delta(self):
        return float(self.z[-1])


def kkt_residual(Hm, f, A, b, z, lam):
    """Max of scaled stationarity, primal, dual and complementarity residuals."""
    scale = 1.0 + max(np.max(np.abs(Hm)), np.max(np.abs(f), initial=0.0))
    stat = Hm @ z + f + A.T @ lam
    slack = b - A @ z
    bscale = 1.0 + np.max(np.abs(b), initial=0.0)
    return float(max(
        np.max(np.abs(stat), initial=0.0) / scale,
        np.max(-slack, initial=0.0) / bscale,
        np.max(-lam, initial=0.0) / scale,
        np.max(np.abs(lam * slack), initial=0.0) / (scale * bscale),
    ))


def _normalize_rows(A, b):
    nrm = np.linalg.norm(A, axis=-1)
    zero = nrm < 1e-14
    s = np.where(zero, 1.0, nrm)
    return A / s[..., None], b / s, zero


def goldfarb_idnani(Hm, f, A, b, max_iter=100, tol=1e-12):
    """Dual active-set method for min 1/2 z'Hz + f'z s.t. A z <= b.

    Starts from the unconstrained minimizer and adds the most violated row
    each outer iteration, dropping rows whose multiplier would turn
    negative.  Returns (z, lam, active) or raises QpInfeasible.
    """
    Hm = np.asarray(Hm, dtype=float)
    n = Hm.shape[0]
    L = np.linalg.cholesky(Hm)
    Linv = np.linalg.solve(L, np.eye(n))

    def hsolve(v):
        return Linv.T @ (Linv @ v)

    An, bn, zero = _normalize_rows(np.asarray(A, float), np.asarray(b, float))
    if np.any(zero & (bn < -tol)):
        raise QpInfeasible("constant row cannot be satisfied", np.flatnonzero(zero & (bn < -tol)))
    rows = np.flatnonzero(~zero)
    # inequality n_i' z >= c_i with n_i = -a_i, c_i = -b_i
    N_all, c_all = -An, -bn

    z = -hsolve(f)
    active: list[int] = []
    u = np.zeros(0)
    for _ in range(max_iter):
        s = N_all[rows] @ z - c_all[rows]
        worst = int(np.argmin(s)) if rows.size else 0
        if not rows.size or s[worst] >= -tol * (1.0 + abs(c_all[rows][worst])):
            lam = np.zeros(A.shape[0])
            nrm = np.linalg.norm(A, axis=-1)
            for j, i in enumerate(active):
                lam[i] = u[j] / nrm[i]
            return z, lam, tuple(sorted(active))
        p = int(rows[worst])
        u_plus = np.append(u, 0.0)
        while True:
            nP = N_all[p]
            if active:
                Nt = Linv @ N_all[active].T
                Q1, R = np.linalg.qr(Nt)
                npt = Linv @ nP
                r = np.linalg.solve(R, Q1.T @ npt)
                step = Linv.T @ (npt - Q1 @ (Q1.T @ npt))
            else:
                r = np.zeros(0)
                step = hsolve(nP)
            t1, drop = np.inf, None
            for j in range(len(active)):
                if r[j] > tol:
                    tj = u_plus[j] / r[j]
                    if tj < t1:
                        t1, drop = tj, j
            curv = step @ nP
            # a row (numerically) dependent on the active set gives no primal step
            t2 = np.inf if curv <= 1e-10 * (nP @ hsolve(nP)) else -(nP @ z - c_all[p]) / curv
            t = min(t1, t2)
            if not np.isfinite(t):
                raise QpInfeasible("no step can satisfy the violated row", active + [p])
            if t2 == np.inf:
                u_plus = u_plus + t * np.append(-r, 1.0)
                del active[drop]
                u_plus = np.delete(u_plus, drop)
                continue
            z = z + t * step
            u_plus = u_plus + t * np.append(-r, 1.0)
            if t == t2:
                active.append(p)
                u = u_plus
                break
            del active[drop]
            u_plus = np.delete(u_plus, drop)
    raise SolverFailure("Goldfarb-Idnani exceeded the iteration limit")


def qp_solve(prob: CbfQpProblem) -> QpSolution:
    """Solve one CBF-CLF-QP; Infeasible is reported as a status, not raised."""
    Hm, f = prob.hessian(), prob.linear()
    try:
        z, lam, act = goldfarb_idnani(Hm, f, prob.A, prob.b)
    except QpInfeasible:
        return QpSolution(np.full(Hm.shape[0], np.nan), "Infeasible", np.inf)
    res = kkt_residual(Hm, f, prob.A, prob.b, z, lam)
    if res > KKT_TOL:
        raise SolverFailure(f"KKT residual {res:.2e} above tolerance")
    return QpSolution(z, "Optimal", res, lam, act)


_SUBSETS: dict = {}


def _subsets(R, n):
    key = (R, n)
    if key not in _SUBSETS:
        _SUBSETS[key] = {s: np.array(list(combinations(range(R), s)), dtype=int).reshape(-1, s)
                         for s in range(1, min(R, n) + 1)}
    return _SUBSETS[key]


def _small_solve(M, r, eps=1e-10):
    """Batched solve of s x s systems (s <= 3) by cofactors; flags near-singular ones."""
    s = M.shape[-1]
    if s == 1:
        det = M[..., 0, 0]
        good = np.abs(det) > eps
        return r / np.where(good, det, 1.0)[..., None], good
    if s == 2:
        a, b_, c, d = M[..., 0, 0], M[..., 0, 1], M[..., 1, 0], M[..., 1, 1]
        det = a * d - b_ * c
        good = np.abs(det) > eps
        det = np.where(good, det, 1.0)
        x0 = (d * r[..., 0] - b_ * r[..., 1]) / det
        x1 = (a * r[..., 1] - c * r[..., 0]) / det
        return np.stack([x0, x1], axis=-1), good
    if s == 3:
        c0 = np.cross(M[..., 1, :], M[..., 2, :])
        c1 = np.cross(M[..., 2, :], M[..., 0, :])
        c2 = np.cross(M[..., 0, :], M[..., 1, :])
        det = np.sum(M[..., 0, :] * c0, axis=-1)
        good = np.abs(det) > eps
        adj = np.stack([c0, c1, c2], axis=-1)  # inverse = adj / det
        return (adj @ r[..., None])[..., 0] / np.where(good, det, 1.0)[..., None], good
    good = np.abs(np.linalg.det(M)) > eps
    Ms = np.where(good[..., None, None], M, np.eye(s))
    return np.linalg.solve(Ms, r[..., None])[..., 0], good


def qp_solve_batch(Hm, f, A, b, tol=1e-9):
    """Exact solve of many tiny strictly convex QPs by active-set enumeration.

    Hm (n, n) shared; f (B, n); A (B, R, n); b (B, R).  For each problem the
    KKT point of every linearly independent candidate set of at most n rows
    is computed in bulk; the feasible one with nonnegative multipliers and
    the lowest objective is the optimum.  Returns (z (B, n), lam (B, R),
    feasible (B,)).
    """
    f = np.asarray(f, float)
    A = np.asarray(A, float)
    b = np.asarray(b, float)
    B, R, n = A.shape
    Hinv = np.linalg.inv(Hm)
    An, bn, _ = _normalize_rows(A, b)
    scale = 1.0 + np.abs(bn)
    z0 = -f @ Hinv.T

    zs, lams = [z0[None]], [np.zeros((1, B, R))]
    for s, idx in _subsets(R, n).items():
        S = idx.shape[0]
        As = An[:, idx].transpose(1, 0, 2, 3)  # (S, B, s, n)
        bs = bn[:, idx].transpose(1, 0, 2)
        M = As @ Hinv @ np.swapaxes(As, -1, -2)
        rhs = (As @ z0[..., None])[..., 0] - bs
        lam_s, good = _small_solve(M, rhs)
        lam_s = np.where(good[..., None], lam_s, -1.0)
        zs.append(z0[None] - (np.swapaxes(As, -1, -2) @ lam_s[..., None])[..., 0] @ Hinv.T)
        full = np.zeros((S, B, R))
        si, bi = np.arange(S)[:, None], np.arange(B)[None, :]
        for j in range(s):
            full[si, bi, idx[:, j][:, None]] = lam_s[:, :, j]
        lams.append(full)
    Z = np.concatenate(zs)  # (C, B, n)
    L = np.concatenate(lams)  # (C, B, R)
    viol = np.max((An @ Z[..., None])[..., 0] - bn - tol * scale, axis=-1)
    ok = (viol <= 0) & np.all(L >= -tol, axis=-1)
    obj = np.sum((0.5 * Z @ Hm + f) * Z, axis=-1)
    obj = np.where(ok, obj, np.inf)
    pick = np.argmin(obj, axis=0)
    bi = np.arange(B)
    feasible = np.isfinite(obj[pick, bi])
    z = np.where(feasible[:, None], Z[pick, bi], np.nan)
    nrm = np.linalg.norm(A, axis=-1)
    lam = L[pick, bi] / np.where(nrm < 1e-14, 1.0, nrm)
    return z, lam, feasible


# ----------------------------------------------------------------------
# follower CBF-CLF-QP
# ----------------------------------------------------------------------


def squash(theta):
    """Unconstrained theta -> rates in (margin, 1 - margin)."""
    s = 1.0 / (1.0 + np.exp(-np.asarray(theta, dtype=float)))
    return ALPHA_MARGIN + (1.0 - 2.0 * ALPHA_MARGIN) * s


def squash_derivative(theta):
    s = 1.0 / (1.0 + np.exp(-np.asarray(theta, dtype=float)))
    return (1.0 - 2.0 * ALPHA_MARGIN) * s * (1.0 - s)


def unsquash(alpha):
    a = (np.asarray(alpha, dtype=float) - ALPHA_MARGIN) / (1.0 - 2.0 * ALPHA_MARGIN)
    return np.log(a / (1.0 - a))


@dataclass(frozen=True)
class FollowerQpConfig:
    plant: LeaderFollowerPlant = field(default_factory=LeaderFollowerPlant)
    P: tuple = ((1.0, 0.0), (0.0, 1.0))
    Q: float = 100.0
    u_d: tuple = (0.0, 0.0)
    bounded: bool = False


def constraint_gradients(X, plant: LeaderFollowerPlant):
    """Values and state gradients of (V, h1, h2, h3) at joint states X (..., 5)."""
    d = X[..., :2] - X[..., 2:4]
    s2 = np.sum(d * d, axis=-1)
    s = np.sqrt(s2)
    if np.any(s < 1e-9):
        from .errors import CoincidentAgents

        raise CoincidentAgents("leader and follower positions coincide")
    phi = X[..., 4]
    c = np.stack([np.cos(phi), np.sin(phi)], axis=-1)
    cp = np.stack([-np.sin(phi), np.cos(phi)], axis=-1)
    dc = np.sum(d * c, axis=-1)
    mid = 0.5 * (plant.s_min + plant.s_max)

    def full(gd, gphi):
        # gradient w.r.t. d maps to +leader, -follower position
        return np.concatenate([gd, -gd, gphi[..., None]], axis=-1)

    zero = np.zeros_like(phi)
    gV = full(2.0 * (s - mid)[..., None] * d / s[..., None], zero)
    g1 = full(2.0 * d, zero)
    g2 = full(-2.0 * d, zero)
    g3d = c / s[..., None] - (dc / s**3)[..., None] * d
    g3 = full(g3d, np.sum(d * cp, axis=-1) / s)
    vals = np.stack([(s - mid) ** 2, s2 - plant.s_min**2, plant.s_max**2 - s2,
                     dc / s - np.cos(plant.fov)], axis=-1)
    return vals, np.stack([gV, g1, g2, g3], axis=-2)


def linearize_constraints(X, alphas, leader_velocity, cfg: FollowerQpConfig):
    """Rows A z <= b for z = [v, omega, delta] at joint states X (..., 5).

    Row 0 is the Lyapunov condition, rows 1-3 the barriers, rows 4-7 the input
    bounds when ``cfg.bounded``.  alphas (..., 4) = [a0, a1, a2, a3].
    """
    plant = cfg.plant
    dt = plant.dt
    vals, grads = constraint_gradients(X, plant)
    phi = X[..., 4]
    # state rate = F0 + G u with F0 = [v_leader, 0, 0, 0]
    Gv = np.stack([0 * phi, 0 * phi, np.cos(phi), np.sin(phi), 0 * phi], axis=-1)
    Gw = np.broadcast_to(np.array([0.0, 0, 0, 0, 1.0]), Gv.shape)
    F0 = np.concatenate([np.broadcast_to(leader_velocity, X.shape[:-1] + (2,)),
                         np.zeros(X.shape[:-1] + (3,))], axis=-1)
    drift = np.einsum("...kn,...n->...k", grads, F0) * dt
    coef = np.stack([np.einsum("...kn,...n->...k", grads, Gv),
                     np.einsum("...kn,...n->...k", grads, Gw)], axis=-1) * dt
    alphas = np.broadcast_to(alphas, X.shape[:-1] + (4,))
    V, h = vals[..., 0], vals[..., 1:]
    lead = X.shape[:-1]
    # Lyapunov: V + drift + coef u <= (1 - a0) V + delta
    clf = np.concatenate([coef[..., 0, :], -np.ones(lead + (1,))], axis=-1)
    clf_b = -alphas[..., 0] * V - drift[..., 0]
    # barrier: h + drift + coef u >= (1 - a) h
    cbf = np.concatenate([-coef[..., 1:, :], np.zeros(lead + (3, 1))], axis=-1)
    cbf_b = alphas[..., 1:] * h + drift[..., 1:]
    A = np.concatenate([clf[..., None, :], cbf], axis=-2)
    b = np.concatenate([clf_b[..., None], cbf_b], axis=-1)
    if cfg.bounded:
        lim = np.array([plant.u_max, plant.omega_max])
        Ab = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [0, -1.0, 0]])
        A = np.concatenate([A, np.broadcast_to(Ab, lead + Ab.shape)], axis=-2)
        b = np.concatenate([b, np.broadcast_to(np.repeat(lim, 2), lead + (4,))], axis=-1)
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
        raise NonFiniteRow("linearized constraint rows are not finite")
    return A, b


ROW_LABELS = ("clf", "h1", "h2", "h3", "v_max", "v_min", "w_max", "w_min")


def build_problem(x, alphas, leader_velocity, cfg: FollowerQpConfig) -> CbfQpProblem:
    A, b = linearize_constraints(np.asarray(x, float), np.asarray(alphas, float),
                                 np.asarray(leader_velocity, float), cfg)
    return CbfQpProblem(np.asarray(cfg.P, float), float(cfg.Q), np.asarray(cfg.u_d, float),
                        A, b, ROW_LABELS[: A.shape[0]])


def cbf_policy(x, theta, leader_velocity, cfg: FollowerQpConfig):
    """Follower input [v, omega] for one joint state; raises QpInfeasible."""
    prob = build_problem(x, squash(theta), leader_velocity, cfg)
    sol = qp_solve(prob)
    if sol.status != "Optimal":
        viol = np.flatnonzero(prob.b < 0)
        raise QpInfeasible("CBF-CLF-QP has no feasible input", viol)
    return sol.u


def cbf_policy_batch(X, theta, leader_velocity, cfg: FollowerQpConfig):
    """Vectorized policy over joint states X (..., 5) and rates theta (..., 4).

    Returns (U (..., 2), feasible (...)); infeasible entries hold NaN.
    """
    X = np.asarray(X, float)
    theta = np.asarray(theta, float)
    lead = np.broadcast_shapes(X.shape[:-1], theta.shape[:-1])
    Xb = np.broadcast_to(X, lead + (5,)).reshape(-1, 5)
    Tb = np.broadcast_to(theta, lead + (4,)).reshape(-1, 4)
    A, b = linearize_constraints(Xb, squash(Tb), leader_velocity, cfg)
    P = np.asarray(cfg.P, float)
    prob = CbfQpProblem(P, float(cfg.Q), np.asarray(cfg.u_d, float), A[0], b[0])
    Hm = prob.hessian()
    f = np.broadcast_to(prob.linear(), (Xb.shape[0], 3))
    z, _, ok = qp_solve_batch(Hm, f, A, b)
    return z[:, :2].reshape(lead + (2,)), ok.reshape(lead)


def policy_jacobian_theta(x, theta, leader_velocity, cfg: FollowerQpConfig, backend="fd", h=1e-6):
    """du/dtheta (2, 4) of the QP solution."""
    theta = np.asarray(theta, float)
    if backend == "fd":
        E = np.eye(theta.size) * h
        up, okp = cbf_policy_batch(x, theta + E, leader_velocity, cfg)
        um, okm = cbf_policy_batch(x, theta - E, leader_velocity, cfg)
        if not (okp.all() and okm.all()):
            raise QpInfeasible("perturbed QP infeasible")
        return ((up - um) / (2 * h)).T
    if backend != "implicit":
        raise ValueError(f"unknown backend {backend!r}")
    alphas = squash(theta)
    prob = build_problem(x, alphas, leader_velocity, cfg)
    sol = qp_solve(prob)
    if sol.status != "Optimal":
        raise QpInfeasible("QP infeasible at the evaluation point")
    slack = prob.b - prob.A @ sol.z
    lam = sol.multipliers
    bscale = 1.0 + np.abs(prob.b)
    act = np.flatnonzero(lam > 1e-7)
    weak = (np.abs(slack) < 1e-7 * bscale) & (lam <= 1e-7)
    if np.any(weak):
        raise DegenerateActiveSet(f"weakly active rows {np.flatnonzero(weak).tolist()}")
    Hm = prob.hessian()
    n = Hm.shape[0]
    Aa = prob.A[act]
    K = np.block([[Hm, Aa.T], [Aa, np.zeros((act.size, act.size))]])
    # db/dalpha: clf row -V, barrier rows +h
    vals, _ = constraint_gradients(np.asarray(x, float), cfg.plant)
    dB = np.zeros((prob.b.size, 4))
    dB[0, 0] = -vals[0]
    for i in range(3):
        dB[1 + i, 1 + i] = vals[1 + i]
    rhs = np.vstack([np.zeros((n, 4)), dB[act]])
    dz = np.linalg.solve(K, rhs)[:n]
    return dz[:2] * squash_derivative(theta)[None, :]
