import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from foresee.controllers import (
    CbfQpProblem,
    FollowerQpConfig,
    build_problem,
    cbf_policy,
    cbf_policy_batch,
    constraint_gradients,
    goldfarb_idnani,
    kkt_residual,
    linearize_constraints,
    policy_jacobian_theta,
    qp_solve,
    qp_solve_batch,
    squash,
    squash_derivative,
    unsquash,
)
from foresee.errors import DegenerateActiveSet, QpInfeasible
from foresee.models import LeaderFollowerPlant
from foresee.rng import substream

from .oracles import qp_grid_polish, qp_piecewise_enumeration

LEAD_V = np.array([2.5, 1.0])


def random_qp(r, rows=4):
    P = np.diag(r.uniform(0.5, 3.0, 2))
    A = np.zeros((rows, 3))
    A[:, :2] = r.standard_normal((rows, 2))
    A[0, 2] = -1.0  # only the first row is softened
    b = r.uniform(0.1, 1.0, rows)
    b[0] = r.uniform(-2.0, 1.0)
    return CbfQpProblem(P, float(r.uniform(1.0, 100.0)), r.uniform(-3, 3, 2), A, b)


def lf_state(r):
    xf = r.uniform(-1, 1, 2)
    ang = r.uniform(-0.5, 0.5)
    dist = r.uniform(0.6, 1.6)
    phi = r.uniform(-np.pi, np.pi)
    lead = xf + dist * np.array([np.cos(phi + ang), np.sin(phi + ang)])
    return np.concatenate([lead, xf, [phi]])


def test_unconstrained_minimum():
    prob = CbfQpProblem(np.eye(2), 10.0, np.array([1.0, -2.0]), np.array([[1.0, 0, -1.0]]), np.array([5.0]))
    sol = qp_solve(prob)
    np.testing.assert_allclose(sol.z, [1.0, -2.0, 0.0], atol=1e-12)


def test_soft_row_shares_cost():
    # u0 - delta <= 0 with u_d = 1, P = 1, Q = 1: minimize (u-1)^2 + u^2 -> u = 0.5 = delta
    prob = CbfQpProblem(np.eye(1), 1.0, np.array([1.0]), np.array([[1.0, -1.0]]), np.array([0.0]))
    np.testing.assert_allclose(qp_solve(prob).z, [0.5, 0.5], atol=1e-12)


def test_infeasible_reported():
    A = np.array([[1.0, 0, 0], [-1.0, 0, 0]])
    b = np.array([-1.0, -1.0])
    prob = CbfQpProblem(np.eye(2), 1.0, np.zeros(2), A, b)
    assert qp_solve(prob).status == "Infeasible"
    _, _, ok = qp_solve_batch(prob.hessian(), prob.linear()[None], A[None], b[None])
    assert not ok[0]


def _reduced_cost(prob, u):
    du = u - prob.u_d
    r0 = max(prob.A[0, :2] @ u - prob.b[0], 0.0)
    return du @ prob.P @ du + prob.Q * r0**2


def test_hundred_qps_against_piecewise_oracle():
    r = substream(404)
    for _ in range(100):
        prob = random_qp(r)
        sol = qp_solve(prob)
        assert sol.status == "Optimal"
        assert sol.kkt_residual <= 1e-8
        u_ref = qp_piecewise_enumeration(prob.P, prob.Q, prob.u_d, prob.A, prob.b)
        ref_obj = _reduced_cost(prob, u_ref)
        assert prob.objective(sol.z) <= ref_obj + 1e-9 * (1 + ref_obj)
        np.testing.assert_allclose(sol.u, u_ref, atol=1e-8)


def test_qps_against_grid_oracle():
    r = substream(410)
    for _ in range(20):
        prob = random_qp(r)
        u_ref = qp_grid_polish(prob.P, prob.Q, prob.u_d, prob.A, prob.b, [0.0, 0.0], 10.0)
        np.testing.assert_allclose(qp_solve(prob).u, u_ref, atol=1e-4)


def test_batch_agrees_with_single():
    r = substream(405)
    probs = [random_qp(r, rows=6) for _ in range(100)]
    Hm = probs[0].hessian()
    # batch interface shares the Hessian, so reuse P and Q
    probs = [CbfQpProblem(probs[0].P, probs[0].Q, p.u_d, p.A, p.b) for p in probs]
    f = np.stack([p.linear() for p in probs])
    z, lam, ok = qp_solve_batch(Hm, f, np.stack([p.A for p in probs]), np.stack([p.b for p in probs]))
    for i, p in enumerate(probs):
        s = qp_solve(p)
        assert ok[i] == (s.status == "Optimal")
        if ok[i]:
            np.testing.assert_allclose(z[i], s.z, atol=1e-9)
            assert kkt_residual(Hm, f[i], p.A, p.b, z[i], lam[i]) <= 1e-8


def test_goldfarb_idnani_rejects_constant_infeasible_row():
    with pytest.raises(QpInfeasible):
        goldfarb_idnani(np.eye(2), np.zeros(2), np.zeros((1, 2)), np.array([-1.0]))


@given(st.floats(-30, 30))
def test_squash_monotone_and_invertible(t):
    a = squash(t)
    assert 0.0 < a < 1.0
    assert squash(t + 0.1) >= a
    assert squash_derivative(t) >= 0.0
    if abs(t) < 10:
        assert unsquash(a) == pytest.approx(t, abs=1e-6)


def test_constraint_gradients_match_differences():
    plant = LeaderFollowerPlant(s_max=5.0)
    r = substream(406)
    for _ in range(10):
        x = lf_state(r)
        vals, G = constraint_gradients(x, plant)
        h1, h2, h3, V = plant.constraints(x)
        np.testing.assert_allclose(vals, [V, h1, h2, h3], atol=1e-12)
        for j in range(5):
            e = np.zeros(5)
            e[j] = 1e-6
            hp = np.array(plant.constraints(x + e))
            hm = np.array(plant.constraints(x - e))
            fd = (hp - hm) / 2e-6
            np.testing.assert_allclose(G[:, j], fd[[3, 0, 1, 2]], atol=1e-6)


def test_rows_match_first_order_step():
    cfg = FollowerQpConfig(plant=LeaderFollowerPlant(dt=1e-4, s_max=5.0))
    x = lf_state(substream(407))
    alphas = np.array([0.3, 0.2, 0.1, 0.4])
    A, b = linearize_constraints(x, alphas, LEAD_V, cfg)
    u = np.array([0.7, -0.3])
    # row i slack per unit dt must equal d/dt h along the flow plus alpha h / dt
    xn = np.concatenate([x[:2] + cfg.plant.dt * LEAD_V, cfg.plant.follower_step(x[2:], u)])
    h1, h2, h3, V = cfg.plant.constraints(x)
    n1, n2, n3, Vn = cfg.plant.constraints(xn)
    z = np.array([u[0], u[1], 0.0])
    lhs = b - A @ z
    want = np.array([(1 - alphas[0]) * V - Vn, n1 - (1 - alphas[1]) * h1,
                     n2 - (1 - alphas[2]) * h2, n3 - (1 - alphas[3]) * h3])
    np.testing.assert_allclose(lhs, want, atol=1e-7)


def test_policy_batch_matches_single():
    cfg = FollowerQpConfig(plant=LeaderFollowerPlant(s_max=5.0), bounded=True)
    r = substream(408)
    X = np.stack([lf_state(r) for _ in range(40)])
    T = r.uniform(-2, 2, (40, 4))
    U, ok = cbf_policy_batch(X, T, LEAD_V, cfg)
    for i in range(40):
        if ok[i]:
            np.testing.assert_allclose(U[i], cbf_policy(X[i], T[i], LEAD_V, cfg), atol=1e-9)
        else:
            with pytest.raises(QpInfeasible):
                cbf_policy(X[i], T[i], LEAD_V, cfg)


def test_bounded_inputs_respected():
    cfg = FollowerQpConfig(plant=LeaderFollowerPlant(s_max=5.0), bounded=True, u_d=(10.0, 10.0))
    x = lf_state(substream(409))
    prob = build_problem(x, squash(np.zeros(4)), LEAD_V, cfg)
    sol = qp_solve(prob)
    if sol.status == "Optimal":
        assert abs(sol.u[0]) <= 2.5 + 1e-9 and abs(sol.u[1]) <= 4.0 + 1e-9


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_implicit_jacobian_matches_fd(seed):
    cfg = FollowerQpConfig(plant=LeaderFollowerPlant(s_max=5.0))
    r = substream(seed)
    x = lf_state(r)
    theta = r.uniform(-2, 2, 4)
    try:
        Ji = policy_jacobian_theta(x, theta, LEAD_V, cfg, "implicit")
        Jf = policy_jacobian_theta(x, theta, LEAD_V, cfg, "fd")
    except (QpInfeasible, DegenerateActiveSet):
        assume(False)
    np.testing.assert_allclose(Ji, Jf, atol=1e-5 * (1 + np.max(np.abs(Ji))))
