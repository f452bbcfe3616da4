"""Leader-follower trials with fixed or online-tuned CBF-CLF-QP rates."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..controllers import (
    FollowerQpConfig,
    cbf_policy_batch,
    linearize_constraints,
    squash,
    unsquash,
)
from ..errors import InfeasiblePrefix, PolicyDomainError
from ..models import LeaderFollowerPlant, lf_constraints_arrays
from ..policy.rollout import ConstraintSpec, RolloutProblem
from ..policy.sqp import foresee_step
from ..rng import substream, worker_count
from ..ut import GaussianMoments
from .config import MODES, LeaderFollowerConfig
from .io import write_csv, write_summary


@dataclass(frozen=True)
class LfTask:
    plant: LeaderFollowerPlant = field(default_factory=lambda: LeaderFollowerPlant(s_max=5.0))
    episode: float = 10.0
    horizon: int = 10
    leader0: tuple = (0.0, 0.0)
    follower0: tuple = (-1.0, 0.0, 0.0)
    alphas: tuple = (0.5, 0.02, 0.02, 0.02)
    alpha_min: tuple = (0.1, 0.01, 0.01, 0.01)
    alpha_max: tuple = (0.9, 0.9, 0.9, 0.9)
    epsilon: float = 0.05
    lr: float = 1.0
    trust_radius: float = 1.0
    update_every: int = 5
    k: float = 1.0
    Q: float = 1e5
    backend: str = "fd"

    @property
    def steps(self):
        return int(round(self.episode / self.plant.dt))


class JointModel:
    """Joint leader/follower transition with the clock offset by t0."""

    def __init__(self, plant, t0):
        self.plant, self.t0 = plant, t0
        self.state_dim = 5

    def controlled_moments(self, X, U, tau, xp=np):
        return self.plant.joint_moments(X, U, self.t0 + tau * self.plant.dt, xp)


class QpPolicy:
    """CBF-CLF-QP evaluated on every sigma point (numpy only).

    With input bounds, points where the bounded QP is infeasible fall back
    to the unbounded solution clipped to the input box, so the predicted
    closed loop stays defined and the feasibility margins register the
    problem.
    """

    def __init__(self, cfg, t0):
        self.cfg, self.t0 = cfg, t0
        self.free = replace(cfg, bounded=False)

    def __call__(self, X, theta, tau, xp=np):
        plant = self.cfg.plant
        vl, _ = plant.leader_velocity_moments(self.t0 + tau * plant.dt)
        th = theta[..., None, :]
        U, ok = cbf_policy_batch(X, th, vl, self.cfg)
        if not ok.all():
            lead = U.shape[:-1]
            Xb = np.broadcast_to(X, lead + X.shape[-1:])[~ok]
            Tb = np.broadcast_to(th, lead + th.shape[-1:])[~ok]
            Uf, okf = cbf_policy_batch(Xb, Tb, vl, self.free)
            if not okf.all():
                raise PolicyDomainError("predicted QP infeasible at a sigma point")
            lim = np.array([plant.u_max, plant.omega_max])
            U = U.copy()
            U[~ok] = np.clip(Uf, -lim, lim) if self.cfg.bounded else Uf
        return U


def feasibility_margins(X, theta, t, cfg_unbounded, bounds):
    """b_i + |a_i| . u_bar for each barrier row: >= 0 iff the row alone is
    satisfiable inside the input box."""
    vl, _ = cfg_unbounded.plant.leader_velocity_moments(t)
    A, b = linearize_constraints(X, squash(theta), vl, cfg_unbounded)
    return b[..., 1:4] + np.abs(A[..., 1:4, :2]) @ bounds


def prediction_problem(task: LfTask, X, t0, bounded):
    """Rollout problem for the adaptive update at joint state X and time t0.

    In the bounded case each barrier row also gets a margin telling whether
    it stays satisfiable under the input limits.
    """
    plant = task.plant
    cfg = FollowerQpConfig(plant=plant, Q=task.Q, bounded=False)
    bounds = np.array([plant.u_max, plant.omega_max])
    policy_cfg = replace(cfg, bounded=bounded)

    def barrier(i):
        def c(S, U, theta, tau, xp):
            return lf_constraints_arrays(S, plant.s_min, plant.s_max, plant.fov, xp)[i]
        return c

    def margin(i):
        def c(S, U, theta, tau, xp):
            m = feasibility_margins(S, theta[..., None, :], t0 + tau * plant.dt, cfg, bounds)
            return m[..., i]
        return c

    c_fns = [barrier(0), barrier(1), barrier(2)]
    if bounded:
        c_fns += [margin(0), margin(1), margin(2)]

    def reward(S, U, tau, xp):
        return lf_constraints_arrays(S, plant.s_min, plant.s_max, plant.fov, xp)[2] + np.cos(plant.fov)

    return RolloutProblem(
        model=JointModel(plant, t0),
        policy=QpPolicy(policy_cfg, t0),
        reward=reward,
        spec=ConstraintSpec(c_fns, epsilon=task.epsilon),
        x0=GaussianMoments(X, np.zeros((5, 5))),
        H=task.horizon,
        k=task.k,
    )


@dataclass
class TrialResult:
    trial: int
    seed: int
    completed: bool
    first_infeasible: int
    cumulative_reward: float
    min_h: np.ndarray
    trace: list
    updates: list


def run_trial(task: LfTask, bounded: bool, adaptive: bool, seed: int, trial: int = 0) -> TrialResult:
    plant = task.plant
    cfg = FollowerQpConfig(plant=plant, Q=task.Q, bounded=bounded)
    X = np.array([*task.leader0, *task.follower0], dtype=float)
    theta = unsquash(np.asarray(task.alphas, dtype=float))
    total = 0.0
    min_h = np.full(3, np.inf)
    trace, updates = [], []
    first_infeasible = -1
    bounds = (unsquash(np.asarray(task.alpha_min, dtype=float)),
              unsquash(np.asarray(task.alpha_max, dtype=float)))
    for k in range(task.steps):
        t = k * plant.dt
        if adaptive and k % task.update_every == 0:
            prob = prediction_problem(task, X, t, bounded)
            try:
                try:
                    step = foresee_step(prob, theta, task.lr, task.trust_radius, task.backend, k,
                                        theta_bounds=bounds)
                except InfeasiblePrefix:
                    step = foresee_step(prob, theta, task.lr, task.trust_radius, task.backend, k,
                                        on_prefix="truncate", theta_bounds=bounds)
                theta = step.theta
                updates.append(step.diagnostics)
            except PolicyDomainError:
                updates.append({"iteration": k, "case": "skip"})
        vl, _ = plant.leader_velocity_moments(t)
        U, ok = cbf_policy_batch(X, theta, vl, cfg)
        if not ok:
            first_infeasible = k
            break
        leader = plant.sample_leader(X[:2], t, substream(seed, trial, k))
        follower = plant.follower_step(X[2:], U)
        X = np.concatenate([leader, follower])
        h1, h2, h3, _ = lf_constraints_arrays(X, plant.s_min, plant.s_max, plant.fov)
        h = np.array([h1, h2, h3])
        min_h = np.minimum(min_h, h)
        r = float(h3 + np.cos(plant.fov))
        total += r
        trace.append((k, t, *X, *U, h1, h2, h3, r, *squash(theta)))
    return TrialResult(trial, seed, first_infeasible < 0, first_infeasible, total, min_h, trace, updates)


def run_grid(task: LfTask, num_trials: int, base_seed: int, modes=None, workers=None):
    """{(bounded, adaptive): [TrialResult]}; trial i uses seed base_seed + i."""
    modes = modes or [(b, a) for b in (False, True) for a in (False, True)]
    jobs = [(m, i) for m in modes for i in range(num_trials)]
    n = min(worker_count(workers), len(jobs))

    def one(job):
        (bounded, adaptive), i = job
        return run_trial(task, bounded, adaptive, base_seed + i, i)

    if n > 1:
        with ThreadPoolExecutor(n) as pool:
            results = list(pool.map(one, jobs))
    else:
        results = [one(j) for j in jobs]
    out = {m: [] for m in modes}
    for (m, _), r in zip(jobs, results):
        out[m].append(r)
    return out


def task_from_config(cfg: LeaderFollowerConfig) -> LfTask:
    plant = LeaderFollowerPlant(dt=cfg.dt, s_min=cfg.s_min, s_max=cfg.s_max, fov=cfg.fov,
                                u_max=cfg.u_max, omega_max=cfg.omega_max)
    return LfTask(
        plant=plant, episode=cfg.episode, horizon=cfg.horizon, k=cfg.k,
        leader0=tuple(cfg.leader0), follower0=tuple(cfg.follower0), alphas=tuple(cfg.alphas),
        alpha_min=tuple(cfg.alpha_min), alpha_max=tuple(cfg.alpha_max),
        epsilon=cfg.epsilon, lr=cfg.lr, trust_radius=cfg.trust_radius,
        update_every=cfg.update_every, Q=cfg.Q, backend=cfg.backend,
    )


TRACE_HEADER = ["mode", "trial", "k", "t", "px_l", "py_l", "px_f", "py_f", "phi", "u", "omega",
                "h1", "h2", "h3", "reward", "alpha0", "alpha1", "alpha2", "alpha3"]
UPDATE_FIELDS = ("iteration", "case", "expected_reward", "min_cf", "slack_norm", "d_inf_norm")


def run_leader_follower(cfg: LeaderFollowerConfig, seed: int, out_dir, workers=None) -> dict:
    out = Path(out_dir)
    task = task_from_config(cfg)
    modes = [MODES[m] for m in cfg.modes]
    grid = run_grid(task, cfg.num_trials, seed, modes, workers)
    trace, trials, updates = [], [], []
    summary = {}
    for name in cfg.modes:
        res = grid[MODES[name]]
        for r in res:
            trace += [[name, r.trial, *row] for row in r.trace]
            trials.append([name, r.trial, r.seed, r.completed, r.first_infeasible,
                           r.cumulative_reward, *r.min_h])
            updates += [[name, r.trial] + [u.get(f, np.nan) for f in UPDATE_FIELDS] for u in r.updates]
        fi = [r.first_infeasible if not r.completed else task.steps for r in res]
        summary[name] = {
            "completed": int(sum(r.completed for r in res)),
            "trials": len(res),
            "all_h_positive": int(sum(r.completed and bool(np.all(r.min_h > 0)) for r in res)),
            "mean_reward": float(np.mean([r.cumulative_reward for r in res])),
            "median_first_infeasible": float(np.median(fi)),
        }
    write_csv(out / "lf_trace.csv", TRACE_HEADER, trace)
    write_csv(out / "lf_trials.csv", ["mode", "trial", "seed", "completed", "first_infeasible",
                                      "cumulative_reward", "min_h1", "min_h2", "min_h3"], trials)
    write_csv(out / "lf_updates.csv", ["mode", "trial", *UPDATE_FIELDS], updates)
    write_summary(out / "lf_summary.json", summary)
    return summary
