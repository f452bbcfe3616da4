"""Open-loop trajectory optimization of the uncertain unicycle around an obstacle."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import NoConvergence
from ..models import DynamicUnicycle
from ..policy.rollout import ConstraintSpec, RolloutProblem, rollout
from ..policy.trajopt import optimize
from ..rng import derive_seed, substream
from ..ut import GaussianMoments
from .config import UnicycleConfig
from .io import write_csv, write_summary


@dataclass(frozen=True)
class UnicycleTask:
    start: tuple = (-0.5, -0.5)
    goal: tuple = (2.0, 2.0)
    heading0: float = 0.0
    speed0: float = 0.0
    obstacle: tuple = (0.75, 0.75)
    radius: float = 0.5
    H: int = 40
    dt: float = 0.05
    goal_weight: float = 10.0
    mean_mode: str = "increment"
    k: float = 1.0

    @property
    def x0(self):
        return np.array([*self.start, self.heading0, self.speed0], dtype=float)


class OpenLoopControls:
    """theta = stacked [omega, a] per step; the last control is held past the horizon."""

    def __init__(self, H):
        self.H = H

    def __call__(self, X, theta, tau, xp=np):
        u = theta.reshape(theta.shape[:-1] + (self.H, 2))[..., xp.minimum(tau, self.H - 1), :]
        lead = X.shape[:-1]
        return xp.broadcast_to(u[..., None, :], lead + (2,))


def build_problem(task: UnicycleTask, beta: float) -> RolloutProblem:
    goal = np.asarray(task.goal, dtype=float)
    center = np.asarray(task.obstacle, dtype=float)
    r2 = task.radius**2
    w = task.goal_weight

    def reward(X, U, tau, xp):
        # cost negated: the optimizer maximizes
        p = X[..., :2] - goal
        return -(w * xp.sum(p * p, axis=-1) + xp.sum(U * U, axis=-1))

    def clearance(X, U, theta, tau, xp):
        p = X[..., :2] - center
        return xp.sum(p * p, axis=-1) - r2

    return RolloutProblem(
        model=DynamicUnicycle(task.dt, task.mean_mode),
        policy=OpenLoopControls(task.H),
        reward=reward,
        spec=ConstraintSpec([clearance], beta=beta),
        x0=GaussianMoments(task.x0, np.zeros((4, 4))),
        H=task.H,
        k=task.k,
    )


def simulate_open_loop(task: UnicycleTask, controls, num_particles, seed):
    """Monte Carlo rollouts of a fixed control sequence; returns (H+1, P, 4)."""
    plant = DynamicUnicycle(task.dt, task.mean_mode)
    controls = np.asarray(controls, dtype=float).reshape(task.H, 2)
    X = np.broadcast_to(task.x0, (num_particles, 4)).copy()
    out = [X]
    for t in range(task.H):
        U = np.broadcast_to(controls[t], (num_particles, 2))
        X = plant.sample(X, U, substream(seed, t))
        out.append(X)
    return np.stack(out)


def satisfaction(task: UnicycleTask, traj):
    d2 = np.sum((traj[..., :2] - np.asarray(task.obstacle)) ** 2, axis=-1)
    return np.mean(d2 >= task.radius**2, axis=-1)


def task_from_config(cfg: UnicycleConfig) -> UnicycleTask:
    return UnicycleTask(
        start=tuple(cfg.start), goal=tuple(cfg.goal), obstacle=tuple(cfg.obstacle),
        radius=cfg.radius, H=cfg.horizon, dt=cfg.dt, goal_weight=cfg.goal_weight,
        mean_mode=cfg.mean_mode, k=cfg.k,
    )


CASES = (("expectation", 0.0), ("ci", None))

HISTORY_FIELDS = ("iteration", "case", "expected_reward", "min_cf", "slack_norm", "d_inf_norm",
                  "radius", "accepted")


def run_unicycle(cfg: UnicycleConfig, seed: int, out_dir) -> dict:
    """Optimize the open-loop controls for both constraint forms and validate by MC.

    Writes every trace before raising NoConvergence for a case that hit the
    iteration cap.
    """
    out = Path(out_dir)
    task = task_from_config(cfg)
    traj_rows, hist_rows, sat = [], [], {}
    summary = {"cases": {}}
    unconverged = []
    for ci, (name, beta) in enumerate(CASES):
        beta = cfg.ci_beta if beta is None else beta
        prob = build_problem(task, beta)
        t0 = time.perf_counter_ns()
        res = optimize(prob, np.zeros(2 * task.H), cfg.lr, cfg.trust_radius, cfg.backend,
                       cfg.max_iter, cfg.tol)
        elapsed = time.perf_counter_ns() - t0
        r = rollout(res.theta, prob)
        U = res.theta.reshape(task.H, 2)
        for tau, m in enumerate(r.prediction.step_moments):
            u = U[min(tau, task.H - 1)] if tau < task.H else np.full(2, np.nan)
            traj_rows.append([name, tau, *m.mean, *np.diag(m.cov), r.cf_values[0, tau], *u])
        for h in res.history:
            hist_rows.append([name] + [h.get(f, np.nan) for f in HISTORY_FIELDS])
        traj = simulate_open_loop(task, res.theta, cfg.mc_particles, derive_seed(seed, ci))
        sat[name] = satisfaction(task, traj)
        summary["cases"][name] = {
            "beta": beta, "converged": res.converged, "iterations": res.iterations,
            "expected_reward": r.expected_reward, "min_cf": float(r.cf_values.min()),
            "cf": r.cf_values[0], "satisfaction": sat[name],
            "wall_ns": elapsed,
        }
        if not res.converged:
            unconverged.append(name)

    write_csv(out / "unicycle_trajectory.csv",
              ["case", "step", "mean_px", "mean_py", "mean_psi", "mean_v",
               "var_px", "var_py", "var_psi", "var_v", "cf", "omega", "accel"], traj_rows)
    write_csv(out / "unicycle_history.csv", ["case", *HISTORY_FIELDS], hist_rows)
    write_csv(out / "unicycle_mc_validation.csv", ["step", *(f"satisfaction_{n}" for n, _ in CASES)],
              [[t, *(sat[n][t] for n, _ in CASES)] for t in range(task.H + 1)])
    write_summary(out / "unicycle_summary.json", summary)
    if unconverged:
        raise NoConvergence(f"iteration cap hit for case(s) {unconverged}")
    return summary

