"""Prediction benchmarks: cos/sin and gamma dynamics against Monte Carlo."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import DegenerateVariance
from ..models import CosSinBenchmark, GammaBenchmark
from ..propagation import (
    expansion_only,
    monte_carlo_propagate,
    predict_horizon,
    successive_gaussian_propagate,
)
from ..rng import derive_seed
from ..ut import GaussianMoments, SigmaSet, sample_higher_moments, sample_moments
from .config import GammaConfig, PredictConfig
from .io import moment_header, write_csv, write_summary

REFERENCE_PARTICLES = 50000
BAND_PARTICLES = 5000


def _higher(s: SigmaSet):
    try:
        h = sample_higher_moments(s)
        return h.skewness, h.kurtosis
    except DegenerateVariance:
        n = s.dim
        return np.full(n, np.nan), np.full(n, np.nan)


def _row(step, m: GaussianMoments, skew, kurt):
    return [step, *m.mean, *m.cov.ravel(), *skew, *kurt]


def _set_rows(sets, times):
    rows = []
    for tau, s in enumerate(sets):
        skew, kurt = _higher(s)
        rows.append(_row(tau, sample_moments(s), skew, kurt) + [times[tau]])
    return rows


def _uniform(X):
    return SigmaSet(X, np.full(X.shape[0], 1.0 / X.shape[0]))


def _median_times(runs):
    return [0] + [int(np.median(col)) for col in zip(*runs)]


def run_monte_carlo(x0, model, H, particles, reps, seed, workers=None):
    """Returns rows (rep, step, moments..., time) and the (reps, H+1, n) rep means."""
    rows, means, covs = [], [], []
    for rep in range(reps):
        times = []
        traj = monte_carlo_propagate(x0, model, H, particles, derive_seed(seed, particles, rep),
                                     workers, step_times=times)
        times = [0] + times
        m_rep, c_rep = [], []
        for tau, X in enumerate(traj):
            s = _uniform(X)
            m = sample_moments(s)
            skew, kurt = _higher(s)
            rows.append([rep] + _row(tau, m, skew, kurt) + [times[tau]])
            m_rep.append(m.mean)
            c_rep.append(m.cov)
        means.append(m_rep)
        covs.append(c_rep)
    return rows, np.array(means), np.array(covs)


def band(rep_means, width=2.0):
    """Center and half-width (width x run-to-run standard deviation) per step and dim."""
    return rep_means.mean(axis=0), width * rep_means.std(axis=0, ddof=1)


def run_predict(cfg: PredictConfig, seed: int, out_dir, workers=None) -> dict:
    out = Path(out_dir)
    H = cfg.horizon
    model = CosSinBenchmark(cfg.a)
    x0 = np.asarray(cfg.x0, dtype=float)
    m0 = GaussianMoments(x0, np.zeros((2, 2)))
    header = moment_header(2) + ["time_step_ns"]

    runs, ec = [], None
    for _ in range(cfg.timing_repeats):
        t = []
        ec = predict_horizon(m0, model, H, cfg.k, vectorized=False, step_times=t)
        runs.append(t)
    ec_times = _median_times(runs)
    write_csv(out / "ec.csv", header, _set_rows(ec.per_step, ec_times))

    He = min(H, cfg.expansion_max_horizon)
    runs, eo = [], None
    for _ in range(cfg.timing_repeats):
        t = []
        eo = expansion_only(m0, model, He, cfg.k, vectorized=False, step_times=t)
        runs.append(t)
    eo_times = _median_times(runs)
    rows = _set_rows(eo.per_step, eo_times)
    write_csv(out / "expansion_only.csv", ["num_points"] + header,
              [[len(s)] + r for s, r in zip(eo.per_step, rows)])

    t = []
    sg = successive_gaussian_propagate(m0, model, H, step_times=t)
    sg_times = [0] + t
    rows = []
    for tau, m in enumerate(sg):
        gauss = np.where(np.diag(m.cov) > 1e-12, 1.0, np.nan)
        rows.append(_row(tau, m, 0.0 * gauss, 3.0 * gauss) + [sg_times[tau]])
    write_csv(out / "successive_gaussian.csv", header, rows)

    mc = {}
    for P in cfg.mc_particles:
        rows, means, covs = run_monte_carlo(x0, model, H, P, cfg.repetitions, seed, workers)
        write_csv(out / f"mc_{P}.csv", ["rep"] + header, rows)
        times = np.array([r[-1] for r in rows]).reshape(cfg.repetitions, H + 1)
        mc[P] = (means, covs, np.median(times, axis=0))

    summary = {"a": cfg.a, "horizon": H, "methods": {}}
    ec_mean = np.array([m.mean for m in ec.step_moments])
    ec_cov = np.array([m.cov for m in ec.step_moments])
    sg_mean = np.array([m.mean for m in sg])
    sg_cov = np.array([m.cov for m in sg])
    eo_mean = np.array([m.mean for m in eo.step_moments])
    eo_cov = np.array([m.cov for m in eo.step_moments])
    if REFERENCE_PARTICLES in mc:
        ref_mean = mc[REFERENCE_PARTICLES][0].mean(axis=0)
        ref_cov = mc[REFERENCE_PARTICLES][1].mean(axis=0)

        def errors(mean, cov):
            n = mean.shape[0]
            return {"mean_error": np.linalg.norm(mean - ref_mean[:n], axis=-1),
                    "cov_error": np.linalg.norm(cov - ref_cov[:n], axis=(-2, -1))}

        summary["methods"]["ec"] = errors(ec_mean, ec_cov)
        summary["methods"]["expansion_only"] = errors(eo_mean, eo_cov)
        summary["methods"]["successive_gaussian"] = errors(sg_mean, sg_cov)
        for P, (means, covs, _) in mc.items():
            summary["methods"][f"mc_{P}"] = errors(means.mean(axis=0), covs.mean(axis=0))
    if BAND_PARTICLES in mc:
        center, half = band(mc[BAND_PARTICLES][0])
        summary["band"] = {"center": center, "half_width": half,
                           "ec_inside": np.all(np.abs(ec_mean - center) <= half, axis=-1)}
    summary["median_step_ns"] = {"ec": ec_times, "expansion_only": eo_times, "successive_gaussian": sg_times}
    for P, (_, _, t) in mc.items():
        summary["median_step_ns"][f"mc_{P}"] = t.astype(int).tolist()
    write_summary(out / "summary.json", summary)
    return summary


def run_gamma(cfg: GammaConfig, seed: int, out_dir, workers=None) -> dict:
    out = Path(out_dir)
    x0 = np.asarray(cfg.x0, dtype=float)
    n = x0.shape[0]
    model = GammaBenchmark(n)
    H = max(cfg.horizons)
    header = moment_header(n) + ["time_step_ns"]

    t = []
    ec = predict_horizon(GaussianMoments(x0, np.zeros((n, n))), model, H, cfg.k, step_times=t)
    write_csv(out / "gamma_ec.csv", header, _set_rows(ec.per_step, [0] + t))

    P = cfg.mc_particles
    rows, means, covs = run_monte_carlo(x0, model, H, P, cfg.repetitions, seed, workers)
    write_csv(out / f"gamma_mc_{P}.csv", ["rep"] + header, rows)

    ec_mean = np.array([m.mean for m in ec.step_moments])
    ec_var = np.array([np.diag(m.cov) for m in ec.step_moments])
    mc_var = np.diagonal(covs, axis1=-2, axis2=-1)
    c_mean, h_mean = band(means)
    c_var, h_var = band(mc_var)
    k1, beta1 = model.params(x0)
    summary = {
        "horizons": list(cfg.horizons),
        "one_step_mean": k1 * beta1,
        "one_step_se": np.sqrt(k1 * beta1**2 / P),
        "mc_mean": c_mean,
        "mc_var": c_var,
        "ec_mean": ec_mean,
        "ec_var": ec_var,
        "per_horizon": {
            str(h): {
                "ec_mean_inside": bool(np.all(np.abs(ec_mean[h] - c_mean[h]) <= h_mean[h])),
                "ec_var_inside": bool(np.all(np.abs(ec_var[h] - c_var[h]) <= h_var[h])),
            }
            for h in cfg.horizons
        },
    }
    write_summary(out / "gamma_summary.json", summary)
    return summary
