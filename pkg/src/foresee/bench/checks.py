"""Seeded numerical self-checks shared by ``foresee selftest`` and the test suite."""

from __future__ import annotations

import numpy as np

from ..models import LinearGaussian
from ..propagation import compress_sigma_points, expand_sigma_points
from ..rng import substream
from ..ut import GaussianMoments, SigmaSet, generate_ut_points, sample_moments


def random_psd(rng, n, rank=None):
    A = rng.standard_normal((n, rank or n))
    return A @ A.T


def ut_roundtrip_error(cases=1000, seed=0, max_dim=6, k=1.0):
    """Largest |regenerated moment - input| over random Gaussian inputs."""
    rng = substream(seed, 1)
    worst = 0.0
    for _ in range(cases):
        n = int(rng.integers(1, max_dim + 1))
        m = GaussianMoments(rng.standard_normal(n) * 3.0, random_psd(rng, n, int(rng.integers(1, n + 1))))
        s = sample_moments(generate_ut_points(m, k))
        worst = max(worst, float(np.max(np.abs(s.mean - m.mean))),
                    float(np.max(np.abs(s.cov - m.cov))))
    return worst


def expansion_compression_errors(cases=200, seed=0, max_dim=4, k=1.0):
    """(expansion error, compression error) for a linear-Gaussian model and random sets."""
    rng = substream(seed, 2)
    worst_e, worst_c = 0.0, 0.0
    for _ in range(cases):
        n = int(rng.integers(1, max_dim + 1))
        model = LinearGaussian(rng.standard_normal((n, n)), random_psd(rng, n), rng.standard_normal(n))
        N = int(rng.integers(1, 12))
        w = rng.uniform(0.1, 1.0, N)
        s = SigmaSet(rng.standard_normal((N, n)), w / w.sum())
        m = sample_moments(s)
        e = expand_sigma_points(s, model, k)
        me = sample_moments(e)
        mu = model.A @ m.mean + model.b
        cov = model.A @ m.cov @ model.A.T + model.Q
        worst_e = max(worst_e, float(np.max(np.abs(me.mean - mu))), float(np.max(np.abs(me.cov - cov))))
        mc = sample_moments(compress_sigma_points(e, k))
        worst_c = max(worst_c, float(np.max(np.abs(mc.mean - me.mean))),
                      float(np.max(np.abs(mc.cov - me.cov))))
    return worst_e, worst_c
