"""``foresee <subcommand> --config PATH [--seed N] [--out DIR]``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 selftest failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from ..errors import ConfigError, ForeseeError
from .config import ExperimentConfig, echo_config, load_config
from .io import strip_timing

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_SELFTEST = 0, 2, 3, 4

log = logging.getLogger("foresee")


def cmd_predict_benchmark(cfg: ExperimentConfig, out: Path):
    from .predict import run_predict

    s = run_predict(cfg.predict, cfg.run.seed, out)
    if "band" in s:
        log.info("EC inside MC band per step: %s", s["band"]["ec_inside"].tolist())
    return EXIT_OK


def cmd_gamma_benchmark(cfg: ExperimentConfig, out: Path):
    from .predict import run_gamma

    s = run_gamma(cfg.gamma, cfg.run.seed, out)
    log.info("per-horizon band membership: %s", s["per_horizon"])
    return EXIT_OK


def cmd_unicycle_trajopt(cfg: ExperimentConfig, out: Path):
    from .unicycle import run_unicycle

    s = run_unicycle(cfg.unicycle, cfg.run.seed, out)
    for name, c in s["cases"].items():
        log.info("%s: converged=%s iterations=%d min_cf=%.3e", name, c["converged"], c["iterations"], c["min_cf"])
    return EXIT_OK


def cmd_leader_follower(cfg: ExperimentConfig, out: Path):
    from .leader_follower import run_leader_follower

    s = run_leader_follower(cfg.leader_follower, cfg.run.seed, out)
    for name, m in s.items():
        log.info("%s: %d/%d completed, mean reward %.3f", name, m["completed"], m["trials"], m["mean_reward"])
    return EXIT_OK


def reduced(cfg: ExperimentConfig) -> ExperimentConfig:
    """Small versions of every experiment for the determinism check."""
    return replace(
        cfg,
        predict=replace(cfg.predict, horizon=3, mc_particles=[500, 5000], repetitions=3,
                        expansion_max_horizon=3, timing_repeats=1),
        gamma=replace(cfg.gamma, horizons=[1, 2], mc_particles=5000, repetitions=3),
        unicycle=replace(cfg.unicycle, horizon=8, max_iter=15, mc_particles=2000),
        leader_follower=replace(cfg.leader_follower, num_trials=1, episode=0.5,
                                horizon=4, update_every=2),
    ).check()


EXPERIMENTS = {
    "predict-benchmark": cmd_predict_benchmark,
    "gamma-benchmark": cmd_gamma_benchmark,
    "unicycle-trajopt": cmd_unicycle_trajopt,
    "leader-follower": cmd_leader_follower,
}


def cmd_selftest(cfg: ExperimentConfig, out: Path):
    from ..errors import NoConvergence
    from .checks import expansion_compression_errors, ut_roundtrip_error

    ok = True
    err = ut_roundtrip_error(seed=cfg.run.seed)
    log.info("UT round-trip max error %.3e", err)
    ok &= err <= 1e-10
    e_exp, e_cmp = expansion_compression_errors(seed=cfg.run.seed)
    log.info("expansion error %.3e, compression error %.3e", e_exp, e_cmp)
    ok &= e_exp <= 1e-8 and e_cmp <= 1e-9

    small = reduced(cfg)
    for name, fn in EXPERIMENTS.items():
        dirs = [out / "selftest" / name / tag for tag in ("a", "b")]
        for d in dirs:
            try:
                fn(small, d)
            except NoConvergence:
                pass  # the reduced unicycle run may stop at its cap; traces are still written
        files = sorted(p.relative_to(dirs[0]) for p in dirs[0].glob("*.csv"))
        same = bool(files) and files == sorted(p.relative_to(dirs[1]) for p in dirs[1].glob("*.csv"))
        same = same and all(strip_timing(dirs[0] / f) == strip_timing(dirs[1] / f) for f in files)
        log.info("%s: %d CSV files, identical=%s", name, len(files), same)
        ok &= same
    print("selftest", "PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_SELFTEST


COMMANDS = dict(EXPERIMENTS, selftest=cmd_selftest)


def build_parser():
    p = argparse.ArgumentParser(prog="foresee", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, type=Path)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=Path)
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        run = cfg.run
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be >= 0")
            run = replace(run, seed=args.seed)
        if args.out is not None:
            run = replace(run, out=str(args.out))
        cfg = replace(cfg, run=replace(run, experiment=args.command))
        out = Path(cfg.run.out)
        echo_config(cfg, out)
        return COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"foresee: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ForeseeError as exc:
        print(f"foresee: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
