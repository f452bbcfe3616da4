"""Experiment configuration: strict TOML sections mapped onto dataclasses."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli_w

from ..errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


@dataclass
class RunConfig:
    experiment: str = ""
    seed: int = 0
    out: str = "out"

    def check(self):
        _require(self.seed >= 0, "run.seed", "must be >= 0")


@dataclass
class PredictConfig:
    a: float = 20.0
    x0: list = field(default_factory=lambda: [0.0, 0.0])
    horizon: int = 3
    k: float = 1.0
    mc_particles: list = field(default_factory=lambda: [500, 5000, 50000])
    repetitions: int = 20
    expansion_max_horizon: int = 6
    timing_repeats: int = 5

    def check(self):
        _require(len(self.x0) == 2, "predict.x0", "needs 2 entries")
        _require(self.horizon >= 1, "predict.horizon", "must be >= 1")
        _require(self.k > 0, "predict.k", "must be > 0")
        _require(all(p >= 2 for p in self.mc_particles), "predict.mc_particles", "entries must be >= 2")
        _require(self.repetitions >= 2, "predict.repetitions", "must be >= 2")
        _require(1 <= self.expansion_max_horizon <= 6, "predict.expansion_max_horizon", "must lie in [1, 6]")
        _require(self.timing_repeats >= 1, "predict.timing_repeats", "must be >= 1")


@dataclass
class GammaConfig:
    x0: list = field(default_factory=lambda: [3.0])
    horizons: list = field(default_factory=lambda: [1, 2, 3, 6])
    k: float = 1.0
    mc_particles: int = 50000
    repetitions: int = 20

    def check(self):
        _require(len(self.x0) >= 1, "gamma.x0", "needs at least one entry")
        _require(all(h >= 1 for h in self.horizons), "gamma.horizons", "entries must be >= 1")
        _require(self.k > 0, "gamma.k", "must be > 0")
        _require(self.mc_particles >= 2, "gamma.mc_particles", "must be >= 2")
        _require(self.repetitions >= 2, "gamma.repetitions", "must be >= 2")


@dataclass
class UnicycleConfig:
    start: list = field(default_factory=lambda: [-0.5, -0.5])
    goal: list = field(default_factory=lambda: [2.0, 2.0])
    obstacle: list = field(default_factory=lambda: [0.75, 0.75])
    radius: float = 0.5
    horizon: int = 40
    dt: float = 0.05
    k: float = 1.0
    goal_weight: float = 10.0
    mean_mode: str = "increment"
    ci_beta: float = 2.0
    lr: float = 1.0
    trust_radius: float = 1.0
    max_iter: int = 500
    tol: float = 1e-4
    backend: str = "fd"
    mc_particles: int = 50000

    def check(self):
        _require(self.radius > 0, "unicycle.radius", "must be > 0")
        _require(self.horizon >= 1, "unicycle.horizon", "must be >= 1")
        _require(self.dt > 0, "unicycle.dt", "must be > 0")
        _require(self.mean_mode in ("increment", "literal"), "unicycle.mean_mode",
                 "must be 'increment' or 'literal'")
        _require(self.ci_beta > 0, "unicycle.ci_beta", "must be > 0")
        _require(0 < self.lr <= 1, "unicycle.lr", "must lie in (0, 1]")
        _require(self.trust_radius > 0, "unicycle.trust_radius", "must be > 0")
        _require(self.max_iter >= 1, "unicycle.max_iter", "must be >= 1")
        _require(self.backend in ("fd", "jax"), "unicycle.backend", "must be 'fd' or 'jax'")
        _require(self.mc_particles >= 1, "unicycle.mc_particles", "must be >= 1")


@dataclass
class LeaderFollowerConfig:
    dt: float = 0.05
    s_min: float = 0.3
    s_max: float = 5.0
    fov: float = 1.0471975511965976
    u_max: float = 2.5
    omega_max: float = 4.0
    episode: float = 10.0
    horizon: int = 10
    k: float = 1.0
    leader0: list = field(default_factory=lambda: [0.0, 0.0])
    follower0: list = field(default_factory=lambda: [-1.0, 0.0, 0.0])
    alphas: list = field(default_factory=lambda: [0.5, 0.02, 0.02, 0.02])
    alpha_min: list = field(default_factory=lambda: [0.1, 0.01, 0.01, 0.01])
    alpha_max: list = field(default_factory=lambda: [0.9, 0.9, 0.9, 0.9])
    Q: float = 1e5
    epsilon: float = 0.05
    lr: float = 1.0
    trust_radius: float = 1.0
    update_every: int = 5
    backend: str = "fd"
    num_trials: int = 30
    modes: list = field(default_factory=lambda: ["unbounded-fixed", "unbounded-adaptive",
                                                 "bounded-fixed", "bounded-adaptive"])

    def check(self):
        _require(self.dt > 0, "leader_follower.dt", "must be > 0")
        _require(0 < self.s_min < self.s_max, "leader_follower.s_min", "need 0 < s_min < s_max")
        _require(0 < self.fov < 3.141592653589793, "leader_follower.fov", "must lie in (0, pi)")
        _require(self.u_max > 0 and self.omega_max > 0, "leader_follower.u_max", "bounds must be > 0")
        _require(self.episode > 0, "leader_follower.episode", "must be > 0")
        _require(self.horizon >= 1, "leader_follower.horizon", "must be >= 1")
        _require(len(self.alphas) == 4 and all(0 < a < 1 for a in self.alphas),
                 "leader_follower.alphas", "needs 4 rates in (0, 1)")
        _require(len(self.alpha_min) == 4 and len(self.alpha_max) == 4
                 and all(0 < lo <= a <= hi < 1 for lo, a, hi in
                         zip(self.alpha_min, self.alphas, self.alpha_max)),
                 "leader_follower.alpha_min", "need 0 < alpha_min <= alphas <= alpha_max < 1")
        _require(self.Q > 0, "leader_follower.Q", "must be > 0")
        _require(0 < self.epsilon <= 1, "leader_follower.epsilon", "must lie in (0, 1]")
        _require(0 < self.lr <= 1, "leader_follower.lr", "must lie in (0, 1]")
        _require(self.update_every >= 1, "leader_follower.update_every", "must be >= 1")
        _require(self.backend in ("fd", "jax"), "leader_follower.backend", "must be 'fd' or 'jax'")
        _require(self.num_trials >= 1, "leader_follower.num_trials", "must be >= 1")
        bad = [m for m in self.modes if m not in MODES]
        _require(not bad, "leader_follower.modes", f"unknown mode(s) {bad}")


MODES = {
    "unbounded-fixed": (False, False),
    "unbounded-adaptive": (False, True),
    "bounded-fixed": (True, False),
    "bounded-adaptive": (True, True),
}


@dataclass
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    predict: PredictConfig = field(default_factory=PredictConfig)
    gamma: GammaConfig = field(default_factory=GammaConfig)
    unicycle: UnicycleConfig = field(default_factory=UnicycleConfig)
    leader_follower: LeaderFollowerConfig = field(default_factory=LeaderFollowerConfig)

    def check(self):
        for f in fields(self):
            getattr(self, f.name).check()
        return self


def _require(ok, key, msg):
    if not ok:
        raise ConfigError(f"{key}: {msg}")


def _coerce(value, default, key):
    """Check a parsed TOML value against the type of the field default."""
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
        if ok and default:
            value = [_coerce(v, default[0], key) for v in value]
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}")
    return value


def _section(cls, data, name):
    if not isinstance(data, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key {name}.{unknown[0]}")
    obj = cls()
    for key, value in data.items():
        setattr(obj, key, _coerce(value, getattr(obj, key), f"{name}.{key}"))
    return obj


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    types = {f.name: type(getattr(ExperimentConfig(), f.name)) for f in fields(ExperimentConfig)}
    unknown = sorted(set(data) - set(types))
    if unknown:
        raise ConfigError(f"unknown section or key {unknown[0]!r}")
    parts = {name: _section(cls, data.get(name, {}), name) for name, cls in types.items()}
    return ExperimentConfig(**parts).check()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))


def dump_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(dataclasses.asdict(cfg))


def echo_config(cfg: ExperimentConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "effective_config.toml"
    path.write_text(dump_config(cfg))
    return path
