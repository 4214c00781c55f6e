"""Experiment configuration: a TOML document with one table per pipeline stage."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    n_beams: int = 180
    fov: float = 2.0 * math.pi
    max_range: float = 10.0
    dt: float = 0.05
    max_steps: int = 1200


@dataclass(frozen=True)
class PerceptionConfig:
    hidden: tuple[int, ...] = (64, 64)
    n_samples: int = 100000
    margin: float = 0.1
    d_max: float = 6.0
    split: tuple[float, ...] = (0.7, 0.2, 0.1)
    learning_rate: float = 0.003
    epochs: int = 120
    batch_size: int = 64
    optimizer: str = "adam"
    schedule: str = "cosine"
    eta: float = 0.05
    data_seed: int = 1
    split_seed: int = 2
    ood_samples: int = 2000
    ood_seed: int = 3


@dataclass(frozen=True)
class EUQConfig:
    n_members: int = 5
    rank: int = 20
    prior_scale: float = 1.0
    fisher_samples: int = 5000


@dataclass(frozen=True)
class CalibrationConfig:
    gamma_multiplier: float = 1.0
    ablation: tuple[float, ...] = (1.0, 2.0, 4.0, 5.0)


@dataclass(frozen=True)
class FilterSection:
    kappa_gain: float = 4.0
    L_Lfh: float = 0.0
    L_Lgh: float = 0.40
    L_kh: float = 4.00
    slack_penalty: float = 100.0
    v_limits: tuple[float, float] = (0.0, 3.0)
    omega_limits: tuple[float, float] = (-1.5, 1.5)
    # "table" keeps the constants above, "estimate" replaces them per obstacle
    lipschitz: str = "table"
    clearance: float = 0.3
    static_eps: float = 0.2


@dataclass(frozen=True)
class ExperimentConfig:
    trials: int = 100
    seed: int = 0
    cells: tuple[str, ...] = ("id_circle:cbf_qp", "ood_polygon:cbf_qp",
                              "ood_polygon:atom_scod", "ood_polygon:atom_deep")
    start_distance: tuple[float, float] = (4.0, 6.0)
    start_heading: str = "facing"  # or "safe": start inside the safe set
    heading_noise: float = 0.2
    lateral_offset: float = 0.5  # goal offset, as a fraction of r
    goal_radius: float = 0.3
    stall_window: float = 5.0
    stall_distance: float = 0.05
    disengage: bool = True
    disengage_margin: float = 0.5
    perception: str = "net"  # or "injected"
    plots: int = 1  # trajectories plotted per cell


@dataclass(frozen=True)
class Config:
    world: WorldConfig = field(default_factory=WorldConfig)
    perception: PerceptionConfig = field(default_factory=PerceptionConfig)
    euq: EUQConfig = field(default_factory=EUQConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    filter: FilterSection = field(default_factory=FilterSection)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """sha256 of the canonical JSON form; embedded in every output."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def with_overrides(self, seed: int | None = None, trials: int | None = None) -> "Config":
        exp = self.experiment
        if seed is not None:
            exp = replace(exp, seed=seed)
        if trials is not None:
            exp = replace(exp, trials=trials)
        validate(replace(self, experiment=exp))
        return replace(self, experiment=exp)


_SECTIONS = {f.name: f.default_factory for f in fields(Config)}


def _coerce(cls, table: dict, section: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(table) - set(known)
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {sorted(unknown)}")
    defaults = cls()
    kwargs = {}
    for name, value in table.items():
        ref = getattr(defaults, name)
        try:
            if isinstance(ref, bool):
                if not isinstance(value, bool):
                    raise TypeError
                kwargs[name] = value
            elif isinstance(ref, tuple):
                kwargs[name] = tuple(type(ref[0])(v) if ref else v for v in value)
            elif isinstance(ref, (int, float, str)):
                if isinstance(value, (list, dict, bool)):
                    raise TypeError
                kwargs[name] = type(ref)(value)
            else:
                kwargs[name] = value
        except (TypeError, ValueError):
            raise ConfigError(f"[{section}] {name}: cannot use {value!r} (expected like {ref!r})") from None
    return cls(**kwargs)


def validate(cfg: Config) -> None:
    w, p, e, c, f, x = cfg.world, cfg.perception, cfg.euq, cfg.calibration, cfg.filter, cfg.experiment
    checks = [
        (w.n_beams >= 8, "world.n_beams must be >= 8"),
        (w.dt > 0, "world.dt must be positive"),
        (w.max_steps >= 1, "world.max_steps must be >= 1"),
        (w.max_range > 0, "world.max_range must be positive"),
        (len(p.hidden) >= 1 and min(p.hidden) >= 1, "perception.hidden needs positive widths"),
        (p.n_samples >= 10, "perception.n_samples too small"),
        (len(p.split) == 3 and abs(sum(p.split) - 1.0) < 1e-9, "perception.split must be 3 fractions summing to 1"),
        (p.learning_rate > 0 and p.epochs >= 0 and p.batch_size >= 1, "invalid training settings"),
        (p.eta > 0, "perception.eta must be positive"),
        (p.optimizer in ("sgd", "adam"), "perception.optimizer must be 'sgd' or 'adam'"),
        (p.schedule in ("constant", "cosine"), "perception.schedule must be 'constant' or 'cosine'"),
        (e.n_members >= 2, "euq.n_members must be >= 2"),
        (e.rank >= 1 and e.prior_scale > 0, "invalid Laplace settings"),
        (c.gamma_multiplier > 0 and all(m > 0 for m in c.ablation), "gamma multipliers must be positive"),
        (f.lipschitz in ("table", "estimate"), "filter.lipschitz must be 'table' or 'estimate'"),
        (f.clearance >= 0 and f.static_eps >= 0, "filter.clearance and static_eps must be >= 0"),
        (x.trials >= 1, "experiment.trials must be >= 1"),
        (0 < x.start_distance[0] <= x.start_distance[1], "experiment.start_distance must be an interval"),
        (x.start_heading in ("facing", "safe"), "experiment.start_heading must be 'facing' or 'safe'"),
        (x.perception in ("net", "injected"), "experiment.perception must be 'net' or 'injected'"),
        (x.goal_radius > 0 and x.stall_window > 0, "goal_radius and stall_window must be positive"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)
    from .harness import parse_cell  # late import: harness imports this module

    for cell in x.cells:
        parse_cell(cell)


def from_dict(doc: dict) -> Config:
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    parts = {}
    for name in _SECTIONS:
        cls = type(_SECTIONS[name]())
        table = doc.get(name, {})
        if not isinstance(table, dict):
            raise ConfigError(f"[{name}] must be a table")
        parts[name] = _coerce(cls, table, name)
    try:
        cfg = Config(**parts)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    validate(cfg)
    return cfg


def load_config(path=None) -> Config:
    if path is None:
        cfg = Config()
        validate(cfg)
        return cfg
    try:
        doc = tomllib.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(doc)
