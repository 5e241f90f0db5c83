"""Run configuration: sectioned ``key = value`` text mapped onto dataclasses.

Every section corresponds to one frozen dataclass. Unknown sections and keys
are rejected, values are parsed by the type of the field default, and tuples
are written as comma-separated lists. ``dumps`` writes a file that parses back
to an equal ``RunConfig``.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import MISSING, dataclass, field, fields, replace

from .algo import DPPOConfig, PPOConfig
from .envsim import EnvConfig, NoiseSpec
from .mapping import SensorModel
from .net import NetConfig
from .rewards import RewardWeights
from .terrain import ConfigError, GridGeometry, TerrainKind, TerrainParams

ALL_KINDS = tuple(k.value for k in TerrainKind)


def _check_kinds(kinds, where):
    for k in kinds:
        if k not in ALL_KINDS:
            raise ConfigError(f"{where}: unknown terrain kind {k!r} (expected one of {', '.join(ALL_KINDS)})")


@dataclass(frozen=True)
class TerrainConfig:
    """Terrain family parameters and the grid every heightmap is built on."""

    width_cells: int = 200
    height_cells: int = 200
    resolution: float = 0.05
    origin_x: float = 0.0
    origin_y: float = -5.0
    grade: float = 0.15
    rise: float = 0.1
    run: float = 0.3
    platform_height: float = 0.15
    platform_length: float = 1.0
    ditch_width: float = 0.4
    ditch_depth: float = 0.1
    amplitude: float = 0.02
    start: float = 2.6
    repeat: float = 1.0

    def __post_init__(self):
        self.geometry()
        self.params()
        for name in ("grade", "rise", "run", "platform_height", "platform_length", "ditch_width",
                     "ditch_depth"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"terrain {name} must be > 0")
        if self.amplitude < 0:
            raise ConfigError("terrain amplitude must be >= 0")
        if self.repeat < 0:
            raise ConfigError("terrain repeat must be >= 0")

    def geometry(self) -> GridGeometry:
        return GridGeometry(self.width_cells, self.height_cells, self.resolution,
                            (self.origin_x, self.origin_y))

    def params(self) -> TerrainParams:
        return TerrainParams(self.grade, self.rise, self.run, self.platform_height, self.platform_length,
                             self.ditch_width, self.ditch_depth, self.amplitude, self.start, self.repeat)


@dataclass(frozen=True)
class MappingConfig:
    """Depth sensor model plus the estimated map grid."""

    alpha_d: float = 0.002
    max_range: float = 3.0
    fov: float = 2.0
    rays_per_scan: int = 300
    sensor_height: float = 0.5
    min_ground_range: float = 0.2
    pose_noise: float = 0.0
    width_cells: int = 100
    height_cells: int = 100
    resolution: float = 0.1
    origin_x: float = 0.0
    origin_y: float = -5.0
    prior_height: float = 0.0
    prior_var: float = 1.0
    scan_every: int = 5

    def __post_init__(self):
        self.sensor()
        self.geometry()
        if not self.prior_var > 0:
            raise ConfigError("mapping prior_var must be > 0")
        if self.scan_every < 1:
            raise ConfigError("mapping scan_every must be >= 1")

    def sensor(self) -> SensorModel:
        return SensorModel(self.alpha_d, self.max_range, self.fov, self.rays_per_scan, self.sensor_height,
                           self.min_ground_range, self.pose_noise)

    def geometry(self) -> GridGeometry:
        return GridGeometry(self.width_cells, self.height_cells, self.resolution,
                            (self.origin_x, self.origin_y))


@dataclass(frozen=True)
class StageConfig:
    stage: str = "teacher"
    num_envs: int = 64
    horizon: int = 64
    updates: int = 500
    seed: int = 1
    kinds: tuple = ALL_KINDS
    flat_start: float = 0.8  # share of Flat terrain at update 0
    curriculum_updates: int = 200  # updates until the mix is uniform over ``kinds``
    map_pipeline: bool = False  # student scans come from the fused elevation map
    checkpoint_every: int = 100
    init: str = "teacher"  # student initialization: teacher or random
    teacher_value: bool = True  # student critic starts from the teacher critic when present
    privileged_critic: bool = True  # critic reads the clean observation; false gives it the actor's view

    def __post_init__(self):
        if self.stage not in ("teacher", "student"):
            raise ConfigError("stage stage must be 'teacher' or 'student'")
        if self.init not in ("teacher", "random"):
            raise ConfigError("stage init must be 'teacher' or 'random'")
        for name in ("num_envs", "horizon"):
            if getattr(self, name) < 1:
                raise ConfigError(f"stage {name} must be >= 1")
        if self.updates < 0:
            raise ConfigError("stage updates must be >= 0")
        if self.checkpoint_every < 0:
            raise ConfigError("stage checkpoint_every must be >= 0")
        if not self.kinds:
            raise ConfigError("stage kinds must not be empty")
        _check_kinds(self.kinds, "stage kinds")
        if not 0 <= self.flat_start <= 1:
            raise ConfigError("stage flat_start must be in [0, 1]")
        if self.curriculum_updates < 0:
            raise ConfigError("stage curriculum_updates must be >= 0")
        if not 0 <= self.seed < 2**63:
            raise ConfigError("stage seed must be a non-negative 63-bit integer")


@dataclass(frozen=True)
class EvalConfig:
    kinds: tuple = ("flat",)
    noise_levels: tuple = (0.0,)
    episodes: int = 20
    seeds: tuple = (0,)
    perception: str = "true"  # true: clean scan plus grid noise; map: fused elevation map
    proprio_noise: bool = False  # add the [noise] proprio groups during evaluation
    episode_len: int = 0  # 0 keeps the env episode length
    trajectory_dump: bool = False

    def __post_init__(self):
        if not self.kinds:
            raise ConfigError("eval kinds must not be empty")
        _check_kinds(self.kinds, "eval kinds")
        if not self.noise_levels or any(not s >= 0 for s in self.noise_levels):
            raise ConfigError("eval noise_levels must be a non-empty list of values >= 0")
        if self.episodes < 1:
            raise ConfigError("eval episodes must be >= 1")
        if not self.seeds:
            raise ConfigError("eval seeds must not be empty")
        if self.perception not in ("true", "map"):
            raise ConfigError("eval perception must be 'true' or 'map'")
        if self.episode_len < 0:
            raise ConfigError("eval episode_len must be >= 0")


SECTIONS = {
    "terrain": TerrainConfig,
    "env": EnvConfig,
    "rewards": RewardWeights,
    "mapping": MappingConfig,
    "net": NetConfig,
    "ppo": PPOConfig,
    "dppo": DPPOConfig,
    "stage": StageConfig,
    "noise": NoiseSpec,
    "eval": EvalConfig,
}


@dataclass(frozen=True)
class RunConfig:
    terrain: TerrainConfig = field(default_factory=TerrainConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    rewards: RewardWeights = field(default_factory=RewardWeights)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    net: NetConfig = field(default_factory=NetConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    dppo: DPPOConfig = field(default_factory=DPPOConfig)
    stage: StageConfig = field(default_factory=StageConfig)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def with_section(self, name: str, **kw) -> "RunConfig":
        return replace(self, **{name: replace(getattr(self, name), **kw)})


def _default(f):
    if f.default is not MISSING:
        return f.default
    return f.default_factory()


def _parse_scalar(text: str, proto, where: str):
    t = text.strip()
    if isinstance(proto, bool):
        low = t.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {t!r}")
    if isinstance(proto, int):
        try:
            return int(t)
        except ValueError:
            raise ConfigError(f"{where}: expected an integer, got {t!r}") from None
    if isinstance(proto, float):
        try:
            return float(t)
        except ValueError:
            raise ConfigError(f"{where}: expected a number, got {t!r}") from None
    return t


def _parse_value(text: str, proto, where: str):
    if isinstance(proto, tuple):
        items = [s for s in (p.strip() for p in text.split(",")) if s]
        elem = proto[0] if proto else 0.0
        return tuple(_parse_scalar(s, elem, where) for s in items)
    return _parse_scalar(text, proto, where)


def _format_scalar(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(_format_scalar(x) for x in v)
    return _format_scalar(v)


def _build_section(name: str, items: dict):
    cls = SECTIONS[name]
    known = {f.name: f for f in fields(cls)}
    kw = {}
    for key, text in items.items():
        if key not in known:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        kw[key] = _parse_value(text, _default(known[key]), f"[{name}] {key}")
    try:
        return cls(**kw)
    except ConfigError as exc:
        raise ConfigError(f"[{name}] {exc}") from None


def loads(text: str) -> RunConfig:
    """Parse config text. Every section is validated before returning."""
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",),
                                   inline_comment_prefixes=("#",), strict=True)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    if cp.defaults():
        raise ConfigError("keys outside a section are not allowed")
    parts = {}
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
        parts[sec] = _build_section(sec, dict(cp.items(sec)))
    return RunConfig(**parts)


def load(path) -> RunConfig:
    with open(path, encoding="utf-8") as f:
        return loads(f.read())


def dumps(cfg: RunConfig) -> str:
    out = []
    for name in SECTIONS:
        section = getattr(cfg, name)
        out.append(f"[{name}]")
        for f in fields(section):
            out.append(f"{f.name} = {_format_value(getattr(section, f.name))}")
        out.append("")
    return "\n".join(out)


def content_hash(text: str) -> str:
    """Git-style blob hash of the config text."""
    data = text.encode("utf-8")
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
