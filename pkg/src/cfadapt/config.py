"""Run configuration: an INI-style file with typed ``key = value`` entries.

Example::

    [run]
    preset = cantilever
    iterations = 150

    [adapt]
    criterion = CNF
    interval = 5

Values are parsed as Python literals where possible (numbers, booleans,
tuples, ``None``) and kept as strings otherwise.
"""

from __future__ import annotations

import ast
import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_config", "config_text", "SECTIONS"]

OUTPUT_ENV = "CFADAPT_OUTPUT"
PRESETS = ("cantilever", "ubeam")


class ConfigError(ValueError):
    """Invalid configuration; ``key`` holds the dotted key path when known."""

    def __init__(self, message, key=None):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


@dataclass
class RunSection:
    preset: str = ""
    name: str = ""
    iterations: int = 200
    output: str = ""
    snapshot_every: int = 50
    seed: int | None = None


@dataclass
class GeometrySection:
    width: float = 2.0
    height: float = 1.0
    nx: int = 20
    ny: int = 10
    # U-beam: rectangle removed from the envelope (x0, y0, x1, y1)
    cutout: tuple = (0.0, 0.5, 0.5, 2.0)
    # load patch: centre and width along the loaded face (cantilever: y on x = W;
    # U-beam: x on the leg top)
    load_center: float = 0.5
    load_width: float = 0.1
    support_width: float = 0.2


@dataclass
class MeshSection:
    init_level: int = 1
    max_level: int = 4


@dataclass
class MaterialSection:
    lam: float = 2.66
    mu: float = 0.71


@dataclass
class LoadSection:
    force: float = 0.001
    load_steps: int = 1


@dataclass
class FilterSection:
    radius: float = 0.1
    boundary_coeff: float = 0.5
    beta0: float = 1.0
    beta_max: float = 16.0
    beta_interval: int = 50
    eta: float = 0.5


@dataclass
class OptimizerSection:
    volume_fraction: float = 0.5
    initial_density: float | None = None
    move: float = 0.2
    p: float = 8.0
    stress_limit: float | None = None
    epsilon: float = 0.1
    simp_q: float = 3.0
    rho_min: float = 1e-6


@dataclass
class AdaptSection:
    criterion: str = "CNF"
    c_r: float = 0.25
    c_c: float = 0.01
    interval: int = 5
    dens_bounds: tuple = (0.2, 0.8, 0.01, 0.99)
    exclude_boundary: bool = False


@dataclass
class SolverSection:
    rtol: float = 1e-9
    atol: float = 1e-12
    max_iter: int = 50
    max_bisections: int = 8


SECTIONS = {
    "run": RunSection,
    "geometry": GeometrySection,
    "mesh": MeshSection,
    "material": MaterialSection,
    "load": LoadSection,
    "filter": FilterSection,
    "optimizer": OptimizerSection,
    "adapt": AdaptSection,
    "solver": SolverSection,
}

# values that differ from the section defaults per benchmark
PRESET_DEFAULTS = {
    "cantilever": {
        "geometry": dict(width=2.0, height=1.0, nx=20, ny=10, load_center=0.5, load_width=0.1),
        "mesh": dict(init_level=1, max_level=4),
        "load": dict(force=0.001),
        "filter": dict(radius=0.1),
    },
    "ubeam": {
        "geometry": dict(width=1.0, height=2.0, nx=10, ny=20, cutout=(0.0, 0.5, 0.5, 2.0),
                         load_center=0.75, load_width=0.1, support_width=0.2),
        "mesh": dict(init_level=1, max_level=4),
        "load": dict(force=0.02),
        "filter": dict(radius=0.2),
        # large rotations of the leg crush near-void cells with a 1e-6 floor
        "optimizer": dict(rho_min=1e-3),
    },
}

REQUIRED = {"cantilever": ["run.preset"], "ubeam": ["run.preset", "optimizer.stress_limit"]}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    geometry: GeometrySection = field(default_factory=GeometrySection)
    mesh: MeshSection = field(default_factory=MeshSection)
    material: MaterialSection = field(default_factory=MaterialSection)
    load: LoadSection = field(default_factory=LoadSection)
    filter: FilterSection = field(default_factory=FilterSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    adapt: AdaptSection = field(default_factory=AdaptSection)
    solver: SolverSection = field(default_factory=SolverSection)
    defaulted: list = field(default_factory=list)

    @property
    def output_dir(self) -> Path:
        if self.run.output:
            return Path(self.run.output)
        root = Path(os.environ.get(OUTPUT_ENV, "runs"))
        return root / (self.run.name or f"{self.run.preset}_{self.adapt.criterion.lower()}")

    def as_dict(self):
        return {s: dataclasses.asdict(getattr(self, s)) for s in SECTIONS}


def _coerce(value: str):
    try:
        return ast.literal_eval(value)
    except (ValueError, SyntaxError):
        low = value.strip().lower()
        if low in ("true", "yes", "on"):
            return True
        if low in ("false", "no", "off"):
            return False
        if low in ("none", "null", ""):
            return None
        return value.strip()


def _check_type(key, value, default, annotation):
    if value is None:
        if str(annotation) == "str":
            return ""
        if "None" in str(annotation):
            return None
        raise ConfigError("value may not be None", key)
    kind = str(annotation).replace(" | None", "")
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}", key)
        return value
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", key)
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", key)
        return float(value)
    if kind == "str":
        return str(value)
    if kind == "tuple":
        if not isinstance(value, (tuple, list)) or len(value) != len(default):
            raise ConfigError(f"expected a tuple of {len(default)} numbers, got {value!r}", key)
        return tuple(float(v) for v in value)
    return value  # pragma: no cover


def parse_config(text: str, overrides: dict | None = None) -> RunConfig:
    """Parse config text; ``overrides`` maps dotted keys to already-typed values."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    raw: dict = {}
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section (known: {', '.join(SECTIONS)})", sec)
        for k, v in cp.items(sec):
            raw[f"{sec}.{k}"] = _coerce(v)
    raw.update(overrides or {})

    preset = raw.get("run.preset")
    if not preset:
        raise ConfigError(f"missing required keys: run.preset (one of {', '.join(PRESETS)}); "
                          "optimizer.stress_limit is also required for ubeam")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r} (known: {', '.join(PRESETS)})", "run.preset")
    missing = [k for k in REQUIRED[preset] if raw.get(k) is None]
    if missing:
        raise ConfigError("missing required keys: " + ", ".join(missing))

    cfg = RunConfig()
    given = set(raw)
    for sec, cls in SECTIONS.items():
        obj = getattr(cfg, sec)
        for k, v in PRESET_DEFAULTS[preset].get(sec, {}).items():
            setattr(obj, k, v)
        fields = {f.name: f for f in dataclasses.fields(cls)}
        for f in fields.values():
            key = f"{sec}.{f.name}"
            if key not in given:
                cfg.defaulted.append(key)
    for key, value in raw.items():
        sec, _, name = key.partition(".")
        if sec not in SECTIONS:
            raise ConfigError("unknown section", key)
        fields = {f.name: f for f in dataclasses.fields(SECTIONS[sec])}
        if name not in fields:
            raise ConfigError(f"unknown key (known: {', '.join(fields)})", key)
        obj = getattr(cfg, sec)
        setattr(obj, name, _check_type(key, value, getattr(obj, name), fields[name].type))
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig):
    def need(cond, key, msg):
        if not cond:
            raise ConfigError(msg, key)

    need(cfg.run.iterations >= 1, "run.iterations", "must be >= 1")
    need(cfg.run.snapshot_every >= 1, "run.snapshot_every", "must be >= 1")
    g = cfg.geometry
    need(g.width > 0 and g.height > 0, "geometry.width", "domain dimensions must be positive")
    need(g.nx >= 1 and g.ny >= 1, "geometry.nx", "base cell counts must be >= 1")
    lo, hi = g.load_center - 0.5 * g.load_width, g.load_center + 0.5 * g.load_width
    need(g.load_width > 0, "geometry.load_width", "must be positive")
    if cfg.run.preset == "ubeam":
        x0, y0, x1, y1 = g.cutout
        need(x0 == 0.0 and 0 < y0 < g.height and 0 < x1 < g.width and y1 == g.height,
             "geometry.cutout", "must span from the symmetry line (x = 0) to the top edge")
        need(x1 <= lo and hi <= g.width, "geometry.load_center", "load patch must lie on the leg top")
        need(0 < g.support_width <= g.width, "geometry.support_width", "must lie in (0, width]")
    else:
        need(0 <= lo and hi <= g.height, "geometry.load_center", "load patch must lie on the right edge")
    need(0 <= cfg.mesh.init_level <= cfg.mesh.max_level, "mesh.init_level", "need 0 <= init_level <= max_level")
    need(cfg.mesh.max_level <= 12, "mesh.max_level", "must be <= 12")
    need(cfg.material.mu > 0, "material.mu", "must be positive")
    need(cfg.material.lam + cfg.material.mu > 0, "material.lam", "lam + mu must be positive")
    need(cfg.load.force >= 0, "load.force", "must be >= 0")
    need(cfg.load.load_steps >= 1, "load.load_steps", "must be >= 1")
    f = cfg.filter
    need(f.radius > 0, "filter.radius", "must be positive")
    need(f.boundary_coeff >= 0, "filter.boundary_coeff", "must be >= 0")
    need(0 < f.beta0 <= f.beta_max, "filter.beta0", "need 0 < beta0 <= beta_max")
    need(f.beta_interval >= 1, "filter.beta_interval", "must be >= 1")
    need(0 < f.eta < 1, "filter.eta", "must lie in (0, 1)")
    o = cfg.optimizer
    need(0 < o.volume_fraction <= 1, "optimizer.volume_fraction", "must lie in (0, 1]")
    need(o.initial_density is None or 0 <= o.initial_density <= 1, "optimizer.initial_density",
         "must lie in [0, 1]")
    need(0 < o.move <= 1, "optimizer.move", "must lie in (0, 1]")
    need(o.p >= 2, "optimizer.p", "must be >= 2")
    need(o.stress_limit is None or o.stress_limit > 0, "optimizer.stress_limit", "must be positive")
    need(0 < o.epsilon <= 1, "optimizer.epsilon", "must lie in (0, 1]")
    need(o.simp_q >= 1, "optimizer.simp_q", "must be >= 1")
    need(0 < o.rho_min < 1, "optimizer.rho_min", "must lie in (0, 1)")
    a = cfg.adapt
    a.criterion = str(a.criterion).upper()
    need(a.criterion in ("CNF", "DENS", "VNM"), "adapt.criterion", "must be CNF, DENS or VNM")
    need(0 <= a.c_c < a.c_r <= 1, "adapt.c_r", "need 0 <= c_c < c_r <= 1")
    need(a.interval >= 1, "adapt.interval", "must be >= 1")
    lo, hi, void, solid = a.dens_bounds
    need(0 <= void < lo <= hi < solid <= 1, "adapt.dens_bounds", "need void < lo <= hi < solid in [0, 1]")
    s = cfg.solver
    need(s.rtol > 0 and s.atol > 0, "solver.rtol", "tolerances must be positive")
    need(s.max_iter >= 1, "solver.max_iter", "must be >= 1")


def load_config(path, overrides: dict | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text, overrides)


def config_text(cfg: RunConfig) -> str:
    """Fully resolved config in the input format (round-trips through ``parse_config``)."""
    lines = []
    for sec, values in cfg.as_dict().items():
        lines.append(f"[{sec}]")
        for k, v in values.items():
            lines.append(f"{k} = {v!r}" if not isinstance(v, str) else f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)
