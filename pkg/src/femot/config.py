"""Flat ``key = value`` run configuration.

Keys carry a section prefix::

    mesh.kind = quad              # tri | quad | file
    mesh.n = 20                   # cells per axis for generated meshes
    mesh.pattern = uniform        # triangle diagonals: uniform | alternating
    mesh.file = package:zdomain.mesh
    problem.intervals = 20
    problem.family = RTq0         # RT0 | BDM1 | RTq0
    problem.dual_order = 1
    problem.rho0 = cosine_pair end=0
    problem.rho1 = gaussian x0=0.5,0.9 s=0.1
    problem.reference = 0.4       # optional known transport distance
    reg.kind = none               # none | l2 | h1
    reg.alpha = 0.002
    solver.tau1 = 1.0
    solver.tau2 = 1.0
    solver.max_iters = 10000
    solver.stop_tol = 1e-6
    solver.backend = tensor       # tensor | direct | iterative
    solver.exact_dual = false
    solver.init = min_norm        # min_norm | interpolation
    output.dir = out
    output.every = 5              # time-node stride of density snapshots

Density values are a catalog name followed by ``key=value`` parameters;
comma-separated numbers become tuples.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .densities import CATALOG, DensitySource


# mesh files shipped with the package are named "package:<file>"
PACKAGE_PREFIX = "package:"


class ConfigError(ValueError):
    pass


def parse_density(text: str) -> DensitySource:
    parts = text.split()
    if not parts:
        raise ConfigError("empty density specification")
    kind, params = parts[0], {}
    for tok in parts[1:]:
        if "=" not in tok:
            raise ConfigError(f"density parameter {tok!r} is not key=value")
        key, val = tok.split("=", 1)
        params[key] = _parse_value(key, val)
    if kind not in CATALOG and kind not in ("pgm", "table"):
        raise ConfigError(f"unknown density {kind!r}")
    return DensitySource(kind, params)


def _parse_value(key: str, val: str):
    if key == "path":
        return val
    try:
        nums = tuple(float(v) for v in val.split(","))
    except ValueError:
        raise ConfigError(f"density parameter {key}={val!r} is not numeric") from None
    return nums if len(nums) > 1 else nums[0]


def format_density(src: DensitySource) -> str:
    out = [src.kind]
    for key in sorted(src.params):
        val = src.params[key]
        if isinstance(val, (tuple, list)):
            val = ",".join(repr(float(v)) for v in val)
        elif not isinstance(val, str):
            val = repr(float(val))
        out.append(f"{key}={val}")
    return " ".join(out)


@dataclass
class RunConfig:
    mesh_kind: str = "quad"
    mesh_n: int = 20
    mesh_pattern: str = "uniform"
    mesh_file: str | None = None
    intervals: int = 20
    family: str = "RTq0"
    dual_order: int = 1
    rho0: DensitySource = field(default_factory=lambda: DensitySource("cosine_pair", {"end": 0.0}))
    rho1: DensitySource = field(default_factory=lambda: DensitySource("cosine_pair", {"end": 1.0}))
    reference: float | None = None
    reg_kind: str = "none"
    reg_alpha: float = 0.0
    tau1: float = 1.0
    tau2: float = 1.0
    max_iters: int = 10_000
    stop_tol: float = 1e-6
    backend: str = "tensor"
    exact_dual: bool = False
    init: str = "min_norm"
    output_dir: str = "out"
    output_every: int = 0

    def validate(self) -> "RunConfig":
        if self.mesh_kind not in ("tri", "quad", "file"):
            raise ConfigError(f"mesh.kind must be tri, quad or file, got {self.mesh_kind!r}")
        if self.mesh_kind == "file" and not self.mesh_file:
            raise ConfigError("mesh.kind = file needs mesh.file")
        if self.mesh_kind != "file" and self.mesh_n < 1:
            raise ConfigError("mesh.n must be at least 1")
        if self.mesh_pattern not in ("uniform", "alternating"):
            raise ConfigError(f"unknown mesh.pattern {self.mesh_pattern!r}")
        if self.intervals < 1:
            raise ConfigError("problem.intervals must be at least 1")
        if self.family not in ("RT0", "BDM1", "RTq0"):
            raise ConfigError(f"unknown problem.family {self.family!r}")
        if self.mesh_kind == "quad" and self.family != "RTq0":
            raise ConfigError(f"{self.family} needs a triangular mesh")
        if self.mesh_kind == "tri" and self.family == "RTq0":
            raise ConfigError("RTq0 needs a quadrilateral mesh")
        if self.dual_order not in (0, 1):
            raise ConfigError("problem.dual_order must be 0 or 1")
        if self.reg_kind not in ("none", "l2", "h1"):
            raise ConfigError(f"unknown reg.kind {self.reg_kind!r}")
        if self.reg_kind != "none" and not self.reg_alpha > 0:
            raise ConfigError("reg.alpha must be positive")
        if not (self.tau1 > 0 and self.tau2 > 0):
            raise ConfigError("step sizes must be positive")
        if self.max_iters < 0 or self.stop_tol < 0:
            raise ConfigError("solver.max_iters and solver.stop_tol must be non-negative")
        if self.backend not in ("tensor", "direct", "iterative"):
            raise ConfigError(f"unknown solver.backend {self.backend!r}")
        if self.init not in ("min_norm", "interpolation"):
            raise ConfigError(f"unknown solver.init {self.init!r}")
        if self.output_every < 0:
            raise ConfigError("output.every must be non-negative")
        return self


# config key -> (attribute, type)
KEYS = {
    "mesh.kind": ("mesh_kind", str),
    "mesh.n": ("mesh_n", int),
    "mesh.pattern": ("mesh_pattern", str),
    "mesh.file": ("mesh_file", str),
    "problem.intervals": ("intervals", int),
    "problem.family": ("family", str),
    "problem.dual_order": ("dual_order", int),
    "problem.rho0": ("rho0", DensitySource),
    "problem.rho1": ("rho1", DensitySource),
    "problem.reference": ("reference", float),
    "reg.kind": ("reg_kind", str),
    "reg.alpha": ("reg_alpha", float),
    "solver.tau1": ("tau1", float),
    "solver.tau2": ("tau2", float),
    "solver.max_iters": ("max_iters", int),
    "solver.stop_tol": ("stop_tol", float),
    "solver.backend": ("backend", str),
    "solver.exact_dual": ("exact_dual", bool),
    "solver.init": ("init", str),
    "output.dir": ("output_dir", str),
    "output.every": ("output_every", int),
}


def _convert(key: str, typ, raw: str):
    try:
        if typ is DensitySource:
            return parse_density(raw)
        if typ is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ is int:
            return int(raw)
        return typ(raw)
    except ConfigError:
        raise
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {typ.__name__}") from None


def parse_config(text: str, *, base_dir: str | Path | None = None) -> RunConfig:
    """Parse config text; ``mesh.file`` and density paths are resolved against ``base_dir``."""
    values, seen = {}, set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        attr, typ = KEYS[key]
        values[attr] = _convert(key, typ, raw)
    cfg = RunConfig(**values)
    if base_dir is not None:
        cfg = _resolve_paths(cfg, Path(base_dir))
    return cfg.validate()


def _resolve_paths(cfg: RunConfig, base: Path) -> RunConfig:
    def fix(p):
        if not p or p.startswith(PACKAGE_PREFIX) or Path(p).is_absolute():
            return p
        return str(base / p)

    def fix_src(src):
        if "path" in src.params:
            return DensitySource(src.kind, {**src.params, "path": fix(src.params["path"])})
        return src

    return dataclasses.replace(cfg, mesh_file=fix(cfg.mesh_file), rho0=fix_src(cfg.rho0), rho1=fix_src(cfg.rho1))


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, base_dir=path.parent)


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for key, (attr, typ) in KEYS.items():
        val = getattr(cfg, attr)
        if val is None:
            continue
        if typ is DensitySource:
            val = format_density(val)
        elif typ is bool:
            val = "true" if val else "false"
        elif typ is float:
            val = repr(float(val))
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"
