"""Run configuration: a YAML file of nested blocks.

Example::

    problem:
      equation: p1 + p2          # or  hamiltonian: p^2/2
      dimension: 2
    initial:
      surface: ["0", "r"]        # x1(r), x2(r)
      u0: sin(r)
      range: [[-1.0, 2.0]]
    solver: {h: 0.01, s_max: 1.0, rays: [201]}
    diagnose:
      grid: {lower: [0, 0], upper: [1, 2], count: [64, 64]}
      threshold: 0.01
    output: {directory: out}
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from charform.charsolve import InitialData, PdeProblem, default_aliases, parse_with_aliases
from charform.forms import Grid


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ProblemBlock:
    equation: str | None = None
    hamiltonian: str | None = None
    dimension: int = 2
    aliases: dict = field(default_factory=dict)


@dataclass(frozen=True)
class InitialBlock:
    surface: tuple = ()
    u0: str = "0"
    range: tuple = ()
    momenta: tuple | None = None
    branch: int | None = None
    bracket: tuple = (-100.0, 100.0)


@dataclass(frozen=True)
class SolverBlock:
    h: float = 0.01
    s_max: float = 1.0
    rays: tuple = (101,)
    caustics: bool = True


@dataclass(frozen=True)
class DiagnoseBlock:
    grid: dict | None = None  # {lower, upper, count}
    threshold: float = 1e-2
    field_file: str | None = None


@dataclass(frozen=True)
class OutputBlock:
    directory: str = "out"
    formats: tuple = ("csv", "json")


@dataclass(frozen=True)
class RunConfig:
    problem: ProblemBlock | None = None
    initial: InitialBlock = InitialBlock()
    solver: SolverBlock = SolverBlock()
    diagnose: DiagnoseBlock = DiagnoseBlock()
    output: OutputBlock = OutputBlock()

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    def pde_problem(self) -> PdeProblem:
        if self.problem is None:
            raise ConfigError("this command needs a 'problem' block")
        pb, ib, sb = self.problem, self.initial, self.solver
        n = pb.dimension
        hj = pb.hamiltonian is not None
        aliases = default_aliases(n, hj)
        aliases.update(pb.aliases)
        if len(sb.rays) != n - 1:
            raise ConfigError(f"solver.rays needs {n - 1} entr{'y' if n == 2 else 'ies'} (one per surface parameter)")
        if len(ib.surface) != n:
            raise ConfigError(f"initial.surface needs {n} expressions")

        def ex(text):
            return parse_with_aliases(str(text), aliases)

        init = InitialData(
            position=tuple(ex(t) for t in ib.surface),
            u0=ex(ib.u0),
            ranges=ib.range,
            samples=sb.rays,
            momenta=None if ib.momenta is None else tuple(ex(t) for t in ib.momenta),
            branch=ib.branch,
            bracket=tuple(ib.bracket),
        )
        if hj:
            return PdeProblem.from_hamiltonian(ex(pb.hamiltonian), n, init, h=sb.h, s_max=sb.s_max)
        return PdeProblem(n, ex(pb.equation), init, h=sb.h, s_max=sb.s_max)

    def grid(self) -> Grid:
        g = self.diagnose.grid
        if g is None:
            raise ConfigError("diagnose.grid is required for this command")
        return Grid.from_bounds(g["lower"], g["upper"], g["count"])


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _tuplify(obj):
    if isinstance(obj, list):
        return tuple(_tuplify(v) for v in obj)
    return obj


_BLOCKS = {
    "problem": ProblemBlock,
    "initial": InitialBlock,
    "solver": SolverBlock,
    "diagnose": DiagnoseBlock,
    "output": OutputBlock,
}


def _number(v, where: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float, str)):
        raise ConfigError(f"{where} must be a number")
    try:
        return float(v)
    except ValueError:
        raise ConfigError(f"{where} must be a number, got {v!r}") from None


def _block(cls, raw, name: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"'{name}' must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}': {sorted(unknown)}")
    values = {}
    for k, v in raw.items():
        if k in ("aliases", "grid"):
            values[k] = dict(v) if v is not None else None
        else:
            values[k] = _tuplify(v)
    return cls(**values)


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping of blocks")
    unknown = set(raw) - set(_BLOCKS)
    if unknown:
        raise ConfigError(f"unknown block(s): {sorted(unknown)}")
    blocks = {name: _block(cls, raw.get(name), name) for name, cls in _BLOCKS.items()}
    if raw.get("problem") is None:
        blocks["problem"] = None
    cfg = RunConfig(**blocks)
    validate(cfg)
    return _normalized(cfg)


def _normalized(cfg: RunConfig) -> RunConfig:
    sb = cfg.solver
    rays = sb.rays if isinstance(sb.rays, tuple) else (sb.rays,)
    solver = SolverBlock(float(sb.h), float(sb.s_max), tuple(int(r) for r in rays), bool(sb.caustics))
    ib = cfg.initial
    initial = InitialBlock(
        tuple(str(s) for s in ib.surface),
        str(ib.u0),
        tuple((float(a), float(b)) for a, b in ib.range),
        None if ib.momenta is None else tuple(str(m) for m in ib.momenta),
        None if ib.branch is None else int(ib.branch),
        (float(ib.bracket[0]), float(ib.bracket[1])),
    )
    db = cfg.diagnose
    grid = None
    if db.grid is not None:
        grid = {
            "lower": [float(v) for v in db.grid["lower"]],
            "upper": [float(v) for v in db.grid["upper"]],
            "count": [int(v) for v in db.grid["count"]],
        }
    diagnose = DiagnoseBlock(grid, float(db.threshold), db.field_file)
    out = OutputBlock(str(cfg.output.directory), tuple(str(f) for f in cfg.output.formats))
    problem = cfg.problem
    if problem is not None:
        problem = ProblemBlock(problem.equation, problem.hamiltonian, int(problem.dimension), dict(problem.aliases or {}))
    return RunConfig(problem, initial, solver, diagnose, out)


def validate(cfg: RunConfig) -> None:
    pb = cfg.problem
    if pb is not None:
        if (pb.equation is None) == (pb.hamiltonian is None):
            raise ConfigError("problem block needs exactly one of 'equation' or 'hamiltonian'")
        if isinstance(pb.dimension, bool) or not isinstance(pb.dimension, int) or pb.dimension < 2:
            raise ConfigError("problem.dimension must be an integer >= 2")
    elif cfg.diagnose.field_file is None:
        raise ConfigError("a 'problem' block is required (or diagnose.field_file for a direct field)")
    sb = cfg.solver
    if not _number(sb.h, "solver.h") > 0:
        raise ConfigError("solver.h must be > 0")
    if not _number(sb.s_max, "solver.s_max") > 0:
        raise ConfigError("solver.s_max must be > 0")
    rays = sb.rays if isinstance(sb.rays, tuple) else (sb.rays,)
    for r in rays:
        if isinstance(r, bool) or not isinstance(r, int) or r < 1:
            raise ConfigError("solver.rays must be positive integers")
    if sb.caustics and pb is not None and any(r < 3 for r in rays):
        raise ConfigError("caustic detection needs at least 3 rays per surface parameter")
    for a, b in cfg.initial.range:
        if not _number(b, "initial.range") > _number(a, "initial.range"):
            raise ConfigError("initial.range entries must satisfy lo < hi")
    g = cfg.diagnose.grid
    if g is not None:
        missing = {"lower", "upper", "count"} - set(g)
        if missing:
            raise ConfigError(f"diagnose.grid is missing {sorted(missing)}")
    if not _number(cfg.diagnose.threshold, "diagnose.threshold") > 0:
        raise ConfigError("diagnose.threshold must be > 0")


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from None
    try:
        return from_dict(raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
