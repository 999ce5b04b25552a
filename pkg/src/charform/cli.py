"""Command-line front end: ``charform {solve,closure,caustics} --config run.yaml``.

Exit codes: 0 success, 2 configuration error, 3 solver error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from charform import charsolve, diagnose
from charform.config import ConfigError, RunConfig, load_config
from charform.expr import ExpressionError
from charform.forms import FormError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3


def _clean(obj):
    """JSON-safe copy: NaN/inf become null, tuples become lists."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if hasattr(obj, "item"):
        return _clean(obj.item())
    return obj


def write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(_clean(payload), indent=2, sort_keys=True) + "\n")


def _fan_name(fans, fan) -> str:
    return "fan.csv" if len(fans) == 1 else f"fan_branch{fan.branch}.csv"


def _caustic_groups(fan) -> list[dict]:
    if fan.n_rays < 3:
        return []
    groups = charsolve.group_caustics(charsolve.detect_caustics(fan), fan.h)
    for g in groups:
        g["branch"] = fan.branch
        if fan.canonical:
            g["t_star"] = g["s_star"]
    return groups


def _solve(cfg: RunConfig, threads: int):
    prob = cfg.pde_problem()
    return prob, charsolve.solve(prob, threads=threads)


def _outdir(cfg: RunConfig, override: str | None) -> Path:
    out = Path(override or cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_solve(cfg: RunConfig, out: Path, threads: int = 1) -> int:
    prob, fans = _solve(cfg, threads)
    branches, caustics = [], []
    for fan in fans:
        name = _fan_name(fans, fan)
        if "csv" in cfg.output.formats:
            fan.write_csv(out / name)
        groups = _caustic_groups(fan) if cfg.solver.caustics else []
        caustics.extend(groups)
        branches.append({
            "branch": fan.branch,
            "file": name,
            "rays": fan.n_rays,
            "checkpoints": int(fan.s.size),
            "max_F_residual": fan.max_residual(),
            "truncated_rays": [int(i) for i in (fan.truncated_at >= 0).nonzero()[0]],
            "caustics": groups,
        })
    summary = {
        "command": "solve",
        "dimension": prob.n,
        "hamiltonian": prob.hj_mode,
        "branch_count": len(fans),
        "branches": branches,
        "caustics": caustics,
        "max_F_residual": max(b["max_F_residual"] for b in branches),
    }
    if "json" in cfg.output.formats:
        write_json(out / "summary.json", summary)
    return EXIT_OK


def cmd_closure(cfg: RunConfig, out: Path, threads: int = 1) -> int:
    caustics = []
    if cfg.diagnose.field_file is not None:
        field = diagnose.ReconstructedField.from_grid_file(cfg.diagnose.field_file)
    else:
        _, fans = _solve(cfg, threads)
        if len(fans) != 1:
            raise ConfigError(f"{len(fans)} momentum branches; set initial.branch to pick one for closure")
        fan = fans[0]
        caustics = _caustic_groups(fan) if cfg.solver.caustics else []
        field = diagnose.reconstruct_field(fan, cfg.grid())
    report = diagnose.closure_report(field, cfg.diagnose.threshold, caustics)
    if "csv" in cfg.output.formats:
        field.write(out / "field.csv")
    write_json(out / "closure.json", report.to_dict())
    return EXIT_OK


def cmd_caustics(cfg: RunConfig, out: Path, threads: int = 1) -> int:
    _, fans = _solve(cfg, threads)
    caustics = []
    for fan in fans:
        if fan.n_rays < 3:
            raise ConfigError("caustic detection needs at least 3 rays")
        caustics.extend(_caustic_groups(fan))
        name = "jacobian.csv" if len(fans) == 1 else f"jacobian_branch{fan.branch}.csv"
        fan.write_jacobian_csv(out / name)
    write_json(out / "caustics.json", {"caustics": caustics})
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "closure": cmd_closure, "caustics": cmd_caustics}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="charform", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--out", help="output directory (overrides output.directory)")
        p.add_argument("--threads", type=int, default=1, help="worker threads for ray integration")
        p.add_argument("--dump-config", action="store_true", help="print the normalized config and exit")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.dump_config:
            sys.stdout.write(cfg.dump())
            return EXIT_OK
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        out = _outdir(cfg, args.out)
        return COMMANDS[args.command](cfg, out, threads=args.threads)
    except (ConfigError, charsolve.ProblemError, ExpressionError, FormError) as exc:
        print(f"charform: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (charsolve.SolverError, ValueError) as exc:
        print(f"charform: solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
