"""``pbcell <solve|sweep|bounds|layer|mesh> --config <path> [--out <dir>] [--threads N]``.

Exit codes: 0 success, 1 usage or configuration error, 2 solver
nonconvergence, 3 a requested check failed.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import analysis as an
from . import asymptotics as asy
from .config import RunConfig, atomic_write, load_config
from .errors import ConfigError, LinearSolveFailure, NewtonStalled, Overflow, PBCellError
from .fem import norm_dict, write_field
from .geometry import write_mesh
from .solver import SolveReport, solve

log = logging.getLogger("pbcell")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_CHECK = 0, 1, 2, 3
COMMANDS = ("solve", "sweep", "bounds", "layer", "mesh")


class Run:
    """Output directory bookkeeping; the manifest is written last."""

    def __init__(self, command: str, cfg: RunConfig, out: Path, threads: int):
        self.command, self.cfg, self.out, self.threads = command, cfg, out, threads
        self.files: list = []
        self.verdicts: list = []
        self.info: dict = {}
        self.t0 = time.perf_counter()
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.out / name

    def text(self, name: str, content: str) -> None:
        atomic_write(self.path(name), content)

    def json(self, name: str, obj) -> None:
        self.text(name, json.dumps(obj, indent=2, default=_jsonable) + "\n")

    def finish(self, code: int) -> int:
        manifest = {
            "tool": "pbcell",
            "version": __version__,
            "command": self.command,
            "config_path": str(self.cfg.source),
            "config": self.cfg.echo,
            "threads": self.threads,
            "files": self.files,
            "wall_time": time.perf_counter() - self.t0,
            "verdicts": self.verdicts,
            "exit_code": code,
            **self.info,
        }
        atomic_write(self.out / "manifest.json", json.dumps(manifest, indent=2, default=_jsonable) + "\n")
        return code


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, Path):
        return str(x)
    raise TypeError(f"cannot serialise {type(x).__name__}")


def _report_text(report: SolveReport, norms: Optional[dict] = None) -> str:
    lines = [
        f"beta = {report.beta:.17g}",
        f"converged = {str(report.converged).lower()}",
        f"iterations = {report.iterations}",
        f"final_residual = {report.final_residual:.6e}",
    ]
    if not math.isnan(report.balance_residual):
        lines.append(f"balance_residual = {report.balance_residual:.6e}")
    lines.append(f"wall_time = {report.wall_time:.3f}")
    if report.ladder:
        lines.append("ladder = " + ", ".join(f"{r['beta']:g}" for r in report.ladder))
    for name, v in (norms or {}).items():
        lines.append(f"norm_{name} = {v:.17g}")
    lines += ["", "iteration energy residual"]
    lines += [f"{i} {J:.17g} {r:.6e}" for i, (J, r) in enumerate(zip(report.energies, report.residuals))]
    return "\n".join(lines) + "\n"


def _solve_one(run: Run):
    cfg = run.cfg
    cfg.require("electrolyte", "bc", "beta")
    mesh = cfg.mesh()
    data = cfg.surface_data(mesh)
    psi, report = solve(mesh, cfg.electrolyte, data, cfg.beta, cfg.opts)
    return mesh, data, psi, report


def cmd_solve(run: Run) -> int:
    _, _, psi, report = _solve_one(run)
    write_field(psi, run.path("field.pbf"))
    run.text("report.txt", _report_text(report, norm_dict(psi)))
    return EXIT_OK


def _check_verdicts(run: Run, result: an.SweepResult) -> bool:
    cfg, ok = run.cfg, True
    for check in cfg.checks:
        key = (check.approximant, check.norm)
        fit = result.fits.get(key)
        theory = result.theory.get(key)
        verdict = {"check": check.label, "slope": None, "r2": None, "theory_slope": theory}
        if key[0] not in result.approximants:
            verdict.update(passed=False, reason="approximant not in the sweep")
        elif fit is None:
            verdict.update(passed=False, reason="not enough points for a fit")
        else:
            if check.threshold is None:
                if theory is None:
                    verdict.update(passed=False, reason="no theory slope for this approximant")
                    run.verdicts.append(verdict)
                    ok = False
                    continue
                passed = an.passes_theory(fit.slope, theory)
            else:
                passed = check.holds(fit.slope)
            if cfg.r2_min is not None and fit.r2 < cfg.r2_min:
                passed = False
                verdict["reason"] = f"r2 below {cfg.r2_min:g}"
            verdict.update(slope=fit.slope, r2=fit.r2, n_points=fit.n_points,
                           excluded=list(fit.excluded), passed=passed)
        ok &= verdict["passed"]
        run.verdicts.append(verdict)
        print(f"{'PASS' if verdict['passed'] else 'FAIL'} {check.label}: slope "
              f"{'n/a' if verdict['slope'] is None else format(verdict['slope'], '.4f')}")
    return ok


def cmd_sweep(run: Run) -> int:
    cfg = run.cfg
    cfg.require("electrolyte", "bc", "beta")
    if not cfg.approximants:
        raise ConfigError("missing [sweep] block with approximants")
    mesh = cfg.mesh()
    data = cfg.surface_data(mesh)
    spec = an.SweepSpec(mesh, cfg.electrolyte, data, cfg.betas, cfg.approximants, cfg.opts, run.threads)
    result = an.sweep(spec)
    run.text("sweep.csv", an.sweep_csv(result))
    if len(cfg.betas) < 3:
        log.warning("fewer than 3 beta values: no rates can be fitted")
    run.text("rates.csv", an.rates_csv(result))
    run.json("diagnostics.json", {"failures": {f"{b:.17g}": m for b, m in result.failures.items()},
                                  "per_beta": result.diagnostics})
    run.info["failed_betas"] = len(result.failures)
    ok = _check_verdicts(run, result)
    if result.failures and len(result.failures) == len(cfg.betas):
        return EXIT_SOLVER
    return EXIT_OK if ok else EXIT_CHECK


def cmd_bounds(run: Run) -> int:
    if run.cfg.bc is not None and run.cfg.bc["type"] != "neumann":
        raise ConfigError("bounds needs [bc] type = neumann")
    mesh, data, psi, report = _solve_one(run)
    env = an.linf_envelope(mesh, run.cfg.electrolyte, data, report.beta)
    check = an.check_bounds(psi, env)
    write_field(psi, run.path("field.pbf"))
    write_field(env.lower, run.path("lower.pbf"))
    write_field(env.upper, run.path("upper.pbf"))
    run.text("report.txt", _report_text(report))
    run.json("bounds.json", {"beta": report.beta, "slack": env.slack,
                             "balance_residual": report.balance_residual, **check.to_dict()})
    run.verdicts.append({"check": "linf envelope", "passed": check.passed, "violations": len(check.violations)})
    print(f"{'PASS' if check.passed else 'FAIL'} envelope: {len(check.violations)} violation(s), "
          f"max excess {check.max_excess:.3e}")
    return EXIT_OK if check.passed else EXIT_CHECK


def cmd_layer(run: Run) -> int:
    cfg = run.cfg
    cfg.require("electrolyte")
    zetas = list(cfg.layer_zetas)
    if not zetas and cfg.bc is not None and cfg.bc["type"] == "dirichlet" and "value" in cfg.bc:
        zetas = [cfg.bc["value"]]
    if not zetas and cfg.bc is None:
        raise ConfigError("missing [layer] zeta (or a constant dirichlet [bc])")
    for k, z in enumerate(zetas):
        prof = asy.profile_for(cfg.electrolyte, z)
        name = "profile.pbl" if len(zetas) == 1 else f"profile_{k}.pbl"
        asy.write_profile(prof, run.path(name))
        print(f"profile zeta={z:g}: {len(prof.xi_grid)} points up to xi={prof.xi_grid[-1]:g}")
    if cfg.bc is not None and len(cfg.betas) == 1:
        mesh = cfg.mesh()
        data = cfg.surface_data(mesh)
        make = asy.neumann_layer_field if data.is_neumann else asy.dirichlet_layer_field
        write_field(make(mesh, cfg.electrolyte, data, cfg.beta), run.path("layer_field.pbf"))
    return EXIT_OK


def cmd_mesh(run: Run) -> int:
    mesh = run.cfg.mesh()
    print(f"nodes {mesh.n_nodes}")
    print(f"elements {mesh.n_elements}")
    print(f"surface facets {mesh.n_surface}")
    write_mesh(mesh, run.path("mesh.txt"))
    run.info["counts"] = {"nodes": mesh.n_nodes, "elements": mesh.n_elements, "surface_facets": mesh.n_surface}
    return EXIT_OK


HANDLERS = {"solve": cmd_solve, "sweep": cmd_sweep, "bounds": cmd_bounds, "layer": cmd_layer, "mesh": cmd_mesh}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pbcell", description="Poisson-Boltzmann periodic unit-cell solver")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--out", type=Path, help="output directory (default: [output] dir, else pbcell-out)")
    p.add_argument("--threads", type=int, default=1, help="parallel beta solves in a sweep")
    p.add_argument("--version", action="version", version=f"pbcell {__version__}")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s", stream=sys.stderr)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config)
    except PBCellError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or cfg.out_dir or Path("pbcell-out")
    run = Run(args.command, cfg, out, args.threads)
    try:
        code = HANDLERS[args.command](run)
    except (NewtonStalled, LinearSolveFailure, Overflow) as exc:
        print(f"error: solver did not converge: {exc}", file=sys.stderr)
        report = getattr(exc, "report", None)
        if report is not None:
            run.text("report.txt", _report_text(report))
        code = EXIT_SOLVER
    except PBCellError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        code = EXIT_CONFIG
    return run.finish(code)


if __name__ == "__main__":
    sys.exit(main())
