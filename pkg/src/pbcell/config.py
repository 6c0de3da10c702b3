"""Run configuration: INI-style ``[section]`` blocks of ``key = value`` lines.

Sections: geometry, electrolyte, bc, beta, solver, sweep, checks, layer, output.
Lists are comma-separated; booleans are ``true``/``false``.
"""
from __future__ import annotations

import configparser
import operator
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .analysis import APPROXIMANTS, BETA_RANGE
from .electrolyte import Electrolyte, Species, make_electrolyte
from .errors import ConfigError, PBCellError
from .fem import NORM_NAMES
from .geometry import CellMesh, SurfaceData, build_disk_cell, build_slab, load_mesh
from .solver import SolverOptions

SECTIONS = ("geometry", "electrolyte", "bc", "beta", "solver", "sweep", "checks", "layer", "output")

_COMPARE = {"<=": operator.le, ">=": operator.ge}


@dataclass(frozen=True)
class SlopeCheck:
    """Fitted slope of ``approximant``/``norm`` compared with ``threshold``.

    ``op`` is ``<=`` or ``>=``; ``None`` threshold means the default rule
    against the theory slope.
    """

    approximant: str
    norm: str
    op: Optional[str] = None
    threshold: Optional[float] = None

    @property
    def label(self) -> str:
        rule = "theory" if self.threshold is None else f"{self.op} {self.threshold:g}"
        return f"{self.approximant}.{self.norm} {rule}"

    def holds(self, slope: float) -> bool:
        return _COMPARE[self.op](slope, self.threshold)


@dataclass(eq=False)
class RunConfig:
    source: Path
    echo: dict
    mesh_spec: dict
    electrolyte: Optional[Electrolyte]
    bc: Optional[dict]
    betas: list
    opts: SolverOptions
    approximants: list = field(default_factory=list)
    checks: list = field(default_factory=list)
    r2_min: Optional[float] = None
    layer_zetas: list = field(default_factory=list)
    out_dir: Optional[Path] = None
    _mesh: Optional[CellMesh] = None

    @property
    def beta(self) -> float:
        if len(self.betas) != 1:
            raise ConfigError("[beta] must give a single value for this command")
        return self.betas[0]

    def mesh(self) -> CellMesh:
        if self._mesh is None:
            self._mesh = _build_mesh(self.mesh_spec)
        return self._mesh

    def require(self, *names):
        for name in names:
            if name == "electrolyte" and self.electrolyte is None:
                raise ConfigError("missing [electrolyte] block")
            if name == "bc" and self.bc is None:
                raise ConfigError("missing [bc] block")
            if name == "beta" and not self.betas:
                raise ConfigError("missing [beta] block")

    def surface_data(self, mesh: Optional[CellMesh] = None) -> SurfaceData:
        self.require("bc")
        mesh = mesh or self.mesh()
        values = _surface_values(mesh, self.bc)
        if self.bc["type"] == "neumann":
            return SurfaceData.neumann(mesh, values)
        return SurfaceData.dirichlet(mesh, values)


def _floats(text: str, what: str) -> list:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"{what}: expected comma-separated numbers, got {text!r}") from None


def _get(sec, key, kind=float, default=None, required=False):
    if key not in sec:
        if required:
            raise ConfigError(f"[{sec.name}] needs '{key}'")
        return default
    raw = sec[key].strip()
    try:
        if kind is bool:
            if raw.lower() not in ("true", "false"):
                raise ValueError
            return raw.lower() == "true"
        return kind(raw)
    except ValueError:
        raise ConfigError(f"[{sec.name}] {key}: cannot read {raw!r} as {kind.__name__}") from None


def _check_keys(sec, allowed):
    extra = set(sec.keys()) - set(allowed)
    if extra:
        raise ConfigError(f"[{sec.name}] unknown key(s): {', '.join(sorted(extra))}")


def _resolve(base: Path, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else base / path


def _geometry(sec, base: Path) -> dict:
    kind = _get(sec, "kind", str, required=True)
    if kind == "slab":
        _check_keys(sec, ("kind", "width", "n_cells", "grading"))
        return dict(kind=kind, width=_get(sec, "width", float, 1.0), n_cells=_get(sec, "n_cells", int, 100),
                    grading=_get(sec, "grading", float, 1.0))
    if kind == "disk":
        _check_keys(sec, ("kind", "radius", "target_h", "layer_thickness", "layer_cells"))
        return dict(kind=kind, radius=_get(sec, "radius", float, 0.25), target_h=_get(sec, "target_h", float, 0.02),
                    layer_thickness=_get(sec, "layer_thickness", float, 0.1),
                    layer_cells=_get(sec, "layer_cells", int, 10))
    if kind == "file":
        _check_keys(sec, ("kind", "path"))
        path = _resolve(base, _get(sec, "path", str, required=True))
        if not path.is_file():
            raise ConfigError(f"[geometry] mesh file {path} does not exist")
        return dict(kind=kind, path=str(path))
    raise ConfigError(f"[geometry] kind must be slab, disk or file, got {kind!r}")


def _build_mesh(spec: dict) -> CellMesh:
    args = {k: v for k, v in spec.items() if k != "kind"}
    if spec["kind"] == "slab":
        return build_slab(**args)
    if spec["kind"] == "disk":
        return build_disk_cell(**args)
    return load_mesh(spec["path"])


def _electrolyte(sec) -> Electrolyte:
    _check_keys(sec, ("valences", "concentrations"))
    z = _floats(_get(sec, "valences", str, required=True), "[electrolyte] valences")
    n = _floats(_get(sec, "concentrations", str, required=True), "[electrolyte] concentrations")
    if len(z) != len(n):
        raise ConfigError("[electrolyte] valences and concentrations differ in length")
    if any(v != int(v) for v in z):
        raise ConfigError("[electrolyte] valences must be integers")
    return make_electrolyte([Species(int(a), b) for a, b in zip(z, n)])


def _bc(sec, base: Path) -> dict:
    _check_keys(sec, ("type", "value", "walls", "table"))
    kind = _get(sec, "type", str, required=True)
    if kind not in ("neumann", "dirichlet"):
        raise ConfigError(f"[bc] type must be neumann or dirichlet, got {kind!r}")
    given = [k for k in ("value", "walls", "table") if k in sec]
    if len(given) != 1:
        raise ConfigError("[bc] needs exactly one of value, walls, table")
    spec = dict(type=kind)
    if "value" in sec:
        spec["value"] = _get(sec, "value", float)
    elif "walls" in sec:
        spec["walls"] = _floats(sec["walls"], "[bc] walls")
    else:
        path = _resolve(base, sec["table"].strip())
        if not path.is_file():
            raise ConfigError(f"[bc] table file {path} does not exist")
        spec["table"] = str(path)
    return spec


def read_table(path) -> np.ndarray:
    """One value per surface facet, one per line; '#' starts a comment."""
    values = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            try:
                values.append(float(text))
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: cannot parse {text!r}") from None
    return np.array(values)


def _surface_values(mesh: CellMesh, spec: dict):
    if "value" in spec:
        return spec["value"]
    if "walls" in spec:
        if mesh.kind != "slab" or len(spec["walls"]) != 2:
            raise ConfigError("[bc] walls takes two values (left, right) and needs a slab")
        return np.array(spec["walls"])
    values = read_table(spec["table"])
    if len(values) != mesh.n_surface:
        raise ConfigError(f"[bc] table has {len(values)} values, mesh has {mesh.n_surface} surface facets")
    return values


def _betas(sec) -> list:
    _check_keys(sec, ("value", "grid", "log10_start", "log10_stop", "log10_step"))
    if "value" in sec:
        betas = [_get(sec, "value", float)]
    elif "grid" in sec:
        betas = _floats(sec["grid"], "[beta] grid")
    elif "log10_start" in sec:
        a = _get(sec, "log10_start", float)
        b = _get(sec, "log10_stop", float, required=True)
        step = _get(sec, "log10_step", float, 0.5)
        if step == 0 or (b - a) / step < 0:
            raise ConfigError("[beta] log10_step must move from log10_start towards log10_stop")
        count = int(round((b - a) / step)) + 1
        betas = [10.0 ** (a + k * step) for k in range(count)]
    else:
        raise ConfigError("[beta] needs value, grid or log10_start/log10_stop")
    lo, hi = BETA_RANGE
    for b in betas:
        if not lo <= b <= hi:
            raise ConfigError(f"[beta] {b:g} outside [{lo:g}, {hi:g}]")
    return betas


def _solver(sec) -> SolverOptions:
    fields = dict(newton_tol=float, max_newton=int, backtrack=float, armijo=float, linear_tol=float,
                  ladder_factor=float, polish=int)
    _check_keys(sec, tuple(fields) + ("continuation",))
    kw = {k: _get(sec, k, t) for k, t in fields.items() if k in sec}
    if "continuation" in sec:
        kw["continuation"] = tuple(_floats(sec["continuation"], "[solver] continuation"))
    try:
        return SolverOptions(**kw)
    except PBCellError as exc:
        raise ConfigError(f"[solver] {exc}") from None


def _checks(sec) -> tuple[list, Optional[float]]:
    checks, r2 = [], None
    for key, raw in sec.items():
        if key == "r2_min":
            r2 = _get(sec, key, float)
            continue
        approx, _, norm = key.partition(".")
        if approx not in APPROXIMANTS or norm not in NORM_NAMES:
            raise ConfigError(f"[checks] key must be <approximant>.<norm>, got {key!r}")
        text = raw.strip()
        if text == "theory":
            checks.append(SlopeCheck(approx, norm))
            continue
        op, value = text[:2], text[2:]
        if op not in _COMPARE:
            raise ConfigError(f"[checks] {key}: expected 'theory', '<= x' or '>= x', got {text!r}")
        try:
            checks.append(SlopeCheck(approx, norm, op, float(value)))
        except ValueError:
            raise ConfigError(f"[checks] {key}: bad threshold {value!r}") from None
    return checks, r2


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    parser = configparser.ConfigParser(delimiters=("=",), comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    unknown = set(parser.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    if "geometry" not in parser:
        raise ConfigError("missing [geometry] block")
    base = path.parent
    sec = parser.__getitem__
    has = parser.has_section

    approximants = []
    if has("sweep"):
        _check_keys(sec("sweep"), ("approximants",))
        approximants = [a.strip() for a in sec("sweep").get("approximants", "").split(",") if a.strip()]
        bad = [a for a in approximants if a not in APPROXIMANTS]
        if bad:
            raise ConfigError(f"[sweep] unknown approximant(s): {', '.join(bad)}")
    checks, r2 = _checks(sec("checks")) if has("checks") else ([], None)
    zetas = []
    if has("layer"):
        _check_keys(sec("layer"), ("zeta",))
        zetas = _floats(sec("layer").get("zeta", ""), "[layer] zeta")
    out = None
    if has("output"):
        _check_keys(sec("output"), ("dir",))
        if "dir" in sec("output"):
            out = _resolve(base, sec("output")["dir"].strip())
    try:
        electrolyte = _electrolyte(sec("electrolyte")) if has("electrolyte") else None
    except PBCellError as exc:
        raise ConfigError(f"[electrolyte] {exc}") from None
    return RunConfig(
        source=path,
        echo={s: dict(parser[s]) for s in parser.sections()},
        mesh_spec=_geometry(sec("geometry"), base),
        electrolyte=electrolyte,
        bc=_bc(sec("bc"), base) if has("bc") else None,
        betas=_betas(sec("beta")) if has("beta") else [],
        opts=_solver(sec("solver")) if has("solver") else SolverOptions(),
        approximants=approximants,
        checks=checks,
        r2_min=r2,
        layer_zetas=zetas,
        out_dir=out,
    )


def atomic_write(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)
