"""Bounds, beta sweeps and log-log rate fitting."""
from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import asymptotics as asy
from .electrolyte import Electrolyte
from .errors import BadParameter, InsufficientPoints, MeshMismatch, PBCellError, TooFewNodesInLayer
from .fem import NORM_NAMES, Field, discretize, norms
from .geometry import CellMesh, SurfaceData, surface_integral
from .solver import SolverOptions, solve, solve_auxiliary_U

log = logging.getLogger(__name__)

ERROR_FLOOR = 1e-14
BOUND_SLACK = 1e-8
SLOPE_MARGIN = 0.15
PLATEAU_FRACTION = 0.25
BETA_RANGE = (1e-6, 1e8)

APPROXIMANTS = ("layer", "small0", "small1", "zero-mean0", "zero-mean1", "dirichlet-small", "zero", "full")


# --------------------------------------------------------------------------
# L-infinity envelopes


@dataclass(eq=False)
class BoundEnvelope:
    lower: Field
    upper: Field
    slack: float = BOUND_SLACK


@dataclass
class BoundsReport:
    violations: list = field(default_factory=list)  # (dof, value, bound, "lower" | "upper")
    max_excess: float = 0.0

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {"passed": self.passed, "count": len(self.violations), "max_excess": self.max_excess,
                "violations": [list(v) for v in self.violations[:100]]}


def _log_term(sigma_bar, beta, zk, nk, others):
    return math.log(max(1.0, sigma_bar / (beta * zk * nk) - others / (zk * nk)))


def linf_envelope(mesh: CellMesh, e: Electrolyte, data: SurfaceData, beta: float,
                  U: Optional[Field] = None, slack: float = BOUND_SLACK) -> BoundEnvelope:
    """Nodewise a-priori bounds on the potential for surface-charge data."""
    if data.sigma is None:
        raise BadParameter("the envelope needs sigma data")
    U = U if U is not None else solve_auxiliary_U(mesh, data)
    sigma_bar = surface_integral(mesh, data) / discretize(mesh).volume
    z, n = e.valences, e.concentrations
    plus = float(np.sum(z[e.positive] * n[e.positive]))
    minus = float(np.sum(z[e.negative] * n[e.negative]))
    up = -_log_term(sigma_bar, beta, z[0], n[0], plus) / z[0]
    down = -_log_term(sigma_bar, beta, z[-1], n[-1], minus) / z[-1]
    u = U.values
    return BoundEnvelope(Field(mesh, u - u.max() + down), Field(mesh, u - u.min() + up), slack)


def small_beta_envelope(mesh: CellMesh, e: Electrolyte, data: SurfaceData,
                        U: Optional[Field] = None, slack: float = BOUND_SLACK) -> BoundEnvelope:
    """Beta-uniform bounds on ``Psi - log(beta)/z_1`` for negative total charge."""
    U = U if U is not None else solve_auxiliary_U(mesh, data)
    ratio = surface_integral(mesh, data) / discretize(mesh).volume / (e.valences[0] * e.concentrations[0])
    if ratio <= 0:
        raise BadParameter("the small-beta envelope needs a negative total surface charge")
    z1 = e.valences[0]
    u = U.values
    upper = u - u.min() - math.log(max(1.0, ratio)) / z1
    lower = u - u.max() - math.log(min(1.0, ratio)) / z1
    return BoundEnvelope(Field(mesh, lower), Field(mesh, upper), slack)


def check_bounds(psi: Field, env: BoundEnvelope) -> BoundsReport:
    if psi.mesh is not env.lower.mesh or psi.mesh is not env.upper.mesh:
        raise MeshMismatch("field and envelope live on different meshes")
    v = psi.values
    lo = env.lower.values - v
    hi = v - env.upper.values
    report = BoundsReport(max_excess=float(max(np.max(lo), np.max(hi), 0.0)))
    for i in np.flatnonzero(lo > env.slack):
        report.violations.append((int(i), float(v[i]), float(env.lower.values[i]), "lower"))
    for i in np.flatnonzero(hi > env.slack):
        report.violations.append((int(i), float(v[i]), float(env.upper.values[i]), "upper"))
    report.violations.sort()
    return report


# --------------------------------------------------------------------------
# rate fitting


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r2: float
    n_points: int
    excluded: tuple = ()


def fit_rate(points: Sequence[tuple]) -> tuple[float, float, float]:
    """OLS of log(error) on log(beta); errors below 1e-14 are dropped."""
    pts = [(b, err) for b, err in points if err is not None and math.isfinite(err) and err >= ERROR_FLOOR]
    if len(pts) < 3:
        raise InsufficientPoints(f"need 3 points above the error floor, have {len(pts)}")
    x = np.log([p[0] for p in pts])
    y = np.log([p[1] for p in pts])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss if ss > 0 else 1.0
    return float(slope), float(intercept), r2


def plateau_mask(betas: Sequence[float], errors: Sequence[float], theory: Optional[float]) -> np.ndarray:
    """True for points kept after trimming a discretization plateau.

    Starting from the asymptotic end of the grid (large beta for decaying
    errors, small beta for growing ones), trailing points are dropped while the
    error fails to improve or improves at a local rate below a quarter of the
    theoretical one.
    """
    b = np.asarray(betas, dtype=float)
    err = np.asarray(errors, dtype=float)
    keep = np.isfinite(err) & (err >= ERROR_FLOOR)
    if not theory:
        return keep
    order = np.argsort(b)
    if theory > 0:
        order = order[::-1]  # asymptotic end is small beta
    idx = [i for i in order if keep[i]]
    # idx runs from the pre-asymptotic end to the asymptotic end
    while len(idx) >= 2:
        last, prev = idx[-1], idx[-2]
        local = (math.log(err[last]) - math.log(err[prev])) / (math.log(b[last]) - math.log(b[prev]))
        improving = err[last] < err[prev]
        if improving and abs(local) >= PLATEAU_FRACTION * abs(theory):
            break
        keep[last] = False
        idx.pop()
    return keep


def fit_with_exclusion(betas, errors, theory: Optional[float]) -> RateFit:
    keep = plateau_mask(betas, errors, theory)
    dropped = tuple(float(b) for b, k, e in zip(betas, keep, errors)
                    if not k and math.isfinite(e) and e >= ERROR_FLOOR)
    if dropped:
        log.warning("plateau points excluded from the fit at beta = %s", ", ".join(f"{b:g}" for b in dropped))
    pts = [(b, e) for b, e, k in zip(betas, errors, keep) if k]
    slope, intercept, r2 = fit_rate(pts)
    return RateFit(slope, intercept, r2, len(pts), dropped)


def passes_theory(slope: float, theory: float, margin: float = SLOPE_MARGIN) -> bool:
    """Default one-sided check: at least as fast as theory, up to ``margin``."""
    if theory < 0:
        return slope <= theory + margin
    if theory > 0:
        return slope >= theory - margin
    return slope <= margin


# --------------------------------------------------------------------------
# theoretical exponents

_LAYER_NEUMANN = {"L1": -1.5, "L2": -1.25, "H1": -0.75, "Linf": -1.0}
_LAYER_DIRICHLET = {"L1": -1.0, "L2": -0.5, "H1": 0.0, "Linf": -0.5}
_NORM_NEUMANN = {"L1": -1.0, "L2": -0.75, "H1": -0.25, "Linf": -0.5}
_NORM_DIRICHLET = {"L1": -0.5, "L2": -0.25, "H1": 0.25, "Linf": 0.0}


def theory_slope(approximant: str, norm: str, neumann: bool, case: Optional[asy.SmallBetaCase] = None):
    """Expected exponent of the error in beta, or None when there is none."""
    if approximant == "layer":
        return (_LAYER_NEUMANN if neumann else _LAYER_DIRICHLET)[norm]
    if approximant == "zero":
        return (_NORM_NEUMANN if neumann else _NORM_DIRICHLET)[norm]
    if approximant in ("small0", "small1"):
        if case is None or not case.signed:
            return None
        return case.exponents()[0 if approximant == "small0" else 1]
    if approximant == "zero-mean0":
        return 1.0
    if approximant == "zero-mean1":
        return 2.0
    if approximant == "dirichlet-small":
        return 2.0
    return None


# --------------------------------------------------------------------------
# sweeps


@dataclass(eq=False)
class SweepSpec:
    mesh: CellMesh
    electrolyte: Electrolyte
    data: SurfaceData
    betas: Sequence[float]
    approximants: Sequence[str] = ("layer",)
    opts: SolverOptions = SolverOptions()
    threads: int = 1
    check_envelope: bool = True


@dataclass
class SweepResult:
    beta_values: list
    approximants: list
    errors: dict  # (approximant, norm) -> list over beta (nan where the solve failed)
    fits: dict = field(default_factory=dict)  # (approximant, norm) -> RateFit
    theory: dict = field(default_factory=dict)  # (approximant, norm) -> float or None
    failures: dict = field(default_factory=dict)  # beta -> message
    diagnostics: list = field(default_factory=list)  # per beta: balance, bounds, iterations

    def points(self, approximant: str, norm: str):
        return list(zip(self.beta_values, self.errors[(approximant, norm)]))


class _Approximants:
    """Builds approximant fields; beta-independent pieces are computed once."""

    def __init__(self, spec: SweepSpec):
        self.spec = spec
        self.neumann = spec.data.is_neumann
        self.case = asy.classify_small_beta(spec.mesh, spec.data, spec.electrolyte) if self.neumann else None
        self._cache = {}

    def _once(self, key, make):
        if key not in self._cache:
            self._cache[key] = make()
        return self._cache[key]

    def _need(self, neumann: bool, name: str):
        if neumann != self.neumann:
            kind = "surface-charge" if neumann else "wall-potential"
            raise BadParameter(f"approximant {name!r} needs {kind} boundary data")

    def prepare(self, names):
        for name in names:
            if name not in APPROXIMANTS:
                raise BadParameter(f"unknown approximant {name!r}")
            if name in ("small0", "small1", "zero-mean0", "zero-mean1"):
                self._need(True, name)
                signed = name.startswith("small")
                if signed != self.case.signed:
                    raise BadParameter(f"approximant {name!r} does not apply to the {self.case.tag} case")
            if name == "dirichlet-small":
                self._need(False, name)
            if name not in ("full", "layer", "zero"):
                self.field(name, 1.0, solved=None)  # solve the beta-independent terms up front

    def field(self, name: str, beta: float, solved: Optional[Field]) -> Field:
        s = self.spec
        mesh, e, data, opts = s.mesh, s.electrolyte, s.data, s.opts
        if name == "full":
            return solved
        if name == "zero":
            return Field.zeros(mesh)
        if name == "layer":
            make = asy.neumann_layer_field if self.neumann else asy.dirichlet_layer_field
            return make(mesh, e, data, beta)
        if name in ("small0", "small1"):
            phi0 = self._once("phi0", lambda: asy.solve_phi0(mesh, e, data, self.case, opts))
            phi1 = None
            if name == "small1":
                phi1 = self._once("phi1", lambda: asy.solve_phi1(mesh, e, phi0, self.case, opts))
            return asy.small_beta_approximant(self.case, phi0, phi1, beta)
        if name in ("zero-mean0", "zero-mean1"):
            psi0, psi1 = self._once("zm", lambda: asy.solve_zero_mean_limit(mesh, e, data, opts))
            return asy.small_beta_approximant(self.case, psi0, psi1 if name == "zero-mean1" else None, beta)
        if name == "dirichlet-small":
            base, psi1 = self._once("ds", lambda: asy.dirichlet_small_beta_terms(mesh, e, data, opts))
            return base + beta * psi1
        raise BadParameter(f"unknown approximant {name!r}")


def _validate_betas(betas):
    b = [float(x) for x in betas]
    if not b:
        raise BadParameter("the beta grid is empty")
    lo, hi = BETA_RANGE
    for x in b:
        if not (lo <= x <= hi):
            raise BadParameter(f"beta {x:g} outside the supported range [{lo:g}, {hi:g}]")
    d = np.diff(b)
    if len(b) > 1 and not (np.all(d > 0) or np.all(d < 0)):
        raise BadParameter("the beta grid must be strictly monotone")
    return b


def sweep(spec: SweepSpec, on_solution: Optional[Callable] = None) -> SweepResult:
    """Full solve and approximation errors for every beta of the grid.

    Each beta is solved independently (continuation from beta = 1 where
    needed), so results do not depend on the thread count. Solver failures are
    recorded per beta without aborting the sweep.
    """
    betas = _validate_betas(spec.betas)
    names = list(dict.fromkeys(spec.approximants))
    approx = _Approximants(spec)
    approx.prepare(names)
    U = solve_auxiliary_U(spec.mesh, spec.data, spec.opts) if spec.data.is_neumann and spec.check_envelope else None

    def work(beta):
        try:
            psi, report = solve(spec.mesh, spec.electrolyte, spec.data, beta, spec.opts)
        except PBCellError as exc:
            return beta, None, None, f"{type(exc).__name__}: {exc}"
        return beta, psi, report, None

    if spec.threads > 1:
        with ThreadPoolExecutor(max_workers=spec.threads) as pool:
            outcomes = list(pool.map(work, betas))
    else:
        outcomes = [work(b) for b in betas]

    errors = {(a, nm): [] for a in names for nm in NORM_NAMES}
    result = SweepResult(betas, names, errors)
    for beta, psi, report, failure in outcomes:
        diag = {"beta": beta}
        if failure is not None:
            result.failures[beta] = failure
            log.warning("solve failed at beta = %g: %s", beta, failure)
            for key in errors:
                errors[key].append(math.nan)
            diag["failure"] = failure
            result.diagnostics.append(diag)
            continue
        diag.update(iterations=report.iterations, final_residual=report.final_residual)
        if spec.data.is_neumann:
            diag["balance_residual"] = report.balance_residual
            if U is not None:
                bounds = check_bounds(psi, linf_envelope(spec.mesh, spec.electrolyte, spec.data, beta, U))
                report.bound_violations = len(bounds.violations)
                diag["bound_violations"] = len(bounds.violations)
                diag["bound_max_excess"] = bounds.max_excess
        result.diagnostics.append(diag)
        if on_solution is not None:
            on_solution(beta, psi, report)
        for a in names:
            values = norms(psi - approx.field(a, beta, psi))
            for nm, v in zip(NORM_NAMES, values):
                errors[(a, nm)].append(float(v))

    for a in names:
        for nm in NORM_NAMES:
            th = theory_slope(a, nm, spec.data.is_neumann, approx.case)
            result.theory[(a, nm)] = th
            try:
                result.fits[(a, nm)] = fit_with_exclusion(betas, errors[(a, nm)], th)
            except InsufficientPoints:
                pass
    return result


# --------------------------------------------------------------------------
# pointwise decay


def decay_fit(psi: Field, mesh: CellMesh, beta: float) -> float:
    """Exponential rate rho with |Psi| ~ exp(-rho d) inside the wall layer."""
    disc = discretize(mesh)
    v = np.abs(psi.values)
    d = disc.distance
    wall = float(np.max(v[disc.surface_dofs])) if disc.surface_dofs.size else 0.0
    sel = (v >= 1e-6 * wall) & (v <= 0.5 * wall) & (v > 0)
    if wall == 0.0 or np.count_nonzero(sel) < 3:
        raise TooFewNodesInLayer(f"only {int(np.count_nonzero(sel)) if wall else 0} nodes inside the layer window")
    slope, _ = np.polyfit(d[sel], np.log(v[sel]), 1)
    return float(-slope)


# --------------------------------------------------------------------------
# CSV output


def sweep_csv(result: SweepResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["beta", "approximant", "norm", "error"])
    for i, beta in enumerate(result.beta_values):
        for a in result.approximants:
            for nm in NORM_NAMES:
                w.writerow([f"{beta:.17g}", a, nm, f"{result.errors[(a, nm)][i]:.17g}"])
    return buf.getvalue()


def rates_csv(result: SweepResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["approximant", "norm", "slope", "intercept", "r2", "theory_slope", "n_points"])
    for a in result.approximants:
        for nm in NORM_NAMES:
            fit = result.fits.get((a, nm))
            if fit is None:
                continue
            th = result.theory.get((a, nm))
            w.writerow([a, nm, f"{fit.slope:.17g}", f"{fit.intercept:.17g}", f"{fit.r2:.17g}",
                        "" if th is None else f"{th:.17g}", fit.n_points])
    return buf.getvalue()

