"""Damped Newton on the convex Poisson-Boltzmann energy, plus the linear problems.

The discrete energy is ``J(u) = 1/2 u.Au + beta m.C(u) + b.u`` with lumped mass
``m`` and surface load ``b``; its gradient ``Au + beta m Phi(u) + b`` is the
discrete equation and its Hessian ``A + beta diag(m Phi'(u))`` is SPD.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp
from scipy.optimize import brentq

from .electrolyte import Electrolyte
from .errors import BadParameter, IncompatibleRHS, NewtonStalled, Overflow
from .fem import Discretization, Field, discretize, solve_mean_constrained, solve_spd
from .geometry import CellMesh, SurfaceData

EPS = np.finfo(float).eps
LADDER_HIGH = 1e4
LADDER_LOW = 1e-4


@dataclass(frozen=True)
class SolverOptions:
    newton_tol: float = 1e-10
    max_newton: int = 50
    backtrack: float = 0.5
    armijo: float = 1e-4
    linear_tol: float = 1e-12
    continuation: Optional[tuple] = None  # explicit beta ladder; None means automatic
    ladder_factor: float = 10.0
    polish: int = 3  # extra Newton steps towards the roundoff floor once newton_tol is met

    def __post_init__(self):
        if not (self.newton_tol > 0 and self.linear_tol > 0):
            raise BadParameter("tolerances must be positive")
        if self.max_newton < 1:
            raise BadParameter("max_newton must be >= 1")
        if not (0 < self.backtrack < 1 and 0 < self.armijo < 1):
            raise BadParameter("line search constants must lie in (0, 1)")
        if self.polish < 0:
            raise BadParameter("polish must be >= 0")
        if self.ladder_factor <= 1:
            raise BadParameter("ladder_factor must exceed 1")


@dataclass
class SolveReport:
    beta: float
    iterations: int = 0
    energies: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    final_residual: float = math.inf
    balance_residual: float = math.nan
    converged: bool = False
    wall_time: float = 0.0
    ladder: list = field(default_factory=list)
    bound_violations: Optional[int] = None

    def to_dict(self) -> dict:
        return asdict(self)


def _check_beta(beta):
    if not (beta > 0 and math.isfinite(beta)):
        raise BadParameter(f"beta must be positive and finite, got {beta}")


def _energy_density(nl, u):
    # C(u) - C(0) where available keeps J free of a large constant
    if hasattr(nl, "cpotential_excess"):
        return nl.cpotential_excess(u)
    return nl.cpotential(u)


def _record(report, it, J, res):
    report.energies.append(float(J))
    report.residuals.append(res)
    report.iterations = it
    report.final_residual = res


def _newton(disc: Discretization, nl, beta: float, b: np.ndarray, u0: np.ndarray,
            free: Optional[np.ndarray], opts: SolverOptions, report: SolveReport) -> np.ndarray:
    """Minimise J over the DOFs in ``free`` (all DOFs if None), others held fixed."""
    A, m = disc.A, disc.m
    if free is None:
        free = slice(None)
        A_ff = A
    else:
        A_ff = A[free][:, free]
    u = u0.copy()

    def evaluate(v):
        Av, Av_mag = disc.apply_stiffness(v, magnitude=True)
        phi = nl.phi(v)
        g = (Av + beta * m * phi + b)[free]
        dens = beta * (m @ _energy_density(nl, v))
        terms = (0.5 * disc.dirichlet_energy(v), dens, b @ v)
        mag = (Av_mag + beta * m * np.abs(phi) + np.abs(b))[free]
        return g, phi, sum(terms), sum(abs(t) for t in terms), mag

    g, phi, J, scale, mag = evaluate(u)
    met_at, polish_left = None, opts.polish
    for it in range(opts.max_newton + 1):
        res = float(np.max(np.abs(g))) if g.size else 0.0
        floor = 4 * EPS * float(np.max(mag, initial=0.0))
        if met_at is not None and res > 0.25 * met_at:
            # polishing stopped paying off: keep the better iterate
            if res > met_at:
                u = best
            else:
                _record(report, it, J, res)
            return u
        _record(report, it, J, res)
        if res <= max(opts.newton_tol, floor):
            report.converged = True
            # residual entries scale like the local cell size, so a few quadratic
            # steps past newton_tol buy real accuracy on fine meshes
            if polish_left == 0 or res == 0.0:
                return u
            met_at, best, polish_left = res, u, polish_left - 1
        if it == opts.max_newton:
            break
        H = A_ff + sp.diags(beta * m[free] * nl.phi_prime(u[free]))
        d = solve_spd(H, -g, opts.linear_tol)
        slope = float(g @ d)
        t = 1.0
        while True:
            trial = u.copy()
            trial[free] += t * d
            try:
                g_t, phi_t, J_t, scale_t, mag_t = evaluate(trial)
            except Overflow:
                J_t = math.inf
            if J_t - J <= opts.armijo * t * slope:
                break
            # roundoff regime: the energy cannot resolve the decrease but the residual can
            if (math.isfinite(J_t) and J_t - J <= 1e3 * EPS * max(scale, scale_t)
                    and np.max(np.abs(g_t)) < res):
                break
            t *= opts.backtrack
            if t < 1e-14:
                if report.converged:
                    return u
                raise NewtonStalled(f"line search failed at iteration {it + 1} (residual {res:.3e})",
                                    field=u, report=report)
        u, g, phi, J, scale, mag = trial, g_t, phi_t, J_t, scale_t, mag_t
    raise NewtonStalled(f"no convergence in {opts.max_newton} Newton steps "
                        f"(residual {report.final_residual:.3e})", field=u, report=report)


def _rebalance(nl, beta, m, u, total_load, tol):
    """Constant c with beta m.Phi(u + c) + total_load = 0, or 0 if none is found."""

    def f(c):
        try:
            return beta * float(m @ nl.phi(u + c)) + total_load
        except Overflow:
            return math.copysign(math.inf, c)

    f0 = f(0.0)
    if abs(f0) <= tol:
        return 0.0
    step = -math.copysign(1.0, f0)
    c = step
    while f(c) * f0 > 0:
        c *= 2
        if abs(c) > 1e3:
            return 0.0
    lo, hi = sorted((0.0, c))
    try:
        return brentq(f, lo, hi, xtol=1e-15, rtol=4 * EPS, maxiter=500)
    except ValueError:
        return 0.0


def _newton_neumann(mesh, nl, data, beta, opts, initial=None, rebalance=True):
    """Shared engine for the full problem and for single-species reduced problems."""
    t0 = time.perf_counter()
    disc = discretize(mesh)
    b = disc.surface_load(data)
    report = SolveReport(beta=float(beta))
    u = np.zeros(disc.n_dof) if initial is None else np.array(initial.values, dtype=float)
    if rebalance:
        u = u + _rebalance(nl, beta, disc.m, u, float(b.sum()), opts.newton_tol)
    try:
        u = _newton(disc, nl, beta, b, u, None, opts, report)
        if rebalance:
            # at the roundoff floor the residual entries need not sum to zero;
            # a constant shift (A.1 = 0) restores the balance identity exactly
            u = u + _rebalance(nl, beta, disc.m, u, float(b.sum()), 0.0)
    finally:
        report.wall_time = time.perf_counter() - t0
    report.balance_residual = abs(beta * float(disc.m @ nl.phi(u)) + float(b.sum()))
    return Field(mesh, u), report


def solve_neumann(mesh: CellMesh, e: Electrolyte, data: SurfaceData, beta: float,
                  opts: SolverOptions = SolverOptions(), initial: Optional[Field] = None):
    """Surface-charge problem. Returns ``(field, report)``."""
    _check_beta(beta)
    if not data.is_neumann:
        raise BadParameter("solve_neumann needs sigma data")
    return _newton_neumann(mesh, e, data, beta, opts, initial)


def dirichlet_values(mesh: CellMesh, data: SurfaceData):
    """(surface DOFs, imposed values) for zeta data."""
    disc = discretize(mesh)
    nodes, vals = data.node_zeta(mesh)
    dofs = disc.node_dof[nodes]
    order = np.argsort(dofs)
    dofs, vals = dofs[order], vals[order]
    uniq, first = np.unique(dofs, return_index=True)
    return uniq, vals[first]


def solve_dirichlet(mesh: CellMesh, e: Electrolyte, data: SurfaceData, beta: float,
                    opts: SolverOptions = SolverOptions(), initial: Optional[Field] = None):
    """Potential problem: S values are fixed to zeta exactly."""
    _check_beta(beta)
    if data.is_neumann:
        raise BadParameter("solve_dirichlet needs zeta data")
    t0 = time.perf_counter()
    disc = discretize(mesh)
    fixed, vals = dirichlet_values(mesh, data)
    free = np.setdiff1d(np.arange(disc.n_dof), fixed)
    u = np.zeros(disc.n_dof) if initial is None else np.array(initial.values, dtype=float)
    u[fixed] = vals
    report = SolveReport(beta=float(beta))
    try:
        u = _newton(disc, e, beta, np.zeros(disc.n_dof), u, free, opts, report)
    finally:
        report.wall_time = time.perf_counter() - t0
    return Field(mesh, u), report


def beta_ladder(beta_target: float, factor: float = 10.0, start: float = 1.0) -> list:
    """Geometric ladder from ``start`` to ``beta_target`` (both included)."""
    _check_beta(beta_target)
    steps = math.log(beta_target / start) / math.log(factor)
    n = max(0, math.ceil(abs(steps) - 1e-9))
    if n == 0:
        return [float(beta_target)]
    ratio = factor if steps > 0 else 1 / factor
    ladder = [start * ratio**k for k in range(n)]
    return ladder + [float(beta_target)]


def continuation_solve(mesh: CellMesh, e: Electrolyte, data: SurfaceData, beta_target: float,
                       opts: SolverOptions = SolverOptions(), initial: Optional[Field] = None):
    """Solve along a beta ladder, warm-starting each rung from the previous one."""
    ladder = list(opts.continuation) if opts.continuation else beta_ladder(beta_target, opts.ladder_factor)
    if ladder[-1] != beta_target:
        ladder.append(float(beta_target))
    solve = solve_neumann if data.is_neumann else solve_dirichlet
    t0 = time.perf_counter()
    psi, report, rungs = initial, None, []
    for beta in ladder:
        psi, report = solve(mesh, e, data, beta, opts, psi)
        rungs.append({"beta": beta, "iterations": report.iterations})
    report.ladder = rungs
    report.wall_time = time.perf_counter() - t0
    return psi, report


def solve(mesh: CellMesh, e: Electrolyte, data: SurfaceData, beta: float,
          opts: SolverOptions = SolverOptions(), initial: Optional[Field] = None):
    """Dispatch on the boundary condition; use the ladder for extreme beta."""
    _check_beta(beta)
    if opts.continuation or beta > LADDER_HIGH or beta < LADDER_LOW:
        return continuation_solve(mesh, e, data, beta, opts, initial)
    direct = solve_neumann if data.is_neumann else solve_dirichlet
    try:
        return direct(mesh, e, data, beta, opts, initial)
    except NewtonStalled:
        return continuation_solve(mesh, e, data, beta, opts, initial)


# --------------------------------------------------------------------------
# linear problems


def solve_auxiliary_U(mesh: CellMesh, data: SurfaceData, opts: SolverOptions = SolverOptions()) -> Field:
    """Zero-mean U with -Laplace U = mean surface charge per volume and flux -sigma."""
    disc = discretize(mesh)
    b = disc.surface_load(data)
    rhs = b.sum() / disc.volume * disc.m - b
    return Field(mesh, solve_mean_constrained(disc.A, disc.m, rhs, 0.0, opts.linear_tol))


ZERO_FLUX = "zero-flux"


def solve_linear_reduced(mesh: CellMesh, reaction, rhs, bc: Union[str, SurfaceData] = ZERO_FLUX,
                         opts: SolverOptions = SolverOptions(), mean: float = 0.0) -> Field:
    """Solve ``(A + M diag(reaction)) x = rhs`` with the given boundary handling.

    ``rhs`` is a load vector (already integrated against the basis). ``bc`` is
    ``"zero-flux"``, Neumann ``SurfaceData`` (flux ``-sigma``) or Dirichlet
    ``SurfaceData``. With zero reaction and no Dirichlet part the solution is
    fixed by its mass-weighted ``mean``.
    """
    disc = discretize(mesh)
    r = reaction.values if isinstance(reaction, Field) else np.asarray(reaction, dtype=float)
    if r.ndim == 0:
        r = np.full(disc.n_dof, float(r))
    if r.shape != (disc.n_dof,):
        raise BadParameter(f"reaction has shape {r.shape}, expected ({disc.n_dof},)")
    if np.any(r < 0):
        raise BadParameter("reaction coefficient must be nonnegative")
    f = np.array(rhs, dtype=float)
    K = (disc.A + sp.diags(disc.m * r)).tocsr()
    if isinstance(bc, SurfaceData) and not bc.is_neumann:
        fixed, vals = dirichlet_values(mesh, bc)
        free = np.setdiff1d(np.arange(disc.n_dof), fixed)
        x = np.zeros(disc.n_dof)
        x[fixed] = vals
        Kff = K[free][:, free]
        x[free] = solve_spd(Kff, f[free] - K[free][:, fixed] @ vals, opts.linear_tol)
        return Field(mesh, x)
    if isinstance(bc, SurfaceData):
        f = f - disc.surface_load(bc)
    elif bc != ZERO_FLUX:
        raise BadParameter(f"unknown boundary handling {bc!r}")
    if np.all(r == 0):
        total = float(f.sum())
        if abs(total) > 1e-10:
            raise IncompatibleRHS(f"pure Neumann right-hand side has net load {total:.3e}")
        f = f - total * disc.m / disc.volume
        return Field(mesh, solve_mean_constrained(disc.A, disc.m, f, mean, opts.linear_tol))
    return Field(mesh, solve_spd(K, f, opts.linear_tol))
