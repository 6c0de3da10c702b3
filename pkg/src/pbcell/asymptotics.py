"""Asymptotic approximations of the potential for small and large beta.

Small beta (Neumann data): the sign of the total surface charge decides the
reduced problem. A nonzero total charge makes the potential blow up like
``log(beta) / z_k`` for a dominant species ``k``; zero total charge gives a
regular expansion ``Psi0 + beta Psi1``. Large beta: the potential is a thin
layer at S, exponential for surface charge and governed by a first-order ODE
for an imposed wall potential.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicHermiteSpline
from scipy.optimize import brentq

from .electrolyte import Electrolyte
from .errors import BadParameter, IncompatibleRHS, NonNeutral, ParseError, PBCellError, WrongSign
from .fem import Field, discretize
from .geometry import CellMesh, SurfaceData, surface_integral
from .solver import SolverOptions, _newton_neumann, solve_linear_reduced

MEAN_TOL_REL = 1e-10
PROFILE_STEP = 1e-3
TAIL_SWITCH = 1e-8
IDENTITY_TOL = 1e-8

NEGATIVE_MEAN = "NegativeMean"
POSITIVE_MEAN = "PositiveMean"
ZERO_MEAN = "ZeroMean"


@dataclass(frozen=True)
class SmallBetaCase:
    """Sign case of the total surface charge.

    ``dominant`` indexes the species that balances the charge (the most
    negative valence for a negative total, the most positive otherwise) and
    ``following`` the species whose term gives the first corrector.
    """

    tag: str
    dominant: Optional[int] = None
    dominant_valence: Optional[int] = None
    following: Optional[int] = None
    following_valence: Optional[int] = None
    third_valence: Optional[int] = None

    @property
    def signed(self) -> bool:
        return self.tag != ZERO_MEAN

    def shift(self, beta: float) -> float:
        """The singular constant log(beta) / z_k."""
        return math.log(beta) / self.dominant_valence

    def exponents(self) -> tuple[float, float]:
        """Orders of the leading and corrected remainders in beta."""
        if not self.signed:
            return 1.0, 2.0
        p = 1.0 - self.following_valence / self.dominant_valence
        if self.third_valence is None:
            return p, 2.0 * p
        return p, min(1.0 - self.third_valence / self.dominant_valence, 2.0 * p)


def mean_tol(mesh: CellMesh) -> float:
    return MEAN_TOL_REL * mesh.surface_measure()


def _case_for(tag: str, e: Electrolyte) -> SmallBetaCase:
    z = [int(v) for v in e.valences]
    n = len(z)
    if tag == NEGATIVE_MEAN:
        order = list(range(n))
    elif tag == POSITIVE_MEAN:
        order = list(range(n - 1, -1, -1))
    else:
        return SmallBetaCase(ZERO_MEAN)
    third = z[order[2]] if n >= 3 else None
    return SmallBetaCase(tag, order[0], z[order[0]], order[1], z[order[1]], third)


def classify_small_beta(mesh: CellMesh, data: SurfaceData, e: Optional[Electrolyte] = None) -> SmallBetaCase:
    """Sign case of the total surface charge; ``e`` fills in the valences."""
    total = surface_integral(mesh, data)
    tol = mean_tol(mesh)
    tag = NEGATIVE_MEAN if total < -tol else POSITIVE_MEAN if total > tol else ZERO_MEAN
    if e is None:
        return SmallBetaCase(tag)
    return _case_for(tag, e)


def _resolve_case(case: SmallBetaCase, e: Electrolyte) -> SmallBetaCase:
    return case if case.dominant is not None or not case.signed else _case_for(case.tag, e)


def solve_phi0(mesh: CellMesh, e: Electrolyte, data: SurfaceData, case: SmallBetaCase,
               opts: SolverOptions = SolverOptions()) -> Field:
    """Leading term after removing the singular shift, for a signed total charge.

    Solves the single-species problem ``-Lap phi0 - z_k n_k exp(-z_k phi0) = 0``
    with flux ``-sigma`` by the same Newton engine as the full problem.
    """
    if not case.signed:
        raise BadParameter("phi0 is defined only for a nonzero total surface charge")
    case = _resolve_case(case, e)
    total = surface_integral(mesh, data)
    actual = classify_small_beta(mesh, data).tag
    if actual != case.tag:
        raise WrongSign(f"total surface charge {total:.6g} does not match case {case.tag}")
    term = e.term(case.dominant)
    phi0, _ = _newton_neumann(mesh, term, data, 1.0, opts)
    disc = discretize(mesh)
    lhs = term.valence * term.concentration * float(disc.m @ np.exp(-term.valence * phi0.values))
    if abs(lhs - total) > IDENTITY_TOL * max(1.0, abs(total)):
        raise PBCellError(f"charge identity violated: {lhs:.12g} vs {total:.12g}")
    return phi0


def solve_phi1(mesh: CellMesh, e: Electrolyte, phi0: Field, case: Optional[SmallBetaCase] = None,
               opts: SolverOptions = SolverOptions()) -> Field:
    """First corrector: ``-Lap phi1 + z_k^2 n_k e^{-z_k phi0} phi1 = z_l n_l e^{-z_l phi0}``, zero flux."""
    if e.n_species < 2:
        raise BadParameter("the corrector needs at least two species")
    case = _resolve_case(case or SmallBetaCase(NEGATIVE_MEAN), e)
    disc = discretize(mesh)
    zk, nk = case.dominant_valence, e.concentrations[case.dominant]
    zl, nl = case.following_valence, e.concentrations[case.following]
    reaction = zk**2 * nk * np.exp(-zk * phi0.values)
    rhs = disc.m * zl * nl * np.exp(-zl * phi0.values)
    return solve_linear_reduced(mesh, reaction, rhs, opts=opts)


def solve_zero_mean_limit(mesh: CellMesh, e: Electrolyte, data: SurfaceData,
                          opts: SolverOptions = SolverOptions()) -> tuple[Field, Field]:
    """(Psi0, Psi1) of the regular expansion for zero total surface charge."""
    total = surface_integral(mesh, data)
    if abs(total) > mean_tol(mesh):
        raise IncompatibleRHS(f"total surface charge {total:.3e} is not zero")
    disc = discretize(mesh)
    m = disc.m
    harmonic = solve_linear_reduced(mesh, 0.0, np.zeros(disc.n_dof), bc=data, opts=opts).values

    def charge(c):
        return float(m @ e.phi(harmonic + c))

    c = 0.0
    if charge(0.0) != 0.0:
        width = 1.0
        while charge(-width) > 0 or charge(width) < 0:
            width *= 2
        c = brentq(charge, -width, width, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    psi0 = harmonic + c
    rhs = -m * e.phi(psi0)
    rhs -= rhs.sum() * m / disc.volume  # remove the root-finding residue
    psi1 = solve_linear_reduced(mesh, 0.0, rhs, opts=opts).values
    weight = m * e.phi_prime(psi0)
    psi1 = psi1 - float(weight @ psi1) / float(weight.sum())
    return Field(mesh, psi0), Field(mesh, psi1)


def small_beta_approximant(case: SmallBetaCase, base: Field, corrector: Optional[Field], beta: float) -> Field:
    """``log(beta)/z_k + phi0 (+ beta^p phi1)``, or ``Psi0 (+ beta Psi1)`` for zero total charge."""
    if beta < 0 or (case.signed and beta == 0):
        raise BadParameter(f"beta must be positive, got {beta}")
    if not case.signed:
        return base if corrector is None or beta == 0 else base + beta * corrector
    out = base + case.shift(beta)
    if corrector is not None:
        out = out + beta ** case.exponents()[0] * corrector
    return out


# --------------------------------------------------------------------------
# large beta: Neumann layer


def neumann_layer_field(mesh: CellMesh, e: Electrolyte, data: SurfaceData, beta: float) -> Field:
    """``-sigma/kappa exp(-kappa d)`` with ``kappa = sqrt(beta Phi'(0))``, sigma of the nearest facet."""
    if data.sigma is None:
        raise BadParameter("the Neumann layer needs sigma data")
    kappa = math.sqrt(beta * e.phi_prime_zero())
    sigma = data.sigma[mesh.nearest_surface]
    return Field.from_nodes(mesh, -sigma / kappa * np.exp(-kappa * mesh.distance))


# --------------------------------------------------------------------------
# large beta: Dirichlet layer


def xi_max(e: Electrolyte) -> float:
    return max(40.0 / math.sqrt(e.c_s()), 20.0)


@dataclass(frozen=True, eq=False)
class LayerProfile:
    """Solution of ``Psi'' = Phi(Psi)`` on the half line with ``Psi(0) = zeta``, decaying to 0."""

    zeta: float
    xi_grid: np.ndarray
    values: np.ndarray
    slopes: np.ndarray
    kappa: float

    @property
    def derivative_at_0(self) -> float:
        return float(self.slopes[0])

    def __call__(self, xi):
        xi = np.asarray(xi, dtype=float)
        if self.zeta == 0:
            return np.zeros_like(xi)
        inside = np.minimum(xi, self.xi_grid[-1])
        out = self._spline(inside)
        beyond = xi > self.xi_grid[-1]
        if np.any(beyond):
            out = np.where(beyond, self.values[-1] * np.exp(-self.kappa * (xi - self.xi_grid[-1])), out)
        return out

    @property
    def _spline(self):
        spline = self.__dict__.get("_spline_cache")
        if spline is None:
            spline = CubicHermiteSpline(self.xi_grid, self.values, self.slopes)
            object.__setattr__(self, "_spline_cache", spline)
        return spline


def _check_neutral(e: Electrolyte):
    if abs(e.neutrality_residual()) > 1e-12:
        raise NonNeutral(f"electrolyte is not neutral (residual {e.neutrality_residual():.3e})")


def profile_grid(e: Electrolyte, zeta: float, end: float, step: float = PROFILE_STEP) -> np.ndarray:
    """Grid on [0, end]: spacing ``step`` far out, refined near the wall by
    Phi'(0)/Phi'(zeta) (at most 64x) and relaxed like exp(xi/2) towards ``step``."""
    ratio = min(64.0, max(1.0, float(e.phi_prime(zeta)) / e.phi_prime_zero()))
    graded = np.zeros(1)
    if ratio > 1.0:
        h0 = step / ratio
        k_end = 2.0 * (1.0 - h0 / step) / h0
        k = np.linspace(0.0, k_end, int(math.ceil(k_end)) + 1)
        graded = -2.0 * np.log1p(-h0 * k / 2.0)
    start = graded[-1]
    if start >= end:
        return graded[graded <= end]
    tail = np.linspace(start, end, int(math.ceil((end - start) / step)) + 1)
    return np.concatenate([graded, tail[1:]])


def dirichlet_layer_profile(e: Electrolyte, zeta: float, step: float = PROFILE_STEP) -> LayerProfile:
    """Integrate the first-integral form ``Psi' = -sign(zeta) sqrt(2 (C(Psi) - C(0)))``.

    Once ``|Psi|`` falls below ``1e-8 |zeta|`` the linear decay
    ``exp(-sqrt(Phi'(0)) xi)`` takes over, where the square root is stiff.
    """
    _check_neutral(e)
    zeta = float(zeta)
    end = xi_max(e)
    kappa = math.sqrt(e.phi_prime_zero())
    grid = profile_grid(e, zeta, end, step)
    if zeta == 0.0:
        zeros = np.zeros_like(grid)
        return LayerProfile(0.0, grid, zeros, zeros.copy(), kappa)
    sign = math.copysign(1.0, zeta)

    def slope(y):
        return -sign * np.sqrt(2.0 * np.maximum(e.cpotential_excess(y), 0.0))

    def rhs(_, y):
        return [float(slope(y[0]))]

    def reached(_, y):
        return abs(y[0]) - TAIL_SWITCH * abs(zeta)

    reached.terminal = True
    sol = solve_ivp(rhs, (0.0, end), [zeta], method="DOP853", rtol=1e-13,
                    atol=1e-14 * abs(zeta), dense_output=True, events=reached)
    if sol.status < 0:
        raise PBCellError(f"layer ODE integration failed: {sol.message}")
    xi_s = float(sol.t[-1])
    y_s = float(sol.y[0, -1])
    head = grid <= xi_s
    values = np.empty_like(grid)
    values[head] = sol.sol(grid[head])[0]
    values[~head] = y_s * np.exp(-kappa * (grid[~head] - xi_s))
    values[0] = zeta
    slopes = np.where(head, slope(values), -kappa * values)
    return LayerProfile(zeta, grid, values, slopes, kappa)


@lru_cache(maxsize=256)
def _cached_profile(valences: tuple, concentrations: tuple, zeta: float) -> LayerProfile:
    e = Electrolyte(np.array(valences), np.array(concentrations))
    return dirichlet_layer_profile(e, zeta)


def profile_for(e: Electrolyte, zeta: float) -> LayerProfile:
    return _cached_profile(tuple(e.valences.tolist()), tuple(e.concentrations.tolist()), float(zeta))


def gouy_chapman(zeta: float, xi, valence: int = 1, concentration: float = 0.5):
    """Closed-form layer for the symmetric z:z electrolyte.

    ``z Psi = 2 ln[(1 + t e^{-kappa xi}) / (1 - t e^{-kappa xi})]`` with
    ``t = tanh(z zeta / 4)`` and ``kappa^2 = 2 z^2 n``.
    """
    kappa = math.sqrt(2.0 * valence**2 * concentration)
    w = math.tanh(valence * zeta / 4.0) * np.exp(-kappa * np.asarray(xi, dtype=float))
    return 4.0 * np.arctanh(w) / valence


def decay_constants(e: Electrolyte, zetas) -> tuple[float, float]:
    """(C_s, C_0) of the exponential decay bounds for the layer profile."""
    return e.c_s(), 2.0 * float(np.max(np.abs(e.phi(np.asarray(zetas, dtype=float)))))


def dirichlet_layer_field(mesh: CellMesh, e: Electrolyte, data: SurfaceData, beta: float) -> Field:
    """``Psi_zeta(sqrt(beta) d)`` with zeta of the nearest facet, and S values exactly zeta."""
    if data.zeta is None:
        raise BadParameter("the Dirichlet layer needs zeta data")
    root = math.sqrt(beta)
    zeta = data.zeta[mesh.nearest_surface]
    out = np.zeros(mesh.n_nodes)
    for z in np.unique(zeta):
        sel = zeta == z
        out[sel] = profile_for(e, z)(root * mesh.distance[sel])
    nodes, vals = data.node_zeta(mesh)
    out[nodes] = vals
    return Field.from_nodes(mesh, out)


def dirichlet_small_beta(mesh: CellMesh, e: Electrolyte, data: SurfaceData, beta: float,
                         opts: SolverOptions = SolverOptions()) -> Field:
    """``zeta + beta Psi1`` with ``-Lap Psi1 = -Phi(zeta)``, ``Psi1 = 0`` on S.

    Non-constant zeta is extended harmonically; for constant zeta this is
    the constant itself and the source is exactly ``-Phi(zeta)``.
    """
    base, psi1 = dirichlet_small_beta_terms(mesh, e, data, opts)
    return base + beta * psi1


def dirichlet_small_beta_terms(mesh: CellMesh, e: Electrolyte, data: SurfaceData,
                               opts: SolverOptions = SolverOptions()) -> tuple[Field, Field]:
    if data.zeta is None:
        raise BadParameter("needs zeta data")
    disc = discretize(mesh)
    base = solve_linear_reduced(mesh, 0.0, np.zeros(disc.n_dof), bc=data, opts=opts)
    zero = SurfaceData.dirichlet(mesh, 0.0)
    psi1 = solve_linear_reduced(mesh, 0.0, -disc.m * e.phi(base.values), bc=zero, opts=opts)
    return base, psi1


# --------------------------------------------------------------------------
# pblayer text format


def write_profile(profile: LayerProfile, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(f"pblayer 1 {len(profile.xi_grid)}\n")
        fh.writelines(f"{x:.17g} {v:.17g}\n" for x, v in zip(profile.xi_grid, profile.values))
    os.replace(tmp, path)


def read_profile(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path) as fh:
        lines = [ln.split() for ln in fh if ln.strip()]
    if not lines or len(lines[0]) != 3 or lines[0][:2] != ["pblayer", "1"]:
        raise ParseError("header must read 'pblayer 1 <count>'", 1)
    count = int(lines[0][2])
    if len(lines) - 1 != count:
        raise ParseError(f"expected {count} rows, found {len(lines) - 1}", len(lines))
    data = np.array([[float(a), float(b)] for a, b in lines[1:]]).reshape(count, 2)
    return data[:, 0], data[:, 1]
