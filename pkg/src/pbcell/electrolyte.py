"""Ion species and the pointwise nonlinearities of the Poisson-Boltzmann model.

Everything here is dimensionless. For an electrolyte with valences ``z_j`` and
bulk concentrations ``n_j`` the charge density, its derivative and its convex
primitive are

    Phi(x)  = -sum_j z_j n_j exp(-z_j x)
    Phi'(x) =  sum_j z_j^2 n_j exp(-z_j x)
    C(x)    =  sum_j n_j exp(-z_j x)

All evaluators accept scalars or numpy arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    AllSameSign,
    BadParameter,
    DuplicateValence,
    NonpositiveConcentration,
    Overflow,
)

EXP_CAP = 500.0
NEUTRALITY_TOL = 1e-12


@dataclass(frozen=True)
class Species:
    valence: int
    concentration: float

    def __post_init__(self):
        if int(self.valence) != self.valence or self.valence == 0:
            raise BadParameter(f"valence must be a nonzero integer, got {self.valence!r}")
        if not (self.concentration > 0 and math.isfinite(self.concentration)):
            raise NonpositiveConcentration(
                f"concentration must be positive and finite, got {self.concentration!r}"
            )


def _exponents(valences, x):
    x = np.asarray(x, dtype=float)
    ex = -np.multiply.outer(x, valences)
    if ex.size and np.max(np.abs(ex)) > EXP_CAP:
        raise Overflow(f"|z*x| exceeds {EXP_CAP:g} (max |x| = {np.max(np.abs(x)):.6g})")
    return ex


def exp_remainder(u):
    """Return ``exp(u) - 1 - u`` without cancellation for small ``u``."""
    u = np.asarray(u, dtype=float)
    small = np.abs(u) < 1e-3
    us = np.where(small, u, 0.0)
    series = us * us * (0.5 + us * (1.0 / 6 + us * (1.0 / 24 + us * (1.0 / 120 + us / 720))))
    ul = np.where(small, 0.0, u)
    return np.where(small, series, np.expm1(ul) - ul)


class _Pointwise:
    """Shared evaluators for any sum of exponentials ``sum_j n_j exp(-z_j x)``."""

    valences: np.ndarray
    concentrations: np.ndarray

    def _terms(self, x):
        return self.concentrations * np.exp(_exponents(self.valences, x))

    def cpotential(self, x):
        return np.sum(self._terms(x), axis=-1)

    def phi(self, x):
        return -np.sum(self.valences * self._terms(x), axis=-1)

    def phi_prime(self, x):
        return np.sum(self.valences**2 * self._terms(x), axis=-1)

    def concentrations_at(self, x):
        return self._terms(x)


@dataclass(frozen=True, eq=False)
class Electrolyte(_Pointwise):
    """A neutral electrolyte, species sorted by strictly increasing valence.

    ``shift`` is the constant reference potential that was absorbed into the
    concentrations to restore bulk neutrality (zero if none was needed).
    """

    valences: np.ndarray
    concentrations: np.ndarray
    shift: float = 0.0
    raw_concentrations: np.ndarray = field(default=None, repr=False)

    @property
    def species(self) -> list[Species]:
        return [Species(int(z), float(n)) for z, n in zip(self.valences, self.concentrations)]

    @property
    def n_species(self) -> int:
        return len(self.valences)

    @property
    def positive(self) -> np.ndarray:
        return self.valences > 0

    @property
    def negative(self) -> np.ndarray:
        return self.valences < 0

    def neutrality_residual(self) -> float:
        return float(np.sum(self.valences * self.concentrations))

    def phi_prime_zero(self) -> float:
        """Phi'(0), the squared inverse Debye length in cell units."""
        return float(np.sum(self.valences**2 * self.concentrations))

    def decay_floor(self) -> float:
        """min(z_1^2 n_1, z_N^2 n_N), the constant H^2 in Phi(x) sign(x) >= H^2 |x|."""
        return float(min(self.valences[0] ** 2 * self.concentrations[0],
                         self.valences[-1] ** 2 * self.concentrations[-1]))

    def c_s(self) -> float:
        """Smaller of the anion and cation sums of z_j^2 n_j."""
        w = self.valences**2 * self.concentrations
        return float(min(w[self.negative].sum(), w[self.positive].sum()))

    def cpotential_excess(self, x):
        """C(x) - C(0), evaluated without cancellation near x = 0."""
        u = -np.multiply.outer(np.asarray(x, dtype=float), self.valences)
        if u.size and np.max(np.abs(u)) > EXP_CAP:
            raise Overflow(f"|z*x| exceeds {EXP_CAP:g}")
        # sum_j n_j z_j = 0 lets the linear terms drop out exactly
        return np.sum(self.concentrations * exp_remainder(u), axis=-1)

    def term(self, index: int) -> "SpeciesTerm":
        return SpeciesTerm(int(self.valences[index]), float(self.concentrations[index]))

    def with_concentrations_shifted(self, c: float) -> "Electrolyte":
        """Electrolyte whose Phi is this one's Phi translated by ``c``."""
        n = self.concentrations * np.exp(-self.valences * c)
        return Electrolyte(self.valences.copy(), n, self.shift, self.raw_concentrations)


@dataclass(frozen=True)
class SpeciesTerm(_Pointwise):
    """A single exponential term, the reduced nonlinearity of one dominant species."""

    valence: int
    concentration: float

    @property
    def valences(self):
        return np.array([self.valence], dtype=float)

    @property
    def concentrations(self):
        return np.array([self.concentration], dtype=float)


def _raw_phi(z, n, x):
    return -float(np.sum(z * n * np.exp(-z * x)))


def _neutral_shift(z: np.ndarray, n: np.ndarray) -> float:
    phi = lambda x: _raw_phi(z, n, x)  # noqa: E731
    if phi(0.0) == 0.0:
        return 0.0
    bound = 1.0
    while not (phi(-bound) < 0.0 < phi(bound)):
        bound *= 2.0
        if np.max(np.abs(z)) * bound > EXP_CAP:
            raise Overflow("neutrality shift is out of range")
    lo, hi = -bound, bound
    while hi - lo > 1e-14 and (lo + hi) / 2 not in (lo, hi):
        mid = 0.5 * (lo + hi)
        if phi(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    x = 0.5 * (lo + hi)
    for _ in range(3):
        dphi = float(np.sum(z**2 * n * np.exp(-z * x)))
        x -= phi(x) / dphi
    return x


def make_electrolyte(species_list: Sequence[Species]) -> Electrolyte:
    """Validate species, sort by valence and enforce bulk electroneutrality.

    If the given concentrations are not neutral, the potential is re-referenced
    by the unique root ``x0`` of Phi and the concentrations become
    ``n_j * exp(-z_j x0)``; ``x0`` is kept in ``Electrolyte.shift``.
    """
    species = list(species_list)
    if not species:
        raise BadParameter("at least one species is required")
    species = [s if isinstance(s, Species) else Species(*s) for s in species]
    species.sort(key=lambda s: s.valence)
    z = np.array([s.valence for s in species], dtype=float)
    n = np.array([s.concentration for s in species], dtype=float)
    if len(set(z)) != len(z):
        raise DuplicateValence(f"valences must be distinct, got {sorted(z.astype(int))}")
    if not (z[0] < 0 < z[-1]):
        raise AllSameSign("need at least one anion and one cation")

    shift = 0.0
    if abs(np.sum(z * n)) > NEUTRALITY_TOL:
        shift = _neutral_shift(z, n)
        shifted = n * np.exp(-z * shift)
    else:
        shifted = n.copy()
    return Electrolyte(z, shifted, shift, n)


def symmetric(valence: int = 1, concentration: float = 0.5) -> Electrolyte:
    """The z:z electrolyte with equal bulk concentrations."""
    return make_electrolyte([Species(-valence, concentration), Species(valence, concentration)])


def phi(e, x):
    return e.phi(x)


def phi_prime(e, x):
    return e.phi_prime(x)


def cpotential(e, x):
    return e.cpotential(x)


def concentrations(e, x):
    return e.concentrations_at(x)
