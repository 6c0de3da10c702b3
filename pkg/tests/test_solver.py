import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from pbcell.analysis import check_bounds, linf_envelope, small_beta_envelope
from pbcell.asymptotics import gouy_chapman
from pbcell.electrolyte import Species, make_electrolyte
from pbcell.errors import BadParameter, IncompatibleRHS, NewtonStalled
from pbcell.fem import Field, discretize, norms
from pbcell.geometry import SurfaceData, build_slab
from pbcell.solver import (
    SolverOptions, beta_ladder, continuation_solve, solve, solve_auxiliary_U, solve_dirichlet,
    solve_linear_reduced, solve_neumann, ZERO_FLUX,
)

ELECTROLYTES = [
    make_electrolyte([Species(-1, 0.5), Species(1, 0.5)]),
    make_electrolyte([Species(-2, 0.3), Species(-1, 0.4), Species(1, 1.0)]),
    make_electrolyte([Species(-1, 1.0), Species(2, 0.5)]),
]


def shooting_oracle(sigma, beta):
    """Wall value of the symmetric slab solution: Psi'' = beta sinh(Psi), Psi'(0) = sigma, Psi'(1/2) = 0."""

    def slope_at_centre(a):
        sol = solve_ivp(lambda _, y: [y[1], beta * math.sinh(y[0])], (0, 0.5), [a, sigma],
                        method="DOP853", rtol=1e-13, atol=1e-14)
        return sol.y[1, -1]

    a = brentq(slope_at_centre, 0.0, 5.0, xtol=1e-15)
    x = np.linspace(0, 0.5, 2001)
    sol = solve_ivp(lambda _, y: [y[1], beta * math.sinh(y[0])], (0, 0.5), [a, sigma],
                    method="DOP853", rtol=1e-13, atol=1e-14, t_eval=x, dense_output=True)
    return sol.sol


def test_zero_charge_gives_zero(slab200, sym, coarse_disk):
    for m in (slab200, coarse_disk):
        psi, report = solve_neumann(m, sym, SurfaceData.neumann(m, 0.0), 3.0)
        assert report.iterations <= 1
        assert np.max(np.abs(psi.values)) == 0.0


def test_matches_shooting_oracle(sym):
    m = build_slab(1.0, 10_000, 1.0)
    psi, report = solve_neumann(m, sym, SurfaceData.neumann(m, -1.0), 1.0)
    assert report.converged
    oracle = shooting_oracle(-1.0, 1.0)
    x = m.nodes[:, 0]
    exact = oracle(np.minimum(x, 1 - x))[0]
    assert np.max(np.abs(psi.nodal() - exact)) <= 1e-6


@pytest.mark.parametrize("e", ELECTROLYTES)
@pytest.mark.parametrize("sigma", [-1.0, 0.5, [-2.0, 1.0]])
@pytest.mark.parametrize("beta", [1e-3, 1.0, 1e2, 1e5])
def test_linf_envelope_holds(graded_slab, e, sigma, beta):
    data = SurfaceData.neumann(graded_slab, sigma)
    psi, report = solve(graded_slab, e, data, beta)
    assert check_bounds(psi, linf_envelope(graded_slab, e, data, beta)).passed
    assert report.balance_residual <= 1e-8 * max(1.0, beta)


def test_envelope_on_disk(coarse_disk, sym):
    data = SurfaceData.neumann(coarse_disk, -1.0)
    for beta in (1.0, 100.0):
        psi, _ = solve(coarse_disk, sym, data, beta)
        assert check_bounds(psi, linf_envelope(coarse_disk, sym, data, beta)).passed


def test_small_beta_uniform_bounds(slab200, sym):
    data = SurfaceData.neumann(slab200, -1.0)
    env = small_beta_envelope(slab200, sym, data)
    for beta in (1e-3, 1e-4, 1e-5):
        psi, _ = solve(slab200, sym, data, beta)
        phi = psi - math.log(beta) / sym.valences[0]
        assert check_bounds(phi, env).passed


def test_dirichlet_zero(slab200, sym):
    psi, _ = solve_dirichlet(slab200, sym, SurfaceData.dirichlet(slab200, 0.0), 10.0)
    assert np.max(np.abs(psi.values)) == 0.0


def test_dirichlet_against_gouy_chapman(graded_slab, sym):
    beta = 1e4
    psi, report = solve(graded_slab, sym, SurfaceData.dirichlet(graded_slab, 1.0), beta)
    assert report.converged
    d = graded_slab.distance
    # the closed form takes 4 tanh(zeta/4); see gouy_chapman
    exact = gouy_chapman(1.0, math.sqrt(beta) * d)
    assert np.max(np.abs(psi.nodal() - exact)) <= 5 / math.sqrt(beta)
    assert psi.values[0] == 1.0 and psi.values[-1] == 1.0


@pytest.mark.parametrize("zeta", [[-1.0, 2.0], [0.5, 0.5], [-3.0, -0.2]])
def test_dirichlet_maximum_principle(slab200, zeta):
    e = ELECTROLYTES[1]
    psi, _ = solve(slab200, e, SurfaceData.dirichlet(slab200, zeta), 30.0)
    assert np.all(psi.values >= min(0.0, min(zeta)) - 1e-10)
    assert np.all(psi.values <= max(0.0, max(zeta)) + 1e-10)


def test_auxiliary_u_two_equal_walls(slab200):
    s = -0.8
    U = solve_auxiliary_U(slab200, SurfaceData.neumann(slab200, s)).nodal()
    x = slab200.nodes[:, 0]
    exact = -s * x * (x - 1) - s / 6
    assert np.max(np.abs(U - exact)) <= 1e-4


def test_auxiliary_u_antisymmetric(slab200):
    s = 0.6
    U = solve_auxiliary_U(slab200, SurfaceData.neumann(slab200, [s, -s])).nodal()
    np.testing.assert_allclose(U, s * (slab200.nodes[:, 0] - 0.5), atol=1e-12)
    zero = solve_auxiliary_U(slab200, SurfaceData.neumann(slab200, 0.0))
    assert not zero.values.any()


def test_linear_reduced_constant_solution(slab200, coarse_disk):
    for m in (slab200, coarse_disk):
        d = discretize(m)
        x = solve_linear_reduced(m, 1.0, d.m, ZERO_FLUX)
        np.testing.assert_allclose(x.values, 1.0, atol=1e-12)


def test_linear_reduced_manufactured():
    errs = []
    for n in (50, 100):
        m = build_slab(1.0, n, 1.0)
        d = discretize(m)
        x = m.nodes[:, 0]
        u = solve_linear_reduced(m, 0.0, 2.0 * d.m, SurfaceData.dirichlet(m, 0.0))
        errs.append(np.max(np.abs(u.nodal() - x * (1 - x))))
    assert errs[1] <= 1e-3
    assert errs[0] / max(errs[1], 1e-300) >= 3.5 or errs[1] < 1e-13


def test_linear_reduced_errors(slab200):
    d = discretize(slab200)
    with pytest.raises(BadParameter):
        solve_linear_reduced(slab200, np.full(d.n_dof, -1.0), d.m)
    with pytest.raises(IncompatibleRHS):
        solve_linear_reduced(slab200, 0.0, d.m)


def test_continuation_agrees_with_cold_solve(slab200, sym):
    data = SurfaceData.neumann(slab200, -1.0)
    cold, _ = solve_neumann(slab200, sym, data, 100.0)
    warm, report = continuation_solve(slab200, sym, data, 100.0)
    assert np.max(np.abs(cold.values - warm.values)) <= 1e-9
    assert [r["beta"] for r in report.ladder] == [1.0, 10.0, 100.0]
    one, _ = continuation_solve(slab200, sym, data, 1.0)
    ref, _ = solve_neumann(slab200, sym, data, 1.0)
    np.testing.assert_array_equal(one.values, ref.values)


def test_extreme_beta_uses_ladder(graded_slab, sym):
    psi, report = solve(graded_slab, sym, SurfaceData.dirichlet(graded_slab, 2.0), 1e6)
    assert report.converged and len(report.ladder) == 7
    psi, report = solve(graded_slab, sym, SurfaceData.neumann(graded_slab, -1.0), 1e6)
    assert report.balance_residual <= 1e-8 * 1e6


def test_newton_stall_is_reported(graded_slab, sym):
    opts = SolverOptions(max_newton=1)
    with pytest.raises(NewtonStalled) as info:
        solve_neumann(graded_slab, sym, SurfaceData.neumann(graded_slab, -1.0), 1e3, opts)
    assert info.value.report is not None and info.value.field is not None


def test_beta_ladder():
    assert beta_ladder(1.0) == [1.0]
    assert beta_ladder(1e3) == [1.0, 10.0, 100.0, 1e3]
    np.testing.assert_allclose(beta_ladder(2e-3), [1.0, 0.1, 0.01, 2e-3])
    with pytest.raises(BadParameter):
        beta_ladder(0.0)


@pytest.mark.parametrize("kw", [dict(newton_tol=0), dict(max_newton=0), dict(backtrack=1.0), dict(armijo=0),
                                dict(polish=-1), dict(ladder_factor=1.0)])
def test_options_validation(kw):
    with pytest.raises(BadParameter):
        SolverOptions(**kw)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(range(len(ELECTROLYTES))), st.floats(-3, 3), st.floats(-3, 3),
       st.floats(-3, 4).map(lambda t: 10.0**t))
def test_energy_decreases_and_balance_holds(k, s0, s1, beta):
    m = build_slab(1.0, 120, 1.02)
    e = ELECTROLYTES[k]
    psi, report = solve_neumann(m, e, SurfaceData.neumann(m, [s0, s1]), beta) if 1e-4 <= beta <= 1e4 else \
        solve(m, e, SurfaceData.neumann(m, [s0, s1]), beta)
    J = np.array(report.energies)
    scale = max(1.0, np.max(np.abs(J)))
    assert np.all(np.diff(J) <= 1e3 * np.finfo(float).eps * scale)
    assert report.balance_residual <= 10 * SolverOptions().newton_tol * max(1.0, beta)


def test_h1_stability_over_beta(slab200, sym):
    data = SurfaceData.neumann(slab200, -1.0)
    seminorms = []
    for beta in 10.0 ** np.arange(-4, 5):
        psi, _ = solve(slab200, sym, data, beta)
        seminorms.append(norms(psi - psi.mean())[2])
    assert np.all(np.isfinite(seminorms))
    assert max(seminorms) <= 2 * seminorms[0]
