import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pbcell.errors import MeshMismatch, ParseError
from pbcell.fem import (
    Field, assemble_lumped_mass, assemble_stiffness, assemble_surface_load, discretize, norms,
    read_field, solve_mean_constrained, write_field,
)
from pbcell.geometry import SurfaceData, build_slab, surface_integral


def test_stiffness_kernel_is_constants(slab200, coarse_disk, disk):
    for m in (slab200, coarse_disk, disk):
        A = assemble_stiffness(m)
        assert np.max(np.abs(A @ np.ones(A.shape[0]))) <= 1e-12 * abs(A).max()
        assert abs(A - A.T).max() == 0.0


def test_uniform_slab_stiffness_entries():
    A = assemble_stiffness(build_slab(1.0, 4, 1.0)).toarray()
    h = 0.25
    assert A[1, 2] == pytest.approx(-1 / h)
    assert A[1, 1] == pytest.approx(2 / h)
    assert A[0, 0] == pytest.approx(1 / h)
    assert A[0, 2] == 0.0


def test_dirichlet_energy_of_linear_field(disk):
    # y1 is not periodic, so use the node-level operator before pair folding
    A = discretize(disk).A_nodes
    energy = disk.nodes[:, 0] @ (A @ disk.nodes[:, 0])
    assert energy == pytest.approx(1 - math.pi / 16, abs=1e-3)


def test_lumped_mass(slab200, disk):
    assert assemble_lumped_mass(slab200).diagonal().sum() == pytest.approx(1.0, abs=1e-15)
    m = assemble_lumped_mass(disk).diagonal()
    assert np.all(m > 0)
    assert m.sum() == pytest.approx(1 - math.pi / 16, abs=1e-3)


def test_surface_load(slab200, disk):
    zero = assemble_surface_load(slab200, SurfaceData.neumann(slab200, 0.0))
    assert not zero.any()
    b = assemble_surface_load(slab200, SurfaceData.neumann(slab200, [0.3, -0.7]))
    assert b[0] == 0.3 and b[-1] == -0.7 and np.count_nonzero(b) == 2
    data = SurfaceData.neumann(disk, -1.3)
    assert assemble_surface_load(disk, data).sum() == pytest.approx(surface_integral(disk, data), rel=1e-13)


def test_norms_simple(slab200):
    assert norms(Field.zeros(slab200)) == (0.0, 0.0, 0.0, 0.0)
    c = -1.7
    np.testing.assert_allclose(norms(Field.zeros(slab200) + c), [abs(c)] * 4, rtol=1e-13)


def test_sine_l2_norm():
    m = build_slab(1.0, 4000, 1.0)
    f = Field.from_nodes(m, np.sin(2 * math.pi * m.nodes[:, 0]))
    assert norms(f)[1] == pytest.approx(1 / math.sqrt(2), abs=1e-3)


def test_manufactured_linear_solution():
    m = build_slab(1.0, 50, 1.1)
    d = discretize(m)
    x = m.nodes[:, 0]
    exact = x - 0.5
    rhs = d.A @ exact
    assert abs(rhs.sum()) < 1e-12
    u = solve_mean_constrained(d.A, d.m, rhs, float(d.m @ exact) / d.volume)
    np.testing.assert_allclose(u, exact, atol=1e-10)


def test_field_arithmetic_and_checks(slab200):
    f = Field.zeros(slab200) + 1.0
    g = 2 * f - f
    np.testing.assert_array_equal(g.values, f.values)
    assert (-f).mean() == pytest.approx(-1.0)
    with pytest.raises(MeshMismatch):
        Field(slab200, np.zeros(3))
    with pytest.raises(MeshMismatch):
        f + Field.zeros(build_slab(1.0, 10, 1.0))
    with pytest.raises(ValueError):
        Field(slab200, np.full(201, np.nan))


def test_periodic_folding(coarse_disk):
    d = discretize(coarse_disk)
    assert d.n_dof == coarse_disk.n_nodes - len(np.unique(coarse_disk.periodic_pairs[:, 1]))
    f = Field(coarse_disk, np.arange(d.n_dof, dtype=float))
    nodal = f.nodal()
    np.testing.assert_array_equal(nodal[coarse_disk.periodic_pairs[:, 1]], nodal[coarse_disk.periodic_pairs[:, 0]])


def test_field_file_round_trip(tmp_path, slab200):
    f = Field.from_nodes(slab200, np.cos(slab200.nodes[:, 0]) / 3)
    write_field(f, tmp_path / "f.pbf")
    back = read_field(tmp_path / "f.pbf", slab200)
    np.testing.assert_array_equal(back.values, f.values)
    assert (tmp_path / "f.pbf").read_text().startswith("pbfield 1 201\n")


def test_field_file_errors(tmp_path):
    p = tmp_path / "f.pbf"
    p.write_text("pbfield 1 2\n1.0\nx\n")
    with pytest.raises(ParseError) as info:
        read_field(p)
    assert info.value.line == 3
    p.write_text("pbfield 1 3\n1.0\n")
    with pytest.raises(ParseError):
        read_field(p)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=2), st.integers(5, 60), st.floats(1.0, 1.2))
def test_apply_stiffness_matches_matrix(coeffs, n, grading):
    m = build_slab(1.0, n, grading)
    d = discretize(m)
    u = coeffs[0] * np.sin(3 * m.nodes[:, 0]) + coeffs[1]
    np.testing.assert_allclose(d.apply_stiffness(u), d.A @ u, atol=1e-9 * max(1.0, np.abs(u).max()) * n**2)
    assert d.dirichlet_energy(u) == pytest.approx(u @ (d.A @ u), rel=1e-9, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.floats(-10, 10), st.floats(0.1, 10))
def test_norms_are_homogeneous(shift, scale):
    m = build_slab(1.0, 30, 1.0)
    f = Field.from_nodes(m, np.sin(5 * m.nodes[:, 0]) + shift)
    np.testing.assert_allclose(norms(f * scale), np.array(norms(f)) * scale, rtol=1e-12)
