"""P1 finite elements on a CellMesh with periodic slaves folded into masters.

Degrees of freedom are the mesh nodes that are not periodic slaves, in node
order. All operators returned here act on DOF vectors.
"""
from __future__ import annotations

import os
import weakref
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import BadParameter, LinearSolveFailure, MeshDegenerate, MeshMismatch, ParseError
from .geometry import CellMesh, SurfaceData, resolve_masters

DIRECT_LIMIT = 200_000


class Discretization:
    """Assembled operators for one mesh; build through :func:`discretize`."""

    def __init__(self, mesh: CellMesh):
        self.mesh = mesh
        owner = resolve_masters(mesh)
        self.free_nodes = np.flatnonzero(owner == np.arange(mesh.n_nodes))
        dof_of = np.full(mesh.n_nodes, -1)
        dof_of[self.free_nodes] = np.arange(len(self.free_nodes))
        self.node_dof = dof_of[owner]
        self.n_dof = len(self.free_nodes)
        self.P = sp.csr_matrix((np.ones(mesh.n_nodes), (np.arange(mesh.n_nodes), self.node_dof)),
                               shape=(mesh.n_nodes, self.n_dof))
        self.A_nodes = _stiffness_nodes(mesh)
        self.A = (self.P.T @ self.A_nodes @ self.P).tocsr()
        self.A = ((self.A + self.A.T) * 0.5).tocsr()
        upper = sp.triu(self.A, k=1).tocoo()
        self._edge_i, self._edge_j, self._edge_w = upper.row, upper.col, -upper.data
        self.m_nodes = _lumped_mass_nodes(mesh)
        self.m = self.P.T @ self.m_nodes
        self.surface_dofs = np.unique(self.node_dof[mesh.surface_nodes])
        self.interior_dofs = np.setdiff1d(np.arange(self.n_dof), self.surface_dofs)
        self.distance = mesh.distance[self.free_nodes]
        self.nearest = mesh.nearest_surface[self.free_nodes]
        self.volume = float(self.m.sum())

    def apply_stiffness(self, u: np.ndarray, magnitude: bool = False):
        """``A u`` from edge differences, which avoids the O(|u|/h) cancellation of a
        plain matrix product. With ``magnitude`` also returns
        ``sum_j |w_ij| (|u_i| + |u_j|)`` per row, the scale of the error that
        merely storing ``u`` in floating point induces in ``A u``."""
        diff = u[self._edge_i] - u[self._edge_j]
        flux = self._edge_w * diff
        n = self.n_dof
        out = np.bincount(self._edge_i, flux, n) - np.bincount(self._edge_j, flux, n)
        if not magnitude:
            return out
        a = np.abs(self._edge_w) * (np.abs(u[self._edge_i]) + np.abs(u[self._edge_j]))
        return out, np.bincount(self._edge_i, a, n) + np.bincount(self._edge_j, a, n)

    def dirichlet_energy(self, u: np.ndarray) -> float:
        diff = u[self._edge_i] - u[self._edge_j]
        return float(np.sum(self._edge_w * diff * diff))

    def surface_load(self, data: SurfaceData) -> np.ndarray:
        return self.P.T @ _surface_load_nodes(self.mesh, data)

    def to_nodes(self, values: np.ndarray) -> np.ndarray:
        return self.P @ values

    def from_nodes(self, node_values: np.ndarray) -> np.ndarray:
        return np.asarray(node_values, dtype=float)[self.free_nodes]


_CACHE: "weakref.WeakKeyDictionary[CellMesh, Discretization]" = weakref.WeakKeyDictionary()


def discretize(mesh: CellMesh) -> Discretization:
    disc = _CACHE.get(mesh)
    if disc is None:
        disc = _CACHE[mesh] = Discretization(mesh)
    return disc


def _stiffness_nodes(mesh: CellMesh) -> sp.csr_matrix:
    n = mesh.n_nodes
    e = mesh.elements
    vol = mesh.element_measures()
    if np.any(vol <= 0):
        raise MeshDegenerate("element with nonpositive measure")
    if mesh.dim == 1:
        k = 1.0 / vol
        local = np.stack([k, -k, -k, k], axis=1).reshape(-1, 2, 2)
    else:
        p = mesh.nodes[e]
        # gradients of barycentric coordinates: rotated opposite edges / (2 area)
        edges = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
        grads = np.stack([-edges[..., 1], edges[..., 0]], axis=-1) / (2 * vol)[:, None, None]
        local = np.einsum("eik,ejk->eij", grads, grads) * vol[:, None, None]
    k = e.shape[1]
    rows = np.repeat(e, k, axis=1).ravel()
    cols = np.tile(e, (1, k)).ravel()
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def _lumped_mass_nodes(mesh: CellMesh) -> np.ndarray:
    k = mesh.dim + 1
    m = np.zeros(mesh.n_nodes)
    share = mesh.element_measures() / k
    for j in range(k):
        np.add.at(m, mesh.elements[:, j], share)
    return m


def _surface_load_nodes(mesh: CellMesh, data: SurfaceData) -> np.ndarray:
    if data.sigma is None:
        raise BadParameter("surface load needs sigma data")
    b = np.zeros(mesh.n_nodes)
    share = data.sigma * mesh.facet_measures() / mesh.dim
    for j in range(mesh.dim):
        np.add.at(b, mesh.surface_facets[:, j], share)
    return b


def assemble_stiffness(mesh: CellMesh) -> sp.csr_matrix:
    """P1 stiffness on the free DOFs (symmetric, constants in the kernel)."""
    return discretize(mesh).A


def assemble_lumped_mass(mesh: CellMesh) -> sp.dia_matrix:
    return sp.diags(discretize(mesh).m)


def assemble_surface_load(mesh: CellMesh, data: SurfaceData) -> np.ndarray:
    """Entries of the integral of sigma times each basis function over S."""
    return discretize(mesh).surface_load(data)


@dataclass(eq=False)
class Field:
    """One value per free DOF of ``mesh``."""

    mesh: CellMesh
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        n = discretize(self.mesh).n_dof
        if self.values.shape != (n,):
            raise MeshMismatch(f"field has {self.values.shape} values, mesh has {n} DOFs")
        if not np.all(np.isfinite(self.values)):
            raise BadParameter("field values must be finite")

    @classmethod
    def zeros(cls, mesh: CellMesh) -> "Field":
        return cls(mesh, np.zeros(discretize(mesh).n_dof))

    @classmethod
    def from_nodes(cls, mesh: CellMesh, node_values) -> "Field":
        return cls(mesh, discretize(mesh).from_nodes(node_values))

    def nodal(self) -> np.ndarray:
        return discretize(self.mesh).to_nodes(self.values)

    def _check(self, other: "Field"):
        if other.mesh is not self.mesh:
            raise MeshMismatch("fields live on different meshes")

    def __add__(self, other):
        if isinstance(other, Field):
            self._check(other)
            return Field(self.mesh, self.values + other.values)
        return Field(self.mesh, self.values + float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Field):
            self._check(other)
            return Field(self.mesh, self.values - other.values)
        return Field(self.mesh, self.values - float(other))

    def __mul__(self, c):
        return Field(self.mesh, self.values * float(c))

    __rmul__ = __mul__

    def __neg__(self):
        return Field(self.mesh, -self.values)

    def mean(self) -> float:
        d = discretize(self.mesh)
        return float(d.m @ self.values / d.volume)


def norms(f: Field) -> tuple[float, float, float, float]:
    """(L1, L2, H1, Linf) with lumped-mass quadrature."""
    d = discretize(f.mesh)
    v = f.values
    l1 = float(d.m @ np.abs(v))
    l2sq = float(d.m @ (v * v))
    grad = max(d.dirichlet_energy(v), 0.0)
    return l1, np.sqrt(l2sq), np.sqrt(l2sq + grad), float(np.max(np.abs(v))) if v.size else 0.0


NORM_NAMES = ("L1", "L2", "H1", "Linf")


def norm_dict(f: Field) -> dict:
    return dict(zip(NORM_NAMES, norms(f)))


# --------------------------------------------------------------------------
# linear algebra


def solve_spd(K: sp.spmatrix, rhs: np.ndarray, linear_tol: float = 1e-12) -> np.ndarray:
    """Solve a symmetric positive definite system, direct below DIRECT_LIMIT."""
    n = K.shape[0]
    if n == 0:
        return np.zeros(0)
    if n <= DIRECT_LIMIT:
        try:
            x = spla.splu(sp.csc_matrix(K)).solve(rhs)
        except RuntimeError as exc:
            raise LinearSolveFailure(f"sparse factorization failed: {exc}") from exc
    else:
        diag = K.diagonal()
        pre = spla.LinearOperator(K.shape, matvec=lambda r: r / diag)
        x, info = spla.cg(K, rhs, rtol=linear_tol, atol=0.0, M=pre, maxiter=20 * n)
        if info != 0:
            raise LinearSolveFailure(f"conjugate gradients did not converge (info={info})")
    if not np.all(np.isfinite(x)):
        raise LinearSolveFailure("linear solve produced non-finite values")
    return x


def solve_mean_constrained(K: sp.spmatrix, m: np.ndarray, rhs: np.ndarray, mean_target: float = 0.0,
                           linear_tol: float = 1e-12) -> np.ndarray:
    """Solve a singular K x = rhs (kernel = constants) with m.x = mean_target * sum(m).

    Uses the bordered system with a Lagrange multiplier; rhs must be compatible.
    """
    n = K.shape[0]
    target = mean_target * float(m.sum())
    if n <= DIRECT_LIMIT:
        col = sp.csr_matrix(m.reshape(-1, 1))
        bordered = sp.bmat([[K, col], [col.T, None]], format="csc")
        try:
            sol = spla.splu(bordered).solve(np.concatenate([rhs, [target]]))
        except RuntimeError as exc:
            raise LinearSolveFailure(f"bordered factorization failed: {exc}") from exc
        x = sol[:n]
    else:
        x, info = spla.cg(K, rhs, rtol=linear_tol, atol=0.0, maxiter=20 * n)
        if info != 0:
            raise LinearSolveFailure(f"conjugate gradients did not converge (info={info})")
        x = x + (target - m @ x) / m.sum()
    if not np.all(np.isfinite(x)):
        raise LinearSolveFailure("linear solve produced non-finite values")
    return x


# --------------------------------------------------------------------------
# pbfield text format


def write_field(f: Field, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(f"pbfield 1 {len(f.values)}\n")
        fh.writelines(f"{v:.17g}\n" for v in f.values)
    os.replace(tmp, path)


def read_field(path, mesh: Optional[CellMesh] = None):
    """Read a field file; returns a Field if ``mesh`` is given, else the raw array."""
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise ParseError("empty field file", 1)
    head = lines[0].split()
    if len(head) != 3 or head[:2] != ["pbfield", "1"]:
        raise ParseError("header must read 'pbfield 1 <dof_count>'", 1)
    try:
        count = int(head[2])
    except ValueError:
        raise ParseError("DOF count must be an integer", 1) from None
    if len(lines) - 1 != count:
        raise ParseError(f"expected {count} values, found {len(lines) - 1}", len(lines))
    values = np.empty(count)
    for i, ln in enumerate(lines[1:]):
        try:
            values[i] = float(ln)
        except ValueError:
            raise ParseError(f"cannot parse {ln!r} as a number", i + 2) from None
    return Field(mesh, values) if mesh is not None else values
