"""Meshes of the fluid part of the periodic unit cell.

Two built-in geometries are provided: a 1-D slab (the fluid interval between
two charged walls) and the unit square with a centred circular inclusion.
Arbitrary triangulations can be read from the line-oriented ``pbmesh`` format.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import brentq

from .errors import BadParameter, MeshDegenerate, ParseError, ValidationError

AREA_FLOOR = 1e-14
COORD_TOL = 1e-10
MAX_BAND_RATIO = 1.15


@dataclass(frozen=True, eq=False)
class CellMesh:
    """Simplicial mesh of the fluid region Y_F.

    ``surface_facets`` holds node ids of each facet on the solid surface S
    (one node per facet in 1-D, two in 2-D). ``periodic_pairs`` rows are
    ``(master, slave)`` identifications across opposite faces of the cell.
    ``distance`` and ``nearest_surface`` give, per node, dist(y, S) and the
    index of the S-facet realising it.
    """

    dim: int
    nodes: np.ndarray
    elements: np.ndarray
    surface_facets: np.ndarray
    periodic_pairs: np.ndarray
    distance: np.ndarray
    nearest_surface: np.ndarray
    kind: str = "mesh"
    params: dict = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def n_surface(self) -> int:
        return len(self.surface_facets)

    @property
    def surface_nodes(self) -> np.ndarray:
        return np.unique(self.surface_facets)

    def element_measures(self) -> np.ndarray:
        return _simplex_measures(self.nodes, self.elements)

    def facet_measures(self) -> np.ndarray:
        if self.dim == 1:
            return np.ones(self.n_surface)
        p = self.nodes[self.surface_facets]
        return np.linalg.norm(p[:, 1] - p[:, 0], axis=1)

    def fluid_measure(self) -> float:
        return float(self.element_measures().sum())

    def surface_measure(self) -> float:
        return float(self.facet_measures().sum())


@dataclass(frozen=True, eq=False)
class SurfaceData:
    """Boundary data on S, one value per surface facet.

    Exactly one of ``sigma`` (imposed surface charge, Neumann) or ``zeta``
    (imposed potential, Dirichlet) is set.
    """

    sigma: Optional[np.ndarray] = None
    zeta: Optional[np.ndarray] = None
    mean_sigma_integral: float = 0.0

    def __post_init__(self):
        if (self.sigma is None) == (self.zeta is None):
            raise BadParameter("exactly one of sigma or zeta must be given")

    @property
    def is_neumann(self) -> bool:
        return self.sigma is not None

    @classmethod
    def neumann(cls, mesh: CellMesh, sigma) -> "SurfaceData":
        s = _per_facet(mesh, sigma)
        return cls(sigma=s, mean_sigma_integral=float(np.dot(s, mesh.facet_measures())))

    @classmethod
    def dirichlet(cls, mesh: CellMesh, zeta) -> "SurfaceData":
        return cls(zeta=_per_facet(mesh, zeta))

    def node_zeta(self, mesh: CellMesh) -> np.ndarray:
        """Dirichlet value per S node: average of the incident facet values."""
        total = np.zeros(mesh.n_nodes)
        count = np.zeros(mesh.n_nodes)
        for k in range(mesh.surface_facets.shape[1]):
            np.add.at(total, mesh.surface_facets[:, k], self.zeta)
            np.add.at(count, mesh.surface_facets[:, k], 1.0)
        nodes = mesh.surface_nodes
        return nodes, total[nodes] / count[nodes]


def _per_facet(mesh, values):
    v = np.asarray(values, dtype=float)
    if v.ndim == 0:
        v = np.full(mesh.n_surface, float(v))
    if v.shape != (mesh.n_surface,):
        raise BadParameter(f"expected {mesh.n_surface} facet values, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise BadParameter("surface data must be finite")
    return v


def surface_integral(mesh: CellMesh, data: SurfaceData) -> float:
    """Integral of sigma over S (facet-wise constant data)."""
    if data.sigma is None:
        raise BadParameter("surface_integral needs sigma data")
    return float(np.dot(data.sigma, mesh.facet_measures()))


def _simplex_measures(nodes, elements):
    p = nodes[elements]
    if p.shape[-1] == 1:
        return p[:, 1, 0] - p[:, 0, 0]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


# --------------------------------------------------------------------------
# distance to S


def _point_facet_distances(points, seg_a, seg_b):
    """Distances (npts, nfacets) from points to segments [a, b]."""
    d = seg_b - seg_a
    len2 = np.einsum("ij,ij->i", d, d)
    rel = points[:, None, :] - seg_a[None, :, :]
    t = np.einsum("pij,ij->pi", rel, d) / np.where(len2 > 0, len2, 1.0)
    t = np.clip(t, 0.0, 1.0)
    closest = seg_a[None] + t[..., None] * d[None]
    return np.linalg.norm(points[:, None, :] - closest, axis=-1)


def nearest_facets(nodes, facets, dim, chunk=2048):
    """Exact distance to S and the lowest-index nearest facet for every node."""
    n = len(nodes)
    dist = np.empty(n)
    idx = np.empty(n, dtype=int)
    for start in range(0, n, chunk):
        pts = nodes[start:start + chunk]
        if dim == 1:
            dd = np.abs(pts[:, 0][:, None] - nodes[facets[:, 0], 0][None, :])
        else:
            dd = _point_facet_distances(pts, nodes[facets[:, 0]], nodes[facets[:, 1]])
        k = np.argmin(dd, axis=1)  # argmin returns the first minimiser
        idx[start:start + chunk] = k
        dist[start:start + chunk] = dd[np.arange(len(pts)), k]
    return dist, idx


# --------------------------------------------------------------------------
# built-in geometries


def slab_spacing(width: float, n_cells: int, grading: float) -> np.ndarray:
    half = n_cells // 2
    ramp = grading ** np.arange(half)
    if n_cells % 2:
        cells = np.concatenate([ramp, [grading**half], ramp[::-1]])
    else:
        cells = np.concatenate([ramp, ramp[::-1]])
    return width * cells / cells.sum()


def build_slab(width: float = 1.0, n_cells: int = 100, grading: float = 1.0) -> CellMesh:
    """1-D fluid interval (0, width) with both endpoints on S.

    Cell lengths grow geometrically by ``grading`` from each wall towards the
    centre; ``grading = 1`` gives a uniform mesh.
    """
    if not (0 < width <= 1):
        raise BadParameter(f"width must lie in (0, 1], got {width}")
    if int(n_cells) != n_cells or n_cells < 2:
        raise BadParameter(f"n_cells must be an integer >= 2, got {n_cells}")
    if not grading >= 1:
        raise BadParameter(f"grading must be >= 1, got {grading}")
    n_cells = int(n_cells)
    h = slab_spacing(width, n_cells, grading)
    x = np.concatenate([[0.0], np.cumsum(h)])
    x[-1] = width
    if np.min(np.diff(x)) <= 0:
        raise MeshDegenerate("slab spacing underflows; reduce grading or n_cells")
    nodes = x[:, None]
    elements = np.column_stack([np.arange(n_cells), np.arange(1, n_cells + 1)])
    facets = np.array([[0], [n_cells]])
    dist = np.minimum(x, width - x)
    nearest = np.where(x <= width - x, 0, 1)
    return CellMesh(1, nodes, elements, facets, np.zeros((0, 2), dtype=int), dist, nearest,
                    kind="slab", params=dict(width=width, n_cells=n_cells, grading=grading))


def disk_distance(points, radius: float, center=(0.5, 0.5)) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    return np.linalg.norm(pts - np.asarray(center), axis=1) - radius


def _band_radii(radius, layer_thickness, layer_cells, target_h):
    """Radii of the graded band, finest next to the inclusion.

    Cells grow geometrically away from S so that the outermost one is close
    to ``min(target_h, layer_thickness)``; the ratio is capped at
    MAX_BAND_RATIO so many layers never collapse the first cell.
    """
    m = layer_cells
    h_last = min(target_h, layer_thickness)
    if layer_thickness / m >= h_last:
        g = 1.0
    else:
        f = lambda r: h_last * (1 - r**-m) / (1 - 1 / r) - layer_thickness  # noqa: E731
        g = min(brentq(f, 1 + 1e-12, 1e3), MAX_BAND_RATIO)
    steps = g ** np.arange(m, dtype=float)
    steps *= layer_thickness / steps.sum()
    return radius + np.concatenate([[0.0], np.cumsum(steps)])


def _square_point(theta):
    """Where the ray from the cell centre at angle ``theta`` leaves the unit square."""
    c, s = math.cos(theta), math.sin(theta)
    t = 0.5 / max(abs(c), abs(s))
    return 0.5 + t * c, 0.5 + t * s


def build_disk_cell(radius: float = 0.25, target_h: float = 0.02,
                    layer_thickness: float = 0.1, layer_cells: int = 10) -> CellMesh:
    """Unit square minus a centred disk, triangulated boundary-conformingly.

    A structured band of ``layer_cells`` radial layers, graded towards S,
    wraps the disk out to ``radius + layer_thickness``. Beyond it the band
    ring is blended linearly onto the square boundary with spacing close to
    ``target_h``. Opposite square edges carry matching nodes and are paired.
    """
    if not (0 < radius < 0.5):
        raise BadParameter(f"radius must lie in (0, 0.5), got {radius}")
    if not (layer_thickness > 0 and radius + layer_thickness < 0.5):
        raise BadParameter("need layer_thickness > 0 and radius + layer_thickness < 0.5")
    if not (0 < target_h < 0.5):
        raise BadParameter(f"target_h must lie in (0, 0.5), got {target_h}")
    if int(layer_cells) != layer_cells or layer_cells < 1:
        raise BadParameter("layer_cells must be a positive integer")
    layer_cells = int(layer_cells)

    n_theta = 8 * max(1, math.ceil(4.0 / (8 * target_h)))
    theta = 2 * math.pi * np.arange(n_theta) / n_theta
    center = np.array([0.5, 0.5])
    radii = _band_radii(radius, layer_thickness, layer_cells, target_h)
    ring_out = radii[-1]
    gap = math.sqrt(0.5) - ring_out
    n_outer = max(1, math.ceil(gap / target_h))

    direction = np.column_stack([np.cos(theta), np.sin(theta)])
    square = np.array([_square_point(t) for t in theta])
    layers = [center + r * direction for r in radii]
    for s in np.linspace(0.0, 1.0, n_outer + 1)[1:]:
        layers.append((1 - s) * (center + ring_out * direction) + s * square)
    nodes = np.concatenate(layers)
    n_rings = len(layers)

    # snap the square boundary ring exactly onto the cell edges
    outer = np.arange((n_rings - 1) * n_theta, n_rings * n_theta)
    b = nodes[outer]
    b[np.abs(b) < COORD_TOL] = 0.0
    b[np.abs(b - 1) < COORD_TOL] = 1.0
    nodes[outer] = b

    tris = []
    for k in range(n_rings - 1):
        for j in range(n_theta):
            a = k * n_theta + j
            bb = k * n_theta + (j + 1) % n_theta
            c = (k + 1) * n_theta + (j + 1) % n_theta
            d = (k + 1) * n_theta + j
            if np.linalg.norm(nodes[a] - nodes[c]) <= np.linalg.norm(nodes[bb] - nodes[d]):
                tris += [(a, bb, c), (a, c, d)]
            else:
                tris += [(a, bb, d), (bb, c, d)]
    elements = np.array(tris, dtype=int)
    area = _simplex_measures(nodes, elements)
    flip = area < 0
    elements[flip] = elements[flip][:, [0, 2, 1]]
    if np.min(np.abs(area)) < AREA_FLOOR:
        raise MeshDegenerate("disk cell produced a degenerate triangle")

    facets = np.column_stack([np.arange(n_theta), (np.arange(n_theta) + 1) % n_theta])
    pairs = _pair_square_boundary(nodes, outer)
    for master, slave in pairs:
        nodes[slave] = nodes[master] + np.round(nodes[slave] - nodes[master])

    dist = disk_distance(nodes, radius)
    dist[:n_theta] = 0.0
    _, nearest = nearest_facets(nodes, facets, 2)
    return CellMesh(2, nodes, elements, facets, pairs, dist, nearest, kind="disk",
                    params=dict(radius=radius, target_h=target_h,
                                layer_thickness=layer_thickness, layer_cells=layer_cells))


def _pair_square_boundary(nodes, candidates):
    """(master, slave) pairs: x = 1 onto x = 0 and y = 1 onto y = 0."""
    pts = nodes[candidates]
    pairs = []

    def match(slave_mask, master_mask, axis):
        other = 1 - axis
        masters = candidates[master_mask]
        for s in candidates[slave_mask]:
            hit = masters[np.abs(nodes[masters, other] - nodes[s, other]) < 1e-9]
            if len(hit) != 1:
                raise MeshDegenerate(f"no periodic partner for boundary node {s}")
            pairs.append((int(hit[0]), int(s)))

    on = lambda axis, v: np.abs(pts[:, axis] - v) < COORD_TOL  # noqa: E731
    match(on(0, 1.0), on(0, 0.0), 0)
    # (1, 1) is already paired with (0, 1); pairing it again would double-map it
    match(on(1, 1.0) & ~on(0, 1.0), on(1, 0.0), 1)
    return np.array(sorted(pairs, key=lambda p: p[1]), dtype=int).reshape(-1, 2)


# --------------------------------------------------------------------------
# periodic bookkeeping and validation


def resolve_masters(mesh: CellMesh) -> np.ndarray:
    """Map every node to the free node it is identified with."""
    owner = np.arange(mesh.n_nodes)
    for master, slave in mesh.periodic_pairs:
        owner[slave] = master
    for _ in range(mesh.dim + 1):
        owner = owner[owner]
    return owner


def _boundary_facets(mesh: CellMesh) -> np.ndarray:
    if mesh.dim == 1:
        counts = np.bincount(mesh.elements.ravel(), minlength=mesh.n_nodes)
        return np.flatnonzero(counts == 1)[:, None]
    e = mesh.elements
    edges = np.sort(np.concatenate([e[:, [0, 1]], e[:, [1, 2]], e[:, [2, 0]]]), axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    return uniq[counts == 1]


def validate_mesh(mesh: CellMesh) -> None:
    """Raise ValidationError naming the first violated CellMesh invariant."""
    n = mesh.n_nodes
    if mesh.dim not in (1, 2):
        raise ValidationError("dimension must be 1 or 2")
    if mesh.nodes.shape != (n, mesh.dim):
        raise ValidationError("node coordinates do not match the dimension")
    if np.any(mesh.nodes < -COORD_TOL) or np.any(mesh.nodes > 1 + COORD_TOL):
        raise ValidationError("node coordinates must lie in the unit cell [0, 1]^d")
    for name, arr in (("elements", mesh.elements), ("surface", mesh.surface_facets),
                      ("periodic", mesh.periodic_pairs)):
        if arr.size and (arr.min() < 0 or arr.max() >= n):
            raise ValidationError(f"{name} section references a node id out of range")
    if mesh.elements.shape[1] != mesh.dim + 1:
        raise ValidationError("elements must have dim + 1 nodes")
    if mesh.surface_facets.shape[1] != mesh.dim:
        raise ValidationError("surface facets must have dim nodes")
    if np.any(mesh.element_measures() <= 0):
        raise ValidationError("every element must have positive measure (check orientation)")
    if mesh.n_surface == 0:
        raise ValidationError("the surface S must contain at least one facet")

    boundary = {tuple(sorted(f)) for f in _boundary_facets(mesh).tolist()}
    surface = {tuple(sorted(f)) for f in mesh.surface_facets.tolist()}
    if not surface <= boundary:
        raise ValidationError("a surface facet is not a boundary facet of the mesh")
    outer = boundary - surface
    outer_nodes = set()
    for f in outer:
        x = mesh.nodes[list(f)]
        on_face = [np.all(np.abs(x[:, a]) < COORD_TOL) or np.all(np.abs(x[:, a] - 1) < COORD_TOL)
                   for a in range(mesh.dim)]
        if not any(on_face):
            raise ValidationError(f"boundary facet {f} is neither on S nor on the cell boundary")
        outer_nodes.update(f)

    pairs = mesh.periodic_pairs
    uses = np.bincount(pairs.ravel(), minlength=n) if pairs.size else np.zeros(n, dtype=int)
    for v in outer_nodes:
        x = mesh.nodes[v]
        faces = int(np.sum((np.abs(x) < COORD_TOL) | (np.abs(x - 1) < COORD_TOL)))
        allowed = (1,) if faces <= 1 else (1, 2)
        if uses[v] not in allowed:
            raise ValidationError(
                f"outer-boundary node {v} appears in {uses[v]} periodic pairs "
                f"(expected {' or '.join(map(str, allowed))})")
    for master, slave in pairs:
        shift = mesh.nodes[slave] - mesh.nodes[master]
        if not (np.isclose(np.sum(np.abs(shift)), 1.0, atol=1e-9)
                and np.isclose(np.max(np.abs(shift)), 1.0, atol=1e-9)):
            raise ValidationError(f"periodic pair ({master}, {slave}) is not a unit translation")
    if len(set(pairs[:, 1].tolist())) != len(pairs):
        raise ValidationError("a node is the slave of more than one periodic pair")

    if np.any(mesh.distance < 0):
        raise ValidationError("distance values must be nonnegative")
    on_s = np.zeros(n, dtype=bool)
    on_s[mesh.surface_nodes] = True
    if np.any(mesh.distance[on_s] != 0) or np.any(mesh.distance[~on_s] <= 0):
        raise ValidationError("distance must vanish exactly on S nodes")
    edges = mesh.elements[:, [0, 1]] if mesh.dim == 1 else np.concatenate(
        [mesh.elements[:, [0, 1]], mesh.elements[:, [1, 2]], mesh.elements[:, [2, 0]]])
    length = np.linalg.norm(mesh.nodes[edges[:, 0]] - mesh.nodes[edges[:, 1]], axis=1)
    jump = np.abs(mesh.distance[edges[:, 0]] - mesh.distance[edges[:, 1]])
    if np.any(jump > length * (1 + 1e-9) + 1e-12):
        raise ValidationError("distance is not 1-Lipschitz along mesh edges")


# --------------------------------------------------------------------------
# pbmesh text format


def write_mesh(mesh: CellMesh, path) -> None:
    lines = [f"pbmesh 1 {mesh.dim}", f"nodes {mesh.n_nodes}"]
    lines += [f"{i} " + " ".join(f"{c:.17g}" for c in p) for i, p in enumerate(mesh.nodes)]
    lines.append(f"elements {mesh.n_elements}")
    lines += [f"{i} " + " ".join(map(str, e)) for i, e in enumerate(mesh.elements)]
    lines.append(f"surface {mesh.n_surface}")
    lines += [" ".join(map(str, f)) for f in mesh.surface_facets]
    lines.append(f"periodic {len(mesh.periodic_pairs)}")
    lines += [f"{m} {s}" for m, s in mesh.periodic_pairs]
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def _parse_number(tok, lineno, kind=float):
    try:
        return kind(tok)
    except ValueError:
        raise ParseError(f"cannot parse {tok!r} as {kind.__name__}", lineno) from None


def load_mesh(path) -> CellMesh:
    """Read and validate a ``pbmesh`` file; distances are recomputed exactly."""
    with open(path) as fh:
        raw = fh.read().splitlines()
    rows = [(i + 1, ln.split()) for i, ln in enumerate(raw) if ln.strip() and not ln.lstrip().startswith("#")]
    if not rows:
        raise ParseError("empty mesh file", 1)
    lineno, head = rows[0]
    if len(head) != 3 or head[0] != "pbmesh" or head[1] != "1" or head[2] not in ("1", "2"):
        raise ParseError("header must read 'pbmesh 1 <dim>' with dim 1 or 2", lineno)
    dim = int(head[2])
    pos = 1

    def section(name, width, kind, with_id):
        nonlocal pos
        if pos >= len(rows):
            raise ParseError(f"missing '{name}' section", raw and len(raw))
        ln, toks = rows[pos]
        if len(toks) != 2 or toks[0] != name:
            raise ParseError(f"expected '{name} <count>'", ln)
        count = _parse_number(toks[1], ln, int)
        pos += 1
        out = []
        for k in range(count):
            if pos >= len(rows):
                raise ParseError(f"'{name}' section ends after {k} of {count} entries", len(raw))
            ln, toks = rows[pos]
            pos += 1
            if with_id:
                if len(toks) != width + 1:
                    raise ParseError(f"expected id and {width} values", ln)
                if _parse_number(toks[0], ln, int) != k:
                    raise ParseError(f"{name} ids must be consecutive from 0", ln)
                toks = toks[1:]
            elif len(toks) != width:
                raise ParseError(f"expected {width} values", ln)
            out.append([_parse_number(t, ln, kind) for t in toks])
        return np.array(out, dtype=kind).reshape(count, width)

    nodes = section("nodes", dim, float, True)
    elements = section("elements", dim + 1, int, True)
    facets = section("surface", dim, int, False)
    pairs = section("periodic", 2, int, False)
    if pos != len(rows):
        raise ParseError("unexpected content after the periodic section", rows[pos][0])

    if elements.size and (elements.min() < 0 or elements.max() >= len(nodes)):
        raise ValidationError("elements section references a node id out of range")
    if facets.size and (facets.min() < 0 or facets.max() >= len(nodes)):
        raise ValidationError("surface section references a node id out of range")
    if facets.size == 0:
        raise ValidationError("the surface S must contain at least one facet")
    dist, nearest = nearest_facets(nodes, facets, dim)
    dist[np.unique(facets)] = 0.0
    mesh = CellMesh(dim, nodes, elements, facets, pairs, dist, nearest, kind="file",
                    params=dict(path=str(path)))
    validate_mesh(mesh)
    return mesh
