"""Structural model definition: quad4 meshes, regions, constraints, mesh files.

Dofs are numbered two per node, ``2 * node + direction`` with direction 0 = x
and 1 = y.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import IO, Iterable

import numpy as np


class MeshError(ValueError):
    """Invalid geometry, connectivity or constraint data."""


@dataclass(frozen=True)
class MaterialRegion:
    id: int
    young_modulus: float
    poisson_ratio: float
    mass_density: float

    def __post_init__(self):
        if not self.young_modulus > 0:
            raise MeshError(f"region {self.id}: young modulus must be positive")
        if not self.mass_density > 0:
            raise MeshError(f"region {self.id}: mass density must be positive")
        if not 0.0 <= self.poisson_ratio < 0.5:
            raise MeshError(f"region {self.id}: poisson ratio must lie in [0, 0.5)")


@dataclass(frozen=True, eq=False)
class Mesh:
    nodes: np.ndarray  # (n_nodes, 2) coordinates in meters
    elements: np.ndarray  # (n_elem, 4) node indices, counter-clockwise
    region_of_element: np.ndarray  # (n_elem,)
    thickness: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "nodes", np.array(self.nodes, dtype=float).reshape(-1, 2))
        object.__setattr__(self, "elements", np.array(self.elements, dtype=np.int64).reshape(-1, 4))
        object.__setattr__(self, "region_of_element",
                           np.array(self.region_of_element, dtype=np.int64).reshape(-1))
        for arr in (self.nodes, self.elements, self.region_of_element):
            arr.setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def n_dofs(self) -> int:
        return 2 * self.n_nodes

    def element_coords(self) -> np.ndarray:
        """(n_elem, 4, 2) corner coordinates."""
        return self.nodes[self.elements]

    def element_areas(self) -> np.ndarray:
        xy = self.element_coords()
        x, y = xy[..., 0], xy[..., 1]
        return 0.5 * np.sum(x * np.roll(y, -1, axis=1) - np.roll(x, -1, axis=1) * y, axis=1)

    def __eq__(self, other):
        if not isinstance(other, Mesh):
            return NotImplemented
        return (np.array_equal(self.nodes, other.nodes)
                and np.array_equal(self.elements, other.elements)
                and np.array_equal(self.region_of_element, other.region_of_element)
                and self.thickness == other.thickness)


@dataclass(frozen=True)
class ConstraintSet:
    """Fixed dofs and master-slave relations ``u[slave] = ratio * u[master]``.

    Dofs are given as ``(node, direction)`` pairs.
    """
    fixed_dofs: frozenset = frozenset()
    master_slave: tuple = ()  # ((slave_node, slave_dir), (master_node, master_dir), ratio)

    def __post_init__(self):
        object.__setattr__(self, "fixed_dofs",
                           frozenset((int(n), int(d)) for n, d in self.fixed_dofs))
        object.__setattr__(self, "master_slave", tuple(
            ((int(s[0]), int(s[1])), (int(m[0]), int(m[1])), float(r))
            for s, m, r in self.master_slave))
        slaves = [s for s, _, _ in self.master_slave]
        if len(set(slaves)) != len(slaves):
            raise MeshError("a dof is slave in more than one relation")
        both = self.fixed_dofs.intersection(slaves)
        if both:
            raise MeshError(f"dof {sorted(both)[0]} is both fixed and a slave")
        self.resolve_masters()

    def resolve_masters(self) -> dict:
        """Map every slave to ``(independent master dof, accumulated ratio)``.

        Raises on cyclic chains. A master that is itself fixed resolves to that
        fixed dof; callers treat it as zero.
        """
        link = {s: (m, r) for s, m, r in self.master_slave}
        resolved = {}
        for slave in link:
            seen = {slave}
            dof, ratio = slave, 1.0
            while dof in link:
                dof, r = link[dof]
                ratio *= r
                if dof in seen:
                    raise MeshError(f"cyclic master-slave chain through dof {dof}")
                seen.add(dof)
            resolved[slave] = (dof, ratio)
        return resolved

    def check_against(self, n_nodes: int):
        dofs = list(self.fixed_dofs)
        for s, m, _ in self.master_slave:
            dofs += [s, m]
        for node, direction in dofs:
            if not 0 <= node < n_nodes:
                raise MeshError(f"constraint references unknown node {node}")
            if direction not in (0, 1):
                raise MeshError(f"constraint direction must be 0 or 1, got {direction}")


@dataclass(frozen=True)
class DofMap:
    n_dofs: int
    fixed: np.ndarray  # sorted global indices
    slaves: np.ndarray  # sorted global indices
    free: np.ndarray  # independent dofs, sorted; column order of the null-space basis

    @property
    def n_free(self) -> int:
        return len(self.free)


def dof_index(node: int, direction: int) -> int:
    return 2 * node + direction


def dof_map(mesh: Mesh, constraints: ConstraintSet) -> DofMap:
    constraints.check_against(mesh.n_nodes)
    n = mesh.n_dofs
    fixed = np.array(sorted(dof_index(*d) for d in constraints.fixed_dofs), dtype=np.int64)
    slaves = np.array(sorted(dof_index(*s) for s, _, _ in constraints.master_slave), dtype=np.int64)
    mask = np.ones(n, dtype=bool)
    mask[fixed] = False
    mask[slaves] = False
    return DofMap(n, fixed, slaves, np.flatnonzero(mask))


def corner_jacobians(xy: np.ndarray) -> np.ndarray:
    """Jacobian determinants of the bilinear map at the 4 corners, (..., 4)."""
    prev = np.roll(xy, 1, axis=-2)
    nxt = np.roll(xy, -1, axis=-2)
    a = nxt - xy
    b = prev - xy
    return 0.25 * (a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0])


def validate(mesh: Mesh, regions: dict | None = None, constraints: ConstraintSet | None = None):
    """Raise :class:`MeshError` naming the first offending entity."""
    if mesh.thickness <= 0:
        raise MeshError("thickness must be positive")
    if not np.all(np.isfinite(mesh.nodes)):
        raise MeshError("non-finite node coordinates")
    if len(mesh.region_of_element) != mesh.n_elements:
        raise MeshError("region_of_element length differs from element count")
    for e, conn in enumerate(mesh.elements):
        bad = conn[(conn < 0) | (conn >= mesh.n_nodes)]
        if bad.size:
            raise MeshError(f"element {e}: unknown node {int(bad[0])}")
        if len(set(conn.tolist())) != 4:
            raise MeshError(f"element {e}: repeated node")
    if mesh.n_elements:
        dets = corner_jacobians(mesh.element_coords())
        bad = np.flatnonzero(np.any(dets <= 0, axis=1))
        if bad.size:
            raise MeshError(f"element {int(bad[0])}: negative Jacobian (clockwise or distorted)")
    if regions is not None:
        missing = set(np.unique(mesh.region_of_element).tolist()) - set(regions)
        if missing:
            raise MeshError(f"element references unknown region {min(missing)}")
    if constraints is not None:
        constraints.check_against(mesh.n_nodes)


# ---------------------------------------------------------------------------
# Canonical fixture

ARCH_PIER_WIDTH = 1.0
ARCH_THICKNESS = 0.4
ARCH_DEPTH = 1.0
ARCH_CANONICAL_REFINEMENT = 1

# material values of the arch fixture: region id -> (E [Pa], rho [kg/m^3])
ARCH_MATERIALS = {1: (3.25e9, 1800.0), 2: (5.00e9, 2200.0), 3: (4.80e9, 2100.0)}
ARCH_POISSON = 0.2


def arch_regions(poisson: float = ARCH_POISSON) -> dict:
    return {rid: MaterialRegion(rid, e, poisson, rho) for rid, (e, rho) in ARCH_MATERIALS.items()}


def _ring_divisions(radius: float, ring: float, k: int) -> int:
    h = ring / k
    return 4 * max(1, math.floor(math.pi * (radius + ring / 2) / (2 * h)))


@dataclass
class _NodeTable:
    coords: list = field(default_factory=list)
    index: dict = field(default_factory=dict)

    def add(self, key, xy) -> int:
        if key not in self.index:
            self.index[key] = len(self.coords)
            self.coords.append(xy)
        return self.index[key]


def build_arch_on_piers(span: float = 4.0, pier_height: float = 4.0,
                        refinement: int = ARCH_CANONICAL_REFINEMENT,
                        pier_width: float = ARCH_PIER_WIDTH,
                        arch_thickness: float = ARCH_THICKNESS,
                        thickness: float = ARCH_DEPTH):
    """Semicircular arch (region 1) on two clamped piers (regions 2 left, 3 right).

    Tiling rule with ``k = refinement + 1`` and target size ``h = t / k``
    (``t`` the arch ring thickness):

    * the ring has ``k`` radial layers and ``4 * floor(pi * (R + t/2) / (2h))``
      circumferential divisions, ``R = span / 2`` the intrados radius;
    * each pier is split into an inner band below the ring (``k`` columns) and
      an outer band (``ceil(k (w - t) / t)`` columns), with ``ceil(k H / t)``
      rows.

    The canonical refinement (1) gives 336 elements and 453 nodes.
    """
    if not (span > 0 and pier_height > 0 and pier_width > 0 and thickness > 0):
        raise MeshError("invalid geometry: dimensions must be positive")
    if not 0 < arch_thickness <= pier_width:
        raise MeshError("invalid geometry: arch thickness must lie in (0, pier width]")
    if int(refinement) != refinement or refinement < 0:
        raise MeshError("invalid geometry: refinement must be a non-negative integer")

    k = int(refinement) + 1
    R, t, w, H = span / 2.0, arch_thickness, pier_width, pier_height
    n_ring = k
    n_theta = _ring_divisions(R, t, k)
    n_outer = math.ceil(k * (w - t) / t - 1e-12) if w > t else 0
    n_rows = math.ceil(k * H / t - 1e-12)

    table = _NodeTable()
    elements, regions = [], []

    def pier(side: int, region: int):
        # side -1: left pier, x in [-(R+w), -R]; +1: right pier, x in [R, R+w]
        inner = [R + t * i / n_ring for i in range(n_ring + 1)]
        outer = [R + t + (w - t) * i / n_outer for i in range(1, n_outer + 1)] if n_outer else []
        radii = inner + outer  # distance from the symmetry axis
        xs = sorted(side * r for r in radii)
        ys = [H * j / n_rows for j in range(n_rows + 1)]
        for j in range(n_rows):
            for i in range(len(xs) - 1):
                ids = [table.add(("p", side, i, j), (xs[i], ys[j])),
                       table.add(("p", side, i + 1, j), (xs[i + 1], ys[j])),
                       table.add(("p", side, i + 1, j + 1), (xs[i + 1], ys[j + 1])),
                       table.add(("p", side, i, j + 1), (xs[i], ys[j + 1]))]
                elements.append(ids)
                regions.append(region)
        # ring springing nodes share the top row of the inner band
        for layer in range(n_ring + 1):
            x = side * (R + t * layer / n_ring)
            i = xs.index(x)
            theta_idx = 0 if side < 0 else n_theta
            table.index[("a", theta_idx, layer)] = table.index[("p", side, i, n_rows)]
        return [table.index[("p", side, i, 0)] for i in range(len(xs))]

    base = pier(-1, 2) + pier(+1, 3)

    for a in range(n_theta):
        th0 = math.pi * (1 - a / n_theta)
        th1 = math.pi * (1 - (a + 1) / n_theta)
        for layer in range(n_ring):
            r0 = R + t * layer / n_ring
            r1 = R + t * (layer + 1) / n_ring

            def node(ai, th, li, r):
                return table.add(("a", ai, li), (r * math.cos(th), H + r * math.sin(th)))

            elements.append([node(a, th0, layer, r0), node(a + 1, th1, layer, r0),
                             node(a + 1, th1, layer + 1, r1), node(a, th0, layer + 1, r1)])
            regions.append(1)

    mesh = Mesh(np.array(table.coords), np.array(elements), np.array(regions), thickness)
    fixed = frozenset((n, d) for n in base for d in (0, 1))
    constraints = ConstraintSet(fixed)
    validate(mesh, None, constraints)
    return mesh, constraints


def arch_primitive_area(span: float = 4.0, pier_height: float = 4.0,
                        refinement: int = ARCH_CANONICAL_REFINEMENT,
                        pier_width: float = ARCH_PIER_WIDTH,
                        arch_thickness: float = ARCH_THICKNESS) -> float:
    """Exact area of the generator's primitives: two rectangles and a chorded annular sector."""
    R, t = span / 2.0, arch_thickness
    n_theta = _ring_divisions(R, t, refinement + 1)
    ring = n_theta * 0.5 * ((R + t) ** 2 - R ** 2) * math.sin(math.pi / n_theta)
    return 2 * pier_width * pier_height + ring


# ---------------------------------------------------------------------------
# Mesh files

def _parse_region(item) -> MaterialRegion:
    try:
        return MaterialRegion(int(item["id"]), float(item["E"]), float(item["nu"]), float(item["rho"]))
    except (KeyError, TypeError) as exc:
        raise MeshError(f"region entry {item!r} is missing a field: {exc}") from None


def model_from_dict(doc: dict):
    """Build ``(mesh, constraints, regions)`` from a decoded mesh document."""
    for key in ("nodes", "elements", "regions"):
        if key not in doc:
            raise MeshError(f"mesh file missing key '{key}'")
    try:
        nodes = np.array(doc["nodes"], dtype=float)
    except (TypeError, ValueError):
        raise MeshError("nodes must be an array of [x, y] pairs") from None
    if nodes.ndim != 2 or (nodes.size and nodes.shape[1] != 2):
        raise MeshError("nodes must be an array of [x, y] pairs")
    conn, reg = [], []
    for e, item in enumerate(doc["elements"]):
        try:
            c = [int(v) for v in item["conn"]]
            reg.append(int(item["region"]))
        except (KeyError, TypeError, ValueError):
            raise MeshError(f"element {e}: expected {{conn: [4 ints], region: int}}") from None
        if len(c) != 4:
            raise MeshError(f"element {e}: expected 4 nodes, got {len(c)}")
        conn.append(c)
    regions = {}
    for item in doc["regions"]:
        r = _parse_region(item)
        if r.id in regions:
            raise MeshError(f"duplicate region id {r.id}")
        regions[r.id] = r
    cons = doc.get("constraints", {}) or {}
    try:
        fixed = [(int(n), int(d)) for n, d in cons.get("fixed", [])]
        ms = [((int(s), int(sd)), (int(m), int(md)), float(r))
              for s, sd, m, md, r in cons.get("master_slave", [])]
    except (TypeError, ValueError):
        raise MeshError("malformed constraints block") from None
    mesh = Mesh(nodes.reshape(-1, 2), np.array(conn, dtype=np.int64).reshape(-1, 4), reg,
                float(doc.get("thickness", 1.0)))
    constraints = ConstraintSet(frozenset(fixed), tuple(ms))
    validate(mesh, regions, constraints)
    return mesh, constraints, regions


def model_to_dict(mesh: Mesh, constraints: ConstraintSet, regions: dict) -> dict:
    return {
        "nodes": [[float(x), float(y)] for x, y in mesh.nodes],
        "elements": [{"conn": [int(v) for v in c], "region": int(r)}
                     for c, r in zip(mesh.elements, mesh.region_of_element)],
        "regions": [{"id": r.id, "E": r.young_modulus, "nu": r.poisson_ratio, "rho": r.mass_density}
                    for r in sorted(regions.values(), key=lambda r: r.id)],
        "constraints": {
            "fixed": [list(d) for d in sorted(constraints.fixed_dofs)],
            "master_slave": [[s[0], s[1], m[0], m[1], r] for s, m, r in constraints.master_slave],
        },
        "thickness": float(mesh.thickness),
    }


def load_mesh(stream: IO[str] | str):
    """Parse mesh-file text (or a readable stream) into ``(mesh, constraints, regions)``."""
    text = stream if isinstance(stream, str) else stream.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MeshError(f"mesh file is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise MeshError("mesh file must be a JSON object")
    return model_from_dict(doc)


def dump_mesh(mesh: Mesh, constraints: ConstraintSet, regions: dict) -> str:
    # json writes floats with repr, i.e. shortest round-tripping decimal (<= 17 digits)
    return json.dumps(model_to_dict(mesh, constraints, regions), indent=1)


def single_element_mesh(corners: Iterable = ((0, 0), (1, 0), (1, 1), (0, 1)),
                        thickness: float = 1.0) -> Mesh:
    return Mesh(np.array(corners, dtype=float), np.array([[0, 1, 2, 3]]), np.array([1]), thickness)
