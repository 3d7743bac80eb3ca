"""Parametric stiffness/mass assembly and exact constraint elimination.

``K(x) = sum_j E_j(x) Kbar_j`` and ``M(x) = sum_j rho_j(x) Mbar_j`` where the
unit blocks ``Kbar_j`` (E = 1) and ``Mbar_j`` (rho = 1) are assembled once per
region on a shared sparsity pattern.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .mesh import ConstraintSet, Mesh, MeshError, dof_index, dof_map, validate

PROPERTIES = ("E", "rho")


class ElementDistortionError(MeshError):
    pass


class BindingError(ValueError):
    pass


class DomainError(ValueError):
    """Parameter vector outside the box."""


class ConstraintError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Element

_CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])


def gauss_rule(order: int):
    """Tensor Gauss-Legendre points (k, 2) and weights (k,) on [-1, 1]^2."""
    pts, wts = np.polynomial.legendre.leggauss(order)
    xi, eta = np.meshgrid(pts, pts, indexing="ij")
    w = np.outer(wts, wts)
    return np.column_stack([xi.ravel(), eta.ravel()]), w.ravel()


def _shape(xi, eta):
    n = 0.25 * (1 + xi * _CORNERS[:, 0]) * (1 + eta * _CORNERS[:, 1])
    dxi = 0.25 * _CORNERS[:, 0] * (1 + eta * _CORNERS[:, 1])
    deta = 0.25 * _CORNERS[:, 1] * (1 + xi * _CORNERS[:, 0])
    return n, np.vstack([dxi, deta])


def plane_strain_matrix(young: float, poisson: float) -> np.ndarray:
    c = young / ((1 + poisson) * (1 - 2 * poisson))
    return c * np.array([[1 - poisson, poisson, 0.0],
                         [poisson, 1 - poisson, 0.0],
                         [0.0, 0.0, 0.5 - poisson]])


def _constitutive(young, poisson):
    ne = len(young)
    c = (young / ((1 + poisson) * (1 - 2 * poisson)))[:, None, None]
    return c * np.stack([
        np.stack([1 - poisson, poisson, np.zeros(ne)], -1),
        np.stack([poisson, 1 - poisson, np.zeros(ne)], -1),
        np.stack([np.zeros(ne), np.zeros(ne), 0.5 - poisson], -1),
    ], 1)


def _quadrature_terms(xy, order):
    """Per Gauss point: weight, shape values, ``det J`` (ne,) and strain-displacement B (ne, 3, 8)."""
    ne = len(xy)
    points, weights = gauss_rule(order)
    for (xi, eta), wq in zip(points, weights):
        n, dn = _shape(xi, eta)
        jac = np.einsum("ai,eij->eaj", dn, xy)  # (ne, 2, 2)
        det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        if np.any(det <= 0):
            bad = int(np.flatnonzero(det <= 0)[0])
            raise ElementDistortionError(f"element {bad}: non-positive Jacobian at a quadrature point")
        inv = np.stack([np.stack([jac[:, 1, 1], -jac[:, 0, 1]], -1),
                        np.stack([-jac[:, 1, 0], jac[:, 0, 0]], -1)], 1) / det[:, None, None]
        dxy = np.einsum("eab,bi->eai", inv, dn)  # (ne, 2, 4) physical derivatives
        B = np.zeros((ne, 3, 8))
        B[:, 0, 0::2] = dxy[:, 0]
        B[:, 1, 1::2] = dxy[:, 1]
        B[:, 2, 0::2] = dxy[:, 1]
        B[:, 2, 1::2] = dxy[:, 0]
        yield wq, n, det, B


def _batch_args(xy, *props):
    xy = np.asarray(xy, dtype=float).reshape(-1, 4, 2)
    return (xy,) + tuple(np.broadcast_to(np.asarray(v, dtype=float), (len(xy),)) for v in props)


def element_matrices_batch(xy: np.ndarray, young, poisson, density, thickness: float,
                           order: int = 2):
    """Stiffness and consistent mass of bilinear plane-strain quads.

    ``xy`` is (n_elem, 4, 2); material arguments broadcast per element.
    Returns two (n_elem, 8, 8) arrays.
    """
    xy, young, poisson, density = _batch_args(xy, young, poisson, density)
    ne = len(xy)
    D = _constitutive(young, poisson)
    k = np.zeros((ne, 8, 8))
    m = np.zeros((ne, 8, 8))
    for wq, n, det, B in _quadrature_terms(xy, order):
        scale = (wq * thickness * det)[:, None, None]
        k += scale * np.einsum("eki,ekl,elj->eij", B, D, B)
        N = np.zeros((2, 8))
        N[0, 0::2] = n
        N[1, 1::2] = n
        m += (scale * density[:, None, None]) * (N.T @ N)[None]
    return k, m


def element_strain_operators(xy: np.ndarray, young, poisson, thickness: float, order: int = 2):
    """Weighted strain operators G (n_elem, 3 * order**2, 8) with ``k_e = G^T G``.

    ``|G v_e|^2`` is the strain energy (times two) as a sum of squares, which
    stays accurate for soft modes where ``v^T K v`` cancels badly.
    """
    xy, young, poisson = _batch_args(xy, young, poisson)
    L = np.linalg.cholesky(_constitutive(young, poisson))
    blocks = [np.sqrt(wq * thickness * det)[:, None, None] * np.einsum("eki,ekj->eij", L, B)
              for wq, _, det, B in _quadrature_terms(xy, order)]
    return np.concatenate(blocks, axis=1)


def element_matrices(coords, young: float, poisson: float, density: float,
                     thickness: float = 1.0, order: int = 2):
    """8x8 stiffness and consistent mass of one quad (dof order x0, y0, x1, ...)."""
    k, m = element_matrices_batch(np.asarray(coords)[None], young, poisson, density, thickness, order)
    return k[0], m[0]


# ---------------------------------------------------------------------------
# Parameters

@dataclass(frozen=True)
class ParamBinding:
    name: str
    property: str  # "E" or "rho"
    regions: tuple  # region ids sharing this value

    def __post_init__(self):
        if self.property not in PROPERTIES:
            if self.property in ("nu", "poisson"):
                raise BindingError("poisson ratio cannot be a free parameter")
            raise BindingError(f"unknown property {self.property!r}; expected 'E' or 'rho'")
        regions = (self.regions,) if isinstance(self.regions, (int, np.integer)) else self.regions
        object.__setattr__(self, "regions", tuple(int(r) for r in regions))
        if not self.regions:
            raise BindingError(f"parameter {self.name!r} binds no region")


@dataclass(frozen=True, eq=False)
class ParamSpace:
    """The box of admissible parameters and where the search starts."""
    bindings: tuple
    lower: np.ndarray
    upper: np.ndarray
    start: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "bindings", tuple(self.bindings))
        lo = np.asarray(self.lower, dtype=float).reshape(-1)
        hi = np.asarray(self.upper, dtype=float).reshape(-1)
        if not (len(lo) == len(hi) == len(self.bindings)):
            raise BindingError("bounds and bindings have different lengths")
        if np.any(~(lo < hi)):
            raise BindingError("every lower bound must be below its upper bound")
        start = 0.5 * (lo + hi) if self.start is None else np.asarray(self.start, dtype=float).reshape(-1)
        if len(start) != len(lo):
            raise BindingError("start point has the wrong length")
        seen = set()
        for b in self.bindings:
            for r in b.regions:
                if (r, b.property) in seen:
                    raise BindingError(f"region {r} property {b.property} bound twice")
                seen.add((r, b.property))
        for arr in (lo, hi, start):
            arr.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "start", start)
        self.check(start)

    @property
    def dim(self) -> int:
        return len(self.bindings)

    @property
    def names(self) -> list:
        return [b.name for b in self.bindings]

    def contains(self, x, rtol: float = 1e-12) -> bool:
        x = np.asarray(x, dtype=float)
        slack = rtol * (self.upper - self.lower)
        return bool(np.all(x >= self.lower - slack) and np.all(x <= self.upper + slack))

    def check(self, x):
        x = np.asarray(x, dtype=float).reshape(-1)
        if len(x) != self.dim:
            raise DomainError(f"expected {self.dim} parameters, got {len(x)}")
        if not self.contains(x):
            raise DomainError(f"x = {x.tolist()} lies outside the parameter box")
        return x

    def to_unit(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.lower) / (self.upper - self.lower)

    def from_unit(self, u) -> np.ndarray:
        return self.lower + np.asarray(u, dtype=float) * (self.upper - self.lower)

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    def with_start(self, start) -> "ParamSpace":
        return ParamSpace(self.bindings, self.lower, self.upper, start)


EMPTY_SPACE = ParamSpace((), np.zeros(0), np.zeros(0))


# ---------------------------------------------------------------------------
# Shared-pattern sparse blocks

def _pattern(rows, cols, n):
    key = rows.astype(np.int64) * n + cols
    uniq, inverse = np.unique(key, return_inverse=True)
    r, c = np.divmod(uniq, n)
    counts = np.bincount(r, minlength=n)
    indptr = np.concatenate([[0], np.cumsum(counts)])
    return indptr, c.astype(np.int64), inverse, len(uniq)


def _align(mats: Sequence[sp.spmatrix], n: int):
    """Express several n x n matrices on their union pattern -> (indptr, indices, [data])."""
    coos = [sp.coo_matrix(m) for m in mats]
    if not coos:
        return np.zeros(n + 1, dtype=np.int64), np.zeros(0, dtype=np.int64), []
    rows = np.concatenate([c.row for c in coos])
    cols = np.concatenate([c.col for c in coos])
    indptr, indices, inverse, nnz = _pattern(rows, cols, n)
    data, start = [], 0
    for c in coos:
        data.append(np.bincount(inverse[start:start + c.nnz], weights=c.data, minlength=nnz))
        start += c.nnz
    return indptr, indices, data


@dataclass(frozen=True, eq=False)
class BlockFamily:
    """Matrices sharing one CSR pattern; ``combine(c)`` returns ``sum_j c_j B_j``."""
    shape: tuple
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray  # (n_blocks, nnz)

    def combine(self, coeffs) -> sp.csr_matrix:
        values = np.asarray(coeffs, dtype=float) @ self.data
        return sp.csr_matrix((values, self.indices, self.indptr), shape=self.shape)

    def block(self, j: int) -> sp.csr_matrix:
        return sp.csr_matrix((self.data[j].copy(), self.indices, self.indptr), shape=self.shape)

    def __len__(self):
        return len(self.data)

    @classmethod
    def from_matrices(cls, mats, n: int) -> "BlockFamily":
        indptr, indices, data = _align(mats, n)
        arr = np.array(data).reshape(len(mats), len(indices))
        return cls((n, n), indptr, indices, arr)


def _property_table(regions, space: ParamSpace):
    """Per region: (E source, rho source), each a parameter index or a constant."""
    bound = {}
    for i, b in enumerate(space.bindings):
        for r in b.regions:
            if r not in regions:
                raise BindingError(f"parameter {b.name!r} binds nonexistent region {r}")
            bound[(r, b.property)] = i
    return bound


@dataclass(frozen=True, eq=False)
class ParametricSystem:
    region_ids: tuple
    stiffness: BlockFamily  # unit-E blocks, one per region
    mass: BlockFamily  # unit-rho blocks, one per region
    space: ParamSpace
    e_index: np.ndarray  # parameter index feeding E of each region, -1 = constant
    rho_index: np.ndarray
    e_const: np.ndarray
    rho_const: np.ndarray
    strain: tuple = ()  # per region, sparse G_j with Kbar_j = G_j^T G_j

    @property
    def n_dofs(self) -> int:
        return self.stiffness.shape[0]

    def region_values(self, x):
        """Young's modulus and density per region at ``x``."""
        x = np.asarray(x, dtype=float).reshape(-1)
        e = np.where(self.e_index >= 0, x[np.maximum(self.e_index, 0)] if x.size else 0.0, self.e_const)
        rho = np.where(self.rho_index >= 0, x[np.maximum(self.rho_index, 0)] if x.size else 0.0,
                       self.rho_const)
        return e, rho

    def instantiate(self, x=None):
        """Full ``(K, M)`` at ``x`` (defaults to the start point)."""
        x = self.space.start if x is None else self.space.check(x)
        e, rho = self.region_values(x)
        return self.stiffness.combine(e), self.mass.combine(rho)

    def derivative_coeffs(self, i: int):
        """Coefficients of dK/dx_i and dM/dx_i over the region blocks."""
        return ((self.e_index == i).astype(float), (self.rho_index == i).astype(float))


def assemble_parametric(mesh: Mesh, regions: dict, space: ParamSpace = EMPTY_SPACE) -> ParametricSystem:
    validate(mesh, regions)
    bound = _property_table(regions, space)
    region_ids = tuple(sorted(regions))
    nu = np.array([regions[r].poisson_ratio for r in mesh.region_of_element])
    k, m = element_matrices_batch(mesh.element_coords(), 1.0, nu, 1.0, mesh.thickness)

    n = mesh.n_dofs
    dofs = np.stack([2 * mesh.elements, 2 * mesh.elements + 1], axis=-1).reshape(-1, 8)
    rows = np.repeat(dofs, 8, axis=1).ravel()
    cols = np.tile(dofs, (1, 8)).ravel()
    indptr, indices, inverse, nnz = _pattern(rows, cols, n)
    inverse = inverse.reshape(mesh.n_elements, 64)
    kd = np.zeros((len(region_ids), nnz))
    md = np.zeros((len(region_ids), nnz))
    for j, rid in enumerate(region_ids):
        sel = mesh.region_of_element == rid
        if np.any(sel):
            kd[j] = np.bincount(inverse[sel].ravel(), weights=k[sel].ravel(), minlength=nnz)
            md[j] = np.bincount(inverse[sel].ravel(), weights=m[sel].ravel(), minlength=nnz)
    stiff = BlockFamily((n, n), indptr, indices, kd)
    mass = BlockFamily((n, n), indptr, indices, md)

    g = element_strain_operators(mesh.element_coords(), 1.0, nu, mesh.thickness)
    nr = g.shape[1]
    g_rows = np.repeat(np.arange(mesh.n_elements * nr), 8)
    g_cols = np.repeat(dofs, nr, axis=0).ravel()
    G = sp.csr_matrix((g.ravel(), (g_rows, g_cols)), shape=(mesh.n_elements * nr, n))
    row_region = np.repeat(mesh.region_of_element, nr)
    strain = tuple(G[row_region == rid] for rid in region_ids)

    e_index = np.array([bound.get((r, "E"), -1) for r in region_ids], dtype=np.int64)
    rho_index = np.array([bound.get((r, "rho"), -1) for r in region_ids], dtype=np.int64)
    e_const = np.array([regions[r].young_modulus for r in region_ids])
    rho_const = np.array([regions[r].mass_density for r in region_ids])
    return ParametricSystem(region_ids, stiff, mass, space, e_index, rho_index, e_const, rho_const,
                            strain)


def direct_assembly(mesh: Mesh, regions: dict, overrides: dict | None = None):
    """One-shot COO assembly with physical material values (test oracle)."""
    overrides = overrides or {}
    n = mesh.n_dofs
    K = sp.lil_matrix((n, n))
    M = sp.lil_matrix((n, n))
    xy = mesh.element_coords()
    for e, (conn, rid) in enumerate(zip(mesh.elements, mesh.region_of_element)):
        reg = regions[int(rid)]
        young = overrides.get((int(rid), "E"), reg.young_modulus)
        rho = overrides.get((int(rid), "rho"), reg.mass_density)
        ke, me = element_matrices(xy[e], young, reg.poisson_ratio, rho, mesh.thickness)
        d = np.ravel([[2 * a, 2 * a + 1] for a in conn])
        K[np.ix_(d, d)] += ke
        M[np.ix_(d, d)] += me
    return K.tocsr(), M.tocsr()


# ---------------------------------------------------------------------------
# Constraints

def nullspace_basis(mesh: Mesh, constraints: ConstraintSet) -> sp.csr_matrix:
    """Sparse N (n x n_f) with C N = 0: fixed dofs dropped, slaves substituted."""
    dmap = dof_map(mesh, constraints)
    try:
        resolved = constraints.resolve_masters()
    except MeshError as exc:
        raise ConstraintError(str(exc)) from None
    col_of = {int(d): j for j, d in enumerate(dmap.free)}
    rows = list(dmap.free)
    cols = list(range(dmap.n_free))
    vals = [1.0] * dmap.n_free
    for slave, (master, ratio) in resolved.items():
        g = dof_index(*master)
        if g in col_of:  # a fixed master pins the slave to zero
            rows.append(dof_index(*slave))
            cols.append(col_of[g])
            vals.append(ratio)
    return sp.csr_matrix((vals, (rows, cols)), shape=(dmap.n_dofs, dmap.n_free))


def constraint_matrix(mesh: Mesh, constraints: ConstraintSet) -> sp.csr_matrix:
    """C (h x n): one row per fixed dof and one per master-slave relation."""
    n = mesh.n_dofs
    rows, cols, vals = [], [], []
    h = 0
    for d in sorted(constraints.fixed_dofs):
        rows.append(h), cols.append(dof_index(*d)), vals.append(1.0)
        h += 1
    for s, m, r in constraints.master_slave:
        rows += [h, h]
        cols += [dof_index(*s), dof_index(*m)]
        vals += [1.0, -r]
        h += 1
    return sp.csr_matrix((vals, (rows, cols)), shape=(h, n))


@dataclass(frozen=True, eq=False)
class ConstrainedSystem:
    parametric: ParametricSystem
    basis: sp.csr_matrix  # N, (n, n_f)
    stiffness: BlockFamily  # N^T Kbar_j N
    mass: BlockFamily  # N^T Mbar_j N
    mesh: Mesh | None = None
    constraints: ConstraintSet | None = None
    strain: tuple = ()  # G_j N


    @property
    def space(self) -> ParamSpace:
        return self.parametric.space

    @property
    def n_free(self) -> int:
        return self.basis.shape[1]

    @property
    def n_dofs(self) -> int:
        return self.basis.shape[0]

    def region_values(self, x):
        return self.parametric.region_values(x)

    def instantiate(self, x=None, check: bool = True):
        """Reduced ``(K, M)`` on the free coordinates."""
        if x is None:
            x = self.space.start
        elif check:
            x = self.space.check(x)
        e, rho = self.region_values(x)
        return self.stiffness.combine(e), self.mass.combine(rho)

    def energies(self, V):
        """``v^T Kbar_j v`` per region (rows) and column of V, as sums of squares.

        Falls back to the assembled blocks when no strain operators are stored.
        """
        V = np.asarray(V, dtype=float).reshape(self.n_free, -1)
        if self.strain:
            return np.array([np.einsum("ij,ij->j", GV, GV) for GV in (G @ V for G in self.strain)])
        return np.array([np.einsum("ij,ij->j", V, self.stiffness.block(j) @ V)
                         for j in range(len(self.stiffness))])

    def with_space(self, space: ParamSpace) -> "ConstrainedSystem":
        """Same matrices, new parameter bindings."""
        if self.mesh is None:
            raise BindingError("rebinding needs the originating mesh")
        p = self.parametric
        regions = {r: _Region(e, rho) for r, e, rho in zip(p.region_ids, p.e_const, p.rho_const)}
        bound = _property_table(regions, space)
        ep = np.array([bound.get((r, "E"), -1) for r in p.region_ids], dtype=np.int64)
        rp = np.array([bound.get((r, "rho"), -1) for r in p.region_ids], dtype=np.int64)
        new = ParametricSystem(p.region_ids, p.stiffness, p.mass, space, ep, rp, p.e_const,
                               p.rho_const, p.strain)
        return ConstrainedSystem(new, self.basis, self.stiffness, self.mass, self.mesh,
                                 self.constraints, self.strain)


@dataclass(frozen=True)
class _Region:
    young_modulus: float
    mass_density: float


def apply_constraints(system: ParametricSystem, mesh: Mesh, constraints: ConstraintSet) -> ConstrainedSystem:
    N = nullspace_basis(mesh, constraints)
    NT = N.T.tocsr()
    nf = N.shape[1]
    kr = [NT @ system.stiffness.block(j) @ N for j in range(len(system.stiffness))]
    mr = [NT @ system.mass.block(j) @ N for j in range(len(system.mass))]
    # one family over both so that K and M share a pattern too
    fam = BlockFamily.from_matrices(kr + mr, nf)
    nk = len(kr)
    stiff = BlockFamily(fam.shape, fam.indptr, fam.indices, fam.data[:nk])
    mass = BlockFamily(fam.shape, fam.indptr, fam.indices, fam.data[nk:])
    strain = tuple((G @ N).tocsr() for G in system.strain)
    return ConstrainedSystem(system, N, stiff, mass, mesh, constraints, strain)


def build_system(mesh: Mesh, constraints: ConstraintSet, regions: dict,
                 space: ParamSpace = EMPTY_SPACE) -> ConstrainedSystem:
    """Assemble and constrain in one call."""
    return apply_constraints(assemble_parametric(mesh, regions, space), mesh, constraints)
