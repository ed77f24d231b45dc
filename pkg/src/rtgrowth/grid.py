"""Tensor-product box meshes with multilinear (Q1) nodal elements.

Coordinates are (x1, x3) in 2D and (x1, x2, x3) in 3D; the vertical axis is
always the last one.  Node numbering is lexicographic with the last axis
fastest.  Vector fields store components in blocks: dof = c*nnodes + node.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numpy.polynomial.legendre import leggauss

from .errors import BadExtents, DimensionMismatch, TooFewCells


def build_mesh(dim: int, extents, cells) -> "BoxMesh":
    """Validated BoxMesh constructor."""
    return BoxMesh(dim, tuple(tuple(map(float, e)) for e in extents),
                   tuple(int(c) for c in cells))


@dataclass(frozen=True)
class BoxMesh:
    dim: int
    extents: tuple
    cells: tuple

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise BadExtents(f"dim must be 2 or 3, got {self.dim}")
        if len(self.extents) != self.dim or len(self.cells) != self.dim:
            raise BadExtents("extents/cells must have one entry per axis")
        for lo, hi in self.extents:
            if not hi > lo:
                raise BadExtents(f"degenerate extent [{lo}, {hi}]")
        for c in self.cells:
            if c < 2:
                raise TooFewCells(f"need >= 2 cells per axis, got {c}")

    @cached_property
    def h(self) -> tuple:
        return tuple((hi - lo) / c for (lo, hi), c in zip(self.extents, self.cells))

    @cached_property
    def node_shape(self) -> tuple:
        return tuple(c + 1 for c in self.cells)

    @property
    def nnodes(self) -> int:
        return int(np.prod(self.node_shape))

    @property
    def ncells(self) -> int:
        return int(np.prod(self.cells))

    @cached_property
    def nodes(self) -> np.ndarray:
        """(nnodes, dim) coordinates, lexicographic with last axis fastest."""
        axes = [np.linspace(lo, hi, n) for (lo, hi), n in
                zip(self.extents, self.node_shape)]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)

    @cached_property
    def connectivity(self) -> np.ndarray:
        """(ncells, 2**dim) node ids; local corner order has last axis fastest."""
        shape = self.node_shape
        base = np.arange(self.nnodes).reshape(shape)
        corner_slices = []
        for bits in itertools.product((0, 1), repeat=self.dim):
            sl = tuple(slice(b, n - 1 + b) for b, n in zip(bits, shape))
            corner_slices.append(base[sl].ravel())
        return np.stack(corner_slices, axis=-1)

    @cached_property
    def cell_origins(self) -> np.ndarray:
        """(ncells, dim) coordinates of each cell's low corner."""
        return self.nodes[self.connectivity[:, 0]]

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        """Boolean mask of nodes on the box boundary."""
        shape = self.node_shape
        mask = np.zeros(shape, dtype=bool)
        for ax in range(self.dim):
            mask[tuple(0 if a == ax else slice(None) for a in range(self.dim))] = True
            mask[tuple(-1 if a == ax else slice(None) for a in range(self.dim))] = True
        return mask.ravel()

    @property
    def vertical(self) -> int:
        return self.dim - 1

    def vertical_extent(self) -> tuple:
        return self.extents[-1]


@dataclass(frozen=True)
class QuadratureRule:
    """Tensor Gauss rule on the reference cell [-1, 1]^dim."""

    dim: int
    points_1d: int

    @cached_property
    def points(self) -> np.ndarray:
        x, _ = leggauss(self.points_1d)
        grids = np.meshgrid(*([x] * self.dim), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)

    @cached_property
    def weights(self) -> np.ndarray:
        _, w = leggauss(self.points_1d)
        out = w
        for _ in range(self.dim - 1):
            out = np.multiply.outer(out, w)
        return out.ravel()

    @property
    def order(self) -> int:
        return 2 * self.points_1d - 1


def _shape_1d(xi):
    return np.stack([(1.0 - xi) / 2.0, (1.0 + xi) / 2.0], axis=-1)


class FESpace:
    """Q1 nodal space on a BoxMesh, scalar (components=1) or vector (=dim).

    Vector spaces carry a homogeneous Dirichlet mask on all components at
    boundary nodes unless ``dirichlet=False``.  Scalar spaces are
    unconstrained.
    """

    def __init__(self, mesh: BoxMesh, components: int = 1,
                 dirichlet: bool | None = None, quad_points: int = 2):
        if components not in (1, mesh.dim):
            raise ValueError("components must be 1 or mesh.dim")
        self.mesh = mesh
        self.components = components
        if dirichlet is None:
            dirichlet = components > 1
        self.dirichlet = dirichlet
        self.quad = QuadratureRule(mesh.dim, quad_points)
        self._build_tables()

    def _build_tables(self):
        mesh, quad = self.mesh, self.quad
        pts = quad.points  # (nq, dim) in [-1,1]
        shp = [_shape_1d(pts[:, ax]) for ax in range(mesh.dim)]  # each (nq, 2)
        nq = pts.shape[0]
        nloc = 2 ** mesh.dim
        N = np.ones((nq, nloc))
        G = np.zeros((nq, nloc, mesh.dim))
        for l, bits in enumerate(itertools.product((0, 1), repeat=mesh.dim)):
            for ax, b in enumerate(bits):
                N[:, l] *= shp[ax][:, b]
            for gax in range(mesh.dim):
                gcol = np.ones(nq)
                for ax, b in enumerate(bits):
                    if ax == gax:
                        gcol *= (-0.5 if b == 0 else 0.5) * (2.0 / mesh.h[ax])
                    else:
                        gcol *= shp[ax][:, b]
                G[:, l, gax] = gcol
        self.N = N            # (nq, nloc) basis values
        self.G = G            # (nq, nloc, dim) physical gradients (uniform mesh)
        self.wq = quad.weights * np.prod([h / 2.0 for h in mesh.h])
        # physical quadrature coordinates, (ncells, nq, dim)
        ref = (pts + 1.0) / 2.0
        self.qpts = (mesh.cell_origins[:, None, :]
                     + ref[None, :, :] * np.asarray(mesh.h)[None, None, :])

    # -- dof bookkeeping ---------------------------------------------------

    @property
    def nnodes(self) -> int:
        return self.mesh.nnodes

    @property
    def ndof(self) -> int:
        return self.components * self.mesh.nnodes

    @cached_property
    def constrained(self) -> np.ndarray:
        """Boolean mask over all dofs; True where the value is pinned to zero."""
        mask = np.zeros(self.ndof, dtype=bool)
        if self.dirichlet:
            bn = self.mesh.boundary_nodes
            for c in range(self.components):
                mask[c * self.nnodes:(c + 1) * self.nnodes] = bn
        return mask

    @cached_property
    def free(self) -> np.ndarray:
        return np.flatnonzero(~self.constrained)

    def apply_mask(self, coeffs: np.ndarray) -> np.ndarray:
        out = np.array(coeffs, dtype=float, copy=True)
        out[self.constrained] = 0.0
        return out

    def check_coeffs(self, coeffs: np.ndarray):
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (self.ndof,):
            raise DimensionMismatch(
                f"expected {self.ndof} coefficients, got {coeffs.shape}"
            )
        return coeffs

    def component(self, coeffs: np.ndarray, c: int) -> np.ndarray:
        return coeffs[c * self.nnodes:(c + 1) * self.nnodes]

    # -- field evaluation at quadrature points ------------------------------

    def values_at_qp(self, nodal: np.ndarray) -> np.ndarray:
        """Scalar nodal array (nnodes,) -> values (ncells, nq)."""
        cellvals = nodal[self.mesh.connectivity]          # (ncells, nloc)
        return cellvals @ self.N.T                        # (ncells, nq)

    def grads_at_qp(self, nodal: np.ndarray) -> np.ndarray:
        """Scalar nodal array -> gradients (ncells, nq, dim)."""
        cellvals = nodal[self.mesh.connectivity]
        return np.einsum("cl,qld->cqd", cellvals, self.G)

    def vector_values_at_qp(self, coeffs: np.ndarray) -> np.ndarray:
        """(ndof,) -> (ncells, nq, components)."""
        return np.stack(
            [self.values_at_qp(self.component(coeffs, c))
             for c in range(self.components)], axis=-1)

    def vector_grads_at_qp(self, coeffs: np.ndarray) -> np.ndarray:
        """(ndof,) -> (ncells, nq, components, dim); entry [..., c, d] = d_d v_c."""
        return np.stack(
            [self.grads_at_qp(self.component(coeffs, c))
             for c in range(self.components)], axis=-2)

    def integrate(self, qvals: np.ndarray) -> float:
        """Sum of w_q * qvals over all cells; qvals is (ncells, nq)."""
        return float(np.einsum("cq,q->", qvals, self.wq))


def interpolate(space: FESpace, f) -> np.ndarray:
    """Nodal interpolant of a callable; constrained dofs forced to zero.

    Scalar spaces take ``f(x) -> (n,)``; vector spaces take
    ``f(x) -> (n, components)`` where x is an (n, dim) coordinate array.
    """
    x = space.mesh.nodes
    vals = np.asarray(f(x), dtype=float)
    if space.components == 1:
        if vals.shape != (space.nnodes,):
            raise DimensionMismatch("scalar interpolant must return (nnodes,)")
        coeffs = vals.copy()
    else:
        if vals.shape != (space.nnodes, space.components):
            raise DimensionMismatch(
                f"vector interpolant must return (nnodes, {space.components})"
            )
        coeffs = vals.T.reshape(-1).copy()
    return space.apply_mask(coeffs) if space.dirichlet else coeffs


def discrete_norms(space: FESpace, coeffs: np.ndarray) -> dict:
    """Quadrature L2 norm, H1 seminorm and (vector only) L2 norm of the divergence."""
    coeffs = space.check_coeffs(coeffs)
    if space.components == 1:
        v = space.values_at_qp(coeffs)
        g = space.grads_at_qp(coeffs)
        l2 = space.integrate(v * v)
        h1 = space.integrate(np.einsum("cqd,cqd->cq", g, g))
        return {"l2": float(np.sqrt(l2)), "h1_semi": float(np.sqrt(h1)),
                "div_l2": 0.0}
    vals = space.vector_values_at_qp(coeffs)
    grads = space.vector_grads_at_qp(coeffs)
    l2 = space.integrate(np.einsum("cqk,cqk->cq", vals, vals))
    h1 = space.integrate(np.einsum("cqkd,cqkd->cq", grads, grads))
    div = np.einsum("cqkk->cq", grads)
    dl2 = space.integrate(div * div)
    return {"l2": float(np.sqrt(l2)), "h1_semi": float(np.sqrt(h1)),
            "div_l2": float(np.sqrt(dl2))}


def dump_fields_csv(path, mesh: BoxMesh, columns: dict) -> None:
    """Write nodal fields as CSV: coordinates then one column per field.

    Vector entries in ``columns`` may be (nnodes,) or component-blocked
    (dim*nnodes,) arrays; the latter are split into per-component columns.
    """
    names, arrays = [], []
    for name, arr in columns.items():
        arr = np.asarray(arr, dtype=float)
        if arr.shape == (mesh.nnodes,):
            names.append(name)
            arrays.append(arr)
        elif arr.shape == (mesh.dim * mesh.nnodes,):
            for c in range(mesh.dim):
                names.append(f"{name}{c + 1 if c < mesh.dim - 1 else 3}")
                arrays.append(arr[c * mesh.nnodes:(c + 1) * mesh.nnodes])
        else:
            raise DimensionMismatch(f"field {name!r} has shape {arr.shape}")
    coords = mesh.nodes
    coord_names = ["x1", "x3"] if mesh.dim == 2 else ["x1", "x2", "x3"]
    with open(path, "w", newline="\n") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(coord_names + names)
        for i in range(mesh.nnodes):
            row = [f"{c:.17g}" for c in coords[i]]
            row += [f"{a[i]:.17g}" for a in arrays]
            w.writerow(row)


def dump_structured_grid(path, mesh: BoxMesh, columns: dict) -> None:
    """Structured-grid text dump (legacy VTK) for visualization tools."""
    shape = mesh.node_shape
    with open(path, "w", newline="\n") as fh:
        fh.write("# vtk DataFile Version 3.0\nrtgrowth fields\nASCII\n")
        fh.write("DATASET STRUCTURED_GRID\n")
        if mesh.dim == 2:
            fh.write(f"DIMENSIONS {shape[0]} {shape[1]} 1\n")
        else:
            fh.write(f"DIMENSIONS {shape[0]} {shape[1]} {shape[2]}\n")
        fh.write(f"POINTS {mesh.nnodes} double\n")
        # VTK wants x fastest; our numbering has the last axis fastest
        order = np.arange(mesh.nnodes).reshape(shape).T.ravel()
        for i in order:
            xyz = list(mesh.nodes[i])
            if mesh.dim == 2:
                xyz = [xyz[0], xyz[1], 0.0]
            fh.write(" ".join(f"{c:.17g}" for c in xyz) + "\n")
        fh.write(f"POINT_DATA {mesh.nnodes}\n")
        for name, arr in columns.items():
            arr = np.asarray(arr, dtype=float)
            if arr.shape != (mesh.nnodes,):
                raise DimensionMismatch(f"structured dump wants scalars, {name!r}")
            fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            for i in order:
                fh.write(f"{arr[i]:.17g}\n")
