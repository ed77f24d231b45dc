"""Discrete operators for the damped buoyancy energy and its couplings.

For a velocity field v on the masked vector space, the assembled matrices
realize the quadratic forms

    J(v)  = integral rho |v|^2                               (mass, M)
    E1(v) = integral g rho' v3^2 + [2 g rho v3 - (1+a) p div v] div v   (K1)
    E2(v) = integral mu |grad v|^2 + mu0 (div v)^2           (K2)

with the cross term split half-and-half between test and trial so every
matrix is exactly symmetric.  The div-carrying terms of E1 (and the
incompressibility penalty) use a cell-center quadrature rule: Q1 elements
lock under full integration of a divergence penalty, which would leave the
energy maximization far stiffer than the coupled evolution equations it
has to match.  Rectangular blocks map velocity data to scalar-space
right-hand sides for mode reconstruction and time stepping.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import MeshMismatch, ProfileDomainMismatch, SingularSystem
from .grid import FESpace
from .params import PhysParams
from .steady import SteadyProfile


def _scatter(space: FESpace, blocks) -> sp.csr_matrix:
    """Sum (row_comp, col_comp, E[ncells,nloc,nloc]) blocks into one CSR matrix
    over the full vector-dof set."""
    nn = space.nnodes
    conn = space.mesh.connectivity
    rows, cols, vals = [], [], []
    for rc, cc, E in blocks:
        r = (conn[:, :, None] + rc * nn).repeat(conn.shape[1], axis=2)
        c = (conn[:, None, :] + cc * nn).repeat(conn.shape[1], axis=1)
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(E.ravel())
    ndof = space.components * nn
    A = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(ndof, ndof),
    )
    return A.tocsr()


def _scatter_rect(row_space: FESpace, col_space: FESpace, blocks) -> sp.csr_matrix:
    nnr, nnc = row_space.nnodes, col_space.nnodes
    conn = row_space.mesh.connectivity
    rows, cols, vals = [], [], []
    for rc, cc, E in blocks:
        r = (conn[:, :, None] + rc * nnr).repeat(conn.shape[1], axis=2)
        c = (conn[:, None, :] + cc * nnc).repeat(conn.shape[1], axis=1)
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(E.ravel())
    A = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(row_space.components * nnr, col_space.components * nnc),
    )
    return A.tocsr()


def _sym(A: sp.csr_matrix) -> sp.csr_matrix:
    return ((A + A.T) * 0.5).tocsr()


def mass_block(space: FESpace, cq) -> np.ndarray:
    """Element matrices of integral c(x) phi_i phi_j; cq is (ncells, nq) or scalar."""
    cq = np.broadcast_to(np.asarray(cq, dtype=float),
                         (space.mesh.ncells, space.wq.size))
    return np.einsum("q,cq,qi,qj->cij", space.wq, cq, space.N, space.N)


def gradgrad_block(space: FESpace, cq, da: int, db: int) -> np.ndarray:
    cq = np.broadcast_to(np.asarray(cq, dtype=float),
                         (space.mesh.ncells, space.wq.size))
    return np.einsum("q,cq,qi,qj->cij", space.wq, cq,
                     space.G[:, :, da], space.G[:, :, db])


def gradval_block(space: FESpace, cq, da: int) -> np.ndarray:
    """integral c(x) (d_a phi_i) phi_j."""
    cq = np.broadcast_to(np.asarray(cq, dtype=float),
                         (space.mesh.ncells, space.wq.size))
    return np.einsum("q,cq,qi,qj->cij", space.wq, cq,
                     space.G[:, :, da], space.N)


def valgrad_block(space: FESpace, cq, db: int) -> np.ndarray:
    """integral c(x) phi_i (d_b phi_j)."""
    cq = np.broadcast_to(np.asarray(cq, dtype=float),
                         (space.mesh.ncells, space.wq.size))
    return np.einsum("q,cq,qi,qj->cij", space.wq, cq,
                     space.N, space.G[:, :, db])


@dataclass
class AssembledForms:
    """Symmetric energy operators plus the scalar couplings on one mesh."""

    space: FESpace
    sspace: FESpace
    profile: SteadyProfile
    params: PhysParams
    M: sp.csr_matrix
    K1: sp.csr_matrix
    K2: sp.csr_matrix
    K_lap: sp.csr_matrix
    K_dd: sp.csr_matrix
    K_dd_r: sp.csr_matrix
    K_rho3: sp.csr_matrix
    G_poincare: sp.csr_matrix
    Ms: sp.csr_matrix
    B_div: sp.csr_matrix
    B_th: sp.csr_matrix
    GpE: sp.csr_matrix
    GpR: sp.csr_matrix
    C3: sp.csr_matrix
    upper_bound: float
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def free(self) -> np.ndarray:
        return self.space.free

    def restricted(self, name: str) -> sp.csr_matrix:
        key = ("ff", name)
        if key not in self._cache:
            A = getattr(self, name)
            f = self.free
            self._cache[key] = A[np.ix_(f, f)].tocsr()
        return self._cache[key]

    def ms_solve(self, b: np.ndarray) -> np.ndarray:
        if "ms_lu" not in self._cache:
            self._cache["ms_lu"] = spla.factorized(self.Ms.tocsc())
        return self._cache["ms_lu"](b)

    def extend(self, x_free: np.ndarray) -> np.ndarray:
        out = np.zeros(self.space.ndof)
        out[self.free] = x_free
        return out

    def pencil(self, s: float) -> sp.csr_matrix:
        """K1 - s*K2 restricted to free dofs."""
        return (self.restricted("K1") - s * self.restricted("K2")).tocsr()


def assemble(space: FESpace, profile: SteadyProfile, params: PhysParams,
             sspace: FESpace | None = None) -> AssembledForms:
    """Assemble all operators for one velocity space and steady profile."""
    mesh = space.mesh
    lo, hi = mesh.vertical_extent()
    if not profile.covers(lo, hi):
        raise ProfileDomainMismatch(
            f"profile on [{profile.x3_min}, {profile.x3_max}] does not cover "
            f"mesh vertical extent [{lo}, {hi}]"
        )
    if sspace is None:
        sspace = FESpace(mesh, components=1, quad_points=space.quad.points_1d)
    if sspace.mesh is not mesh:
        raise MeshMismatch("scalar and vector spaces must share the mesh")
    if sspace.quad.points_1d != space.quad.points_1d:
        raise MeshMismatch("scalar and vector spaces must share the quadrature")

    dim, vert = mesh.dim, mesh.vertical
    g, a = params.g, params.a
    x3q = space.qpts[..., -1]
    rho_q = profile.rho(x3q)
    drho_q = profile.drho(x3q)
    p_q = profile.p(x3q)
    e_q = profile.e(x3q)
    de_q = profile.de(x3q)

    # mass (rho-weighted, all components)
    Em = mass_block(space, rho_q)
    M = _sym(_scatter(space, [(c, c, Em) for c in range(dim)]))

    # plain Laplacian and div-div blocks
    Elap = sum(gradgrad_block(space, 1.0, d, d) for d in range(dim))
    K_lap = _sym(_scatter(space, [(c, c, Elap) for c in range(dim)]))

    def divdiv(cq):
        return _sym(_scatter(space, [
            (c, d, gradgrad_block(space, cq, c, d))
            for c in range(dim) for d in range(dim)
        ]))

    K_dd = divdiv(1.0)

    # Divergence-carrying buoyancy/pressure terms are integrated at cell
    # centers (selective reduced integration): full integration of the
    # (1+a) p (div v)^2 penalty locks Q1 elements, leaving the maximization
    # far stiffer than the coupled evolution it must match.
    space_r = FESpace(mesh, components=dim, dirichlet=space.dirichlet,
                      quad_points=1)
    x3r = space_r.qpts[..., -1]
    rho_r, p_r = profile.rho(x3r), profile.p(x3r)
    Edd_r = [(c, d, gradgrad_block(space_r, 1.0, c, d))
             for c in range(dim) for d in range(dim)]
    K_dd_r = _sym(_scatter(space_r, Edd_r))
    P_pdd = _sym(_scatter(space_r, [
        (c, d, gradgrad_block(space_r, p_r, c, d))
        for c in range(dim) for d in range(dim)
    ]))

    # vertical-component mass with g*rho'
    K_rho3 = _sym(_scatter(space, [(vert, vert, mass_block(space, g * drho_q))]))

    # symmetric half-split of the 2 g rho v3 div v coupling, cell-center rule
    cross_blocks = []
    for d in range(dim):
        E = gradval_block(space_r, g * rho_r, d)  # (d_d phi_i) phi_j
        cross_blocks.append((d, vert, E))
        cross_blocks.append((vert, d, E.transpose(0, 2, 1)))
    K_cross = _sym(_scatter(space_r, cross_blocks))

    K1 = _sym((K_rho3 + K_cross - (1.0 + a) * P_pdd).tocsr())
    K2 = _sym((params.mu * K_lap + params.mu0 * K_dd).tocsr())
    G_poincare = _sym((K_rho3 + K_cross).tocsr())

    # scalar couplings
    Ms = _sym(_scatter_rect(sspace, sspace, [(0, 0, mass_block(space, 1.0))]))

    bdiv_blocks = [(0, c, valgrad_block(space, rho_q, c)) for c in range(dim)]
    bdiv_blocks.append((0, vert, mass_block(space, drho_q)))
    B_div = _scatter_rect(sspace, space, bdiv_blocks)

    bth_blocks = [(0, c, valgrad_block(space, a * e_q, c)) for c in range(dim)]
    bth_blocks.append((0, vert, mass_block(space, de_q)))
    B_th = _scatter_rect(sspace, space, bth_blocks)

    GpE = _scatter_rect(space, sspace,
                        [(c, 0, gradval_block(space, e_q, c)) for c in range(dim)])
    GpR = _scatter_rect(space, sspace,
                        [(c, 0, gradval_block(space, rho_q, c)) for c in range(dim)])
    C3 = _scatter_rect(space, sspace, [(vert, 0, mass_block(space, 1.0))])

    bc = profile.bound_constants()
    ub = g * (bc["max_abs_drho_over_rho"]
              + g / (1.0 + a) * bc["max_rho_over_p"])

    return AssembledForms(space, sspace, profile, params, M, K1, K2,
                          K_lap, K_dd, K_dd_r, K_rho3, G_poincare, Ms,
                          B_div, B_th, GpE, GpR, C3, ub)


def quadratic_forms(forms: AssembledForms, v: np.ndarray) -> dict:
    """Matrix evaluations of E1, E2, J and the damped energy s -> e1 - s*e2."""
    v = forms.space.check_coeffs(v)
    e1 = float(v @ (forms.K1 @ v))
    e2 = float(v @ (forms.K2 @ v))
    j = float(v @ (forms.M @ v))
    return {"e1": e1, "e2": e2, "j": j,
            "e_of_s": lambda s: e1 - s * e2}


def energy_quadrature(forms: AssembledForms, v: np.ndarray) -> dict:
    """Matrix-free quadrature of the E1/E2/J integrands for cross-checking.

    Uses the same mixed rule as the assembled operators: full Gauss for the
    buoyancy mass, dissipation and J, cell centers for the div-carrying
    terms of E1.
    """
    space = forms.space
    v = space.check_coeffs(v)
    prof, params = forms.profile, forms.params
    x3q = space.qpts[..., -1]
    rho_q, drho_q = prof.rho(x3q), prof.drho(x3q)
    vals = space.vector_values_at_qp(v)
    grads = space.vector_grads_at_qp(v)
    div = np.einsum("cqkk->cq", grads)
    v3 = vals[..., space.mesh.vertical]
    g, a = params.g, params.a

    space_r = FESpace(space.mesh, components=space.components,
                      dirichlet=space.dirichlet, quad_points=1)
    x3r = space_r.qpts[..., -1]
    rho_r, p_r = prof.rho(x3r), prof.p(x3r)
    vals_r = space_r.vector_values_at_qp(v)
    div_r = np.einsum("cqkk->cq", space_r.vector_grads_at_qp(v))
    v3_r = vals_r[..., space.mesh.vertical]

    e1 = (space.integrate(g * drho_q * v3 * v3)
          + space_r.integrate((2.0 * g * rho_r * v3_r
                               - (1.0 + a) * p_r * div_r) * div_r))
    e2 = space.integrate(params.mu * np.einsum("cqkd,cqkd->cq", grads, grads)
                         + params.mu0 * div * div)
    j = space.integrate(rho_q * np.einsum("cqk,cqk->cq", vals, vals))
    return {"e1": float(e1), "e2": float(e2), "j": float(j)}


@dataclass
class WeightedDivOps:
    """Velocity-to-scalar projections used in mode reconstruction.

    ``project_div`` returns the L2 projection of div(rho v); the companion
    ``project_temperature_source`` projects e' v3 + a e div v, the source
    appearing in the linearized internal-energy equation.
    """

    forms: AssembledForms

    def project_div(self, v: np.ndarray) -> np.ndarray:
        v = self.forms.space.check_coeffs(v)
        return self.forms.ms_solve(self.forms.B_div @ v)

    def project_temperature_source(self, v: np.ndarray) -> np.ndarray:
        v = self.forms.space.check_coeffs(v)
        return self.forms.ms_solve(self.forms.B_th @ v)


def assemble_weighted_div(space_v: FESpace, space_s: FESpace,
                          profile: SteadyProfile,
                          params: PhysParams | None = None) -> WeightedDivOps:
    if space_v.mesh is not space_s.mesh:
        raise MeshMismatch("velocity and scalar spaces must share the mesh")
    forms = assemble(space_v, profile, params or PhysParams(), sspace=space_s)
    return WeightedDivOps(forms)


def assemble_load(space: FESpace, f) -> np.ndarray:
    """Dual vector of a vector-valued callable: b_i = integral f . phi_i."""
    fq = np.asarray(f(space.qpts.reshape(-1, space.mesh.dim)), dtype=float)
    fq = fq.reshape(space.mesh.ncells, space.wq.size, space.components)
    nn = space.nnodes
    out = np.zeros(space.ndof)
    for c in range(space.components):
        bi = np.einsum("q,cq,qi->ci", space.wq, fq[..., c], space.N)
        np.add.at(out, space.mesh.connectivity + c * nn, bi)
    return out


def dump_matrix_coo(path, A: sp.spmatrix) -> None:
    """Coordinate-format text dump (row col value per line) for external checks."""
    coo = sp.coo_matrix(A)
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", newline="\n") as fh:
        fh.write(f"% {coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
        for i in order:
            fh.write(f"{coo.row[i]} {coo.col[i]} {coo.data[i]:.17g}\n")


def lame_operator(space: FESpace, params: PhysParams) -> sp.csr_matrix:
    """mu*grad:grad + mu0*div:div over the full dof set (no profile needed)."""
    dim = space.mesh.dim
    Elap = sum(gradgrad_block(space, 1.0, d, d) for d in range(dim))
    K_lap = _sym(_scatter(space, [(c, c, Elap) for c in range(dim)]))
    K_dd = _sym(_scatter(space, [
        (c, d, gradgrad_block(space, 1.0, c, d))
        for c in range(dim) for d in range(dim)
    ]))
    return _sym((params.mu * K_lap + params.mu0 * K_dd).tocsr())


class LameSolver:
    """Factorized Dirichlet solver for mu*Lap(u) + mu0*grad(div u) = f."""

    def __init__(self, space: FESpace, params: PhysParams,
                 operator: sp.csr_matrix | None = None):
        self.space = space
        self.params = params
        A_full = operator if operator is not None else lame_operator(space, params)
        self.A = A_full[np.ix_(space.free, space.free)].tocsr()
        try:
            self._lu = spla.splu(self.A.tocsc())
        except RuntimeError as exc:  # pragma: no cover - mu > 0 keeps A definite
            raise SingularSystem(str(exc)) from exc

    def solve(self, rhs, tol: float = 1e-10) -> np.ndarray:
        """rhs: callable x -> (n, dim) force density, or a full dual vector."""
        if callable(rhs):
            b = assemble_load(self.space, rhs)
        else:
            b = self.space.check_coeffs(rhs)
        bf = -b[self.space.free]
        xf = self._lu.solve(bf)
        nb = np.linalg.norm(bf)
        if nb > 0:
            res = np.linalg.norm(self.A @ xf - bf) / nb
            if res > tol:
                xf = xf + self._lu.solve(bf - self.A @ xf)
                res = np.linalg.norm(self.A @ xf - bf) / nb
                if res > tol:
                    raise SingularSystem(f"relative residual {res:.3e} > {tol:.1e}")
        out = np.zeros(self.space.ndof)
        out[self.space.free] = xf
        return out


def lame_solve(target, rhs, params: PhysParams | None = None,
               tol: float = 1e-10) -> np.ndarray:
    """One-shot Lame solve; ``target`` is an AssembledForms or an FESpace.

    With AssembledForms the viscous operator (K2) and its factorization are
    reused across calls.  Returns full coefficients with exact zeros on the
    boundary.
    """
    if isinstance(target, AssembledForms):
        if "lame" not in target._cache:
            target._cache["lame"] = LameSolver(
                target.space, target.params, operator=target.K2)
        return target._cache["lame"].solve(rhs, tol=tol)
    if params is None:
        raise ValueError("params required when solving on a bare space")
    return LameSolver(target, params).solve(rhs, tol=tol)
