"""Time integration of the linearized and nonlinear perturbation systems.

The linearized system is advanced by Crank-Nicolson on the coupled
(density, velocity, temperature) block; the nonlinear system by an IMEX
step with implicit viscosity and explicit advection, pressure, gravity and
viscous heating.  Both enforce the velocity trace strongly.

The scalar equations can be tested against weighted test functions
(``scalar_weights="energy"``); with the weights 1/(-rho') and rho/(g e)
the semi-discrete system inherits the decay identity of stable profiles
exactly, leaving only the O(dt^2) time-splitting error in the ledger.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (CFLViolation, InsufficientGrowth, LinearSolveFailure,
                     NoEscape, PicardDivergence, PositivityLoss,
                     WrongProfileClass)
from .forms import (AssembledForms, lame_solve, mass_block, valgrad_block,
                    _scatter_rect)
from .grid import FESpace
from .spectral import GrowingMode


@dataclass
class PerturbationState:
    """Perturbation fields at one time: nodal arrays, velocity masked."""

    t: float
    rho: np.ndarray
    u: np.ndarray
    theta: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def zero_state(forms: AssembledForms) -> PerturbationState:
    return PerturbationState(0.0, np.zeros(forms.sspace.ndof),
                             np.zeros(forms.space.ndof),
                             np.zeros(forms.sspace.ndof))


def mode_state(forms: AssembledForms, mode: GrowingMode,
               amplitude: float = 1.0) -> PerturbationState:
    return PerturbationState(0.0, amplitude * mode.rho_tilde,
                             amplitude * mode.v_tilde,
                             amplitude * mode.theta_tilde)


@dataclass
class Trajectory:
    times: np.ndarray
    diagnostics: dict            # name -> array over recorded times
    states: list                 # recorded PerturbationState objects

    def column(self, name: str) -> np.ndarray:
        return np.asarray(self.diagnostics[name])


def state_diagnostics(forms: AssembledForms, state: PerturbationState) -> dict:
    Ms = forms.Ms
    space = forms.space
    vert = space.mesh.vertical

    def snorm(x):
        return float(np.sqrt(max(0.0, x @ (Ms @ x))))

    comps = [space.component(state.u, c) for c in range(space.components)]
    uh = math.sqrt(sum(snorm(comps[c]) ** 2
                       for c in range(space.components) if c != vert))
    u3 = snorm(comps[vert])
    e1 = float(state.u @ (forms.K1 @ state.u))
    e2 = float(state.u @ (forms.K2 @ state.u))
    j = float(state.u @ (forms.M @ state.u))
    return {"u3_l2": u3, "uh_l2": uh, "rho_l2": snorm(state.rho),
            "theta_l2": snorm(state.theta), "e1": e1, "e2": e2, "j": j}


# -- linearized system -------------------------------------------------------


def _weighted_scalar_blocks(forms: AssembledForms, weight):
    """Scalar mass matrix tested against weight(x3)*chi_i."""
    space = forms.space
    wq = weight(space.qpts[..., -1])
    return _scatter_rect(forms.sspace, forms.sspace,
                         [(0, 0, mass_block(space, wq))])


def _weighted_velocity_to_scalar(forms: AssembledForms, weight, coef_grad,
                                 coef_vert):
    """Rows int weight*(coef_grad * d_c phi_j + [c=vert] coef_vert * phi_j) chi_i."""
    space = forms.space
    x3 = space.qpts[..., -1]
    wq = weight(x3)
    dim, vert = space.mesh.dim, space.mesh.vertical
    blocks = [(0, c, valgrad_block(space, wq * coef_grad(x3), c))
              for c in range(dim)]
    blocks.append((0, vert, mass_block(space, wq * coef_vert(x3))))
    return _scatter_rect(forms.sspace, space, blocks)


class LinearPropagator:
    """Crank-Nicolson integrator for the coupled linearized system."""

    def __init__(self, forms: AssembledForms, dt: float,
                 scalar_weights: str = "plain"):
        if not dt > 0:
            raise ValueError("dt must be positive")
        self.forms = forms
        self.dt = float(dt)
        self.scalar_weights = scalar_weights
        prof, params = forms.profile, forms.params
        f = forms.free
        ns = forms.sspace.ndof
        nf = len(f)
        self.ns, self.nf = ns, nf

        if scalar_weights == "plain":
            Ms1 = Ms2 = forms.Ms
            B1 = forms.B_div
            B2 = forms.B_th
        elif scalar_weights == "energy":
            d = prof.drho(np.linspace(prof.x3_min, prof.x3_max, 2049))
            if d.max() >= -1e-10:
                raise WrongProfileClass(
                    "energy weights need rho' <= -1e-10 everywhere, "
                    f"max rho' = {d.max():.3g}"
                )
            w1 = lambda x: 1.0 / (-prof.drho(x))
            w2 = lambda x: prof.rho(x) / (params.g * prof.e(x))
            Ms1 = _weighted_scalar_blocks(forms, w1)
            Ms2 = _weighted_scalar_blocks(forms, w2)
            B1 = _weighted_velocity_to_scalar(forms, w1, prof.rho, prof.drho)
            B2 = _weighted_velocity_to_scalar(
                forms, w2, lambda x: params.a * prof.e(x), prof.de)
        else:
            raise ValueError(f"unknown scalar_weights {scalar_weights!r}")

        a, g = params.a, params.g
        L = sp.bmat([
            [None, B1[:, f], None],
            [(g * forms.C3 - a * forms.GpE)[f, :], forms.restricted("K2"),
             (-a * forms.GpR)[f, :]],
            [None, B2[:, f], None],
        ], format="csr")
        Mblk = sp.block_diag([Ms1, forms.restricted("M"), Ms2], format="csr")
        self._Aplus = (Mblk + 0.5 * self.dt * L).tocsc()
        self._Aminus = (Mblk - 0.5 * self.dt * L).tocsr()
        self._lu = spla.splu(self._Aplus)

    def _pack(self, state: PerturbationState) -> np.ndarray:
        return np.concatenate([state.rho, state.u[self.forms.free],
                               state.theta])

    def _unpack(self, t, X) -> PerturbationState:
        ns, nf = self.ns, self.nf
        rho = X[:ns]
        u = self.forms.extend(X[ns:ns + nf])
        theta = X[ns + nf:]
        st = PerturbationState(t, rho, u, theta)
        st.diagnostics = state_diagnostics(self.forms, st)
        return st

    def step(self, state: PerturbationState) -> PerturbationState:
        X = self._pack(state)
        b = self._Aminus @ X
        Y = self._lu.solve(b)
        nb = np.linalg.norm(b)
        if nb > 0:
            res = np.linalg.norm(self._Aplus @ Y - b) / nb
            if res > 1e-10:
                Y = Y + self._lu.solve(b - self._Aplus @ Y)
                res = np.linalg.norm(self._Aplus @ Y - b) / nb
                if res > 1e-10:
                    raise LinearSolveFailure(
                        f"implicit step residual {res:.3e} > 1e-10")
        return self._unpack(state.t + self.dt, Y)

    def run(self, state: PerturbationState, n_steps: int,
            record_every: int = 1, keep_states: bool = True) -> Trajectory:
        times = [state.t]
        if not state.diagnostics:
            state.diagnostics = state_diagnostics(self.forms, state)
        diags = {k: [v] for k, v in state.diagnostics.items()}
        states = [state] if keep_states else []
        cur = state
        for i in range(1, n_steps + 1):
            cur = self.step(cur)
            if i % record_every == 0 or i == n_steps:
                times.append(cur.t)
                for k, v in cur.diagnostics.items():
                    diags[k].append(v)
                if keep_states:
                    states.append(cur)
        return Trajectory(np.asarray(times),
                          {k: np.asarray(v) for k, v in diags.items()}, states)


def linear_step(state: PerturbationState, dt: float,
                propagator: LinearPropagator) -> PerturbationState:
    """One Crank-Nicolson step; ``dt`` must match the assembled propagator."""
    if abs(dt - propagator.dt) > 1e-15 * max(dt, propagator.dt):
        raise ValueError("dt does not match the assembled propagator")
    return propagator.step(state)


def measure_growth_rate(trajectory: Trajectory, column: str = "u3_l2",
                        tail_fraction: float = 1.0) -> dict:
    """Least-squares slope of log amplitude against time.

    ``tail_fraction`` < 1 restricts the fit to the final part of the
    trajectory (used when a transient must die out first).  Requires at
    least 20 samples and a total gain of e over the fit window.
    """
    t = trajectory.times
    y = trajectory.column(column)
    n = len(t)
    i0 = int((1.0 - tail_fraction) * n)
    t, y = t[i0:], y[i0:]
    if len(t) < 20:
        raise InsufficientGrowth(f"only {len(t)} samples in fit window")
    if np.any(y <= 0):
        raise InsufficientGrowth("amplitude hit zero; nothing to fit")
    gain = y[-1] / y[0]
    if gain < math.e:
        raise InsufficientGrowth(
            f"amplitude gain {gain:.3g} < e over the fit window")
    ly = np.log(y)
    A = np.vstack([t, np.ones_like(t)]).T
    coef, res_, rank_, sv_ = np.linalg.lstsq(A, ly, rcond=None)
    slope, intercept = float(coef[0]), float(coef[1])
    resid = ly - A @ coef
    dof = max(len(t) - 2, 1)
    s2 = float(resid @ resid) / dof
    tvar = float(np.sum((t - t.mean()) ** 2))
    stderr = math.sqrt(s2 / tvar) if tvar > 0 else float("inf")
    return {"rate": slope, "intercept": intercept, "stderr": stderr,
            "ci95": (slope - 1.96 * stderr, slope + 1.96 * stderr),
            "n_samples": len(t), "gain": float(gain)}


# -- stable-profile decay ledger ---------------------------------------------


@dataclass
class StabilityLedger:
    times: np.ndarray
    lhs: np.ndarray              # weighted L2 energy per recorded time
    dissipation: np.ndarray      # cumulative trapezoid of the decay rate
    rhs0: float
    max_violation: float         # max |lhs + dissipation - rhs0| / rhs0


def verify_stability_identity(trajectory: Trajectory,
                              forms: AssembledForms) -> StabilityLedger:
    """Check the stable-profile decay identity on a recorded trajectory.

    Requires a strictly decreasing density (rho' <= -1e-10) with constant
    internal energy, the hypotheses under which the weighted energy plus
    the accumulated dissipation is conserved.
    """
    prof, params = forms.profile, forms.params
    xs = np.linspace(prof.x3_min, prof.x3_max, 2049)
    d = prof.drho(xs)
    if d.max() >= -1e-10:
        raise WrongProfileClass(
            f"identity needs rho' <= -1e-10 everywhere, max rho' = {d.max():.3g}")
    de = prof.de(xs)
    if np.max(np.abs(de)) > 1e-10 * max(1.0, float(np.max(prof.e(xs)))):
        raise WrongProfileClass(
            f"identity needs constant internal energy, max |e'| = "
            f"{np.max(np.abs(de)):.3g}")
    if not trajectory.states:
        raise ValueError("trajectory must retain states for the ledger")

    space = forms.space
    g = params.g
    Q_rho = _weighted_scalar_blocks(forms, lambda x: 1.0 / (-prof.drho(x)))
    Q_th = _weighted_scalar_blocks(forms,
                                   lambda x: prof.rho(x) / (g * prof.e(x)))
    Mv = forms.M

    lhs, rate, times = [], [], []
    for st in trajectory.states:
        times.append(st.t)
        lhs.append(float(st.rho @ (Q_rho @ st.rho))
                   + float(st.u @ (Mv @ st.u)) / g
                   + float(st.theta @ (Q_th @ st.theta)))
        rate.append(2.0 / g * float(st.u @ (forms.K2 @ st.u)))
    times = np.asarray(times)
    lhs = np.asarray(lhs)
    rate = np.asarray(rate)
    diss = np.concatenate([[0.0], np.cumsum(
        0.5 * (rate[1:] + rate[:-1]) * np.diff(times))])
    rhs0 = lhs[0]
    # a zero trajectory closes the identity trivially (0 = 0)
    denom = rhs0 if rhs0 > 0 else 1.0
    viol = float(np.max(np.abs(lhs + diss - rhs0)) / denom)
    return StabilityLedger(times, lhs, diss, float(rhs0), viol)


# -- compatibility data -------------------------------------------------------


@dataclass
class CompatibleData:
    delta: float
    rho0: np.ndarray
    u0: np.ndarray
    theta0: np.ndarray
    u_r: np.ndarray
    iterations: int
    contraction_factors: list
    u_r_h1: float
    residuals: dict


def _h1_norm(space: FESpace, coeffs: np.ndarray) -> float:
    from .grid import discrete_norms
    n = discrete_norms(space, coeffs)
    return math.sqrt(n["l2"] ** 2 + n["h1_semi"] ** 2)


def build_compatible_data(forms: AssembledForms, mode: GrowingMode,
                          delta: float, tol: float = 1e-10,
                          max_iter: int = 50) -> CompatibleData:
    """Initial data for the nonlinear system matching the growing mode.

    The data are delta*(mode) + delta^2*(mode density, u_r, mode
    temperature), with u_r the solution of the elliptic problem that makes
    the nonlinear momentum balance vanish identically at t=0, found by
    Picard iteration on the constant-coefficient viscous operator.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    space = forms.space
    prof, params = forms.profile, forms.params
    a, g = params.a, params.g
    x3 = space.qpts[..., -1]
    rho_q, e_q = prof.rho(x3), prof.e(x3)

    rb = mode.rho_tilde
    tb = mode.theta_tilde
    ub = mode.v_tilde
    rb_q = forms.sspace.values_at_qp(rb)
    tb_q = forms.sspace.values_at_qp(tb)
    ub_q = space.vector_values_at_qp(ub)
    gub_q = space.vector_grads_at_qp(ub)
    rho_tot_q = rho_q + (delta + delta * delta) * rb_q

    dim = space.mesh.dim
    nn = space.nnodes
    conn = space.mesh.connectivity

    def advect_dual(w_q, A_q):
        """b_i = integral w_q * A . phi_i for a (ncells, nq, dim) field A."""
        out = np.zeros(space.ndof)
        for c in range(dim):
            bi = np.einsum("q,cq,qi->ci", space.wq, w_q * A_q[..., c], space.N)
            np.add.at(out, conn + c * nn, bi)
        return out

    def pressure_dual(P_q):
        """b_i = -integral P * div(phi_i)  (weak form of +grad P)."""
        out = np.zeros(space.ndof)
        for c in range(dim):
            bi = -np.einsum("q,cq,qi->ci", space.wq, P_q, space.G[:, :, c])
            np.add.at(out, conn + c * nn, bi)
        return out

    def vertical_dual(S_q):
        out = np.zeros(space.ndof)
        bi = np.einsum("q,cq,qi->ci", space.wq, S_q, space.N)
        np.add.at(out, conn + (dim - 1) * nn, bi)
        return out

    adv_bb = np.einsum("cqd,cqkd->cqk", ub_q, gub_q)
    F = (advect_dual(rho_tot_q, adv_bb)
         + pressure_dual(a * (e_q * rb_q + rho_q * tb_q))
         + vertical_dual(g * rb_q)
         + pressure_dual((1.0 + delta) ** 2 * a * rb_q * tb_q))

    u_r = np.zeros(space.ndof)
    increments, factors = [], []
    it = 0
    for it in range(1, max_iter + 1):
        ur_q = space.vector_values_at_qp(u_r)
        gur_q = space.vector_grads_at_qp(u_r)
        cross = (np.einsum("cqd,cqkd->cqk", ub_q, gur_q)
                 + np.einsum("cqd,cqkd->cqk", ur_q, gub_q))
        self_adv = np.einsum("cqd,cqkd->cqk", ur_q, gur_q)
        rhs = (F + delta * advect_dual(rho_tot_q, cross)
               + delta * delta * advect_dual(rho_tot_q, self_adv))
        u_new = lame_solve(forms, rhs)
        inc = _h1_norm(space, u_new - u_r)
        increments.append(inc)
        if len(increments) > 1 and increments[-2] > 0:
            k = increments[-1] / increments[-2]
            factors.append(k)
            if k >= 1.0 and inc > 10.0 * tol:
                raise PicardDivergence(delta, k)
        u_r = u_new
        if inc <= tol:
            break
    else:
        raise PicardDivergence(delta, factors[-1] if factors else float("inf"))

    rho0 = (delta + delta * delta) * rb
    u0 = delta * ub + delta * delta * u_r
    theta0 = (delta + delta * delta) * tb

    lam = mode.lam
    cons = space.constrained
    # second-derivative-free reduction of the boundary compatibility residual:
    # the order-delta part equals -lam * rho * (mode velocity), which has an
    # exact zero trace, and the order-delta^2 part is the solved system's
    # residual.  Q1 cannot evaluate the raw second-derivative trace; the
    # unreduced weak boundary rows (viscous flux included) are reported as a
    # diagnostic only.
    rho_dofs = np.tile(prof.rho(space.mesh.nodes[:, -1]), dim)
    mode_bd = float(np.max(np.abs(delta * lam * rho_dofs[cons] * ub[cons])))
    data_bd = float(np.max(np.abs(u0[cons])))
    lamef = forms._cache["lame"]
    bf = -rhs[space.free]
    sys_res = float(np.linalg.norm(lamef.A @ u_r[space.free] - bf)
                    / max(np.linalg.norm(bf), 1e-300))
    weak_rows = (rhs - forms.K2 @ u_r)
    weak_bd = float(np.max(np.abs(weak_rows[cons]))) * delta * delta
    residuals = {
        "boundary_data_max": data_bd,
        "mode_boundary_term": mode_bd,
        "picard_system_residual": sys_res,
        "boundary_compat_lumped": max(data_bd, mode_bd, delta * delta * sys_res),
        "weak_boundary_rows_diagnostic": weak_bd,
    }
    return CompatibleData(delta, rho0, u0, theta0, u_r, it, factors,
                          _h1_norm(space, u_r), residuals)


# -- nonlinear system ---------------------------------------------------------


class NonlinearIntegrator:
    """IMEX integrator for the full perturbation system.

    Viscosity is implicit (constant-coefficient, refactorized against the
    current total-density mass matrix each step); advection, pressure,
    gravity and viscous heating are explicit.  The pressure is handled in
    perturbation form, so the hydrostatic background is a discrete
    equilibrium to roundoff.
    """

    def __init__(self, forms: AssembledForms, cfl: float = 0.4):
        self.forms = forms
        self.cfl = cfl
        space = forms.space
        prof = forms.profile
        x3 = space.qpts[..., -1]
        self.rho_q = prof.rho(x3)
        self.e_q = prof.e(x3)
        self.de_q = prof.de(x3)
        self.rho_nodes = prof.rho(space.mesh.nodes[:, -1])
        self.e_nodes = prof.e(space.mesh.nodes[:, -1])
        self._ms_lu = spla.factorized(forms.Ms.tocsc())
        self._conn = space.mesh.connectivity
        self._nn = space.nnodes
        self._rows_cols = None
        self._pc = None          # (dt, splu of steady-mass/dt + viscous)

    # -- helpers ----------------------------------------------------------

    def _mass_matrix(self, w_q) -> sp.csr_matrix:
        space = self.forms.space
        E = mass_block(space, w_q)
        if self._rows_cols is None:
            conn = self._conn
            r = conn[:, :, None].repeat(conn.shape[1], axis=2).ravel()
            c = conn[:, None, :].repeat(conn.shape[1], axis=1).ravel()
            self._rows_cols = (r, c)
        r, c = self._rows_cols
        nn = self._nn
        blocks = []
        for comp in range(space.components):
            blocks.append(sp.coo_matrix(
                (E.ravel(), (r + comp * nn, c + comp * nn)),
                shape=(space.ndof, space.ndof)))
        A = sum(blocks).tocsr()
        return ((A + A.T) * 0.5).tocsr()

    def _wmass_matvec(self, w_q, xf) -> np.ndarray:
        """(weighted vector mass) @ x on free dofs, matrix-free."""
        space = self.forms.space
        x = self.forms.extend(xf)
        conn, nn = self._conn, self._nn
        out = np.zeros(space.ndof)
        for c in range(space.components):
            vals = space.values_at_qp(x[c * nn:(c + 1) * nn])
            bi = np.einsum("q,cq,qi->ci", space.wq, w_q * vals, space.N)
            np.add.at(out, conn + c * nn, bi)
        return out[self.forms.free]

    def _momentum_solve(self, dt, rho1_q, rhs) -> np.ndarray:
        """PCG on (M(rho_total)/dt + viscous) u = rhs, preconditioned by the
        factorized steady-mass operator; the two differ only by the small
        perturbation-density mass."""
        forms = self.forms
        K2 = forms.restricted("K2")
        if self._pc is None or self._pc[0] != dt:
            A0 = (forms.restricted("M") / dt + K2).tocsc()
            self._pc = (dt, spla.splu(A0))
        pc = self._pc[1]
        pert_q = rho1_q - self.rho_q

        def amat(x):
            return (self._wmass_matvec(rho1_q, x) / dt + K2 @ x)

        x = pc.solve(rhs)
        r = rhs - amat(x)
        nb = np.linalg.norm(rhs)
        if nb == 0:
            return np.zeros_like(rhs)
        z = pc.solve(r)
        p = z.copy()
        rz = float(r @ z)
        for _ in range(60):
            if np.linalg.norm(r) <= 1e-11 * nb:
                return x
            Ap = amat(p)
            alpha_cg = rz / float(p @ Ap)
            x += alpha_cg * p
            r -= alpha_cg * Ap
            z = pc.solve(r)
            rz_new = float(r @ z)
            p = z + (rz_new / rz) * p
            rz = rz_new
        # fall back to a direct factorization of the exact operator
        Mp = self._mass_matrix(pert_q)[np.ix_(forms.free, forms.free)]
        A = (forms.restricted("M") / dt + Mp / dt + K2).tocsc()
        x = spla.splu(A).solve(rhs)
        if np.linalg.norm(amat(x) - rhs) > 1e-9 * nb:
            raise LinearSolveFailure("implicit momentum solve stalled")
        return x

    def sound_speed_nodes(self, state: PerturbationState) -> np.ndarray:
        params = self.forms.params
        e_tot = state.theta + self.e_nodes
        return np.sqrt(np.maximum(params.gamma * params.a * e_tot, 0.0))

    def cfl_bound(self, state: PerturbationState) -> float:
        """dt bound: cfl * min(h/(|u|+c_s), h^2 rho/(mu + mu0))."""
        space = self.forms.space
        params = self.forms.params
        hmin = min(space.mesh.h)
        cs = self.sound_speed_nodes(state)
        umag = np.sqrt(sum(
            space.component(state.u, c) ** 2 for c in range(space.components)))
        dt_adv = hmin / max(float(np.max(umag + cs)), 1e-300)
        rho_tot = state.rho + self.rho_nodes
        mu_total = params.mu + params.mu0
        dt_visc = hmin * hmin * float(np.min(rho_tot)) / mu_total
        return self.cfl * min(dt_adv, dt_visc)

    def _check_positivity(self, rho, theta, where: str):
        rho_tot = rho + self.rho_nodes
        e_tot = theta + self.e_nodes
        if rho_tot.min() <= 0 or e_tot.min() <= 0:
            raise PositivityLoss(
                f"{where}: min(rho_total) = {rho_tot.min():.3e}, "
                f"min(e_total) = {e_tot.min():.3e}"
            )

    # -- one step ----------------------------------------------------------

    def step(self, state: PerturbationState, dt: float) -> PerturbationState:
        if not dt > 0:
            raise ValueError("dt must be positive")
        self._check_positivity(state.rho, state.theta, "pre-step")
        bound = self.cfl_bound(state)
        if dt > bound * (1.0 + 1e-12):
            raise CFLViolation(f"dt = {dt:.3e} exceeds bound {bound:.3e}")

        forms = self.forms
        space = forms.space
        sspace = forms.sspace
        params = forms.params
        a, g = params.a, params.g
        dim, vert = space.mesh.dim, space.mesh.vertical
        nn, conn = self._nn, self._conn

        rho_q = sspace.values_at_qp(state.rho)
        grho_q = sspace.grads_at_qp(state.rho)
        th_q = sspace.values_at_qp(state.theta)
        gth_q = sspace.grads_at_qp(state.theta)
        u_q = space.vector_values_at_qp(state.u)
        gu_q = space.vector_grads_at_qp(state.u)
        div_q = np.einsum("cqkk->cq", gu_q)
        rho_tot_q = rho_q + self.rho_q
        e_tot_q = th_q + self.e_q
        if rho_tot_q.min() <= 0 or e_tot_q.min() <= 0:
            raise PositivityLoss("pre-step quadrature values nonpositive")

        # mass: conservative weak flux, exact global conservation
        Fq = rho_tot_q[..., None] * u_q
        bmass = np.zeros(sspace.ndof)
        np.add.at(bmass, conn,
                  -np.einsum("q,cqd,qid->ci", space.wq, Fq, space.G))
        rho_new = state.rho - dt * self._ms_lu(bmass)

        # temperature: advection + compression - viscous heating
        sym = gu_q + np.swapaxes(gu_q, -1, -2)
        heat = (0.5 * params.mu * np.einsum("cqkd,cqkd->cq", sym, sym)
                + params.lambda_v * div_q * div_q) / rho_tot_q
        conv = (np.einsum("cqd,cqd->cq", u_q, gth_q)
                + self.de_q * u_q[..., vert]
                + a * e_tot_q * div_q - heat)
        bth = np.zeros(sspace.ndof)
        np.add.at(bth, conn, np.einsum("q,cq,qi->ci", space.wq, conv, space.N))
        theta_new = state.theta - dt * self._ms_lu(bth)

        self._check_positivity(rho_new, theta_new, "post-scalar update")

        # momentum: implicit viscosity against fresh scalars
        rho1_q = sspace.values_at_qp(rho_new) + self.rho_q
        th1_q = sspace.values_at_qp(theta_new)
        P_pert = rho1_q * (th1_q + self.e_q) - self.rho_q * self.e_q
        adv = np.einsum("cqd,cqkd->cqk", u_q, gu_q)
        b = np.zeros(space.ndof)
        for c in range(dim):
            bi = np.einsum("q,cq,qi->ci", space.wq, rho_tot_q * adv[..., c],
                           space.N)
            bi -= np.einsum("q,cq,qi->ci", space.wq, a * P_pert,
                            space.G[:, :, c])
            if c == vert:
                bi += np.einsum("q,cq,qi->ci", space.wq,
                                g * sspace.values_at_qp(rho_new), space.N)
            np.add.at(b, conn + c * nn, bi)

        f = forms.free
        rhs = self._wmass_matvec(rho1_q, state.u[f]) / dt - b[f]
        uf = self._momentum_solve(dt, rho1_q, rhs)

        new = PerturbationState(state.t + dt, rho_new, forms.extend(uf),
                                theta_new)
        new.diagnostics = state_diagnostics(forms, new)
        return new

    def run(self, state: PerturbationState, dt: float, n_steps: int,
            record_every: int = 1, keep_states: bool = False,
            stop=None) -> Trajectory:
        if not state.diagnostics:
            state.diagnostics = state_diagnostics(self.forms, state)
        times = [state.t]
        diags = {k: [v] for k, v in state.diagnostics.items()}
        states = [state] if keep_states else []
        cur = state
        for i in range(1, n_steps + 1):
            cur = self.step(cur, dt)
            if i % record_every == 0 or i == n_steps:
                times.append(cur.t)
                for k, v in cur.diagnostics.items():
                    diags[k].append(v)
                if keep_states:
                    states.append(cur)
                if stop is not None and stop(cur):
                    break
        return Trajectory(np.asarray(times),
                          {k: np.asarray(v) for k, v in diags.items()}, states)


def nonlinear_step(state: PerturbationState, dt: float,
                   integrator: NonlinearIntegrator) -> PerturbationState:
    return integrator.step(state, dt)


def total_perturbation_mass(forms: AssembledForms, state) -> float:
    ones = np.ones(forms.sspace.ndof)
    return float(ones @ (forms.Ms @ state.rho))


# -- escape-time experiment ----------------------------------------------------


@dataclass
class EscapeTimeReport:
    deltas: list
    escape_times: list
    fit_slope: float
    fit_intercept: float
    lambda_ref: float
    rel_error: float             # |slope - 1/lambda| * lambda
    u3_at_escape: list
    uh_at_escape: list
    eps_target: float
    horizontal_threshold: float
    t_max: float
    statuses: list


def _interp_crossing(t0, y0, t1, y1, target):
    if y0 <= 0 or y1 <= 0 or y1 == y0:
        return t1
    return t0 + (t1 - t0) * (math.log(target) - math.log(y0)) / (
        math.log(y1) - math.log(y0))


def fit_escape_slope(deltas, times) -> tuple:
    """Least-squares (slope, intercept) of escape time against ln(1/delta)."""
    x = np.log(1.0 / np.asarray(deltas, dtype=float))
    slope, intercept = np.polyfit(x, np.asarray(times, dtype=float), 1)
    return float(slope), float(intercept)


def _escape_single(forms, mode, d, eps_target, t_max, cfl, picard_tol) -> dict:
    integ = NonlinearIntegrator(forms, cfl=cfl)
    data = build_compatible_data(forms, mode, d, tol=picard_tol)
    st = PerturbationState(0.0, data.rho0, data.u0, data.theta0)
    st.diagnostics = state_diagnostics(forms, st)
    # headroom below the initial bound: the bound tightens as the
    # perturbation grows toward the escape threshold
    dt = 0.8 * integ.cfl_bound(st)
    n_steps = int(math.ceil(t_max / dt))
    traj = integ.run(st, dt, n_steps,
                     stop=lambda s: s.diagnostics["u3_l2"] >= eps_target)
    y = traj.column("u3_l2")
    tarr = traj.times
    idx = np.flatnonzero(y >= eps_target)
    if idx.size == 0:
        return {"status": "no_escape", "time": float("nan"),
                "u3": float(y[-1]), "uh": float(traj.column("uh_l2")[-1])}
    i = int(idx[0])
    tc = (_interp_crossing(tarr[i - 1], y[i - 1], tarr[i], y[i], eps_target)
          if i > 0 else tarr[0])
    return {"status": "escaped", "time": float(tc),
            "u3": float(y[i]), "uh": float(traj.column("uh_l2")[i])}


_ESCAPE_CTX: dict = {}


def _escape_worker(args):
    d, eps_target, t_max, cfl, picard_tol = args
    return d, _escape_single(_ESCAPE_CTX["forms"], _ESCAPE_CTX["mode"],
                             d, eps_target, t_max, cfl, picard_tol)


def escape_time_experiment(forms: AssembledForms, mode: GrowingMode,
                           deltas, eps_target: float | None = None,
                           t_max: float | None = None,
                           cfl: float = 0.4,
                           picard_tol: float = 1e-10,
                           jobs: int = 1) -> EscapeTimeReport:
    """Nonlinear escape times against seeding amplitude.

    Each run seeds compatibility-corrected data of size delta and integrates
    until the vertical velocity norm reaches eps_target.  The escape time
    grows like ln(1/delta)/rate, so the fitted slope against ln(1/delta)
    estimates the reciprocal growth rate.  Independent delta runs execute in
    parallel when ``jobs`` > 1 (fork-based; results merged by delta).
    """
    deltas = sorted(float(d) for d in deltas)
    lam = mode.lam
    mesh = forms.space.mesh
    if eps_target is None:
        L = mesh.extents[-1][1] - mesh.extents[-1][0]
        eps_target = 1e-2 * math.sqrt(forms.params.g * L)
    if t_max is None:
        t_max = 3.0 / lam * math.log(1.0 / min(deltas))
    ratio_h = mode.norms["v_horizontal"] / mode.norms["v_vertical"]
    thr_h = 0.5 * eps_target * ratio_h

    results: dict = {}
    use_pool = jobs > 1 and len(deltas) > 1
    if use_pool:
        import multiprocessing as mp
        if mp.get_start_method(allow_none=True) not in (None, "fork"):
            use_pool = False
    if use_pool:
        import multiprocessing as mp
        _ESCAPE_CTX["forms"] = forms
        _ESCAPE_CTX["mode"] = mode
        try:
            with mp.get_context("fork").Pool(min(jobs, len(deltas))) as pool:
                for d, r in pool.map(_escape_worker, [
                        (d, eps_target, t_max, cfl, picard_tol)
                        for d in deltas]):
                    results[d] = r
        finally:
            _ESCAPE_CTX.clear()
    else:
        for d in deltas:
            results[d] = _escape_single(forms, mode, d, eps_target, t_max,
                                        cfl, picard_tol)

    times = [results[d]["time"] for d in deltas]
    u3s = [results[d]["u3"] for d in deltas]
    uhs = [results[d]["uh"] for d in deltas]
    statuses = [results[d]["status"] for d in deltas]

    ok = [i for i, s in enumerate(statuses) if s == "escaped"]
    if len(ok) < 2:
        raise NoEscape(
            f"only {len(ok)} of {len(deltas)} runs escaped before t_max",
            partial={"deltas": deltas, "times": times, "statuses": statuses})
    slope, intercept = fit_escape_slope([deltas[i] for i in ok],
                                        [times[i] for i in ok])
    rel = abs(slope - 1.0 / lam) * lam
    return EscapeTimeReport(deltas, times, slope, intercept,
                            lam, float(rel), u3s, uhs, float(eps_target),
                            float(thr_h), float(t_max), statuses)
