"""Growth-rate computation by the damped variational principle.

alpha(s) is the largest eigenvalue of the symmetric pencil
(K1 - s K2) x = alpha M x on the Dirichlet-masked velocity space.  It is
nonincreasing in s, bounded above by a profile constant, and bounded below
by c1 - s*c2 evaluated on an explicit compactly supported solenoidal test
field.  The growth rate is the unique positive root of alpha(s) = s^2,
found by bisection; the maximizer at the root is the growing velocity mode,
from which the density and temperature components follow by projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numpy.polynomial.legendre import leggauss

from .errors import (BracketFailure, EigensolverStall, NotUnstable,
                     NoUnstableRegion, DegenerateMode, PenaltyNonconvergence)
from .forms import AssembledForms, WeightedDivOps
from .grid import interpolate

_NSCAN = 4097


@dataclass
class SolverOpts:
    """Eigensolver and fixed-point controls."""

    tol: float = 1e-9            # |alpha(s) - s^2| stop for the root
    eig_tol: float = 0.0         # ARPACK tolerance (0 = machine precision)
    dense_cutoff: int = 700      # free-dof count below which eigh is used
    method: str = "auto"         # auto | dense | shift_invert
    maxiter: int = 2000
    s_max_guess: float = 64.0
    max_doublings: int = 40
    seed: int = 0

    def resolve_method(self, nfree: int) -> str:
        if self.method != "auto":
            return self.method
        return "dense" if nfree <= self.dense_cutoff else "shift_invert"


@dataclass
class AlphaResult:
    s: float
    value: float
    vector: np.ndarray          # full dofs, M-normalized, zero trace
    residual: float             # ||A x - alpha M x|| / ||M x||
    method: str


@dataclass
class AlphaCurve:
    samples: list               # dicts: s, alpha, residual, eigvec_id
    eigvecs: list
    lipschitz_estimate: float
    lipschitz_bound: float
    upper_bound: float
    lower_bound: tuple | None   # (c1, c2) when a test field exists
    frak_S: tuple | None        # (s-, s+) bracketing the sign change, if seen
    checks: dict = None         # recorded invariant margins

    def alphas(self) -> np.ndarray:
        return np.array([r["alpha"] for r in self.samples])

    def svals(self) -> np.ndarray:
        return np.array([r["s"] for r in self.samples])

    def _record_checks(self, tol: float = 1e-8):
        a, s = self.alphas(), self.svals()
        mi = float(np.max(np.diff(a))) if len(a) > 1 else -np.inf
        self.checks = {
            "max_increase": mi,
            "monotone": bool(mi <= tol),
            "below_upper_bound": bool(np.all(a <= self.upper_bound + tol)),
            "lipschitz_ok": bool(self.lipschitz_estimate
                                 <= self.lipschitz_bound + tol),
        }
        if self.lower_bound is not None:
            c1, c2 = self.lower_bound
            self.checks["above_lower_bound"] = bool(
                np.all(a >= c1 - c2 * s - tol))


@dataclass
class GrowthRateResult:
    lam: float
    residual: float             # |alpha(lam) - lam^2|
    eigvec: np.ndarray
    bracket_history: list
    frak_S: tuple
    alpha0: float
    upper_bound: float
    n_evals: int
    uniqueness: dict


@dataclass
class GrowingMode:
    lam: float
    v_tilde: np.ndarray
    rho_tilde: np.ndarray
    theta_tilde: np.ndarray
    residuals: dict
    norms: dict
    nontrivial: dict


@dataclass
class TestFieldBound:
    v: np.ndarray               # interpolated coefficients in the velocity space
    c1: float                   # g * int rho' v3^2 / int rho |v|^2 of the field
    c2: float                   # mu * int |grad v|^2 / int rho |v|^2
    rayleigh_c1: float          # E1/J and E2/J of the Q1 interpolant
    rayleigh_c2: float
    center: tuple
    delta: float
    div_max: float              # pointwise |div| of the smooth field at quad pts


def _sign_fix(x: np.ndarray) -> np.ndarray:
    i = int(np.argmax(np.abs(x)))
    return -x if x[i] < 0 else x


def _m_normalize(x: np.ndarray, M: sp.csr_matrix) -> np.ndarray:
    n = float(x @ (M @ x))
    if n <= 0:
        raise DegenerateMode("eigenvector has nonpositive mass norm")
    return x / np.sqrt(n)


def _component_l2(forms: AssembledForms, vec_full: np.ndarray, comp: int) -> float:
    c = forms.space.component(vec_full, comp)
    return float(np.sqrt(max(0.0, c @ (forms.Ms @ c))))


def _eig_dense(A: sp.csr_matrix, M: sp.csr_matrix, forms, extend):
    w, V = sla.eigh(A.toarray(), M.toarray())
    k = len(w) - 1
    # deterministic tie-break: among numerically equal top values prefer the
    # eigenvector with the largest vertical-component L2 norm
    ties = [k]
    for j in range(k - 1, -1, -1):
        if w[k] - w[j] <= 1e-10 * max(1.0, abs(w[k])):
            ties.append(j)
        else:
            break
    if len(ties) > 1 and forms is not None:
        vert = forms.space.mesh.vertical
        best = max(ties, key=lambda j: _component_l2(forms, extend(V[:, j]), vert))
    else:
        best = k
    return float(w[best]), V[:, best]


def alpha(forms: AssembledForms, s: float, opts: SolverOpts | None = None,
          warm: np.ndarray | None = None) -> AlphaResult:
    """Largest eigenvalue of (K1 - s K2) x = alpha M x with M-normalized x."""
    if s < 0:
        raise ValueError("damping parameter s must be nonnegative")
    opts = opts or SolverOpts()
    A = forms.pencil(s)
    M = forms.restricted("M")
    n = A.shape[0]
    method = opts.resolve_method(n)
    if method == "dense":
        val, xf = _eig_dense(A, M, forms, forms.extend)
    elif method == "shift_invert":
        sigma = forms.upper_bound + 1.0
        if warm is not None:
            v0 = warm[forms.free]
        else:
            v0 = np.random.default_rng(opts.seed).standard_normal(n)
        try:
            w, V = spla.eigsh(A, k=1, M=M, sigma=sigma, which="LM",
                              v0=v0, tol=opts.eig_tol, maxiter=opts.maxiter)
        except spla.ArpackNoConvergence as exc:
            raise EigensolverStall(
                f"shift-invert eigensolve stalled at s={s:.6g}: {exc}"
            ) from exc
        val, xf = float(w[0]), V[:, 0]
    else:
        raise ValueError(f"unknown eigensolver method {method!r}")
    xf = _sign_fix(_m_normalize(xf, M))
    val = float(xf @ (A @ xf))  # Rayleigh quotient of the normalized vector
    res = float(np.linalg.norm(A @ xf - val * (M @ xf))
                / np.linalg.norm(M @ xf))
    return AlphaResult(float(s), val, forms.extend(xf), res, method)


_SWEEP_CTX: dict = {}


def _sweep_worker(s):
    r = alpha(_SWEEP_CTX["forms"], s, _SWEEP_CTX["opts"])
    return s, r


def sample_alpha_curve(forms: AssembledForms, s_grid,
                       opts: SolverOpts | None = None,
                       lower: "TestFieldBound | None" = None,
                       jobs: int = 1) -> AlphaCurve:
    """Evaluate alpha on an increasing grid.

    Sequential sweeps warm-start each eigensolve from the previous
    maximizer; with ``jobs`` > 1 the (independent) evaluations run in a
    fork-based pool and are merged in grid order.
    """
    s_grid = np.asarray(list(s_grid), dtype=float)
    if np.any(np.diff(s_grid) <= 0) or np.any(s_grid < 0):
        raise ValueError("s_grid must be strictly increasing and nonnegative")
    opts = opts or SolverOpts()
    samples, eigvecs = [], []
    use_pool = jobs > 1 and len(s_grid) > 1
    if use_pool:
        import multiprocessing as mp
        if mp.get_start_method(allow_none=True) not in (None, "fork"):
            use_pool = False
    if use_pool:
        import multiprocessing as mp
        _SWEEP_CTX["forms"] = forms
        _SWEEP_CTX["opts"] = opts
        try:
            with mp.get_context("fork").Pool(min(jobs, len(s_grid))) as pool:
                out = dict(pool.map(_sweep_worker, list(s_grid)))
        finally:
            _SWEEP_CTX.clear()
        for i, s in enumerate(s_grid):
            r = out[s]
            eigvecs.append(r.vector)
            samples.append({"s": float(s), "alpha": r.value,
                            "residual": r.residual, "eigvec_id": i})
    else:
        warm = None
        for i, s in enumerate(s_grid):
            r = alpha(forms, s, opts, warm=warm)
            warm = r.vector
            eigvecs.append(r.vector)
            samples.append({"s": float(s), "alpha": r.value,
                            "residual": r.residual, "eigvec_id": i})
    avals = np.array([r["alpha"] for r in samples])
    if len(s_grid) > 1:
        slopes = np.abs(np.diff(avals) / np.diff(s_grid))
        emp = float(np.max(slopes))
    else:
        emp = 0.0
    # Lipschitz-type bound: on [b, inf) the slope of alpha is at most the
    # dissipation of any near-maximizer, itself at most (1 + L + UB)/b
    pos = s_grid[s_grid > 0]
    if pos.size:
        b = float(pos[0])
        ab = samples[int(np.argmax(s_grid == b))]["alpha"]
        L = max(abs(ab), forms.upper_bound)
        lip_bound = (1.0 + L + forms.upper_bound) / b
    else:
        lip_bound = np.inf
    frak = None
    signs = np.sign(avals)
    for i in range(len(avals) - 1):
        if signs[i] > 0 and signs[i + 1] <= 0:
            frak = (float(s_grid[i]), float(s_grid[i + 1]))
            break
    lb = (lower.c1, lower.c2) if lower is not None else None
    curve = AlphaCurve(samples, eigvecs, emp, float(lip_bound),
                       forms.upper_bound, lb, frak)
    curve._record_checks()
    return curve


# -- explicit solenoidal test field ----------------------------------------


def _cutoff_callables(quarter: float):
    """Odd C1 cutoff f(r) = r (quarter^2 - r^2)^2 on |r| < quarter and its
    antiderivative-from-(-quarter) F; both vanish outside."""
    c = quarter * quarter

    def f(r):
        r = np.asarray(r, dtype=float)
        inside = np.abs(r) < quarter
        out = np.zeros_like(r)
        rr = r[inside]
        out[inside] = rr * (c - rr * rr) ** 2
        return out

    def df(r):
        r = np.asarray(r, dtype=float)
        inside = np.abs(r) < quarter
        out = np.zeros_like(r)
        rr = r[inside]
        out[inside] = (c - rr * rr) * (c - 5.0 * rr * rr)
        return out

    def F(r):
        # integral of f from -quarter to r: -(c - r^2)^3 / 6 inside, 0 outside
        r = np.asarray(r, dtype=float)
        inside = np.abs(r) < quarter
        out = np.zeros_like(r)
        rr = r[inside]
        out[inside] = -((c - rr * rr) ** 3) / 6.0
        return out

    return f, df, F


def _bump_region(forms: AssembledForms):
    prof = forms.profile
    mesh = forms.space.mesh
    lo, hi = mesh.vertical_extent()
    xs = np.linspace(lo, hi, _NSCAN)
    d = prof.drho(xs)
    if d.max() <= 0:
        raise NoUnstableRegion(
            f"density gradient is nonpositive everywhere (max {d.max():.3g})"
        )
    i0 = int(np.argmax(d))
    i_lo = i0
    while i_lo > 0 and d[i_lo - 1] > 0:
        i_lo -= 1
    i_hi = i0
    while i_hi < len(xs) - 1 and d[i_hi + 1] > 0:
        i_hi += 1
    # center the support inside the contiguous rho' > 0 interval
    x0v = 0.5 * (xs[i_lo] + xs[i_hi])
    vert_clear = min(x0v - xs[i_lo], xs[i_hi] - x0v, x0v - lo, hi - x0v)
    clearances = [0.5 * (e[1] - e[0]) for e in mesh.extents[:-1]] + [vert_clear]
    quarter = 0.95 * min(clearances)
    if quarter <= 0:
        raise NoUnstableRegion("no interior ball with positive density gradient")
    center = tuple(0.5 * (e[0] + e[1]) for e in mesh.extents[:-1]) + (float(x0v),)
    return center, quarter


def _field_2d(center, quarter):
    f, df, F = _cutoff_callables(quarter)
    cx, cz = center

    def comps(x):
        r1, r3 = x[..., 0] - cx, x[..., 1] - cz
        return np.stack([-f(r3) * F(r1), f(r1) * F(r3)], axis=-1)

    def grads(x):
        r1, r3 = x[..., 0] - cx, x[..., 1] - cz
        g = np.zeros(x.shape[:-1] + (2, 2))
        g[..., 0, 0] = -f(r3) * f(r1)
        g[..., 0, 1] = -df(r3) * F(r1)
        g[..., 1, 0] = df(r1) * F(r3)
        g[..., 1, 1] = f(r1) * f(r3)
        return g

    return comps, grads


def _field_3d(center, quarter):
    f, df, F = _cutoff_callables(quarter)
    cx, cy, cz = center

    def comps(x):
        r1 = x[..., 0] - cx
        r2 = x[..., 1] - cy
        r3 = x[..., 2] - cz
        z = np.zeros_like(r1)
        return np.stack([z,
                         -f(r1) * f(r3) * F(r2),
                         f(r1) * f(r2) * F(r3)], axis=-1)

    def grads(x):
        r1 = x[..., 0] - cx
        r2 = x[..., 1] - cy
        r3 = x[..., 2] - cz
        g = np.zeros(x.shape[:-1] + (3, 3))
        g[..., 1, 0] = -df(r1) * f(r3) * F(r2)
        g[..., 1, 1] = -f(r1) * f(r3) * f(r2)
        g[..., 1, 2] = -f(r1) * df(r3) * F(r2)
        g[..., 2, 0] = df(r1) * f(r2) * F(r3)
        g[..., 2, 1] = f(r1) * df(r2) * F(r3)
        g[..., 2, 2] = f(r1) * f(r2) * f(r3)
        return g

    return comps, grads


def lower_bound_test_function(forms: AssembledForms,
                              quad_1d: int = 10) -> TestFieldBound:
    """Compactly supported divergence-free field in the rising-density region.

    (c1, c2) integrate the smooth construction itself, giving the line
    c1 - c2*s under the energy curve; the Rayleigh quotients of the Q1
    interpolant are reported alongside (their divergence pollution makes
    them pessimistic on coarse meshes).
    """
    mesh = forms.space.mesh
    prof, params = forms.profile, forms.params
    center, quarter = _bump_region(forms)
    dim = mesh.dim
    comps, grads = (_field_2d if dim == 2 else _field_3d)(center, quarter)

    # high-order Gauss rule on the support cube
    xg, wg = leggauss(quad_1d)
    axes = [center[d] + quarter * xg for d in range(dim)]
    gg = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in gg], axis=-1)
    w = wg
    for _ in range(dim - 1):
        w = np.multiply.outer(w, wg)
    w = w.ravel() * quarter ** dim

    vals = comps(pts)
    gr = grads(pts)
    x3 = pts[..., -1]
    rho, drho = prof.rho(x3), prof.drho(x3)
    v3 = vals[..., dim - 1]
    num1 = float(np.sum(w * params.g * drho * v3 * v3))
    num2 = float(np.sum(w * params.mu * np.einsum("nkd,nkd->n", gr, gr)))
    den = float(np.sum(w * rho * np.einsum("nk,nk->n", vals, vals)))
    if den <= 0:
        raise NoUnstableRegion("test field degenerate: zero mass norm")
    c1, c2 = num1 / den, num2 / den

    div_q = float(np.max(np.abs(np.einsum("cqkk->cq",
                                          grads(forms.space.qpts)))))

    v = interpolate(forms.space, comps)
    e1 = float(v @ (forms.K1 @ v))
    e2 = float(v @ (forms.K2 @ v))
    j = float(v @ (forms.M @ v))
    if j <= 0:
        raise NoUnstableRegion("test field invisible to the mesh; refine it")
    return TestFieldBound(v, c1, c2, e1 / j, e2 / j,
                          center, 4.0 * quarter, div_q)


# -- fixed point -----------------------------------------------------------


def _fixed_point(alpha_of_s, opts: SolverOpts):
    """Bisection for the unique root of h(s) = alpha(s) - s^2 in (0, S)."""
    evals = [0]

    def a(s, warm):
        evals[0] += 1
        return alpha_of_s(s, warm)

    r0 = a(0.0, None)
    if not r0.value > opts.tol:
        raise NotUnstable(r0.value)
    history = []
    hi = float(np.sqrt(r0.value))
    warm = r0.vector
    r_hi = a(hi, warm)
    doublings = 0
    while r_hi.value - hi * hi > 0:
        hi *= 2.0
        doublings += 1
        if hi > opts.s_max_guess * 2 ** opts.max_doublings:
            raise BracketFailure(f"no sign change of alpha(s) - s^2 below {hi:.3g}")
        r_hi = a(hi, r_hi.vector)
    lo, h_lo = 0.0, r0.value
    h_hi = r_hi.value - hi * hi
    warm = r_hi.vector
    lam, h_mid, r_mid = hi, h_hi, r_hi
    for _ in range(300):
        history.append((lo, hi))
        mid = 0.5 * (lo + hi)
        r_mid = a(mid, warm)
        warm = r_mid.vector
        h_mid = r_mid.value - mid * mid
        lam = mid
        if abs(h_mid) <= opts.tol:
            break
        if h_mid > 0:
            lo, h_lo = mid, h_mid
        else:
            hi, h_hi = mid, h_mid
    else:
        raise BracketFailure(
            f"bisection failed to reach |alpha - s^2| <= {opts.tol:g}"
        )

    # uniqueness bracket around the root
    d = 10.0 * opts.tol
    h_m = a(max(lam - d, 0.0), warm)
    h_p = a(lam + d, warm)
    uniq = {"delta": d,
            "h_minus": h_m.value - max(lam - d, 0.0) ** 2,
            "h_plus": h_p.value - (lam + d) ** 2}

    # bracket the zero of alpha itself (the positivity threshold)
    s_neg, r_neg = hi, r_hi
    while r_neg.value > 0:
        s_neg *= 2.0
        if s_neg > opts.s_max_guess * 2 ** opts.max_doublings:
            raise BracketFailure("alpha(s) failed to turn negative")
        r_neg = a(s_neg, r_neg.vector)
    s_pos = lam
    wS = r_neg.vector
    while s_neg - s_pos > 1e-3 * max(1.0, s_neg):
        mid = 0.5 * (s_pos + s_neg)
        r = a(mid, wS)
        wS = r.vector
        if r.value > 0:
            s_pos = mid
        else:
            s_neg = mid
    return (lam, abs(h_mid), r_mid, history, (s_pos, s_neg), r0.value, evals[0],
            uniq)


def find_growth_rate(forms: AssembledForms,
                     opts: SolverOpts | None = None) -> GrowthRateResult:
    """Unique positive rate with alpha(rate) = rate^2, by bisection.

    Raises NotUnstable when alpha(0) <= 0 (no growing mode exists).
    """
    opts = opts or SolverOpts()

    def a(s, warm):
        return alpha(forms, s, opts, warm=warm)

    lam, res, r_mid, hist, frak, a0, nev, uniq = _fixed_point(a, opts)
    vec = _m_normalize(r_mid.vector[forms.free], forms.restricted("M"))
    return GrowthRateResult(lam, res, forms.extend(_sign_fix(vec)), hist, frak,
                            a0, forms.upper_bound, nev, uniq)


def reconstruct_mode(forms: AssembledForms, result: GrowthRateResult) -> GrowingMode:
    """Growing-mode triple from the maximizing velocity field.

    The density and temperature parts are the scalar-space projections of
    -div(rho v)/lam and -(e' v3 + a e div v)/lam, so the mass and
    temperature lines of the time-independent system hold at projection
    level; the momentum line is reported in a dual norm.
    """
    lam = result.lam
    if not lam > 0:
        raise DegenerateMode("growth rate must be positive")
    v = forms.space.check_coeffs(result.eigvec)
    ops = WeightedDivOps(forms)
    div_proj = ops.project_div(v)
    th_proj = ops.project_temperature_source(v)
    rho_t = -div_proj / lam
    theta_t = -th_proj / lam

    Ms = forms.Ms
    def snorm(x):
        return float(np.sqrt(max(0.0, x @ (Ms @ x))))

    # mass line: lam*rho + P(div(rho v)) vanishes by construction
    r1 = snorm(lam * rho_t + div_proj)
    r3 = snorm(lam * theta_t + th_proj)

    a, g = forms.params.a, forms.params.g
    terms = [lam * (forms.M @ v),
             -a * (forms.GpE @ rho_t),
             -a * (forms.GpR @ theta_t),
             forms.K2 @ v,
             g * (forms.C3 @ rho_t)]
    R2 = sum(terms)
    f = forms.free
    R2f = R2[f]
    ml = np.asarray(forms.M.sum(axis=1)).ravel()[f]  # lumped rho-mass
    mom_l2 = float(np.sqrt(np.sum(R2f * R2f / ml)))
    K2ff = forms.restricted("K2")
    lu = spla.splu(K2ff.tocsc())

    def dual(r):
        return float(np.sqrt(max(0.0, r[f] @ lu.solve(r[f]))))

    mom_dual = dual(R2)
    # relative to the largest constituent of the momentum balance
    scale = max(dual(t) for t in terms)

    vert = forms.space.mesh.vertical
    horiz = [c for c in range(forms.space.components) if c != vert]
    nh = float(np.sqrt(sum(_component_l2(forms, v, c) ** 2 for c in horiz)))
    nv = _component_l2(forms, v, vert)
    nr, nt = snorm(rho_t), snorm(theta_t)
    residuals = {
        "mass": r1,
        "temperature": r3,
        "momentum_l2": mom_l2,
        "momentum_dual": mom_dual,
        "momentum_dual_rel": mom_dual / scale,
        "boundary": float(np.max(np.abs(v[forms.space.constrained]))
                          if forms.space.constrained.any() else 0.0),
    }
    norms = {"v_horizontal": nh, "v_vertical": nv, "rho": nr, "theta": nt}
    nontrivial = {"horizontal": nh > 1e-12, "vertical": nv > 1e-12,
                  "rho": nr > 1e-12}
    return GrowingMode(lam, v, rho_t, theta_t, residuals, norms, nontrivial)


@dataclass
class IncompressibleResult:
    lam: float
    history: list               # (penalty_eps, lam) pairs
    converged: bool
    final_rel_change: float
    frak_S: tuple
    residual: float


def incompressible_growth_rate(forms: AssembledForms,
                               opts: SolverOpts | None = None,
                               penalties=None,
                               rel_stop: float = 5e-3) -> IncompressibleResult:
    """Rate of the divergence-free comparison problem by quadratic penalty.

    The buoyancy form keeps only the g*rho'*v3^2 term and the dissipation
    only mu*|grad v|^2, with (1/eps)*(div v)^2 added to the dissipation on a
    decreasing eps schedule until the rate stabilizes below ``rel_stop``.
    """
    opts = opts or SolverOpts()
    if penalties is None:
        penalties = [10.0 ** (-k) for k in range(2, 9)]
    f = forms.free
    K1i = forms.restricted("K_rho3")
    Klap = forms.restricted("K_lap")
    # one-point-quadrature div-div penalty: full integration locks Q1
    Kdd = forms.restricted("K_dd_r")
    M = forms.restricted("M")
    sigma = forms.upper_bound + 1.0
    mu = forms.params.mu

    def make_alpha(eps):
        K2p = (mu * Klap + (1.0 / eps) * Kdd).tocsr()

        def a(s, warm):
            A = (K1i - s * K2p).tocsr()
            n = A.shape[0]
            method = opts.resolve_method(n)
            if method == "dense":
                val, xf = _eig_dense(A, M, forms, forms.extend)
            else:
                v0 = (warm[f] if warm is not None
                      else np.random.default_rng(opts.seed).standard_normal(n))
                try:
                    w, V = spla.eigsh(A, k=1, M=M, sigma=sigma, which="LM",
                                      v0=v0, tol=opts.eig_tol,
                                      maxiter=opts.maxiter)
                except spla.ArpackNoConvergence as exc:
                    raise EigensolverStall(str(exc)) from exc
                val, xf = float(w[0]), V[:, 0]
            xf = _sign_fix(_m_normalize(xf, M))
            val = float(xf @ (A @ xf))
            res = float(np.linalg.norm(A @ xf - val * (M @ xf))
                        / np.linalg.norm(M @ xf))
            out = np.zeros(forms.space.ndof)
            out[f] = xf
            return AlphaResult(float(s), val, out, res, method)

        return a

    history = []
    prev = None
    final = None
    for eps in penalties:
        lam, res, r_mid, hist, frak, a0, nev, uniq = _fixed_point(
            make_alpha(eps), opts)
        history.append((float(eps), float(lam)))
        final = (lam, res, frak)
        if prev is not None:
            change = abs(lam - prev) / max(abs(prev), 1e-300)
            if change < rel_stop:
                return IncompressibleResult(lam, history, True, change,
                                            frak, res)
        prev = lam
    if prev is None or final is None:
        raise PenaltyNonconvergence("empty penalty schedule")
    change = (abs(history[-1][1] - history[-2][1]) / abs(history[-2][1])
              if len(history) > 1 else np.inf)
    raise PenaltyNonconvergence(
        f"rate still changing by {change:.3%} after schedule "
        f"{penalties[0]:g}..{penalties[-1]:g}"
    )


def estimate_poincare_c3(forms: AssembledForms,
                         opts: SolverOpts | None = None) -> float:
    """Largest eigenvalue of the buoyancy-coupling form against |grad v|^2.

    Any s above c3/mu makes the damped energy negative, so this seeds the
    search for where alpha changes sign.
    """
    opts = opts or SolverOpts()
    G = forms.restricted("G_poincare")
    K = forms.restricted("K_lap")
    n = G.shape[0]
    if opts.resolve_method(n) == "dense":
        w = sla.eigh(G.toarray(), K.toarray(), eigvals_only=True)
        return float(w[-1])
    try:
        w = spla.eigsh(G, k=1, M=K, which="LA", maxiter=opts.maxiter,
                       v0=np.random.default_rng(opts.seed).standard_normal(n),
                       return_eigenvectors=False)
    except spla.ArpackNoConvergence as exc:
        raise EigensolverStall(str(exc)) from exc
    return float(w[0])
