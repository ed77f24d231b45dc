import numpy as np
import pytest

from rtgrowth import (FESpace, PhysParams, SolverOpts, alpha, assemble,
                      build_mesh, build_steady_state, estimate_poincare_c3,
                      find_growth_rate, incompressible_growth_rate,
                      lower_bound_test_function, reconstruct_mode,
                      sample_alpha_curve)
from rtgrowth.errors import NotUnstable, NoUnstableRegion
from rtgrowth.spectral import _cutoff_callables

from conftest import REF_SPEC, make_forms


def test_alpha_negative_for_uniform_density_large_s(params):
    par = PhysParams(g=1.0, gamma=2.0, mu=0.1, lambda_v=0.1)
    prof = build_steady_state(
        {"kind": "analytic", "family": "linear",
         "params": {"rho0": 1.0, "slope": 0.0},
         "x3_min": 0.0, "x3_max": 1.0, "integration_constant": -2.0}, par)
    forms = make_forms(prof, par, 8)
    r = alpha(forms, 1e3, SolverOpts(method="dense"))
    assert r.value < 0


def test_alpha_zero_within_bounds(ref_forms16):
    r = alpha(ref_forms16, 0.0, SolverOpts(method="dense"))
    assert 0 < r.value <= 3.4
    assert r.residual < 1e-10


def test_alpha_negative_beyond_poincare_threshold(ref_forms16, params):
    c3 = estimate_poincare_c3(ref_forms16)
    assert c3 > 0
    r = alpha(ref_forms16, 10.0 * c3 / params.mu, SolverOpts())
    assert r.value < 0


def test_alpha_monotone_pair(ref_forms16):
    r1 = alpha(ref_forms16, 0.1, SolverOpts())
    r2 = alpha(ref_forms16, 0.3, SolverOpts())
    assert r1.value >= r2.value - 1e-8


def test_alpha_requires_nonnegative_s(ref_forms16):
    with pytest.raises(ValueError):
        alpha(ref_forms16, -0.5)


def test_curve_monotone_and_lipschitz(ref_forms16):
    curve = sample_alpha_curve(ref_forms16, [0.0, 0.5, 1.0, 2.0, 4.0])
    a = curve.alphas()
    assert np.all(np.diff(a) <= 1e-8)
    assert np.isfinite(curve.lipschitz_estimate)
    assert curve.lipschitz_estimate <= curve.lipschitz_bound + 1e-8
    # the curve turns negative before s = 0.5 on this mesh
    assert curve.frak_S == (0.0, 0.5)


def test_curve_sign_change_bracket(ref_forms16, ref_growth16):
    S = ref_growth16.frak_S[1]
    curve = sample_alpha_curve(ref_forms16, np.linspace(0, 2 * S, 8))
    lo, hi = curve.frak_S
    a = dict((s["s"], s["alpha"]) for s in curve.samples)
    assert a[lo] > 0 >= a[hi]


def test_cutoff_function_properties():
    quarter = 0.25
    f, df, F = _cutoff_callables(quarter)
    r = np.linspace(-0.5, 0.5, 1001)
    assert np.allclose(f(r), -f(-r), atol=1e-15)          # odd
    assert np.all(f(np.abs(r) >= quarter) == 0)           # compact support
    inside = np.abs(r) < quarter
    nonzero = inside & (np.abs(r) > 1e-12)
    assert np.all(np.abs(f(r[nonzero])) > 0)
    # C1: derivative continuous across the support edge
    eps = 1e-8
    assert abs(df(np.array([quarter - eps]))[0]) < 1e-5
    assert df(np.array([quarter + eps]))[0] == 0.0
    # antiderivative from the left edge, vanishing outside
    assert F(np.array([quarter]))[0] == pytest.approx(0.0, abs=1e-18)
    assert F(np.array([-quarter]))[0] == 0.0
    assert F(np.array([0.0]))[0] < 0


def test_lower_bound_test_function(ref_forms16):
    lb = lower_bound_test_function(ref_forms16)
    assert lb.c1 > 0 and lb.c2 > 0
    # rho' = 1, rho = 1 + x3: c1 = g * int v3^2 / int (1+x3)|v|^2 <= g
    assert lb.c1 <= ref_forms16.params.g
    assert lb.div_max <= 1e-10
    r0 = alpha(ref_forms16, 0.0, SolverOpts())
    assert r0.value >= lb.c1 - 1e-8
    # interpolant Rayleigh quotients approximate the smooth pair
    assert lb.rayleigh_c1 == pytest.approx(lb.c1, rel=0.1)
    assert lb.rayleigh_c2 == pytest.approx(lb.c2, rel=0.1)


def test_lower_bound_rejects_stable(params, stable_profile):
    forms = make_forms(stable_profile, params, 8)
    with pytest.raises(NoUnstableRegion):
        lower_bound_test_function(forms)


def test_find_growth_rate_reference(ref_forms16, ref_growth16):
    res = ref_growth16
    assert 0 < res.lam <= np.sqrt(3.4)
    assert res.residual <= 1e-9
    assert res.frak_S[0] <= res.frak_S[1]
    assert res.lam < res.frak_S[1]
    assert res.uniqueness["h_minus"] > 0 > res.uniqueness["h_plus"]
    # eigvec is M-normalized with zero trace
    M = ref_forms16.M
    assert res.eigvec @ (M @ res.eigvec) == pytest.approx(1.0, abs=1e-12)
    assert np.all(res.eigvec[ref_forms16.space.constrained] == 0)


def test_find_growth_rate_tolerance_consistency(ref_forms16, ref_growth16):
    res10 = find_growth_rate(ref_forms16, SolverOpts(tol=1e-10))
    assert abs(res10.lam - ref_growth16.lam) < 1e-7


def test_find_growth_rate_stable_raises(params, stable_profile):
    forms = make_forms(stable_profile, params, 8)
    with pytest.raises(NotUnstable) as exc:
        find_growth_rate(forms, SolverOpts())
    assert exc.value.alpha0 <= 0


def test_oracle_equivalence_randomized(rng):
    """Shift-invert agrees with the dense eigendecomposition to 1e-8."""
    cases = 0
    for k in range(10):
        slope = float(rng.uniform(0.5, 2.0))
        gamma = float(rng.uniform(1.3, 2.0))
        mu = float(rng.uniform(0.05, 0.3))
        s = float(rng.uniform(0.0, 1.0))
        par = PhysParams(g=1.0, gamma=gamma, mu=mu, lambda_v=0.1)
        prof = build_steady_state(
            {"kind": "analytic", "family": "linear",
             "params": {"rho0": 1.0, "slope": slope},
             "x3_min": 0.0, "x3_max": 1.0}, par, e_floor=0.2)
        n = 10 if k < 7 else 14
        forms = make_forms(prof, par, n)
        assert len(forms.free) <= 2500
        rd = alpha(forms, s, SolverOpts(method="dense"))
        ri = alpha(forms, s, SolverOpts(method="shift_invert", seed=k))
        assert abs(rd.value - ri.value) <= 1e-8 * max(1.0, abs(rd.value))
        cases += 1
    assert cases == 10


def test_eigenvector_is_discrete_maximizer(ref_forms16, ref_growth16, rng):
    A = ref_forms16.pencil(ref_growth16.lam)
    M = ref_forms16.restricted("M")
    x = ref_growth16.eigvec[ref_forms16.free]
    amax = float(x @ (A @ x))
    for _ in range(100):
        w = rng.standard_normal(len(ref_forms16.free))
        w /= np.sqrt(w @ (M @ w))
        assert w @ (A @ w) <= amax + 1e-10


def test_euler_lagrange_residual(ref_forms16, ref_growth16):
    A = ref_forms16.pencil(ref_growth16.lam)
    M = ref_forms16.restricted("M")
    x = ref_growth16.eigvec[ref_forms16.free]
    amax = float(x @ (A @ x))
    res = np.linalg.norm(A @ x - amax * (M @ x)) / np.linalg.norm(M @ x)
    assert res <= 1e-8


def test_mode_reconstruction(ref_forms16, ref_growth16, ref_mode16):
    mode = ref_mode16
    assert mode.residuals["mass"] <= 1e-13
    assert mode.residuals["temperature"] <= 1e-13
    assert mode.residuals["boundary"] == 0.0
    assert mode.nontrivial["horizontal"]
    assert mode.nontrivial["vertical"]
    assert mode.nontrivial["rho"]  # monotone-nonneg profile
    assert mode.norms["v_horizontal"] > 1e-3
    assert mode.norms["v_vertical"] > 1e-3
    assert mode.norms["rho"] > 1e-3


def test_momentum_residual_refines(params, ref_profile):
    rels = []
    for n in (8, 16, 32):
        forms = make_forms(ref_profile, params, n)
        res = find_growth_rate(forms, SolverOpts())
        mode = reconstruct_mode(forms, res)
        rels.append(mode.residuals["momentum_dual_rel"])
    order1 = np.log2(rels[0] / rels[1])
    order2 = np.log2(rels[1] / rels[2])
    assert order1 >= 1.0
    assert order2 >= 1.0


def test_incompressible_comparison(ref_forms16, ref_growth16):
    inc = incompressible_growth_rate(ref_forms16, SolverOpts())
    assert inc.converged
    assert inc.final_rel_change < 5e-3
    assert ref_growth16.lam >= inc.lam - 1e-6
    assert inc.lam > 0


def test_incompressible_stable_raises(params, stable_profile):
    forms = make_forms(stable_profile, params, 8)
    with pytest.raises(NotUnstable):
        incompressible_growth_rate(forms, SolverOpts())


def test_penalty_schedule_monotone_trend(ref_forms16):
    inc = incompressible_growth_rate(ref_forms16, SolverOpts(),
                                     penalties=[1e-2, 1e-3, 1e-4])
    lams = [l for _, l in inc.history]
    # stronger constraint cannot raise the rate
    assert all(b <= a + 1e-10 for a, b in zip(lams, lams[1:]))
    assert abs(lams[-1] - lams[-2]) / lams[-2] < 5e-3


def test_3d_growth_rate(params):
    prof = build_steady_state(REF_SPEC, params)
    mesh = build_mesh(3, [(0.0, 1.0)] * 3, (6, 6, 6))
    space = FESpace(mesh, components=3)
    forms = assemble(space, prof, params)
    res = find_growth_rate(forms, SolverOpts(tol=1e-8))
    assert 0 < res.lam <= np.sqrt(3.4)
    mode = reconstruct_mode(forms, res)
    assert mode.nontrivial["horizontal"] and mode.nontrivial["vertical"]
    lb = lower_bound_test_function(forms)
    assert lb.c1 > 0 and lb.div_max <= 1e-10
    assert res.alpha0 >= lb.c1 - 1e-8


def test_alpha_sweep_parallel_matches_sequential(ref_forms16):
    grid = [0.0, 0.1, 0.2, 0.3]
    seq = sample_alpha_curve(ref_forms16, grid, SolverOpts(method="dense"))
    par = sample_alpha_curve(ref_forms16, grid, SolverOpts(method="dense"),
                             jobs=2)
    assert np.allclose(seq.alphas(), par.alphas(), rtol=0, atol=0)
