import numpy as np
import pytest

from rtgrowth import (CoefficientPair, PhysParams, build_steady_state,
                      classify_profile, constant_energy_stable_spec)
from rtgrowth.errors import NonPositiveDensity

from conftest import REF_SPEC


def test_linear_profile_closed_form(params, ref_profile):
    # rho = 1 + x3, C = -2: e = (2 - x3 - x3^2/2) / ((2/3)(1 + x3))
    xs = np.linspace(0.0, 1.0, 101)
    e_exact = (2.0 - xs - xs * xs / 2.0) / ((2.0 / 3.0) * (1.0 + xs))
    assert np.allclose(ref_profile.e(xs), e_exact, rtol=1e-14, atol=0)
    assert ref_profile.e(np.array([0.0]))[0] == pytest.approx(3.0, abs=1e-14)
    assert ref_profile.e(np.array([1.0]))[0] == pytest.approx(0.375, abs=1e-14)
    p_exact = 2.0 - xs - xs * xs / 2.0
    assert np.allclose(ref_profile.p(xs), p_exact, rtol=1e-14, atol=1e-14)
    # dp/dx3 = -(1 + x3) = -g rho, checked against the closed form
    assert np.allclose(ref_profile.dp(xs), -(1.0 + xs), rtol=1e-14, atol=0)


def test_constant_density_linear_pressure():
    par = PhysParams(g=1.0, gamma=2.0)
    spec = {"kind": "analytic", "family": "linear",
            "params": {"rho0": 1.0, "slope": 0.0},
            "x3_min": 0.0, "x3_max": 1.0, "integration_constant": -2.0}
    prof = build_steady_state(spec, par)
    xs = np.linspace(0.0, 1.0, 33)
    assert np.allclose(prof.e(xs), 2.0 - xs, rtol=1e-14)
    assert np.allclose(prof.p(xs), 2.0 - xs, rtol=1e-14)
    assert prof.hydrostatic_residual == 0.0


def test_tabulated_matches_analytic(params, ref_profile):
    xs = np.linspace(0.0, 1.0, 64)
    spec = {"kind": "table", "x3": xs.tolist(), "rho": (1.0 + xs).tolist(),
            "integration_constant": -2.0}
    tab = build_steady_state(spec, params)
    grid = np.linspace(0.0, 1.0, 257)
    assert np.max(np.abs(tab.e(grid) - ref_profile.e(grid))) < 1e-10
    assert np.max(np.abs(tab.p(grid) - ref_profile.p(grid))) < 1e-10


def test_hydrostatic_residual_small(ref_profile, stable_profile):
    for prof in (ref_profile, stable_profile):
        assert prof.hydrostatic_residual <= 1e-8 * prof.max_p


def test_pressure_identity_pointwise(ref_profile, params):
    xs = np.linspace(0.0, 1.0, 999)
    lhs = ref_profile.p(xs)
    rhs = params.a * ref_profile.rho(xs) * ref_profile.e(xs)
    assert np.allclose(lhs, rhs, rtol=1e-14, atol=1e-15)


def test_e_floor_picks_reference_constant(params):
    spec = dict(REF_SPEC)
    spec.pop("integration_constant")
    prof = build_steady_state(spec, params, e_floor=0.375)
    assert prof.integration_constant == pytest.approx(-2.0, abs=1e-12)
    assert prof.inf_e == pytest.approx(0.375, abs=1e-9)


def test_lower_constant_raises_min_energy(params):
    spec = dict(REF_SPEC)
    prof_lo = build_steady_state({**spec, "integration_constant": -2.5}, params)
    prof_hi = build_steady_state(spec, params)
    assert prof_lo.inf_e > prof_hi.inf_e


def test_classification(params, ref_profile, stable_profile):
    c = classify_profile(ref_profile)
    assert c.unstable_type and c.monotone_nonneg and not c.stable_type
    assert c.label == "unstable_type"
    c2 = classify_profile(stable_profile)
    assert c2.stable_type and not c2.unstable_type
    assert c2.label == "stable_type"


def test_bump_profile_classification(params):
    spec = {"kind": "analytic", "family": "bump",
            "params": {"base": 1.0, "amp": 1.0},
            "x3_min": 0.0, "x3_max": 1.0}
    prof = build_steady_state(spec, params)
    xs = np.linspace(0.0, 1.0, 65)
    assert np.allclose(prof.rho(xs), 1.0 + xs**2 * (1 - xs) ** 2, rtol=1e-13)
    c = classify_profile(prof)
    # rho' = 2 x (1-x)(1-2x) changes sign at x = 1/2
    assert c.unstable_type and not c.monotone_nonneg and not c.stable_type


def test_nonpositive_density_rejected(params):
    spec = {"kind": "analytic", "family": "linear",
            "params": {"rho0": 0.5, "slope": -1.0},
            "x3_min": 0.0, "x3_max": 1.0}
    with pytest.raises(NonPositiveDensity):
        build_steady_state(spec, params)


def test_table_validation(params):
    with pytest.raises(ValueError):
        build_steady_state({"kind": "table", "x3": [0, 1, 0.5, 2],
                            "rho": [1, 1, 1, 1]}, params)
    with pytest.raises(NonPositiveDensity):
        build_steady_state({"kind": "table",
                            "x3": [0, 0.25, 0.5, 0.75, 1.0],
                            "rho": [1, 1, -0.1, 1, 1]}, params)


def test_constant_energy_spec_is_balanced(params):
    spec = constant_energy_stable_spec(2.0, 2.0, params, 0.0, 1.0)
    prof = build_steady_state(spec, params)
    xs = np.linspace(0.0, 1.0, 101)
    assert np.max(np.abs(prof.e(xs) - 2.0)) < 1e-12
    # a e rho' + g rho = 0 pointwise
    bal = params.a * 2.0 * prof.drho(xs) + params.g * prof.rho(xs)
    assert np.max(np.abs(bal)) < 1e-12
    assert classify_profile(prof).stable_type


def test_coefficient_pair_reports_imbalance(params):
    pair = CoefficientPair(0.0, 1.0,
                           lambda x: 2.0 - x, lambda x: -np.ones_like(x),
                           lambda x: 2.0 * np.ones_like(x),
                           lambda x: np.zeros_like(x), params)
    assert pair.hydrostatic_residual > 0.1
    assert classify_profile(pair).stable_type


def test_profile_dump(tmp_path, ref_profile):
    out = tmp_path / "profile.csv"
    ref_profile.dump_csv(out)
    lines = out.read_text().splitlines()
    assert lines[0] == "x3,rho,e,p,drho"
    assert len(lines) == 202
    first = [float(v) for v in lines[1].split(",")]
    assert first[0] == 0.0 and first[2] == pytest.approx(3.0)


def test_invalid_constant_rejected(params):
    spec = dict(REF_SPEC)
    spec["integration_constant"] = 0.0  # makes e negative everywhere
    from rtgrowth.errors import NoValidConstant
    with pytest.raises(NoValidConstant):
        build_steady_state(spec, params)


def test_constant_density_is_neutral(params):
    prof = build_steady_state(
        {"kind": "analytic", "family": "linear",
         "params": {"rho0": 1.0, "slope": 0.0},
         "x3_min": 0.0, "x3_max": 1.0, "integration_constant": -2.0}, params)
    c = classify_profile(prof)
    assert not c.unstable_type and not c.stable_type and c.monotone_nonneg
    assert c.label == "neutral"
