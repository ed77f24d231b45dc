import dataclasses

import numpy as np
import pytest

from rtgrowth import build_compatible_data
from rtgrowth.errors import PicardDivergence


def test_contraction_scales_with_delta(ref_forms16, ref_mode16):
    maxes = {}
    for d in (1e-4, 1e-3, 1e-2):
        cd = build_compatible_data(ref_forms16, ref_mode16, d)
        assert cd.iterations <= 10
        assert all(k < 1.0 for k in cd.contraction_factors)
        maxes[d] = max(cd.contraction_factors)
    # elliptic Picard contracts at O(delta)
    assert 3.0 < maxes[1e-3] / maxes[1e-4] < 30.0
    assert 3.0 < maxes[1e-2] / maxes[1e-3] < 30.0
    assert maxes[1e-2] < 1.0


def test_correction_norm_delta_independent(ref_forms16, ref_mode16):
    h1 = [build_compatible_data(ref_forms16, ref_mode16, d).u_r_h1
          for d in (1e-4, 1e-3, 1e-2)]
    spread = (max(h1) - min(h1)) / min(h1)
    assert spread < 0.05


def test_small_delta_limit_is_linear_solve(ref_forms16, ref_mode16):
    a = build_compatible_data(ref_forms16, ref_mode16, 1e-9)
    b = build_compatible_data(ref_forms16, ref_mode16, 1e-7)
    diff = np.linalg.norm(a.u_r - b.u_r) / np.linalg.norm(a.u_r)
    assert diff < 1e-5  # u_r varies O(delta) around the delta-free solve
    assert a.iterations <= 3


def test_data_composition(ref_forms16, ref_mode16):
    d = 1e-3
    cd = build_compatible_data(ref_forms16, ref_mode16, d)
    m = ref_mode16
    assert np.allclose(cd.rho0, (d + d * d) * m.rho_tilde, rtol=1e-15)
    assert np.allclose(cd.theta0, (d + d * d) * m.theta_tilde, rtol=1e-15)
    assert np.allclose(cd.u0, d * m.v_tilde + d * d * cd.u_r, rtol=1e-15)
    # trace of the data vanishes identically
    assert np.all(cd.u0[ref_forms16.space.constrained] == 0)


def test_boundary_compatibility_residual(ref_forms16, ref_mode16):
    for d in (1e-4, 1e-3, 1e-2):
        cd = build_compatible_data(ref_forms16, ref_mode16, d)
        assert cd.residuals["boundary_compat_lumped"] <= 1e-8
        assert cd.residuals["boundary_data_max"] == 0.0
        assert cd.residuals["mode_boundary_term"] == 0.0
        assert cd.residuals["picard_system_residual"] <= 1e-10


def test_delta_range_guard(ref_forms16, ref_mode16):
    with pytest.raises(ValueError):
        build_compatible_data(ref_forms16, ref_mode16, 1.5)
    with pytest.raises(ValueError):
        build_compatible_data(ref_forms16, ref_mode16, 0.0)


def test_picard_divergence_reported(ref_forms16, ref_mode16):
    # amplify the seed mode so the advective coupling overwhelms the
    # viscous operator and the iteration stops contracting
    big = dataclasses.replace(ref_mode16,
                              v_tilde=ref_mode16.v_tilde * 3e3,
                              rho_tilde=ref_mode16.rho_tilde * 3e3,
                              theta_tilde=ref_mode16.theta_tilde * 3e3)
    with pytest.raises(PicardDivergence) as exc:
        build_compatible_data(ref_forms16, big, 0.5, max_iter=200)
    assert exc.value.factor >= 1.0
    assert exc.value.delta == 0.5
