"""Shared fixtures: the reference unstable profile and its assembled problem.

Expensive objects (growth rate, mode) are session-scoped; tests must not
mutate them.
"""

import numpy as np
import pytest

from rtgrowth import (FESpace, PhysParams, SolverOpts, assemble, build_mesh,
                      build_steady_state, constant_energy_stable_spec,
                      find_growth_rate, reconstruct_mode)

REF_SPEC = {
    "kind": "analytic",
    "family": "linear",
    "params": {"rho0": 1.0, "slope": 1.0},
    "x3_min": 0.0,
    "x3_max": 1.0,
    "integration_constant": -2.0,
}

STABLE_SPEC = {
    "kind": "analytic",
    "family": "linear",
    "params": {"rho0": 2.0, "slope": -1.0},
    "x3_min": 0.0,
    "x3_max": 1.0,
}


@pytest.fixture(scope="session")
def params():
    return PhysParams(g=1.0, gamma=5.0 / 3.0, mu=0.1, lambda_v=0.1)


@pytest.fixture(scope="session")
def ref_profile(params):
    return build_steady_state(REF_SPEC, params)


@pytest.fixture(scope="session")
def stable_profile(params):
    """Strictly decreasing density; balanced e is not constant here."""
    return build_steady_state(STABLE_SPEC, params, e_floor=2.0)


@pytest.fixture(scope="session")
def stable_const_e_profile(params):
    """Exponential density with exactly constant internal energy e = 2."""
    return build_steady_state(
        constant_energy_stable_spec(2.0, 2.0, params, 0.0, 1.0), params)


def make_forms(profile, params, n=16, dim=2):
    mesh = build_mesh(dim, [(0.0, 1.0)] * dim, (n,) * dim)
    space = FESpace(mesh, components=dim)
    return assemble(space, profile, params)


@pytest.fixture(scope="session")
def ref_forms16(ref_profile, params):
    return make_forms(ref_profile, params, 16)


@pytest.fixture(scope="session")
def ref_growth16(ref_forms16):
    return find_growth_rate(ref_forms16, SolverOpts())


@pytest.fixture(scope="session")
def ref_mode16(ref_forms16, ref_growth16):
    return reconstruct_mode(ref_forms16, ref_growth16)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
