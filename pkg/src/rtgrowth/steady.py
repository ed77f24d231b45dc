"""Steady states: a density profile in hydrostatic balance with its internal energy.

Given a strictly positive density rho(x3) on a vertical interval, the
balancing internal energy is

    e(x3) = -g * (R(x3) + C) / (a * rho(x3)),   R(x3) = integral of rho,

so that p = a*rho*e satisfies dp/dx3 = -g*rho identically.  The constant C
is free; we fix it by a floor on min(e) or accept it explicitly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.interpolate import make_interp_spline

from .errors import NonPositiveDensity, NoValidConstant
from .params import PhysParams

_NSAMPLE = 4097  # fine grid for extrema and residual scans


@dataclass(frozen=True)
class ProfileClass:
    """Sign classification of the density gradient."""

    unstable_type: bool   # rho' > 0 somewhere
    stable_type: bool     # rho' < 0 everywhere
    monotone_nonneg: bool  # rho' >= 0 everywhere

    @property
    def label(self) -> str:
        if self.unstable_type:
            return "unstable_type"
        if self.stable_type:
            return "stable_type"
        return "neutral"


class SteadyProfile:
    """Sampled-and-evaluable steady state (rho, 0, e) on a vertical interval.

    All callables are vectorized in x3.  Construction guarantees
    p = a*rho*e pointwise and dp/dx3 = -g*rho up to roundoff of the
    density antiderivative.
    """

    def __init__(
        self,
        x3_min: float,
        x3_max: float,
        rho: Callable[[np.ndarray], np.ndarray],
        drho: Callable[[np.ndarray], np.ndarray],
        rho_antideriv: Callable[[np.ndarray], np.ndarray],
        integration_constant: float,
        params: PhysParams,
        kind: str = "analytic",
    ):
        if not x3_max > x3_min:
            raise ValueError("empty vertical interval")
        self.x3_min = float(x3_min)
        self.x3_max = float(x3_max)
        self.params = params
        self.kind = kind
        self.integration_constant = float(integration_constant)
        self._rho = rho
        self._drho = drho
        self._R = rho_antideriv

        xs = np.linspace(self.x3_min, self.x3_max, _NSAMPLE)
        rv = self.rho(xs)
        if not np.all(np.isfinite(rv)) or rv.min() <= 0:
            raise NonPositiveDensity(
                f"density must be strictly positive, min sampled value {rv.min():.6g}"
            )
        ev = self.e(xs)
        if ev.min() <= 0:
            raise NoValidConstant(
                f"internal energy not positive with C={integration_constant:.6g} "
                f"(min e = {ev.min():.6g})"
            )
        self._samples = xs
        self.inf_rho = float(rv.min())
        self.inf_e = float(ev.min())
        # residual of dp/dx3 + g*rho; zero by construction up to the
        # accuracy of the antiderivative
        self.hydrostatic_residual = float(np.max(np.abs(self.dp(xs) + params.g * rv)))
        self.max_p = float(np.max(self.p(xs)))

    # -- pointwise fields ------------------------------------------------

    def rho(self, x):
        return np.asarray(self._rho(np.asarray(x, dtype=float)), dtype=float)

    def drho(self, x):
        return np.asarray(self._drho(np.asarray(x, dtype=float)), dtype=float)

    def p(self, x):
        x = np.asarray(x, dtype=float)
        return -self.params.g * (np.asarray(self._R(x), dtype=float)
                                 + self.integration_constant)

    def dp(self, x):
        return -self.params.g * self.rho(x)

    def e(self, x):
        return self.p(x) / (self.params.a * self.rho(x))

    def de(self, x):
        x = np.asarray(x, dtype=float)
        r = self.rho(x)
        return (self.dp(x) * r - self.p(x) * self.drho(x)) / (self.params.a * r * r)

    # -- summaries -------------------------------------------------------

    def covers(self, lo: float, hi: float, tol: float = 1e-12) -> bool:
        return lo >= self.x3_min - tol and hi <= self.x3_max + tol

    def classify(self) -> ProfileClass:
        d = self.drho(self._samples)
        return ProfileClass(
            unstable_type=bool(d.max() > 0.0),
            stable_type=bool(d.max() < 0.0),
            monotone_nonneg=bool(d.min() >= 0.0),
        )

    def bound_constants(self) -> dict:
        """Extrema entering the energy upper bound: max|rho'/rho|, max rho/p."""
        xs = self._samples
        r = self.rho(xs)
        return {
            "max_abs_drho_over_rho": float(np.max(np.abs(self.drho(xs)) / r)),
            "max_rho_over_p": float(np.max(r / self.p(xs))),
        }

    def dump_csv(self, path) -> None:
        xs = np.linspace(self.x3_min, self.x3_max, 201)
        with open(path, "w", newline="\n") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x3", "rho", "e", "p", "drho"])
            for x, r, e, p, d in zip(xs, self.rho(xs), self.e(xs),
                                     self.p(xs), self.drho(xs)):
                w.writerow([f"{v:.17g}" for v in (x, r, e, p, d)])


def classify_profile(profile: SteadyProfile) -> ProfileClass:
    return profile.classify()


# -- density inputs --------------------------------------------------------


def _analytic_family(family: str, fp: dict, x3_min: float):
    """Return (rho, drho, antiderivative-from-x3_min) callables."""
    if family == "linear":
        rho0 = float(fp.get("rho0", 1.0))
        slope = float(fp.get("slope", 1.0))
        return (
            lambda x: rho0 + slope * x,
            lambda x: np.full_like(x, slope),
            lambda x: rho0 * (x - x3_min) + 0.5 * slope * (x * x - x3_min * x3_min),
        )
    if family == "exponential":
        rho0 = float(fp.get("rho0", 1.0))
        rate = float(fp.get("rate", 1.0))
        if rate == 0.0:
            return (
                lambda x: np.full_like(x, rho0),
                lambda x: np.zeros_like(x),
                lambda x: rho0 * (x - x3_min),
            )
        return (
            lambda x: rho0 * np.exp(rate * x),
            lambda x: rho0 * rate * np.exp(rate * x),
            lambda x: rho0 * (np.exp(rate * x) - np.exp(rate * x3_min)) / rate,
        )
    if family == "bump":
        # base + amp * s^2 (1-s)^2 with s the normalized height
        base = float(fp.get("base", 1.0))
        amp = float(fp.get("amp", 1.0))
        lo, hi = x3_min, float(fp["x3_max"])
        L = hi - lo

        def s(x):
            return (x - lo) / L

        def rho(x):
            t = s(x)
            return base + amp * t * t * (1.0 - t) ** 2

        def drho(x):
            t = s(x)
            return amp * 2.0 * t * (1.0 - t) * (1.0 - 2.0 * t) / L

        def anti(x):
            t = s(x)
            # antiderivative of t^2(1-t)^2 = t^2 - 2t^3 + t^4
            poly = t**3 / 3.0 - t**4 / 2.0 + t**5 / 5.0
            return base * (x - lo) + amp * L * poly

        return rho, drho, anti
    raise ValueError(f"unknown analytic family {family!r}")


def _tabulated(x: np.ndarray, r: np.ndarray):
    if len(x) < 4:
        raise ValueError("need at least 4 samples for a cubic spline")
    if np.any(np.diff(x) <= 0):
        raise ValueError("table heights must be strictly increasing")
    if r.min() <= 0:
        raise NonPositiveDensity(f"tabulated density has min {r.min():.6g} <= 0")
    sp = make_interp_spline(x, r, k=3)
    dsp = sp.derivative()
    asp = sp.antiderivative()
    a0 = asp(x[0])
    return sp, dsp, (lambda y: asp(y) - a0)


def _pick_constant(rho, anti, params: PhysParams, e_floor: float,
                   x3_min: float, x3_max: float) -> float:
    """Largest C with min e >= e_floor, i.e. C = -max(R + e_floor*a*rho/g)."""
    xs = np.linspace(x3_min, x3_max, _NSAMPLE)
    vals = anti(xs) + e_floor * params.a * rho(xs) / params.g
    c = -float(np.max(vals))
    if not math.isfinite(c):
        raise NoValidConstant("integration constant scan produced non-finite values")
    return c


def build_steady_state(rho_spec: dict, params: PhysParams,
                       e_floor: float = 0.1) -> SteadyProfile:
    """Construct a hydrostatically balanced steady state from a density spec.

    Parameters
    ----------
    rho_spec : dict
        Either ``{"kind": "analytic", "family": ..., "params": {...},
        "x3_min": ..., "x3_max": ...}`` with family one of linear /
        exponential / bump, or ``{"kind": "table", "x3": [...], "rho": [...]}``
        (or ``"path"`` to a two-column CSV).  An optional
        ``"integration_constant"`` overrides the e_floor rule.
    params : PhysParams
    e_floor : float
        Lower bound imposed on min(e) when the constant is not given.

    Returns
    -------
    SteadyProfile
    """
    kind = rho_spec.get("kind", "analytic")
    if kind == "analytic":
        x3_min = float(rho_spec["x3_min"])
        x3_max = float(rho_spec["x3_max"])
        fp = dict(rho_spec.get("params", {}))
        if rho_spec.get("family") == "bump":
            fp.setdefault("x3_max", x3_max)
            fp.setdefault("x3_min", x3_min)
        rho, drho, anti = _analytic_family(rho_spec["family"], fp, x3_min)
    elif kind == "table":
        if "path" in rho_spec:
            data = np.loadtxt(rho_spec["path"], delimiter=",", skiprows=1)
            x, r = data[:, 0], data[:, 1]
        else:
            x = np.asarray(rho_spec["x3"], dtype=float)
            r = np.asarray(rho_spec["rho"], dtype=float)
        x3_min, x3_max = float(x[0]), float(x[-1])
        rho, drho, anti = _tabulated(x, r)
    else:
        raise ValueError(f"unknown profile kind {rho_spec.get('kind')!r}")

    probe = rho(np.linspace(x3_min, x3_max, _NSAMPLE))
    if not np.all(np.isfinite(probe)) or probe.min() <= 0:
        raise NonPositiveDensity(
            f"density spec not strictly positive (min {probe.min():.6g})"
        )

    if "integration_constant" in rho_spec:
        c = float(rho_spec["integration_constant"])
    else:
        c = _pick_constant(rho, anti, params, float(e_floor), x3_min, x3_max)

    return SteadyProfile(x3_min, x3_max, rho, drho, anti, c, params, kind=kind)


class CoefficientPair:
    """Arbitrary (rho, e) coefficient pair for linearized studies.

    Unlike ``SteadyProfile`` this does not enforce hydrostatic balance;
    p = a*rho*e is still used for bound constants, and the (generally
    nonzero) balance defect is reported in ``hydrostatic_residual``.
    """

    kind = "manual"

    def __init__(self, x3_min, x3_max, rho, drho, e, de, params: PhysParams):
        self.x3_min, self.x3_max = float(x3_min), float(x3_max)
        self.params = params
        self._rho, self._drho = rho, drho
        self._e, self._de = e, de
        xs = np.linspace(self.x3_min, self.x3_max, _NSAMPLE)
        rv, ev = self.rho(xs), self.e(xs)
        if rv.min() <= 0:
            raise NonPositiveDensity(f"min rho = {rv.min():.6g}")
        if ev.min() <= 0:
            raise NoValidConstant(f"min e = {ev.min():.6g}")
        self._samples = xs
        self.inf_rho, self.inf_e = float(rv.min()), float(ev.min())
        self.integration_constant = float("nan")
        self.hydrostatic_residual = float(
            np.max(np.abs(self.dp(xs) + params.g * rv)))
        self.max_p = float(np.max(self.p(xs)))

    def rho(self, x):
        return np.asarray(self._rho(np.asarray(x, dtype=float)), dtype=float)

    def drho(self, x):
        return np.asarray(self._drho(np.asarray(x, dtype=float)), dtype=float)

    def e(self, x):
        return np.asarray(self._e(np.asarray(x, dtype=float)), dtype=float)

    def de(self, x):
        return np.asarray(self._de(np.asarray(x, dtype=float)), dtype=float)

    def p(self, x):
        return self.params.a * self.rho(x) * self.e(x)

    def dp(self, x):
        a = self.params.a
        return a * (self.drho(x) * self.e(x) + self.rho(x) * self.de(x))

    covers = SteadyProfile.covers
    classify = SteadyProfile.classify
    bound_constants = SteadyProfile.bound_constants
    dump_csv = SteadyProfile.dump_csv


def constant_energy_stable_spec(rho0: float, e_const: float,
                                params: PhysParams,
                                x3_min: float, x3_max: float) -> dict:
    """Density spec whose balanced internal energy is exactly the constant e_const.

    Balance with constant e forces rho' = -g*rho/(a*e), i.e. an exponential
    profile with rate -g/(a*e) and integration constant rho0/rate.
    """
    rate = -params.g / (params.a * e_const)
    return {
        "kind": "analytic",
        "family": "exponential",
        "params": {"rho0": rho0, "rate": rate},
        "x3_min": x3_min,
        "x3_max": x3_max,
        # R(x3_min) = 0 here, so C must absorb the value of rho/rate there
        "integration_constant": rho0 * math.exp(rate * x3_min) / rate,
    }
