"""Batch command-line front end.

Subcommands: steady, growth, evolve-linear, evolve-nonlinear, escape,
verify.  Every command validates the config fully before any compute and
writes machine-readable reports (canonical JSON, 17-significant-digit
floats) plus CSV data files into the output directory.

Exit codes: 0 success, 2 configuration/validation error, 3 profile not
unstable, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from . import errors
from .config import RunConfig, load_config
from .evolve import (LinearPropagator, NonlinearIntegrator, PerturbationState,
                     build_compatible_data, escape_time_experiment,
                     measure_growth_rate, mode_state, state_diagnostics)
from .forms import assemble, energy_quadrature, quadratic_forms
from .grid import FESpace, build_mesh, dump_fields_csv
from .reports import write_csv, write_json
from .spectral import (SolverOpts, alpha, find_growth_rate,
                       incompressible_growth_rate, lower_bound_test_function,
                       reconstruct_mode, sample_alpha_curve)
from .steady import build_steady_state, classify_profile

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NOT_UNSTABLE = 3
EXIT_NUMERICAL = 4


def _solver_opts(cfg: RunConfig) -> SolverOpts:
    s = cfg.solver
    return SolverOpts(tol=float(s["tol"]), method=s["method"],
                      dense_cutoff=int(s["dense_cutoff"]),
                      s_max_guess=float(s["s_max_guess"]), seed=cfg.seed)


def _build_problem(cfg: RunConfig):
    profile = build_steady_state(cfg.profile_spec(), cfg.physics,
                                 e_floor=cfg.e_floor)
    mesh = build_mesh(cfg.mesh["dim"], cfg.mesh["extents"], cfg.mesh["cells"])
    space = FESpace(mesh, components=mesh.dim)
    forms = assemble(space, profile, cfg.physics)
    return profile, mesh, space, forms


def _profile_report(profile) -> dict:
    cls = classify_profile(profile)
    return {
        "classification": cls.label,
        "monotone_nonneg": cls.monotone_nonneg,
        "hydrostatic_residual": profile.hydrostatic_residual,
        "hydrostatic_residual_rel": profile.hydrostatic_residual
        / max(profile.max_p, 1e-300),
        "integration_constant": profile.integration_constant,
        "e_range": [profile.inf_e, float(np.max(profile.e(profile._samples)))],
        "rho_range": [profile.inf_rho,
                      float(np.max(profile.rho(profile._samples)))],
    }


def cmd_steady(cfg: RunConfig, out: str) -> int:
    profile, mesh, space, forms = _build_problem(cfg)
    profile.dump_csv(os.path.join(out, "profile.csv"))
    write_json(os.path.join(out, "steady_report.json"),
               _profile_report(profile))
    print(f"steady: {classify_profile(profile).label}, "
          f"hydrostatic residual {profile.hydrostatic_residual:.3e}")
    return EXIT_OK


def _growth_pipeline(cfg: RunConfig, out: str | None):
    profile, mesh, space, forms = _build_problem(cfg)
    opts = _solver_opts(cfg)
    try:
        result = find_growth_rate(forms, opts)
    except errors.NotUnstable:
        if out is not None:
            # leave an empty mode dump alongside the status report
            coords = "x1,x3" if mesh.dim == 2 else "x1,x2,x3"
            vcols = ",".join(f"v{c}" for c in
                             (("1", "3") if mesh.dim == 2 else ("1", "2", "3")))
            with open(os.path.join(out, "mode_fields.csv"), "w",
                      newline="\n") as fh:
                fh.write(f"{coords},rho,theta,{vcols}\n")
        raise
    mode = reconstruct_mode(forms, result)
    try:
        lower = lower_bound_test_function(forms)
    except errors.NoUnstableRegion:
        lower = None
    if "values" in cfg.s_grid:
        grid = np.asarray(cfg.s_grid["values"], dtype=float)
    else:
        grid = np.linspace(0.0, float(cfg.s_grid["max_factor"])
                           * result.frak_S[1], int(cfg.s_grid["count"]))
    curve = sample_alpha_curve(forms, grid, opts, lower=lower, jobs=cfg.jobs)
    inc = incompressible_growth_rate(forms, opts)
    return profile, forms, result, mode, lower, curve, inc


def cmd_growth(cfg: RunConfig, out: str) -> int:
    profile, forms, result, mode, lower, curve, inc = _growth_pipeline(cfg, out)
    rows = []
    for rec in curve.samples:
        lo = (lower.c1 - lower.c2 * rec["s"]) if lower else float("nan")
        rows.append([rec["s"], rec["alpha"], rec["residual"], lo,
                     curve.upper_bound])
    write_csv(os.path.join(out, "alpha_curve.csv"),
              ["s", "alpha", "eig_residual", "lower_bound", "upper_bound"],
              rows)
    report = {
        "lambda": result.lam,
        "residual": result.residual,
        "alpha0": result.alpha0,
        "frak_S": list(result.frak_S),
        "bound_upper": forms.upper_bound,
        "bound_lower": ({"c1": lower.c1, "c2": lower.c2,
                         "rayleigh_c1": lower.rayleigh_c1,
                         "rayleigh_c2": lower.rayleigh_c2,
                         "support_delta": lower.delta}
                        if lower else None),
        "lambda_inc": inc.lam,
        "lambda_inc_history": [list(h) for h in inc.history],
        "lambda_inc_final_rel_change": inc.final_rel_change,
        "compressible_not_below_incompressible":
            bool(result.lam >= inc.lam - 1e-6),
        "mode_norms": mode.norms,
        "mode_residuals": mode.residuals,
        "mode_nontrivial": mode.nontrivial,
        "n_eigensolves": result.n_evals,
        "lipschitz_estimate": curve.lipschitz_estimate,
        "lipschitz_bound": curve.lipschitz_bound,
        "seed": cfg.seed,
    }
    write_json(os.path.join(out, "growth_rate.json"), report)
    dump_fields_csv(os.path.join(out, "mode_fields.csv"), forms.space.mesh,
                    {"rho": mode.rho_tilde, "theta": mode.theta_tilde,
                     "v": mode.v_tilde})
    if cfg.solver.get("dump_matrices"):
        from .forms import dump_matrix_coo
        for name in ("M", "K1", "K2"):
            dump_matrix_coo(os.path.join(out, f"{name}.coo.txt"),
                            getattr(forms, name))
    print(f"growth: lambda = {result.lam:.10g} "
          f"(residual {result.residual:.2e}), lambda_inc = {inc.lam:.10g}")
    return EXIT_OK


def cmd_evolve_linear(cfg: RunConfig, out: str) -> int:
    profile, mesh, space, forms = _build_problem(cfg)
    opts = _solver_opts(cfg)
    result = find_growth_rate(forms, opts)
    mode = reconstruct_mode(forms, result)
    evo = cfg.evolution
    dt = float(evo["dt"])
    n_steps = int(math.ceil(float(evo["n_efold"]) / result.lam / dt))
    prop = LinearPropagator(forms, dt)
    st = mode_state(forms, mode, float(evo["seed_amplitude"]))
    st.diagnostics = state_diagnostics(forms, st)
    ckpt = int(evo["checkpoint_every"])
    traj = prop.run(st, n_steps, record_every=int(evo["record_every"]),
                    keep_states=ckpt > 0)
    _write_checkpoints(out, mesh, traj, ckpt)
    fit = measure_growth_rate(traj)
    rel = abs(fit["rate"] - result.lam) / result.lam
    _write_trajectory(os.path.join(out, "trajectory.csv"), traj)
    write_json(os.path.join(out, "evolve_report.json"), {
        "mode": "linear", "dt": dt, "n_steps": n_steps,
        "lambda": result.lam, "fitted_lambda": fit["rate"],
        "fit_stderr": fit["stderr"], "fit_ci95": list(fit["ci95"]),
        "rel_error": rel, "within_2pct": bool(rel <= 0.02),
        "gain": fit["gain"], "seed": cfg.seed,
    })
    print(f"evolve-linear: fitted {fit['rate']:.8g} vs lambda "
          f"{result.lam:.8g} (rel {rel:.3%})")
    return EXIT_OK if rel <= 0.02 else EXIT_NUMERICAL


def cmd_evolve_nonlinear(cfg: RunConfig, out: str) -> int:
    profile, mesh, space, forms = _build_problem(cfg)
    opts = _solver_opts(cfg)
    result = find_growth_rate(forms, opts)
    mode = reconstruct_mode(forms, result)
    evo = cfg.evolution
    delta = float(evo["deltas"][0])
    data = build_compatible_data(forms, mode, delta)
    st = PerturbationState(0.0, data.rho0, data.u0, data.theta0)
    st.diagnostics = state_diagnostics(forms, st)
    integ = NonlinearIntegrator(forms, cfl=float(evo["cfl"]))
    dt = float(evo["dt"])
    bound = integ.cfl_bound(st)
    if dt > bound:
        raise errors.CFLViolation(
            f"evolution.dt = {dt:.3e} exceeds the stability bound "
            f"{bound:.3e} for this state")
    t_final = evo["t_max"] if evo["t_max"] else 2.0 / result.lam
    n_steps = int(math.ceil(float(t_final) / dt))
    ckpt = int(evo["checkpoint_every"])
    traj = integ.run(st, dt, n_steps, record_every=int(evo["record_every"]),
                     keep_states=ckpt > 0)
    _write_checkpoints(out, mesh, traj, ckpt)
    _write_trajectory(os.path.join(out, "trajectory.csv"), traj)
    write_json(os.path.join(out, "evolve_report.json"), {
        "mode": "nonlinear", "dt": dt, "n_steps": n_steps, "delta": delta,
        "lambda": result.lam,
        "picard_iterations": data.iterations,
        "picard_contraction": data.contraction_factors,
        "compat_residuals": data.residuals,
        "final": {k: float(v[-1]) for k, v in traj.diagnostics.items()},
        "seed": cfg.seed,
    })
    print(f"evolve-nonlinear: {n_steps} steps to t = {traj.times[-1]:.4g}, "
          f"final |u3| = {traj.column('u3_l2')[-1]:.4g}")
    return EXIT_OK


def cmd_escape(cfg: RunConfig, out: str) -> int:
    profile, mesh, space, forms = _build_problem(cfg)
    opts = _solver_opts(cfg)
    result = find_growth_rate(forms, opts)
    mode = reconstruct_mode(forms, result)
    evo = cfg.evolution
    rep = escape_time_experiment(
        forms, mode, evo["deltas"],
        eps_target=evo["eps_target"], t_max=evo["t_max"],
        cfl=float(evo["cfl"]), jobs=cfg.jobs)
    write_csv(os.path.join(out, "escape_times.csv"),
              ["delta", "escape_time", "u3_at_escape", "uh_at_escape",
               "status"],
              [[d, t, u3, uh, s] for d, t, u3, uh, s in
               zip(rep.deltas, rep.escape_times, rep.u3_at_escape,
                   rep.uh_at_escape, rep.statuses)])
    write_json(os.path.join(out, "escape_report.json"), {
        "deltas": rep.deltas, "escape_times": rep.escape_times,
        "fit_slope": rep.fit_slope, "fit_intercept": rep.fit_intercept,
        "lambda": rep.lambda_ref, "inverse_lambda": 1.0 / rep.lambda_ref,
        "rel_error": rep.rel_error,
        "within_10pct": bool(rep.rel_error <= 0.10),
        "eps_target": rep.eps_target,
        "horizontal_threshold": rep.horizontal_threshold,
        "horizontal_exceeds_threshold": [
            bool(u >= rep.horizontal_threshold) for u in rep.uh_at_escape],
        "t_max": rep.t_max, "statuses": rep.statuses, "seed": cfg.seed,
    })
    print(f"escape: slope {rep.fit_slope:.6g} vs 1/lambda "
          f"{1.0 / rep.lambda_ref:.6g} (rel {rep.rel_error:.3%})")
    return EXIT_OK if rep.rel_error <= 0.10 else EXIT_NUMERICAL


def _write_trajectory(path, traj) -> None:
    names = sorted(traj.diagnostics)
    rows = []
    for i, t in enumerate(traj.times):
        rows.append([t] + [traj.diagnostics[k][i] for k in names])
    write_csv(path, ["t"] + names, rows)


def _write_checkpoints(out, mesh, traj, every: int) -> None:
    """Dump full fields for every ``every``-th recorded state."""
    if every <= 0 or not traj.states:
        return
    ckdir = os.path.join(out, "checkpoints")
    os.makedirs(ckdir, exist_ok=True)
    for j, st in enumerate(traj.states):
        if j % every == 0 or j == len(traj.states) - 1:
            dump_fields_csv(
                os.path.join(ckdir, f"state_{j:06d}.csv"), mesh,
                {"rho": st.rho, "theta": st.theta, "u": st.u})


def cmd_verify(cfg: RunConfig, out: str) -> int:
    """Run the invariant battery on the configured problem."""
    checks = []

    def check(name, ok, detail=""):
        checks.append({"name": name, "ok": bool(ok), "detail": detail})
        print(f"{'PASS' if ok else 'FAIL'} {name}" + (f": {detail}" if detail else ""))

    profile, mesh, space, forms = _build_problem(cfg)
    opts = _solver_opts(cfg)
    rng = np.random.default_rng(cfg.seed)

    xs = np.linspace(profile.x3_min, profile.x3_max, 1001)
    check("hydrostatic-balance",
          profile.hydrostatic_residual <= 1e-8 * profile.max_p,
          f"max|dp/dx3 + g rho| = {profile.hydrostatic_residual:.3e}")
    peq = np.max(np.abs(profile.p(xs) - cfg.physics.a * profile.rho(xs)
                        * profile.e(xs)))
    check("pressure-identity", peq <= 1e-12 * profile.max_p,
          f"max|p - a rho e| = {peq:.3e}")
    check("energy-positive", profile.inf_e > 0, f"min e = {profile.inf_e:.6g}")

    for name in ("M", "K1", "K2"):
        A = getattr(forms, name)
        asym = float(np.max(np.abs((A - A.T)).data)) if (A - A.T).nnz else 0.0
        check(f"symmetry-{name}", asym == 0.0, f"max|A - A^T| = {asym:.1e}")

    ok = True
    worst = 0.0
    for _ in range(20):
        v = space.apply_mask(rng.standard_normal(space.ndof))
        qf, oq = quadratic_forms(forms, v), energy_quadrature(forms, v)
        for k in ("e1", "e2", "j"):
            rel = abs(qf[k] - oq[k]) / max(1.0, abs(oq[k]))
            worst = max(worst, rel)
            ok = ok and rel <= 1e-12
    check("assembly-consistency", ok, f"worst rel diff {worst:.2e}")

    nfree = len(forms.free)
    if nfree <= 2500:
        r_d = alpha(forms, 0.5, SolverOpts(method="dense"))
        r_i = alpha(forms, 0.5, SolverOpts(method="shift_invert",
                                           seed=cfg.seed))
        rel = abs(r_d.value - r_i.value) / max(1.0, abs(r_d.value))
        check("eigensolver-oracle", rel <= 1e-8, f"rel diff {rel:.2e}")

    try:
        result = find_growth_rate(forms, opts)
    except errors.NotUnstable as exc:
        check("not-unstable", True, f"alpha(0) = {exc.alpha0:.6g} <= 0")
        write_json(os.path.join(out, "verify_report.json"), {"checks": checks})
        return EXIT_NOT_UNSTABLE
    mode = reconstruct_mode(forms, result)
    lower = lower_bound_test_function(forms)
    grid = np.linspace(0.0, 2.0 * result.frak_S[1], 12)
    curve = sample_alpha_curve(forms, grid, opts, lower=lower, jobs=cfg.jobs)
    al, sv = curve.alphas(), curve.svals()
    check("alpha-monotone", bool(np.all(np.diff(al) <= 1e-8)),
          f"max increase {float(np.max(np.diff(al))):.2e}")
    check("alpha-sandwich",
          bool(np.all(al >= lower.c1 - lower.c2 * sv - 1e-8)
               and np.all(al <= forms.upper_bound + 1e-8)),
          f"c1 = {lower.c1:.4g}, c2 = {lower.c2:.4g}, "
          f"UB = {forms.upper_bound:.4g}")
    check("alpha-lipschitz",
          curve.lipschitz_estimate <= curve.lipschitz_bound + 1e-8,
          f"empirical {curve.lipschitz_estimate:.4g} <= "
          f"bound {curve.lipschitz_bound:.4g}")
    check("fixed-point", result.residual <= float(cfg.solver["tol"]),
          f"|alpha(lam) - lam^2| = {result.residual:.2e}")
    check("fixed-point-uniqueness",
          result.uniqueness["h_minus"] > 0 > result.uniqueness["h_plus"],
          f"h at lam -/+ 10 tol: {result.uniqueness['h_minus']:.2e}, "
          f"{result.uniqueness['h_plus']:.2e}")
    check("mode-mass-line", mode.residuals["mass"] <= 1e-12,
          f"projection residual {mode.residuals['mass']:.2e}")
    check("mode-boundary", mode.residuals["boundary"] == 0.0)
    check("mode-nontrivial", all(mode.nontrivial.values()),
          str(mode.nontrivial))

    A = forms.pencil(result.lam)
    Mff = forms.restricted("M")
    x = result.eigvec[forms.free]
    amax = float(x @ (A @ x))
    el = float(np.linalg.norm(A @ x - amax * (Mff @ x))
               / np.linalg.norm(Mff @ x))
    check("mode-euler-lagrange", el <= 1e-8, f"residual {el:.2e}")
    worst = -np.inf
    for _ in range(100):
        w = rng.standard_normal(nfree)
        w /= math.sqrt(w @ (Mff @ w))
        worst = max(worst, float(w @ (A @ w)))
    check("mode-is-maximizer", worst <= amax + 1e-10,
          f"best random Rayleigh {worst:.6g} <= alpha {amax:.6g}")

    inc = incompressible_growth_rate(forms, opts)
    check("compressibility-not-stabilizing", result.lam >= inc.lam - 1e-6,
          f"lambda = {result.lam:.6g} >= lambda_inc = {inc.lam:.6g} - 1e-6")

    write_json(os.path.join(out, "verify_report.json"), {"checks": checks})
    n_bad = sum(1 for c in checks if not c["ok"])
    print(f"verify: {len(checks) - n_bad}/{len(checks)} checks passed")
    return EXIT_OK if n_bad == 0 else EXIT_NUMERICAL


_COMMANDS = {
    "steady": cmd_steady,
    "growth": cmd_growth,
    "evolve-linear": cmd_evolve_linear,
    "evolve-nonlinear": cmd_evolve_nonlinear,
    "escape": cmd_escape,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="rtgrowth",
        description="Buoyancy-driven growth rates for compressible viscous "
                    "flow: steady states, variational rates, mode evolution.")
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, help="JSON run config")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--jobs", type=int, default=None,
                        help="parallel workers for sweeps (0 = all cores)")
    parser.add_argument("--seed", type=int, default=None,
                        help="seed for randomized checks")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
    except errors.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.jobs is not None:
        cfg.jobs = args.jobs if args.jobs > 0 else (os.cpu_count() or 1)
    if args.seed is not None:
        cfg.seed = args.seed
    os.makedirs(args.out, exist_ok=True)

    try:
        return _COMMANDS[args.command](cfg, args.out)
    except errors.NotUnstable as exc:
        print(f"not-unstable: {exc}", file=sys.stderr)
        write_json(os.path.join(args.out, "growth_rate.json"),
                   {"status": "not_unstable", "alpha0": exc.alpha0})
        return EXIT_NOT_UNSTABLE
    except errors.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except errors.RTGrowthError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
