"""Run a configured problem and write its artifacts.

Every run writes the problem CSVs, ``summary.csv`` with one row per
headline diagnostic and ``manifest.txt`` listing inputs, versions and all
emitted files.  Figures are PNGs rendered off-screen next to the CSVs.
"""
from __future__ import annotations

import csv
import math
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig
from .grid import BACKWARD, FlowField, build_tri_grid, write_field_csv


@dataclass(frozen=True)
class Check:
    name: str
    value: float
    threshold: float | None = None
    relation: str = "<="        # "<=", ">=", "<", ">" or "info"
    passed: bool = True


def check(name, value, threshold=None, relation="<="):
    value = float(value)
    if threshold is None or relation == "info":
        return Check(name, value, None, "info", True)
    ops = {"<=": value <= threshold, ">=": value >= threshold, "<": value < threshold, ">": value > threshold}
    return Check(name, value, float(threshold), relation, bool(ops[relation]) and not math.isnan(value))


def flag(name, ok):
    return Check(name, 1.0 if ok else 0.0, 1.0, "==", bool(ok))


@dataclass
class RunResult:
    problem: str
    checks: list = field(default_factory=list)
    files: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def first_failure(self):
        return next((c for c in self.checks if not c.passed), None)


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


class Emitter:
    def __init__(self, out: Path, figures: bool = True):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.figures = figures
        self.files = []

    def path(self, name):
        self.files.append(name)
        return self.out / name

    def csv(self, name, header, rows):
        with open(self.path(name), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])

    def figure(self, name, draw):
        if not self.figures:
            return
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
        try:
            draw(fig, ax)
            fig.tight_layout()
            fig.savefig(self.path(name), metadata={"Software": None})
        finally:
            plt.close(fig)


def _grid(cfg: RunConfig, orientation=None):
    kw = {} if orientation is None else {"orientation": orientation}
    return build_tri_grid(cfg["grid.T"], cfg["grid.N"], cfg.box, cfg["grid.M"], cfg["grid.d"], **kw)


def _inner(y):
    lo, hi = y[0], y[-1]
    c, w = 0.5 * (lo + hi), 0.25 * (hi - lo)
    return np.abs(y - c) <= w + 1e-12


def _exact_field(grid, m, exact):
    vals = np.zeros_like(FlowField.zeros(grid, m).values)
    y = grid.axis(0)
    for i, k in grid.pairs():
        vals[i, k] = exact(grid.times[i], grid.times[k], y)
    return vals


def _diag_heatmap(ax, times, y, Z, label):
    im = ax.pcolormesh(y, times, Z, shading="auto")
    ax.set_xlabel("y")
    ax.set_ylabel("s")
    ax.figure.colorbar(im, ax=ax, label=label)


# ------------------------------------------------------------- runners

def run_linear(cfg: RunConfig, em: Emitter):
    from .linear import march_linear
    from .problems import manufactured_linear

    mf = manufactured_linear(cfg.model["B"])
    grid = _grid(cfg)
    rep = march_linear(mf.spec, grid, theta=cfg["solver.theta"], diagonal=cfg["solver.diagonal"], exact=mf.exact)
    u = rep.solution
    err = np.abs(u.values - _exact_field(grid, 1, mf.exact))
    inner = _inner(grid.axis(0))
    err_s = [float(err[: k + 1, k][:, inner].max()) for k in range(grid.N + 1)]
    write_field_csv(u, em.path("solution.csv"))
    em.csv("error_by_s.csv", ["s", "max_interior_error"], zip(grid.times, err_s))
    em.figure("diagonal.png", lambda f, ax: _diag_heatmap(ax, grid.times, grid.axis(0),
                                                           u.diagonal_values()[..., 0], "u(s,s,y)"))
    return [check("max_interior_error", max(err_s), 5e-3),
            check("slice_residual_max", rep.residual_max, 1e-8)]


def run_nonlinear(cfg: RunConfig, em: Emitter):
    from .nonlinear import SliceSolverOptions, causal_march_nonlinear, continue_solution, picard_fixed_point
    from .problems import manufactured_nonlinear

    mo = cfg.model
    mf = manufactured_nonlinear(mo["eps"], mo["kappa"], mo["nu"])
    grid = _grid(cfg)
    mode = cfg["solver.mode"]
    opts = SliceSolverOptions(tol=min(1e-10, cfg["solver.tol"]))
    checks = []
    if mode == "causal":
        u = causal_march_nonlinear(mf.spec, mf.g, grid, exact=mf.exact, opts=opts)
    elif mode in ("picard", "lambda"):
        rep = picard_fixed_point(mf.spec, mf.g, grid, tol=cfg["solver.tol"], max_iter=cfg["solver.max_iter"],
                                 damping=cfg["solver.damping"], mode="direct" if mode == "picard" else "lambda",
                                 exact=mf.exact, raise_on_failure=False, opts=opts)
        u = rep.solution
        em.csv("picard.csv", ["iteration", "update_norm", "contraction_factor"], rep.rows())
        cf = [c for c in rep.contraction_factors if np.isfinite(c)]
        checks += [flag("picard_converged", rep.converged),
                   check("max_contraction_factor", max(cf) if cf else float("nan"), 1.0, "<")]
        em.figure("picard.png", lambda f, ax: (ax.semilogy(range(1, len(rep.update_norms) + 1), rep.update_norms, "o-"),
                                                ax.set_xlabel("iteration"), ax.set_ylabel("update norm")))
    else:
        stage = cfg["solver.stage_length"] or grid.T / 2
        u, log = continue_solution(mf.spec, mf.g, grid, stage, exact=mf.exact, raise_on_blowup=False, opts=opts)
        em.csv("stages.csv", ["s_start", "s_end", "norm", "status"], log.stages)
        checks.append(flag("no_blow_up", not log.blow_up))
    err = np.abs(u.values - _exact_field(grid, 1, mf.exact))
    write_field_csv(u, em.path("solution.csv"))
    em.figure("diagonal.png", lambda f, ax: _diag_heatmap(ax, grid.times, grid.axis(0),
                                                           u.diagonal_values()[..., 0], "u(s,s,y)"))
    checks.append(check("max_error", float(err.max()), 0.05))
    return checks


def _strategy_figure(out, grid, label="alpha1"):
    def draw(fig, ax):
        _diag_heatmap(ax, grid.times, grid.axis(0), out.strategy[..., 0], label)
    return draw


def run_lq(cfg: RunConfig, em: Emitter):
    from .games import lq_scalar_game, solve_equilibrium

    mo, T = cfg.model, cfg["grid.T"]
    tic = mo["tic"]
    C2 = lambda t, s, Y: mo["C2"] * (1 + tic * (s - t))
    g = lambda a, t, Y: 0.5 * Y[:, 0] ** 2 * (1 + tic * (T - t))
    game = lq_scalar_game(mo["A1"], mo["A2"], mo["B1"], mo["B2"], mo["C1"], C2, g)
    grid = _grid(cfg, BACKWARD)
    out = solve_equilibrium(game, grid)
    out.write_csvs(em.path("strategy.csv"), em.path("value.csv"))
    em.figure("strategy.png", _strategy_figure(out, grid))
    inner = _inner(grid.axis(0))
    return [flag("solution_finite", out.u.is_finite()),
            check("hjb_residual_max", out.hjb_residual_max),
            check("max_abs_strategy_interior", float(np.abs(out.strategy[:, inner]).max()))]


def _exp_spec(cfg):
    from .finance import ExpUtilitySpec, const_matrix, const_vector

    mo = cfg.model
    return ExpUtilitySpec(len(mo["mu"]), mo["mu"], mo["sigma"], mo["r"], mo["eta"], cfg["grid.T"],
                          const_matrix(mo["R"]), const_vector(mo["Tvec"]))


def run_exp(cfg: RunConfig, em: Emitter):
    from .finance import exp_node_solution, exp_phi2_table
    from .games import exp_utility_game, solve_equilibrium

    spec = _exp_spec(cfg)
    grid = _grid(cfg, BACKWARD)
    times, y = grid.times, grid.axis(0)
    phi2 = exp_phi2_table(spec, times)
    out = solve_equilibrium(exp_utility_game(spec), grid, exact=exp_node_solution(spec, times))
    out.write_csvs(em.path("strategy.csv"), em.path("value.csv"))
    m = spec.m
    em.csv("phi_table.csv", ["t", "s"] + [f"phi1_{a + 1}" for a in range(m)] + [f"phi2_{a + 1}" for a in range(m)],
           ([times[i], times[k]] + [0.0] * m + list(phi2[i, k]) for i, k in grid.with_orientation("forward").pairs()))
    inner = _inner(y)
    Vex = -np.exp(-spec.eta * y)[None, :, None] * phi2[np.arange(len(times)), np.arange(len(times))][:, None, :]
    rel = np.abs(out.value - Vex)[:, inner] / np.abs(Vex)[:, inner]
    ab = (spec.mu - spec.r) / (spec.eta * spec.sigma**2) * np.exp(-spec.r * (spec.T - times))[:, None]
    al = out.strategy[:, inner]
    yvar = al.max(axis=1) - al.min(axis=1)
    aerr = np.abs(al - ab[:, None, :])
    em.csv("oracle_error.csv", ["s", "value_rel_error", "strategy_error", "strategy_y_variation"],
           zip(times, rel.max(axis=(1, 2)), aerr.max(axis=(1, 2)), yvar.max(axis=1)))

    def draw(fig, ax):
        ax.plot(times, ab[:, 0], "k-", label="closed form")
        ax.plot(times, out.strategy[:, len(y) // 2, 0], "o", ms=3, label="PDE")
        ax.set_xlabel("s")
        ax.set_ylabel("alpha1")
        ax.legend()
    em.figure("strategy.png", draw)
    return [check("value_rel_error", rel.max(), 1e-2),
            check("strategy_y_variation", yvar.max(), 1e-10),
            check("strategy_error", aerr.max(), 1e-6),
            check("hjb_residual_max", out.hjb_residual_max)]


def _power_spec(cfg):
    from .finance import PowerUtilitySpec, const_vector

    mo = cfg.model
    v0, w0, delta = np.asarray(mo["v"], float), np.asarray(mo["w"], float), mo["delta"]
    if delta:
        v = lambda t, s: v0 * np.exp(-delta * (s - t))
    else:
        v = lambda t, s: v0
    return PowerUtilitySpec(len(mo["mu"]), mo["mu"], mo["sigma"], mo["r"], cfg["grid.T"], mo["beta"],
                            v, lambda t, s: w0, const_vector(mo["g"]))


def run_power(cfg: RunConfig, em: Emitter):
    from .finance import check_conditions_g0_gamma, merton_ode_oracle, power_diagonal_fixed_point, power_equilibrium

    spec = _power_spec(cfg)
    n = cfg.model["n_nodes"]
    psi = power_diagonal_fixed_point(spec, n_nodes=n, tol=cfg["solver.tol"], max_iter=cfg["solver.max_iter"])
    m = spec.m
    em.csv("psibar.csv", ["s"] + [f"psibar_{a + 1}" for a in range(m)],
           (np.concatenate([[s], v]) for s, v in zip(psi.nodes, psi.values)))
    em.csv("picard.csv", ["sweep", "update_norm"], enumerate(psi.log, start=1))
    checks = [flag("picard_converged", psi.converged)]
    tail = psi.log[1:]
    checks.append(flag("update_norms_monotone_after_sweep_2", all(b < a for a, b in zip(tail, tail[1:]))))
    cond = None
    try:
        cond = check_conditions_g0_gamma(spec, n=n)
    except Exception as exc:                      # non-diagonal w: the conditions do not apply
        checks.append(check(f"conditions_not_applicable_{type(exc).__name__}", 0.0))
    if cond is not None and cond.passed:
        low = cond.lower_bound(psi.nodes)
        margin = float((psi.values - low[:, None]).min())
        checks.append(check("lower_bound_margin", margin, 0.0, ">="))
    if m == 1 and cfg.model["delta"] == 0 and not np.any(cfg.model["w"][0]):
        ref = merton_ode_oracle(spec, psi.nodes)
        checks.append(check("merton_rel_error", float(np.max(np.abs(psi.values[:, 0] - ref) / np.abs(ref))), 1e-6))
    y = np.linspace(cfg["grid.y_min"], cfg["grid.y_max"], cfg["grid.M"])
    rows = []
    for s in psi.nodes[:: max(1, (n - 1) // 20)]:
        for yy in y:
            al, c, V = power_equilibrium(spec, psi, s, yy)
            rows.append([s, yy, *al, *c, *V])
    em.csv("equilibrium.csv", ["s", "y"] + [f"alpha{a + 1}" for a in range(m)] + [f"c{a + 1}" for a in range(m)]
           + [f"V{a + 1}" for a in range(m)], rows)

    def draw(fig, ax):
        for a in range(m):
            ax.plot(psi.nodes, psi.values[:, a], label=f"psibar {a + 1}")
        if cond is not None and cond.passed:
            ax.plot(psi.nodes, cond.lower_bound(psi.nodes), "k--", label="lower bound")
        ax.set_xlabel("s")
        ax.legend()
    em.figure("psibar.png", draw)
    return checks


def run_fk(cfg: RunConfig, em: Emitter):
    from . import fbsde as fb
    from .nonlinear import NonlinearitySpec

    mo, T = cfg.model, cfg["grid.T"]
    grid = _grid(cfg, BACKWARD)
    heat = FlowField.from_function(grid, 1, lambda t, s, y: (np.exp(-(T - s) / 2) * np.sin(y[..., 0]))[..., None])
    F = NonlinearitySpec(1, lambda t, s, y, loc, dg: 0.5 * loc.hess[..., 0, 0], name="heat")
    mc = fb.McConfig(cfg["mc.n_paths"], cfg["mc.n_steps"], cfg["mc.seed"])
    unit, zero = (lambda s, y: 1.0), (lambda s, y: 0.0)
    t = mo["t"]
    pos = fb.bsde_residual(fb.FkBundle(heat, unit, zero, F, y0=mo["y0"]), mc, t)
    gT = lambda tt, y: np.sin(y)[:, None]
    pert = FlowField(grid, 1, heat.values + mo["perturb"])
    neg = fb.bsde_residual(fb.FkBundle(pert, unit, zero, F, g=gT, y0=mo["y0"]), mc, t)
    # second differences of y^2 lose about eps |y|^2 / h^2, so the exact
    # quadratic identity is checked on its own coarse grid
    qgrid = build_tri_grid(T, cfg["grid.N"], cfg.box, mo["quad_M"], orientation=BACKWARD)
    quad = FlowField.from_function(qgrid, 1, lambda tt, s, y: (y[..., 0] ** 2)[..., None])
    zq = fb.z_dynamics_residual(fb.FkBundle(quad, unit, zero, F, y0=mo["y0"]), mc, t)
    rows = []
    for name, r in (("positive", pos), ("negative", neg), ("z-quadratic", zq)):
        rows.append([name, r.t, float(np.ravel(r.mean)[0]), float(np.ravel(r.std_error)[0]), r.n, r.censored, r.max_abs])
    em.csv("residuals.csv", ["case", "t", "mean", "std_error", "n", "censored", "max_abs"], rows)
    em.csv("breakdown.csv", ["s", "mean", "std_error"], ((b[0], float(np.ravel(b[1])[0]), float(np.ravel(b[2])[0]))
                                                         for b in pos.breakdown))
    def draw(fig, ax):
        s_b = [b[0] for b in pos.breakdown]
        ax.errorbar(s_b, [b[1] for b in pos.breakdown], yerr=[3 * b[2] for b in pos.breakdown], fmt=".", ms=2)
        ax.axhline(0.0, color="k", lw=0.8)
        ax.set_xlabel("s")
        ax.set_ylabel("step increment mean (3 SE bars)")
    em.figure("breakdown.png", draw)
    pm, ps = abs(float(np.ravel(pos.mean)[0])), float(np.ravel(pos.std_error)[0])
    nm, ns = abs(float(np.ravel(neg.mean)[0])), float(np.ravel(neg.std_error)[0])
    return [check("positive_control_z", pm / ps, 3.0, "<"),
            check("negative_control_z", nm / ns, 3.0, ">"),
            check("z_quadratic_max_abs", zq.max_abs, 1e-12),
            check("censored_fraction", pos.censored / pos.n, 0.2)]


def run_norms(cfg: RunConfig, em: Emitter):
    from .holder import WeightSpec, equivalence_report
    from .problems import growth_test_functions

    mo = cfg.model
    spec = WeightSpec(S=[[mo["S"]]], rho0=mo["rho0"], alpha=mo["alpha"])
    s = np.linspace(0.0, cfg["grid.T"], cfg["grid.N"] + 1)
    y = np.linspace(cfg["grid.y_min"], cfg["grid.y_max"], cfg["grid.M"])
    rows, bad = [], 0
    for name, fn in growth_test_functions().items():
        phi = fn(s[:, None], y[None, :])
        for order in ("alpha", "2+alpha"):
            rep = equivalence_report(phi, s, [y], spec, order)
            ok = all(r[4] for r in rep["checks"])
            bad += not ok
            n = rep["norms"]
            rows.append([name, order, n[1], n[2], n[3], rep["C"], rep["sup_top"], int(ok)])
    em.csv("norms.csv", ["function", "order", "form1", "form2", "form3", "C", "sup_top", "inequalities_hold"], rows)

    def draw(fig, ax):
        names = [r[0] for r in rows if r[1] == "2+alpha"]
        x = np.arange(len(names))
        for j, lab in enumerate(("form1", "form2", "form3")):
            ax.bar(x + 0.25 * (j - 1), [r[2 + j] for r in rows if r[1] == "2+alpha"], 0.25, label=lab)
        ax.set_yscale("log")
        ax.set_xticks(x, names, rotation=20, fontsize=7)
        ax.legend()
    em.figure("norms.png", draw)
    return [check("failed_inequality_sets", bad, 0)]


RUNNERS = {
    "linear-manufactured": run_linear,
    "nonlinear-manufactured": run_nonlinear,
    "lq-scalar": run_lq,
    "exp-utility": run_exp,
    "power-utility": run_power,
    "fk-verify": run_fk,
    "norms": run_norms,
}


# ------------------------------------------------------------- hypothesis checks

def run_checks(cfg: RunConfig, em: Emitter):
    """Structural hypotheses of the configured problem (no solve)."""
    from .linear import check_ellipticity
    from .nonlinear import check_appropriate, reflect_datum, reflect_nonlinearity

    p = cfg.problem
    out = []
    if p == "linear-manufactured":
        from .problems import manufactured_linear
        rep = check_ellipticity(manufactured_linear(cfg.model["B"]).spec, _grid(cfg), seed=cfg["mc.seed"])
        out.append(check("ellipticity_margin", rep.margin, 0.0, ">"))
    elif p == "nonlinear-manufactured":
        from .problems import manufactured_nonlinear
        mf = manufactured_nonlinear(cfg.model["eps"], cfg.model["kappa"], cfg.model["nu"])
        rep = check_appropriate(mf.spec, mf.g, _grid(cfg), lam=0.0, seed=cfg["mc.seed"])
        out += [check("appropriate_margin_local", rep.margin_local, 0.0, ">"),
                check("appropriate_margin_total", rep.margin_total, 0.0, ">")]
    elif p in ("lq-scalar", "exp-utility"):
        from .games import assemble_equilibrium_H
        from .finance import exp_hjb_nonlinearity, exp_terminal
        if p == "exp-utility":
            spec = _exp_spec(cfg)
            H, gb = exp_hjb_nonlinearity(spec), exp_terminal(spec)
        else:
            mo, T = cfg.model, cfg["grid.T"]
            from .games import lq_scalar_game
            game = lq_scalar_game(mo["A1"], mo["A2"], mo["B1"], mo["B2"], mo["C1"],
                                  lambda t, s, Y: mo["C2"] * (1 + mo["tic"] * (s - t)),
                                  lambda a, t, Y: 0.5 * Y[:, 0] ** 2 * (1 + mo["tic"] * (T - t)))
            H, gb = assemble_equilibrium_H(game), lambda t, y: game.terminal(t, y)
        T = cfg["grid.T"]
        rep = check_appropriate(reflect_nonlinearity(H, T), reflect_datum(gb, T), _grid(cfg), lam=0.0,
                                max_pairs=200, seed=cfg["mc.seed"])
        out += [check("appropriate_margin_local", rep.margin_local, 0.0, ">"),
                check("appropriate_margin_total", rep.margin_total, 0.0, ">")]
    elif p == "power-utility":
        from .finance import check_conditions_g0_gamma
        rep = check_conditions_g0_gamma(_power_spec(cfg), n=cfg.model["n_nodes"])
        out += [flag("conditions_g0_gamma", rep.passed), check("g0", rep.g0, 0.0, ">"),
                check("gamma", rep.gamma)]
    else:
        from .linear import LinearSystemSpec, coeffs, zero_datum, zero_source
        heat = LinearSystemSpec(1, coeffs(0, 0, 0.5), coeffs(0, 0, 0), zero_source(1), zero_datum(1))
        rep = check_ellipticity(heat, _grid(cfg), seed=cfg["mc.seed"])
        out.append(check("ellipticity_margin", rep.margin, 0.0, ">"))
    em.csv("checks.csv", ["name", "value", "threshold", "relation", "passed"],
           ([c.name, c.value, "" if c.threshold is None else c.threshold, c.relation, int(c.passed)] for c in out))
    return out


# ------------------------------------------------------------- orchestration

def _versions():
    import matplotlib
    import scipy
    return [("nonlocal_hjb", __version__), ("python", platform.python_version()),
            ("numpy", np.__version__), ("scipy", scipy.__version__), ("matplotlib", matplotlib.__version__)]


def write_summary(em: Emitter, checks):
    em.csv("summary.csv", ["name", "value", "threshold", "relation", "status"],
           ([c.name, c.value, "" if c.threshold is None else c.threshold, c.relation,
             "info" if c.relation == "info" else ("pass" if c.passed else "fail")] for c in checks))


def write_manifest(em: Emitter, cfg: RunConfig, command: str, config_path=None):
    path = em.out / "manifest.txt"
    files = sorted(set(em.files) | {"manifest.txt"})
    lines = [f"command: {command}", f"problem: {cfg.problem}",
             f"config_file: {config_path if config_path else '(none)'}", f"seed: {cfg['mc.seed']}", "", "[inputs]"]
    for k, v in cfg.items():
        lines.append(f"{k} = {v!r}  # {cfg.sources.get(k, 'default')}")
    lines += ["", "[versions]"] + [f"{k} = {v}" for k, v in _versions()]
    lines += ["", "[files]"] + files
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    if "manifest.txt" not in em.files:
        em.files.append("manifest.txt")


def execute(cfg: RunConfig, command: str = "run", config_path=None, checks_only: bool = False) -> RunResult:
    em = Emitter(cfg.output_dir, figures=cfg["run.figures"])
    checks = run_checks(cfg, em) if checks_only else RUNNERS[cfg.problem](cfg, em)
    write_summary(em, checks)
    write_manifest(em, cfg, command, config_path)
    return RunResult(cfg.problem, list(checks), list(em.files))
