"""Scenario-level checks behind the command-line subcommands.

Each function takes a :class:`ScenarioConfig` and returns a :class:`Outcome`
holding named pass/fail checks, CSV tables and optional JSON attachments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import ScenarioConfig
from .evolution import (
    MildPath,
    euler_mild_solve,
    march,
    mild_operator,
    path_distance,
    picard_iterate,
)
from .integration import cylindrify
from .measures import SignedMeasure
from .noise import (
    BrownianDriver,
    dirac_convolution_identity_gap,
    ito_isometry_gap,
    sample_increments,
)
from .report import Check, Table
from .termstructure import (
    HJMModel,
    _drift_gap,
    bank_account_closed,
    bank_account_discrete,
    discounted_prices,
    martingale_test,
    simulate,
    state_functionals,
)


@dataclass
class Outcome:
    checks: list[Check]
    tables: list[Table] = field(default_factory=list)
    attachments: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


def make_model(cfg: ScenarioConfig) -> HJMModel:
    model = HJMModel.from_spec(cfg.coefficients, cfg.x0, cfg.x0_energy, cfg.horizon)
    if cfg.drift_offset is not None:
        model.coeffs = model.coeffs.with_drift_offset(cfg.drift_offset)
    return model


def make_driver(cfg: ScenarioConfig, seed: int | None = None, n_paths: int | None = None,
                n_steps: int | None = None) -> BrownianDriver:
    return sample_increments(
        cfg.d,
        n_steps or cfg.time.n_steps,
        n_paths or cfg.n_paths,
        cfg.seed if seed is None else seed,
        dt=cfg.time.dt,
        workers=cfg.workers,
    )


def _seeds(cfg: ScenarioConfig, section) -> list[int]:
    n = section.integer(("seeds",), 1, minimum=1)
    return [cfg.seed + i for i in range(n)]


# ---------------------------------------------------------------------------


def run_simulate(cfg: ScenarioConfig) -> Outcome:
    """Per-functional time series and the terminal measures of the first paths."""
    sec = cfg.section("simulate")
    k_terminal = sec.integer(("terminal_paths",), 5, minimum=0)
    model = make_model(cfg)
    driver = make_driver(cfg)
    functionals = cfg.coefficients.functionals
    rows = []

    def stats(j, fid, values):
        v = np.broadcast_to(np.asarray(values, dtype=float), (driver.n_paths,))
        q05, q95 = np.quantile(v, [0.05, 0.95])
        sd = float(v.std(ddof=1)) if v.size > 1 else 0.0
        rows.append((j, j * driver.dt, fid, float(v.mean()), sd, float(q05), float(q95)))

    def observe(j, x, xe):
        z = state_functionals(x, functionals)
        for i in range(len(functionals)):
            stats(j, f"X(e{i + 1})", z[..., i])
        for T in cfg.maturities:
            stats(j, f"X(0,{T:g}]", x.interval(0.0, T))
        for t1, t2 in cfg.buckets:
            stats(j, f"Xe({t1:g},{t2:g}]", xe.interval(t1, t2))

    rates, energy = simulate(model, driver, keep=(), observe=observe)
    n = driver.grid.n_steps
    k = min(k_terminal, driver.n_paths)
    terminal = {
        "step": n,
        "t": n * driver.dt,
        "rates": [rates[n].measure(p).to_dict() for p in range(k)],
        "energy": [energy[n].measure(p).to_dict() for p in range(k)],
    }
    values = np.array([r[3:] for r in rows])
    finite = bool(np.isfinite(values).all())
    check = Check(
        "simulate",
        finite,
        {
            "n_paths": driver.n_paths,
            "n_steps": n,
            "d": driver.d,
            "n_series": len(rows) // (n + 1),
            "max_abs_mean": float(np.abs(values[:, 0]).max()) if rows else 0.0,
        },
    )
    table = Table("series", ("step", "t", "functional_id", "mean", "sd", "q05", "q95"), rows)
    return Outcome([check], [table], {"terminal_measures": terminal})


def run_check_drift(cfg: ScenarioConfig) -> Outcome:
    """Drift-condition gap at every step, streamed over all paths."""
    sec = cfg.section("drift")
    tol = sec.number(("tol",), 1e-10, positive=True)
    model = make_model(cfg)
    driver = make_driver(cfg)
    path = MildPath(driver.grid, cfg.grid, driver.n_paths, keep=())
    rows = []
    for step in march(model.x0, model.coeffs, driver, path):
        rows.append((step.j, step.j * driver.dt, _drift_gap(step.drift, step.vol)))
    gap = max(r[2] for r in rows)
    check = Check(
        "drift_condition",
        gap < tol,
        {"max_gap": gap, "tol": tol, "n_paths": driver.n_paths, "n_steps": len(rows), "d": driver.d},
    )
    return Outcome([check], [Table("drift_gap", ("step", "t", "gap"), rows)])


def _control_model(cfg: ScenarioConfig, model: HJMModel, eps: float, location: float) -> HJMModel:
    ctl = HJMModel(**model.__dict__)
    ctl.coeffs = model.coeffs.with_drift_offset(SignedMeasure.atom(cfg.grid, location, eps))
    return ctl


def _martingale_seed(cfg, model, driver, n_sigma):
    steps = [0] + cfg.checkpoint_steps
    prices = discounted_prices(model, driver, cfg.maturities, steps, cfg.buckets)
    rows_idx = [int(np.flatnonzero(prices.steps == s)[0]) for s in cfg.checkpoint_steps]
    results = []
    for m, T in enumerate(cfg.maturities):
        for r, chk in zip(rows_idx, martingale_test(prices.z[:, m], rows_idx, n_sigma)):
            results.append(("bond", T, None, None, prices.steps[r] * driver.dt,
                            float(prices.z[r, m].mean()), float(prices.z[0, m, 0]), chk))
    for b, (t1, t2) in enumerate(cfg.buckets):
        for r, chk in zip(rows_idx, martingale_test(prices.energy[:, b], rows_idx, n_sigma)):
            results.append(("energy_future", None, t1, t2, prices.steps[r] * driver.dt,
                            float(prices.energy[r, b].mean()), float(prices.energy[0, b, 0]), chk))
    return results


def run_martingale_test(cfg: ScenarioConfig) -> Outcome:
    """Mean of discounted bonds and of futures prices against their time-zero values."""
    sec = cfg.section("martingale")
    n_sigma = sec.number(("n_sigma",), 3.0, positive=True)
    min_pass = sec.number(("min_pass_fraction",), 0.95, nonneg=True)
    negative = bool(sec.get(("negative_control",), False))
    min_fail = sec.number(("min_fail_fraction",), 0.95, nonneg=True)
    location = sec.number(("control_location",), cfg.grid.cell_width, positive=True)
    factor = sec.number(("control_factor",), 10.0, positive=True)
    seeds = _seeds(cfg, sec)
    model = make_model(cfg)
    header = ("seed", "control", "kind", "maturity", "t1", "t2", "checkpoint",
              "mean", "initial", "mean_gap", "stderr", "pass")
    rows = []
    passed = {"bond": [], "energy_future": []}
    control_fail, eps_used = [], []
    for seed in seeds:
        driver = make_driver(cfg, seed)
        res = _martingale_seed(cfg, model, driver, n_sigma)
        for kind, T, t1, t2, t, mean, z0, chk in res:
            rows.append((seed, False, kind, T, t1, t2, t, mean, z0, chk.mean_gap, chk.stderr, chk.passed))
        for kind in passed:
            passed[kind].append(all(r[-1].passed for r in res if r[0] == kind))
        if negative:
            # inject a drift atom of size factor * stderr / T*, same noise
            stderr = max(r[-1].stderr for r in res if r[0] == "bond")
            eps = factor * stderr / cfg.horizon
            eps_used.append(eps)
            ctl = _martingale_seed(cfg, _control_model(cfg, model, eps, location), driver, n_sigma)
            for kind, T, t1, t2, t, mean, z0, chk in ctl:
                if kind == "bond":
                    rows.append((seed, True, kind, T, t1, t2, t, mean, z0, chk.mean_gap, chk.stderr, chk.passed))
            control_fail.append(not all(r[-1].passed for r in ctl if r[0] == "bond"))
    needed = 1.0 if len(seeds) == 1 else min_pass
    checks = []
    for kind, name, what in (("bond", "bond_martingale", cfg.maturities),
                             ("energy_future", "futures_martingale", [list(b) for b in cfg.buckets])):
        if not what:
            continue
        frac = float(np.mean(passed[kind]))
        ratios = [r[9] / r[10] if r[10] > 0 else (0.0 if r[9] == 0 else math.inf)
                  for r in rows if not r[1] and r[2] == kind]
        checks.append(Check(name, frac >= needed, {
            "n_seeds": len(seeds),
            "seeds_passed": int(np.sum(passed[kind])),
            "pass_fraction": frac,
            "required_fraction": needed,
            "n_sigma": n_sigma,
            "n_paths": cfg.n_paths,
            "maturities" if kind == "bond" else "buckets": what,
            "checkpoints": cfg.checkpoints,
            "max_gap_over_stderr": max(ratios),
        }))
    if negative:
        ffrac = float(np.mean(control_fail))
        checks.append(
            Check(
                "martingale_negative_control",
                ffrac >= min_fail,
                {
                    "n_seeds": len(seeds),
                    "seeds_failed": int(np.sum(control_fail)),
                    "fail_fraction": ffrac,
                    "required_fraction": min_fail,
                    "atom_location": location,
                    "epsilon_min": min(eps_used),
                    "epsilon_max": max(eps_used),
                },
            )
        )
    return Outcome(checks, [Table("martingale", header, rows)])


def run_bank_account(cfg: ScenarioConfig) -> Outcome:
    """Roll-over account ``B^n`` against the closed form for each subdivision ``n``."""
    sec = cfg.section("bank")
    j = sec.integer(("step",), cfg.time.n_steps, minimum=1)
    if j > cfg.time.n_steps:
        raise sec.error(("step",), f"step {j} beyond the horizon ({cfg.time.n_steps} steps)")
    default_n = [n for n in (2 ** k for k in range(1, 31)) if n <= j and j % n == 0]
    subdivisions = [int(n) for n in sec.numbers(("subdivisions",), default_n)]
    for i, n in enumerate(subdivisions):
        if n < 1 or j % n:
            raise sec.error(("subdivisions", i), f"{n} does not divide step {j}")
    tol_exact = sec.number(("tol_exact",), 1e-12, positive=True)
    tol_finest = sec.number(("tol_finest",), 1e-10, positive=True)
    slack = sec.number(("slack",), 1e-12, nonneg=True)

    model = make_model(cfg)
    driver = make_driver(cfg)
    stride = math.gcd(*[j // n for n in subdivisions])
    keep = range(0, j + 1, stride)
    path = euler_mild_solve(model.x0, model.coeffs, driver, grid=cfg.grid, keep=keep)
    log_b = np.log(bank_account_closed(model.x0, model.coeffs, driver, j, grid=cfg.grid))
    rows, errs = [], []
    for n in subdivisions:
        err = float(np.abs(np.log(bank_account_discrete(path, j, n)) - log_b).max())
        errs.append(err)
        rows.append((n, j, j * driver.dt, err))

    empty = MildPath(driver.grid, cfg.grid, driver.n_paths, keep=())
    empty._put(0, path[0])
    deterministic = model.coeffs.state_independent and all(
        not np.any(a.weights) and not np.any(a.density)
        for a in (model.coeffs.drift(empty, 0), model.coeffs.vol(empty, 0))
    )
    checks = []
    if deterministic:
        worst = max(errs)
        checks.append(Check("bank_exact_all_n", worst <= tol_exact,
                            {"max_err": worst, "tol": tol_exact, "subdivisions": subdivisions}))
    ordered = [e for n, e in sorted(zip(subdivisions, errs)) if n >= 2]
    if model.coeffs.atomless and not deterministic:
        mono = all(b <= a + slack for a, b in zip(ordered, ordered[1:]))
        checks.append(Check("bank_monotone", mono, {"errors": ordered, "slack": slack}))
    if j in subdivisions:
        finest = errs[subdivisions.index(j)]
        checks.append(Check("bank_finest", finest < tol_finest,
                            {"n": j, "err": finest, "tol": tol_finest}))
    if not checks:
        checks.append(Check("bank_report", True, {"errors": errs, "subdivisions": subdivisions}))
    return Outcome(checks, [Table("bank_account", ("n", "step", "t", "max_log_err"), rows)])


def _isometry_integrand(seed: int, n_steps: int, m: int, d: int) -> np.ndarray:
    return np.random.default_rng([seed, 0x150]).normal(size=(n_steps, m, d))


def run_ito_isometry(cfg: ScenarioConfig) -> Outcome:
    """Monte Carlo isometry for random deterministic integrands, with an anticipating control."""
    sec = cfg.section("ito")
    seeds = _seeds(cfg, sec)
    n_paths = sec.integer(("n_paths",), cfg.n_paths, minimum=2)
    n_steps = sec.integer(("n_steps",), cfg.time.n_steps, minimum=1)
    m = sec.integer(("m",), 2, minimum=1)
    n_sigma = sec.number(("n_sigma",), 3.0, positive=True)
    min_pass = sec.number(("min_pass_fraction",), 0.99, nonneg=True)
    negative = bool(sec.get(("negative_control",), True))
    min_fail = sec.number(("min_fail_fraction",), 0.99, nonneg=True)
    rows, ok, bad = [], [], []
    for seed in seeds:
        driver = make_driver(cfg, seed, n_paths, n_steps)
        a = _isometry_integrand(seed, n_steps, m, cfg.d)
        gap = ito_isometry_gap(a, driver)
        ok.append(gap.passed(n_sigma))
        rows.append((seed, False, gap.mc, gap.exact, gap.stderr, gap.z, ok[-1]))
        if negative:
            # A_j scaled by |dW_j| / sqrt(dt): same size on average, but not predictable
            scale = np.abs(driver.increments[..., 0]) / math.sqrt(driver.dt)
            anticipating = a[:, None] * scale[:, :, None, None]
            ctl = ito_isometry_gap(anticipating, driver)
            bad.append(not ctl.passed(n_sigma))
            rows.append((seed, True, ctl.mc, ctl.exact, ctl.stderr, ctl.z, not bad[-1]))
    frac = float(np.mean(ok))
    needed = 1.0 if len(seeds) == 1 else min_pass
    first = rows[0]
    checks = [Check("ito_isometry", frac >= needed, {
        "exact": first[3], "mc": first[2], "stderr": first[4],
        "n_seeds": len(seeds), "seeds_passed": int(np.sum(ok)), "pass_fraction": frac,
        "required_fraction": needed, "n_paths": n_paths, "n_steps": n_steps, "m": m, "d": cfg.d,
    })]
    if negative:
        ffrac = float(np.mean(bad))
        checks.append(Check("ito_isometry_negative_control", ffrac >= min_fail, {
            "n_seeds": len(seeds), "seeds_failed": int(np.sum(bad)),
            "fail_fraction": ffrac, "required_fraction": min_fail,
        }))
    header = ("seed", "control", "mc", "exact", "stderr", "z", "pass")
    return Outcome(checks, [Table("ito_isometry", header, rows)])


def run_dirac_identity(cfg: ScenarioConfig) -> Outcome:
    """Gap of the delta-convolution identity under repeated halving of ``dt``."""
    sec = cfg.section("dirac")
    t = sec.number(("t",), cfg.horizon, positive=True)
    n_paths = sec.integer(("n_paths",), 32, minimum=1)
    levels = sec.integer(("refinements",), 3, minimum=1)
    lo, hi = sec.numbers(("ratio_range",), [0.3, 0.7])
    dt0 = sec.number(("dt",), 1.0 / 16, positive=True)
    n0 = round(t / dt0)
    if abs(n0 * dt0 - t) > 1e-9 * dt0:
        raise sec.error(("dt",), f"t = {t} is not a multiple of dt = {dt0}")
    f = lambda x: np.sin(np.pi * np.asarray(x) / t) ** 2  # noqa: E731
    fp = lambda x: np.pi / t * np.sin(2 * np.pi * np.asarray(x) / t)  # noqa: E731
    driver = sample_increments(1, n0, n_paths, cfg.seed, dt=dt0, workers=cfg.workers)
    gaps, rows = [], []
    for level in range(levels + 1):
        gaps.append(dirac_convolution_identity_gap(f, fp, t, driver))
        ratio = gaps[-1] / gaps[-2] if level else None
        rows.append((level, driver.dt, gaps[-1], ratio))
        if level < levels:
            driver = driver.refine(cfg.workers)
    ratios = [r[3] for r in rows[1:]]
    passed = all(lo <= r <= hi for r in ratios)
    check = Check("dirac_identity", passed, {
        "gaps": gaps, "ratios": ratios, "ratio_range": [lo, hi], "t": t, "n_paths": n_paths,
        "exact": 0.0, "mc": gaps[-1], "stderr": 0.0,
    })
    return Outcome([check], [Table("dirac_identity", ("level", "dt", "gap", "ratio"), rows)])


def run_cylindrify(cfg: ScenarioConfig) -> Outcome:
    """Operator norm of random cylindrified maps: witness lower bound against ``||T||``."""
    sec = cfg.section("cylindrify")
    instances = sec.integer(("instances",), 200, minimum=1)
    max_dim = sec.integer(("max_dim",), 8, minimum=1)
    max_dim_e = sec.integer(("max_dim_e",), 4, minimum=1)
    samples = sec.integer(("samples",), 32, minimum=1)
    tol = sec.number(("tol",), 1e-9, positive=True)
    rng = np.random.default_rng([cfg.seed, 0xC71])
    rows = []
    worst_eq, worst_sub = 0.0, -math.inf
    worst_pair = (0.0, 0.0)
    for k in range(instances):
        dim_h, dim_i = rng.integers(1, max_dim + 1, size=2)
        dim_e = int(rng.integers(1, max_dim_e + 1))
        op = cylindrify(rng.normal(size=(dim_h, dim_i)), dim_e)
        upper, lower = op.opnorm_upper(), op.opnorm_lower()
        eq = abs(upper - lower) / max(1.0, upper)
        sub = -math.inf
        for _ in range(samples):
            f = rng.normal(size=(dim_i, dim_e))
            # ||T f|| <= ||T|| ||f|| in operator norms
            sub = max(sub, np.linalg.norm(op(f), 2) - upper * np.linalg.norm(f, 2))
        if eq >= worst_eq:
            worst_eq, worst_pair = eq, (upper, lower)
        worst_sub = max(worst_sub, sub)
        rows.append((k, int(dim_h), int(dim_i), dim_e, upper, lower, eq, sub))
    check = Check("cylindrify_norm", worst_eq <= tol and worst_sub <= tol, {
        "instances": instances, "max_rel_gap": worst_eq, "max_submult_excess": worst_sub, "tol": tol,
        # the instance with the largest witness gap
        "opnorm_T": worst_pair[0], "opnorm_lower_witness": worst_pair[1],
        "max_violation": max(worst_sub, 0.0),
    })
    header = ("instance", "dim_h", "dim_i", "dim_e", "norm_T", "witness", "rel_gap", "submult_excess")
    return Outcome([check], [Table("cylindrify", header, rows)])


def run_picard(cfg: ScenarioConfig) -> Outcome:
    """Picard iteration with frozen noise over ``checks.picard.horizon``."""
    sec = cfg.section("picard")
    horizon = sec.number(("horizon",), min(0.25, cfg.horizon), positive=True)
    n_steps = cfg.time.step_of(horizon) if horizon <= cfg.horizon + 1e-12 else None
    if not n_steps:
        raise sec.error(("horizon",), f"{horizon} is not a simulation time in (0, {cfg.horizon}]")
    k_max = sec.integer(("k_max",), 20, minimum=1)
    tol = sec.number(("tol",), 1e-8, positive=True)
    n_paths = sec.integer(("n_paths",), cfg.n_paths, minimum=1)
    model = make_model(cfg)
    driver = make_driver(cfg, n_paths=n_paths, n_steps=n_steps)
    res = picard_iterate(model.x0, model.coeffs, driver, k_max, tol, grid=cfg.grid)
    residual = path_distance(res.path, mild_operator(res.path, model.coeffs, driver))
    rows = []
    for w, win in enumerate(res.windows):
        for i, dist in enumerate(win.distances):
            ratio = win.ratios[i - 1] if 0 < i <= len(win.ratios) else None
            rows.append((w, win.start, win.stop, i + 1, dist, ratio))
    tail = [r for win in res.windows for r in win.ratios[1:]]
    checks = [
        Check("picard_converged", res.converged and residual < tol, {
            "iterations": res.iterations, "residual": residual, "tol": tol, "k_max": k_max,
            "windows": [[w.start, w.stop] for w in res.windows], "horizon": horizon,
        }),
        Check("picard_contraction", all(r < 1 for r in tail), {
            "ratios": res.ratios, "max_ratio_from_2": max(tail) if tail else None,
        }),
    ]
    if model.coeffs.state_independent:
        checks.append(Check("picard_one_step", res.iterations == 1 and len(res.windows) == 1,
                            {"iterations": res.iterations}))
    header = ("window", "start", "stop", "iteration", "distance", "ratio")
    return Outcome(checks, [Table("picard", header, rows)])


SUBCOMMANDS = {
    "simulate": run_simulate,
    "check-drift": run_check_drift,
    "martingale-test": run_martingale_test,
    "bank-account-convergence": run_bank_account,
    "ito-isometry": run_ito_isometry,
    "dirac-identity": run_dirac_identity,
    "cylindrify-norm-check": run_cylindrify,
    "picard-diagnostics": run_picard,
}
