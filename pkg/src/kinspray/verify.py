"""Acceptance battery.

Each check returns a CheckResult with the numbers its verdict rests on.
Expensive ensembles are built once per battery and shared between checks.
``quick`` shrinks ensemble sizes; the checks and thresholds are unchanged.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import auxiliary as aux
from .coefficients import apply_ito_drift, compute_coefficients
from .config import RunConfig
from .grid import FourierSeries, ddx, xgrid
from .harness import collect_runs, compare_laws, summarize
from .kinetic_solver import (JumpTrajectory, driver_paths, initial_density, moments,
                             phase_grid, picard_solve, run_kinetic)
from .markov_driver import build_driver, coupled_sample, load_driver, meeting_indices
from .rng import AUX, substream

log = logging.getLogger(__name__)

Z_TOL = 4.0


@dataclass
class CheckResult:
    id: int
    name: str
    passed: bool
    details: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} [{self.id}] {self.name}"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _zscore(samples, target) -> float:
    samples = np.asarray(samples, dtype=float)
    se = samples.std(ddof=1) / math.sqrt(samples.size)
    d = samples.mean() - target
    if se == 0:
        return 0.0 if abs(d) < 1e-12 else math.inf
    return float(d / se)


def zero_driver(nx: int):
    return build_driver([FourierSeries()], [[1.0]], xgrid(nx))


# ---------------------------------------------------------------------------
# shared ensembles


class Battery:
    def __init__(self, quick: bool = False, seed: int = 0, workers: int | None = None,
                 nx: int = 64):
        self.quick = quick
        self.seed = seed
        self.workers = workers
        self.nx = nx
        self.runs = 128 if quick else 512
        self.n_mc = 10_000
        self.epsilons = [0.4, 0.2, 0.1]
        self.telegraph = load_driver("telegraph", nx)
        self.coeffs = compute_coefficients(self.telegraph)
        self.three = load_driver("three_state", nx)
        self.coeffs3 = compute_coefficients(self.three)
        self._cache = {}

    def cfg(self, **kw) -> RunConfig:
        base = dict(nx=self.nx, nv=64, driver="telegraph", horizon=0.5, runs=self.runs,
                    seed=self.seed, epsilons=self.epsilons)
        base.update(kw)
        return RunConfig.from_dict(base)

    def _get(self, key, build):
        if key not in self._cache:
            t = time.time()
            self._cache[key] = build()
            log.info("built %s in %.1fs", key, time.time() - t)
        return self._cache[key]

    # stationary driver start: the law comparison and conservation checks
    def headline_cfg(self) -> RunConfig:
        return self.cfg(n_outputs=10)

    def kinetic(self, eps: float, start="stationary", runs: int | None = None):
        cfg = self.headline_cfg().replace(driver_start=start)
        n = runs or self.runs
        return self._get(("kinetic", eps, start, n),
                         lambda: collect_runs(cfg, "kinetic", n, self.seed, eps=eps,
                                              workers=self.workers))

    def spde(self, scheme: str = "ito", seed_offset: int = 1):
        cfg = self.headline_cfg().replace(spde_scheme=scheme)
        return self._get(("spde", scheme, seed_offset),
                         lambda: collect_runs(cfg, "spde", self.runs, self.seed + seed_offset,
                                              workers=self.workers))


# ---------------------------------------------------------------------------
# 1-3: coefficients


def check_closed_forms(b: Battery) -> CheckResult:
    c, p = 0.5, 0.5
    x = b.telegraph.x
    co = b.coeffs
    s = np.sin(2 * np.pi * x)
    k_ref = (c * c / p) * np.outer(s, s)
    a_ref = np.pi * c * c * np.sin(4 * np.pi * x) / (1 + 2 * p)
    w2_ref = c * c * s * s / (1 + 2 * p)
    errs = {"k": float(np.max(np.abs(co.kernel.values - k_ref))),
            "a": float(np.max(np.abs(co.a - a_ref))),
            "E_w2": float(np.max(np.abs(co.cross.kww_diag - w2_ref)))}
    return CheckResult(1, "telegraph closed forms for k, a, E[w~^2] within 1e-6",
                       all(v <= 1e-6 for v in errs.values()), {"max_abs_error": errs})


def _wtilde_zscores(driver, coeffs, n, stream, pairs):
    s = aux.sample_wtilde(driver, None, stream, n=n)
    psi = coeffs.psi.values[s.state]
    m0 = driver.states[s.state]
    out = {"K_ww": [], "G": [], "cross_identity": []}
    for i, j in pairs:
        out["K_ww"].append(_zscore(s.w[:, i] * s.w[:, j], coeffs.cross.kww[i, j]))
        out["G"].append(_zscore(s.w[:, i] * psi[:, j], coeffs.cross.g[i, j]))
        out["cross_identity"].append(_zscore(m0[:, i] * psi[:, j] + s.w[:, i] * m0[:, j],
                                            coeffs.cross.g[i, j]))
    return out


def check_cross_identities(b: Battery) -> CheckResult:
    rng = substream(b.seed, 0, AUX, 2)
    pairs = rng.integers(0, b.nx, size=(10, 2))
    details = {"probe_pairs": pairs.tolist(), "samples": b.n_mc}
    ok = True
    for name, drv, co in (("telegraph", b.telegraph, b.coeffs), ("three_state", b.three, b.coeffs3)):
        z = _wtilde_zscores(drv, co, b.n_mc, substream(b.seed, 1, AUX, 2), pairs)
        worst = max(abs(v) for vals in z.values() for v in vals)
        details[name] = {"z": z, "max_abs_z": worst}
        ok = ok and worst <= Z_TOL
    return CheckResult(2, "Monte Carlo w~ matches K_ww, G and the cross identity within 4 SE", ok,
                       details)


def _random_rho(rng, x, n_modes=4):
    rho = np.ones_like(x)
    for j in range(1, n_modes + 1):
        a, bb = rng.normal(scale=0.3 / j, size=2)
        rho += a * np.cos(2 * np.pi * j * x) + bb * np.sin(2 * np.pi * j * x)
    return rho


def check_drift_consistency(b: Battery) -> CheckResult:
    rng = substream(b.seed, 0, AUX, 3)
    details = {}
    ok = True
    for name, co in (("telegraph", b.coeffs), ("three_state", b.coeffs3)):
        x = co.x
        gaps = []
        for _ in range(50):
            rho = _random_rho(rng, x)
            u = 0.1 * _random_rho(rng, x) - 0.1
            std = apply_ito_drift(rho, u, co.a, co.kernel)
            alt = 0.5 * ddx(co.kernel.diag * rho, 2) + ddx(co.cross.dpsi_w * rho) - ddx(u * rho)
            gaps.append(float(np.max(np.abs(std - alt))))
        k = co.kernel.values
        ident = float(np.max(np.abs(co.cross.kww - 0.5 * (co.cross.g + co.cross.g.T) - 0.5 * k)))
        details[name] = {"max_assembly_gap": max(gaps), "symmetrized_identity_error": ident}
        ok = ok and max(gaps) < 1e-6 and ident < 1e-8
    return CheckResult(3, "two assemblies of the Ito drift agree within 1e-6; K_ww identity within 1e-8",
                       ok, details)


# ---------------------------------------------------------------------------
# 4-6: kinetic solver


def check_kinetic_conservation(b: Battery) -> CheckResult:
    details = {}
    ok = True
    for eps in b.epsilons:
        r = b.kinetic(eps)
        d = r.diagnostics
        mass_err = float(np.max(np.abs(d["mass"] - 1.0)))
        drift = float(np.max(d["max_mass_drift"]))
        ratio = float(np.max(d["moment_ratio"]))
        u_ratio = float(np.max(d["u_sup"]) / np.max(d["u_bound"]))
        details[str(eps)] = {"max_mass_error": mass_err, "max_step_drift": drift,
                             "max_moment_ratio": ratio, "u_sup_over_bound": u_ratio,
                             "boundary_loss": float(np.max(d["boundary_loss"]))}
        ok = ok and mass_err <= 1e-10 and drift < 1e-6 and ratio <= 1.10 and u_ratio <= 1.0
    return CheckResult(4, "kinetic mass, per-step drift and moment bound over the ensemble", ok,
                       details)


ZF = dict(eps=0.5, sigma=0.3, alpha=0.4, horizon=0.5, nv=256, vmax=1.6)


def zero_forcing_value(dt: float, nx: int = 64) -> float:
    cfg = RunConfig(rho0={"const": 1.0, "cos": [ZF["alpha"]]}, v_std=ZF["sigma"], vmax=ZF["vmax"],
                    nv=ZF["nv"], nx=nx, dt_max=dt, fluid="frozen", horizon=ZF["horizon"],
                    driver={"states": [{}], "transition": [[1.0]]})
    drv = zero_driver(nx)
    path = JumpTrajectory(np.array([]), np.array([0]), ZF["horizon"])
    r = run_kinetic(cfg, drv, [path], ZF["eps"])
    x = r.grid.x
    return float(np.mean(r.rho[0, -1] * np.cos(2 * np.pi * x)))


def zero_forcing_exact() -> float:
    eps, sig, T = ZF["eps"], ZF["sigma"], ZF["horizon"]
    disp = eps * sig * (1 - math.exp(-T / eps**2))
    return 0.5 * ZF["alpha"] * math.exp(-0.5 * (2 * np.pi * disp) ** 2)


def check_zero_forcing(b: Battery) -> CheckResult:
    dts = [0.1, 0.05, 0.025]
    ref_dt = dts[-1] / 2
    vals = [zero_forcing_value(dt, b.nx) for dt in dts]
    ref = zero_forcing_value(ref_dt, b.nx)
    exact = zero_forcing_exact()
    e = [v - ref for v in vals]
    ratios = [e[0] / e[1], e[1] / e[2]]
    halving = abs(vals[-1] - ref)
    err_exact = abs(ref - exact)
    ok = all(3.2 <= r <= 4.8 for r in ratios) and err_exact <= 2 * halving
    return CheckResult(5, "zero-forcing push-forward within 2x the halving error; Strang ratios in [3.2, 4.8]",
                       ok, {"dts": dts, "values": vals, "reference_dt": ref_dt, "reference": ref,
                            "exact": exact, "ratios": ratios, "error_vs_exact": err_exact,
                            "halving_error": halving})


def picard_path(cfg: RunConfig, driver, seed: int):
    """First run id whose driver path jumps before the horizon."""
    for rid in range(100):
        path = driver_paths(cfg, driver, 1.0, seed, [rid])[0]
        if np.any(path.jump_times < cfg.horizon):
            return rid, path
    raise RuntimeError("no path with jumps")


def check_picard(b: Battery) -> CheckResult:
    cfg = b.cfg(epsilon=1.0, horizon=1.0)
    rid, path = picard_path(cfg, b.telegraph, b.seed)
    pr = picard_solve(cfg, b.telegraph, path)
    r = run_kinetic(cfg, b.telegraph, [path], 1.0)
    gap = float(np.max(np.abs(r.u[0, -1] - pr.u[-1])))
    diffs = np.asarray(pr.differences)
    ratios = diffs[1:] / diffs[:-1]
    geometric = bool(ratios.size >= 2 and np.all(ratios < 1) and ratios.max() < 0.5)
    ok = gap <= 1e-3 and geometric
    return CheckResult(6, "Picard fixed point matches the kinetic solver at eps = 1; geometric differences",
                       ok, {"run_id": rid, "jumps": int(np.sum(path.jump_times < cfg.horizon)),
                            "sup_u_gap": gap, "iterations": pr.iterations, "mu": pr.mu,
                            "differences": diffs, "ratios": ratios})


# ---------------------------------------------------------------------------
# 7: SPDE solver


def check_spde(b: Battery) -> CheckResult:
    ito = b.spde("ito")
    strat = b.spde("stratonovich", seed_offset=2)
    d = ito.diagnostics
    per_k = float(np.max(d["max_mass_change"]) / (np.max(d["n_steps"]) / 1000.0))
    cfg = b.headline_cfg()
    si = summarize(ito, cfg, b.seed + 1)
    ss = summarize(strat, cfg, b.seed + 2)
    zs = {}
    for k in si.observables:
        a, c = si.stats[k], ss.stats[k]
        zs[k] = {"mean": (a["mean"] - c["mean"]) / math.hypot(a["se"], c["se"]),
                 "var": (a["var"] - c["var"]) / math.hypot(a["var_se"], c["var_se"])}
    qv = {}
    for k in si.observables:
        m = d[f"martingale:{k}"]
        q = d[f"qv:{k}"]
        qv[k] = {"E_M2": float(np.mean(m * m)), "E_qv": float(np.mean(q)),
                 "z": _zscore(m * m - q, 0.0)}
    ok = (per_k <= 1e-13 and all(abs(v) <= 3 for z in zs.values() for v in z.values())
          and all(abs(v["z"]) <= Z_TOL for v in qv.values()))
    return CheckResult(7, "SPDE mass, Ito vs Stratonovich statistics, quadratic variation", ok,
                       {"mass_change_per_1000_steps": per_k, "ito_vs_strat_z": zs,
                        "quadratic_variation": qv, "dt": float(d["dt"][0]),
                        "n_steps": int(d["n_steps"][0]), "min_rho": float(np.min(d["min_rho"]))})


# ---------------------------------------------------------------------------
# 8: martingale defect


DEFECT_START = 0
# the linear defect changes by ~0.08 per halving of eps; 512 runs give SE ~0.045 per step
DEFECT_RUNS_FACTOR = 3


def defect_functions(x):
    xi = np.cos(2 * np.pi * x)
    return {"linear": aux.TestFunction.linear(xi), "quadratic": aux.TestFunction.quadratic(xi)}


def check_defect(b: Battery) -> CheckResult:
    x = b.coeffs.x
    phis = defect_functions(x)
    details = {"driver_start": DEFECT_START, "runs": DEFECT_RUNS_FACTOR * b.runs}
    ok = True
    for name, phi in phis.items():
        vals = []
        for eps in b.epsilons:
            r = b.kinetic(eps, start=DEFECT_START, runs=DEFECT_RUNS_FACTOR * b.runs)
            est = aux.martingale_defect(r.times, r.rho, r.u, phi, b.coeffs)[0]
            vals.append(est)
        steps = []
        for e0, e1 in zip(vals[:-1], vals[1:]):
            gap = abs(e0.value) - abs(e1.value)
            se = math.hypot(e0.se, e1.se)
            steps.append({"drop": gap, "se": se, "z": gap / se})
        s = b.spde("ito")
        ctrl = aux.martingale_defect(s.times, s.rho, s.u, phi, b.coeffs)[0]
        dec = all(st["z"] > 2 for st in steps)
        ctrl_ok = abs(ctrl.value) <= 3 * ctrl.se
        details[name] = {"epsilons": b.epsilons, "defect": [v.value for v in vals],
                         "se": [v.se for v in vals], "steps": steps,
                         "spde_control": {"value": ctrl.value, "se": ctrl.se}}
        ok = ok and dec and ctrl_ok
    return CheckResult(8, "martingale defect decreasing in eps beyond 2 SE; SPDE control zero within 3 SE",
                       ok, details)


# ---------------------------------------------------------------------------
# 9: headline law comparison


def check_headline(b: Battery) -> CheckResult:
    cfg = b.headline_cfg()
    kin = [summarize(b.kinetic(e), cfg, b.seed) for e in b.epsilons]
    lim = summarize(b.spde("ito"), cfg, b.seed + 1)
    rep = compare_laws(kin, lim, 3.0)
    return CheckResult(9, "kinetic vs limit laws of <rho_T, xi_j>: compare_laws PASS", rep.passed,
                       {"report": rep.to_dict()})


# ---------------------------------------------------------------------------
# 10: mixing


def coupling_integrals(driver, start: int, n: int, horizon: float, stream) -> np.ndarray:
    """Per-sample int_0^H 1[m*_t != m~*_t] dt from the coupling construction."""
    out = np.empty(n)
    for i in range(n):
        cs = coupled_sample(driver, start, horizon, stream)
        out[i] = min(cs.tau, horizon)
    return out


def check_mixing(b: Battery) -> CheckResult:
    drv = b.telegraph
    n = b.n_mc
    horizon = 40.0 / drv.decay_rate
    integ = coupling_integrals(drv, 0, n, horizon, substream(b.seed, 0, AUX, 10))
    tau = meeting_indices(drv, 0, n, substream(b.seed, 1, AUX, 10)).astype(float)
    half = 0.5 * tau * (tau + 1)
    se = math.hypot(integ.std(ddof=1), half.std(ddof=1)) / math.sqrt(n)
    z_half = float((integ.mean() - half.mean()) / se)
    se_tau = math.hypot(integ.std(ddof=1), tau.std(ddof=1)) / math.sqrt(n)
    z_tau = float((integ.mean() - tau.mean()) / se_tau)
    coupling = {"integral_mean": float(integ.mean()), "half_tau_tau1_mean": float(half.mean()),
                "z_vs_half_tau_tau1": z_half, "tau_mean": float(tau.mean()),
                "z_vs_tau": z_tau}

    families = {}
    qt_ok = True
    for name, d, co in (("telegraph", drv, b.coeffs), ("three_state", b.three, b.coeffs3)):
        fam = mixing_families(b, d, co)
        families[name] = fam
        qt_ok = qt_ok and all(abs(v["z"]) <= Z_TOL for v in fam["final"].values())
    ok = abs(z_half) <= Z_TOL and qt_ok
    return CheckResult(10, "coupling integral vs 1/2 E[tau(tau+1)]; Q_t psi mixing at t = 20/gamma", ok,
                       {"coupling": coupling, "Q_t": families,
                        "Q_t_pass": qt_ok, "coupling_pass": abs(z_half) <= Z_TOL})


def mixing_families(b: Battery, drv, coeffs) -> dict:
    """Q_t psi from a fixed (f, n = state 0) for the three test-function families.

    psi_J = <J(f), xi>, psi_K = <K(f), xi'>, psi_n = <n rho, 1 + n>; the limits
    are 0, <E[w~^2] rho, xi'> and sum_j nu_j <n^j rho, 1 + n^j>.
    """
    cfg = b.cfg(v_mean=0.2)
    grid = phase_grid(cfg, drv)
    f = initial_density(grid, cfg.rho0_series, cfg.v_mean, cfg.v_std)
    mom = moments(f, grid)
    x = drv.x
    xi_j = np.cos(2 * np.pi * x) + np.sin(2 * np.pi * x)
    xi_k = 1.0 + np.cos(4 * np.pi * x)
    t_final = aux.BURN_IN_FACTOR / drv.decay_rate
    inv = aux.invariant_moments(mom, coeffs)
    n_all = drv.states
    targets = {
        "J": float(np.mean(inv.J * xi_j)),
        "K": float(np.mean(inv.K * xi_k)),
        "state": float(np.sum(drv.stationary * np.mean(n_all * mom.rho * (1 + n_all), axis=-1))),
    }
    out = {"t_final": t_final}
    for label, t in (("t=0.5", 0.5), ("t=2", 2.0), ("final", t_final)):
        s = aux.sample_wtilde(drv, t, substream(b.seed, 2, AUX, 10), n=b.n_mc, start=0)
        g = aux.aux_moments(mom, s.w, t)
        n_t = n_all[s.state]
        samples = {"J": np.mean(g.J * xi_j, axis=-1),
                   "K": np.mean(g.K * xi_k, axis=-1),
                   "state": np.mean(n_t * g.rho * (1 + n_t), axis=-1)}
        out[label] = {k: {"mean": float(v.mean()), "target": targets[k],
                          "z": _zscore(v, targets[k])} for k, v in samples.items()}
    return out


CHECKS = {
    1: check_closed_forms,
    2: check_cross_identities,
    3: check_drift_consistency,
    4: check_kinetic_conservation,
    5: check_zero_forcing,
    6: check_picard,
    7: check_spde,
    8: check_defect,
    9: check_headline,
    10: check_mixing,
}


def run_battery(quick: bool = False, seed: int = 0, workers: int | None = None,
                only=None, out_dir: str | Path | None = None, echo=None) -> list[CheckResult]:
    battery = Battery(quick=quick, seed=seed, workers=workers)
    results = []
    for cid, fn in CHECKS.items():
        if only and cid not in only:
            continue
        t = time.time()
        res = fn(battery)
        res.seconds = time.time() - t
        results.append(res)
        if echo:
            echo(res.line())
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        payload = {"quick": quick, "seed": seed, "runs": battery.runs,
                   "checks": [_jsonable(asdict(r)) for r in results]}
        (out / "verify.json").write_text(json.dumps(payload, sort_keys=True, indent=1))
    return results
