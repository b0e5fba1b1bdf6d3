"""Ensembles of kinetic and SPDE runs, law summaries and their comparison.

Runs are cut into fixed chunks of CHUNK consecutive run ids.  A chunk is the
unit of work for the process pool and every run inside it draws from its own
substream, so results do not depend on the number of workers
(KINSPRAY_WORKERS, default: all cores).
"""
from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .coefficients import LimitCoefficients, compute_coefficients
from .config import RunConfig
from .errors import InsufficientEnsemble, KinsprayError, ObservableMismatch
from .kinetic_solver import driver_paths, run_kinetic
from .markov_driver import DriverSpec, load_driver
from .spde_solver import run_spde

log = logging.getLogger(__name__)

CHUNK = 32
MODELS = ("kinetic", "spde")


def n_workers() -> int:
    env = os.environ.get("KINSPRAY_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass
class EnsembleRuns:
    """Trajectories of a whole ensemble, recorded at cfg.times()."""

    model: str
    epsilon: float | None
    times: np.ndarray
    rho: np.ndarray  # (N, T, nx)
    u: np.ndarray  # (N, T, nx) kinetic, (T, nx) spde
    run_ids: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def _kinetic_chunk(cfg: RunConfig, driver: DriverSpec, eps: float, seed: int, ids) -> dict:
    paths = driver_paths(cfg, driver, eps, seed, ids)
    r = run_kinetic(cfg, driver, paths, eps)
    return {"rho": r.rho, "u": r.u, "mass": r.mass, "max_mass_drift": r.max_mass_drift,
            "boundary_loss": r.boundary_loss, "clipped": r.clipped,
            "moment_ratio": r.moment_ratio, "u_sup": r.u_sup, "u_bound": r.u_bound,
            "n_steps": r.n_steps}


def _spde_chunk(cfg: RunConfig, coeffs: LimitCoefficients, seed: int, ids) -> dict:
    r = run_spde(cfg, coeffs, seed, ids)
    out = {"rho": r.rho, "u": r.u, "mass": r.mass, "min_rho": r.min_rho,
           "max_mass_change": r.max_mass_change, "n_steps": r.n_steps, "dt": r.dt}
    for k in r.martingale:
        out[f"martingale:{k}"] = r.martingale[k]
        out[f"qv:{k}"] = r.qv[k]
    return out


def _run_chunk(args):
    model, cfg_dict, seed, ids, eps = args
    cfg = RunConfig.from_dict(cfg_dict)
    driver = load_driver(cfg.driver, cfg.nx)
    try:
        if model == "kinetic":
            return _kinetic_chunk(cfg, driver, eps, seed, ids)
        return _spde_chunk(cfg, compute_coefficients(driver, cfg.energy_tol), seed, ids)
    except KinsprayError as exc:
        raise type(exc)(f"{exc} [chunk run ids {ids[0]}..{ids[-1]}, master seed {seed}]") from exc


def collect_runs(cfg: RunConfig, model: str, n_runs: int, master_seed: int,
                 eps: float | None = None, identical: bool = False,
                 workers: int | None = None) -> EnsembleRuns:
    """Run ids 0..n_runs-1 (all 0 when ``identical``) in fixed chunks."""
    if model not in MODELS:
        raise ValueError(f"model must be one of {MODELS}")
    if n_runs < 2:
        raise ValueError("an ensemble needs at least 2 runs")
    eps = (cfg.epsilon if eps is None else float(eps)) if model == "kinetic" else None
    ids = np.zeros(n_runs, dtype=np.int64) if identical else np.arange(n_runs)
    chunks = [ids[i:i + CHUNK].tolist() for i in range(0, n_runs, CHUNK)]
    tasks = [(model, cfg.to_dict(), int(master_seed), c, eps) for c in chunks]
    workers = n_workers() if workers is None else workers
    if workers <= 1 or len(tasks) == 1:
        parts = [_run_chunk(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
            parts = list(pool.map(_run_chunk, tasks))
    rho = np.concatenate([p["rho"] for p in parts])
    if model == "kinetic":
        u = np.concatenate([p["u"] for p in parts])
    else:
        u = parts[0]["u"]
    diag = {}
    for key in parts[0]:
        if key in ("rho", "u"):
            continue
        vals = [p[key] for p in parts]
        diag[key] = np.concatenate(vals) if np.ndim(vals[0]) else np.array(vals)
    return EnsembleRuns(model, eps, cfg.times(), rho, u, ids, diag)


# ---------------------------------------------------------------------------
# summaries


def _fsum_mean(x) -> float:
    x = np.asarray(x, dtype=float)
    return math.fsum(x.tolist()) / x.size


def moment_stats(x) -> dict:
    """Mean, sample variance and their standard errors with order-independent sums."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 2:
        raise InsufficientEnsemble("moment statistics need at least 2 samples")
    mean = _fsum_mean(x)
    d = x - mean
    m2 = math.fsum((d * d).tolist()) / n
    m4 = math.fsum((d ** 4).tolist()) / n
    var = m2 * n / (n - 1)
    return {"mean": mean, "var": var, "se": math.sqrt(var / n),
            "var_se": math.sqrt(max(m4 - m2 * m2, 0.0) / n)}


@dataclass
class EnsembleSummary:
    model: str
    epsilon: float | None
    horizon: float
    observables: list
    n: int
    seed: int
    config_digest: str
    values: dict  # observable -> per-run <rho_T, xi>
    stats: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.stats:
            self.stats = {k: moment_stats(v) for k, v in self.values.items()}

    def merge(self, other: "EnsembleSummary") -> "EnsembleSummary":
        if (self.model, self.epsilon, self.observables, self.config_digest) != \
                (other.model, other.epsilon, other.observables, other.config_digest):
            raise ObservableMismatch("summaries describe different experiments")
        vals = {k: list(self.values[k]) + list(other.values[k]) for k in self.values}
        return EnsembleSummary(self.model, self.epsilon, self.horizon, self.observables,
                               self.n + other.n, self.seed, self.config_digest, vals)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["values"] = {k: [float(x) for x in v] for k, v in self.values.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleSummary":
        return cls(**d)


def _diag_summary(diag: dict) -> dict:
    out = {}
    for k, v in diag.items():
        if k.startswith(("martingale:", "qv:")):
            continue
        a = np.asarray(v, dtype=float)
        out[k] = float(np.max(np.abs(a))) if k != "min_rho" else float(np.min(a))
    return out


def summarize(runs: EnsembleRuns, cfg: RunConfig, seed: int, t_index: int = -1) -> EnsembleSummary:
    obs = cfg.observable_series()
    x = np.arange(runs.rho.shape[-1]) / runs.rho.shape[-1]
    rho_t = runs.rho[:, t_index]
    values = {k: (rho_t @ s(x) / x.size).tolist() for k, s in obs.items()}
    return EnsembleSummary(runs.model, runs.epsilon, float(runs.times[t_index]), sorted(obs),
                           int(rho_t.shape[0]), int(seed), cfg.digest(), values,
                           diagnostics=_diag_summary(runs.diagnostics))


def run_ensemble(cfg: RunConfig, model: str, n_runs: int, master_seed: int,
                 eps: float | None = None, identical: bool = False,
                 workers: int | None = None) -> EnsembleSummary:
    runs = collect_runs(cfg, model, n_runs, master_seed, eps, identical, workers)
    return summarize(runs, cfg, master_seed)


# ---------------------------------------------------------------------------
# law comparison


@dataclass
class ComparisonReport:
    tolerance: float
    rows: list  # one dict per (observable, statistic, epsilon)
    trends: list  # one dict per (observable, statistic)
    passed: bool

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def trend_slope(eps, disc) -> float:
    """Least-squares slope of |discrepancy| against epsilon."""
    eps = np.asarray(eps, dtype=float)
    disc = np.abs(np.asarray(disc, dtype=float))
    if eps.size < 2 or np.ptp(eps) == 0:
        return 0.0
    return float(np.polyfit(eps, disc, 1)[0])


def compare_laws(kinetic: list[EnsembleSummary], spde: EnsembleSummary,
                 tolerance: float = 3.0) -> ComparisonReport:
    """Means and variances of every observable, kinetic at each epsilon vs the limit.

    A statistic passes when its smallest-epsilon discrepancy is within
    ``tolerance`` pooled standard errors and the discrepancy shrinks with
    epsilon: either the fitted slope of |discrepancy| against epsilon is
    positive, or no epsilon shows a discrepancy beyond ``tolerance``.
    """
    if not kinetic:
        raise ValueError("no kinetic summaries")
    for s in kinetic:
        if s.observables != spde.observables:
            raise ObservableMismatch(f"observables {s.observables} vs {spde.observables}")
        if abs(s.horizon - spde.horizon) > 1e-12:
            raise ObservableMismatch(f"horizon {s.horizon} vs {spde.horizon}")
    order = sorted(range(len(kinetic)), key=lambda i: -(kinetic[i].epsilon or 0.0))
    kin = [kinetic[i] for i in order]
    rows, trends = [], []
    passed = tolerance > 0
    for obs in spde.observables:
        for stat, se_key in (("mean", "se"), ("var", "var_se")):
            ref = spde.stats[obs]
            zs, ds, es = [], [], []
            for s in kin:
                d = s.stats[obs][stat] - ref[stat]
                se = math.hypot(s.stats[obs][se_key], ref[se_key])
                z = d / se if se > 0 else (0.0 if d == 0 else math.inf)
                rows.append({"observable": obs, "statistic": stat, "epsilon": s.epsilon,
                             "kinetic": s.stats[obs][stat], "limit": ref[stat],
                             "difference": d, "pooled_se": se, "z": z})
                zs.append(z)
                ds.append(d)
                es.append(s.epsilon if s.epsilon is not None else 0.0)
            slope = trend_slope(es, ds)
            within = [abs(z) <= tolerance for z in zs]
            ok = tolerance > 0 and within[-1] and (slope > 0 or all(within))
            trends.append({"observable": obs, "statistic": stat, "slope": slope,
                           "smallest_eps_z": zs[-1], "all_within": all(within), "pass": ok})
            passed = passed and ok
    return ComparisonReport(float(tolerance), rows, trends, bool(passed))


def ensemble_from_config(cfg: RunConfig, model: str, seed: int, workers: int | None = None):
    """Summaries for every epsilon of cfg (kinetic) or a single limit summary (spde)."""
    if model == "spde":
        return [run_ensemble(cfg, "spde", cfg.runs, seed, workers=workers)]
    return [run_ensemble(cfg, "kinetic", cfg.runs, seed, eps=e, workers=workers)
            for e in cfg.epsilons]
