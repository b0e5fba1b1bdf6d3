"""Path-wise solver for the rescaled kinetic-fluid system.

    d_t f + eps^-1 v d_x f + eps^-2 d_v[(eps u - v + m) f] = 0
    d_t u - d_x^2 u = J(f) - eps rho(f) u

One step of length dt (never crossing a driver jump) is a Strang splitting

    half x-transport  ->  exact v-relaxation toward c = m + eps u  ->  half x-transport

followed by a heat update of u with the source frozen at the start of the step.

x-transport moves each velocity slice by a uniform shift, applied to cell
averages through a periodic monotone cubic reconstruction of the cumulative
mass (a Fourier phase shift is available as an alternative).  The relaxation
flow f <- e^s f(x, c + e^s (v - c)), s = dt/eps^2, is applied to cell averages
in v: the cumulative mass in v is reconstructed with a monotone cubic
(Fritsch-Carlson) Hermite interpolant and differenced at the pre-images of the
cell edges.  This keeps the update positive and conserves mass whenever the
pre-image of the velocity window covers its support.

Many runs are advanced together: every array carries a leading batch axis and
each run has its own step length, so runs can stop at their own jump times.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

from .config import RunConfig
from .errors import CFLViolation, JumpStraddled, NoConvergence, ResolutionInsufficient
from .grid import FourierSeries, heat_multiplier, phi1_multiplier, xgrid
from .markov_driver import DriverSpec, JumpTrajectory, draw_stationary, sample_path
from .rng import DRIVER, substream

log = logging.getLogger(__name__)

MASS_DRIFT_LIMIT = 1e-4
BOUNDARY_LOSS_LIMIT = 1e-8
MOMENT_SLACK = 0.10


@dataclass(frozen=True)
class PhaseGrid:
    nx: int
    nv: int
    vmax: float

    def __post_init__(self):
        if self.nx < 8 or self.nv < 8 or self.vmax <= 0:
            raise ValueError("need nx, nv >= 8 and vmax > 0")

    @property
    def dx(self) -> float:
        return 1.0 / self.nx

    @property
    def dv(self) -> float:
        return 2.0 * self.vmax / self.nv

    @property
    def x(self) -> np.ndarray:
        return xgrid(self.nx)

    @property
    def v(self) -> np.ndarray:
        """Cell centres of the velocity cells."""
        return -self.vmax + (np.arange(self.nv) + 0.5) * self.dv

    @property
    def v_edges(self) -> np.ndarray:
        return -self.vmax + np.arange(self.nv + 1) * self.dv


@dataclass
class KineticState:
    f: np.ndarray
    u: np.ndarray
    t: float
    driver_state: int
    epsilon: float


@dataclass(frozen=True)
class Moments:
    rho: np.ndarray
    J: np.ndarray
    K: np.ndarray


def moments(f: np.ndarray, grid: PhaseGrid) -> Moments:
    """Velocity moments by the cell-centre rule (f vanishes at the window edges)."""
    v = grid.v
    dv = grid.dv
    return Moments(f.sum(-1) * dv, (f * v).sum(-1) * dv, (f * v * v).sum(-1) * dv)


def total_mass(f: np.ndarray, grid: PhaseGrid) -> np.ndarray:
    return f.sum(axis=(-1, -2)) * grid.dx * grid.dv


def jbar(f: np.ndarray, grid: PhaseGrid) -> np.ndarray:
    return (f * np.abs(grid.v)).sum(axis=(-1, -2)) * grid.dx * grid.dv


# ---------------------------------------------------------------------------
# sub-flows


def x_transport_spectral(f: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """f(x - shift_v, v) by a Fourier phase per velocity slice."""
    nx = f.shape[-2]
    fh = np.fft.rfft(f, axis=-2)
    k = np.fft.rfftfreq(nx, 1.0 / nx)
    phase = np.exp(-2j * np.pi * k[:, None] * shift[..., None, :])
    if nx % 2 == 0:
        phase[..., -1, :] = np.cos(np.pi * nx * shift)
    return np.fft.irfft(fh * phase, n=nx, axis=-2)


def x_transport(f: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """Cell averages of f(x - shift_v, v) from the periodic monotone-cubic primitive.

    For a uniform shift every new cell collects the tail of one old cell and
    the head of the next, so the update is a telescoping sum: conservative
    and positivity preserving.
    """
    m = np.maximum(np.swapaxes(f, -1, -2), 0.0)  # (..., nv, nx)
    nx = m.shape[-1]
    z = -np.asarray(shift, dtype=float)[..., None] * nx
    r = np.floor(z)
    t = z - r
    left = np.roll(m, 1, axis=-1)
    s = left + m
    with np.errstate(invalid="ignore", divide="ignore"):
        d = np.where(s > 0, 2.0 * left * m / s, 0.0)
    dr = np.roll(d, -1, axis=-1)
    t2 = t * t
    head = t2 * (3 - 2 * t) * m + t * (1 - t) ** 2 * d + t2 * (t - 1) * dr
    tail = m - head
    nxt = np.roll(head, -1, axis=-1)
    out = np.empty_like(m)
    shifts = r[..., 0].astype(np.int64)
    for k in np.unique(shifts):
        sel = shifts == k
        out[sel] = np.roll(tail[sel] + nxt[sel], -int(k), axis=-1)
    return np.swapaxes(out, -1, -2)


def _primitive(f: np.ndarray, dv: float):
    """Cumulative mass at cell edges and monotone Hermite slopes."""
    f = np.maximum(f, 0.0)
    shape = f.shape[:-1] + (f.shape[-1] + 1,)
    F = np.zeros(shape)
    np.cumsum(f * dv, axis=-1, out=F[..., 1:])
    d = np.empty(shape)
    a = f[..., :-1]
    b = f[..., 1:]
    s = a + b
    with np.errstate(invalid="ignore", divide="ignore"):
        d[..., 1:-1] = np.where(s > 0, 2.0 * a * b / s, 0.0)
    d[..., 0] = f[..., 0]
    d[..., -1] = f[..., -1]
    return F, d


def _hermite(F: np.ndarray, d: np.ndarray, p: np.ndarray, v0: float, dv: float) -> np.ndarray:
    """Evaluate the Hermite primitive at points p (same leading shape as F)."""
    n = F.shape[-1]
    q = (p - v0) / dv
    i = np.clip(np.floor(q), 0, n - 2)
    t = np.clip(q - i, 0.0, 1.0)
    lin = (np.arange(F.size // n) * n).reshape(F.shape[:-1] + (1,)) + i.astype(np.int64)
    Ff = F.ravel()
    df = d.ravel()
    F0 = Ff[lin]
    F1 = Ff[lin + 1]
    d0 = df[lin]
    d1 = df[lin + 1]
    t2 = t * t
    omt = 1.0 - t
    return F0 + t2 * (3 - 2 * t) * (F1 - F0) + dv * t * omt * (omt * d0 - t * d1)


def v_remap(f: np.ndarray, scale, offset, grid: PhaseGrid):
    """Cell averages of scale * f(scale * v + offset).

    ``scale`` broadcasts against f.shape[:-2], ``offset`` against f.shape[:-1].
    Returns the new density and the mass that left the velocity window.
    """
    F, d = _primitive(f, grid.dv)
    scale = np.asarray(scale, dtype=float)[..., None, None]
    offset = np.asarray(offset, dtype=float)[..., None]
    p = scale * grid.v_edges + offset
    G = _hermite(F, d, p, -grid.vmax, grid.dv)
    out = np.diff(G, axis=-1) / grid.dv
    lost = (F[..., -1] - (G[..., -1] - G[..., 0])).sum(-1) * grid.dx
    return out, lost


def relax(f: np.ndarray, c: np.ndarray, s, grid: PhaseGrid):
    """Exact relaxation over rescaled time s*eps^2: f <- e^s f(x, c + e^s (v - c))."""
    es = np.exp(np.asarray(s, dtype=float))
    return v_remap(f, es, c * (1.0 - es)[..., None], grid)


def heat_update(u: np.ndarray, source: np.ndarray, dt) -> np.ndarray:
    """u <- S(dt) u + int_0^dt S(dt - s) source ds with a frozen source."""
    n = u.shape[-1]
    uh = np.fft.rfft(u, axis=-1)
    sh = np.fft.rfft(source, axis=-1)
    return np.fft.irfft(heat_multiplier(n, dt) * uh + phi1_multiplier(n, dt) * sh, n=n, axis=-1)


@dataclass
class StepDiagnostics:
    mass_drift: np.ndarray
    clipped: np.ndarray
    boundary_loss: np.ndarray


X_SCHEMES = {"conservative": x_transport, "spectral": x_transport_spectral}


def _strang(f, c, dt, eps, grid: PhaseGrid, x_scheme: str = "conservative"):
    """Batched f-update; f (B, nx, nv), c (B, nx), dt (B,)."""
    half = 0.5 * dt / eps
    shift = half[:, None] * grid.v[None, :]
    if np.max(np.abs(shift)) > 0.5:
        raise CFLViolation(f"x-shift of {np.max(np.abs(shift)):.3f} exceeds half the torus")
    transport = X_SCHEMES[x_scheme]
    f = transport(f, shift)
    f, lost = relax(f, c, dt / eps**2, grid)
    f = transport(f, shift)
    neg = np.minimum(f, 0.0)
    clipped = -neg.sum(axis=(-1, -2)) * grid.dx * grid.dv
    f = f - neg
    mass = total_mass(f, grid)
    f = f / mass[:, None, None]
    return f, StepDiagnostics(np.abs(mass - 1.0), clipped, lost)


def kinetic_step(state: KineticState, c: np.ndarray, dt: float, grid: PhaseGrid,
                 next_jump: float | None = None, fluid: str = "coupled",
                 x_scheme: str = "conservative"):
    """One Strang step of a single run.  Returns (new state, diagnostics)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if next_jump is not None and state.t < next_jump < state.t + dt * (1 - 1e-12):
        raise JumpStraddled(f"step [{state.t}, {state.t + dt}] crosses a jump at {next_jump}")
    eps = state.epsilon
    mom = moments(state.f, grid)
    f, diag = _strang(state.f[None], np.asarray(c, dtype=float)[None], np.array([dt]), eps, grid,
                      x_scheme)
    u = state.u
    if fluid == "coupled":
        u = heat_update(u, mom.J - eps * mom.rho * u, dt)
    return KineticState(f[0], u, state.t + dt, state.driver_state, eps), diag


# ---------------------------------------------------------------------------
# initial data and bounds


def auto_vmax(cfg: RunConfig, driver: DriverSpec) -> float:
    if cfg.vmax is not None:
        return float(cfg.vmax)
    u_sup = cfg.u0_series.sup_bound()
    return 2.0 * (driver.c_star + u_sup + abs(cfg.v_mean) + 5.0 * cfg.v_std)


def phase_grid(cfg: RunConfig, driver: DriverSpec) -> PhaseGrid:
    return PhaseGrid(cfg.nx, cfg.nv, auto_vmax(cfg, driver))


def initial_density(grid: PhaseGrid, rho0: FourierSeries, v_mean: float, v_std: float) -> np.ndarray:
    """rho0(x) times the cell-averaged Gaussian N(v_mean, v_std^2), unit mass."""
    z = (grid.v_edges - v_mean) / (np.sqrt(2.0) * v_std)
    prof = np.diff(0.5 * special.erf(z)) / grid.dv
    f = rho0(grid.x)[:, None] * prof[None, :]
    return f / total_mass(f, grid)


def heat_sup_integral(t: np.ndarray) -> np.ndarray:
    """int_0^t sup_x(heat kernel) ds, bounded by t + sqrt(t / pi)."""
    return t + np.sqrt(np.asarray(t) / np.pi)


def u_apriori_bound(horizon: float, c_star: float, u0_sup: float, jbar0: float, eps: float,
                    n: int = 2000) -> float:
    """Upper solution of V(t) = |u0| + int_0^t K(t-s) (B0 + 2 eps V(s)) ds.

    K(s) = 1 + 1/(2 sqrt(pi s)) bounds the torus heat kernel, B0 = Jbar(f0) + C*
    and the L1 norm of the source J - eps rho u is at most Jbar(f_t) + eps |u|.
    Combined with Jbar(f_t) <= Jbar(f0) + C* + eps sup|u| this closes into a
    Volterra inequality; the implicit product-integration below is an upper
    solution because the kernel is positive and V is nondecreasing.
    """
    t = np.linspace(0.0, horizon, n + 1)
    V = np.empty(n + 1)
    V[0] = u0_sup
    b0 = jbar0 + c_star
    for m in range(1, n + 1):
        w = heat_sup_integral(t[m] - t[:m]) - heat_sup_integral(t[m] - t[1:m + 1])
        rhs = u0_sup + np.sum(w) * b0 + 2 * eps * np.sum(w[:-1] * V[1:m])
        denom = 1.0 - 2 * eps * w[-1]
        if denom <= 0:
            return np.inf
        V[m] = rhs / denom
    return float(V[-1])


# ---------------------------------------------------------------------------
# batched simulation


@dataclass
class KineticRuns:
    """Recorded output of a batch of runs."""

    times: np.ndarray
    rho: np.ndarray  # (B, n_out, nx)
    u: np.ndarray
    J: np.ndarray
    start_state: np.ndarray
    mass: np.ndarray  # (B, n_out)
    max_mass_drift: np.ndarray  # (B,)
    clipped: np.ndarray  # (B,) total clipped mass
    boundary_loss: np.ndarray
    moment_ratio: np.ndarray  # max over time of Jbar / bound
    u_sup: np.ndarray
    u_bound: float
    n_steps: np.ndarray
    grid: PhaseGrid = field(repr=False)


def _start_state(cfg: RunConfig, driver: DriverSpec, stream: np.random.Generator) -> int:
    if cfg.driver_start == "stationary":
        return draw_stationary(driver, stream)
    idx = int(cfg.driver_start)
    if not 0 <= idx < driver.n_states:
        raise ValueError(f"driver_start {idx} outside 0..{driver.n_states - 1}")
    return idx


def driver_paths(cfg: RunConfig, driver: DriverSpec, eps: float, master_seed: int,
                 run_ids) -> list[JumpTrajectory]:
    """Driver paths in rescaled time (unscaled jumps times eps^2)."""
    paths = []
    for r in run_ids:
        stream = substream(master_seed, r, DRIVER)
        start = _start_state(cfg, driver, stream)
        path = sample_path(driver, start, cfg.horizon / eps**2, stream)
        paths.append(path.scaled(eps**2))
    return paths


def _pad(rows, fill, dtype=float) -> np.ndarray:
    width = max(1, max(len(r) for r in rows))
    out = np.full((len(rows), width), fill, dtype=dtype)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def run_kinetic(cfg: RunConfig, driver: DriverSpec, paths: list[JumpTrajectory], eps: float,
                f0: np.ndarray | None = None, check: bool = True) -> KineticRuns:
    """Advance one run per driver path (rescaled time) in a lock-step batch.

    Each run steps by min(dt_max, distance to its next boundary), where the
    boundaries are its jump times, the output times and the horizon, so the
    relaxation target is constant on every step.
    """
    grid = phase_grid(cfg, driver)
    B = len(paths)
    T = cfg.horizon
    out_t = cfg.times()
    if f0 is None:
        f0 = initial_density(grid, cfg.rho0_series, cfg.v_mean, cfg.v_std)
    u0 = cfg.u0_series(grid.x)
    f = np.repeat(f0[None], B, axis=0)
    u = np.repeat(u0[None], B, axis=0)
    states = driver.states
    jt = _pad([p.jump_times[p.jump_times < T] for p in paths], np.inf)
    st = _pad([p.state_indices for p in paths], 0, np.int64)
    bounds = _pad([np.unique(np.concatenate([p.jump_times[p.jump_times < T], out_t[out_t > 0], [T]]))
                   for p in paths], np.inf)
    nbounds = np.isfinite(bounds).sum(1)
    rows = np.arange(B)
    bptr = np.zeros(B, dtype=np.int64)
    t = np.zeros(B)
    n_out = out_t.size
    rec_rho = np.zeros((B, n_out, grid.nx))
    rec_u = np.zeros_like(rec_rho)
    rec_J = np.zeros_like(rec_rho)
    rec_mass = np.zeros((B, n_out))
    optr = np.zeros(B, dtype=np.int64)
    if out_t[0] == 0.0:
        m0 = moments(f, grid)
        rec_rho[:, 0], rec_u[:, 0], rec_J[:, 0] = m0.rho, u, m0.J
        rec_mass[:, 0] = total_mass(f, grid)
        optr[:] = 1
    jb0 = float(jbar(f0, grid))
    u_sup = np.abs(u).max(-1)
    moment_ratio = np.zeros(B)
    drift = np.zeros(B)
    clipped = np.zeros(B)
    lost = np.zeros(B)
    nsteps = np.zeros(B, dtype=np.int64)
    active = np.ones(B, dtype=bool)
    coupled = cfg.fluid == "coupled"
    while active.any():
        idx = rows[active]
        nb = bounds[idx, bptr[idx]]
        gap = nb - t[idx]
        hit = gap <= cfg.dt_max * (1 + 1e-9)
        dt = np.where(hit, gap, cfg.dt_max)
        njump = (jt[idx] <= t[idx, None]).sum(1)
        sidx = st[idx, njump]
        ui = u[idx]
        c = states[sidx] + eps * ui
        if check and np.max(np.abs(c)) >= grid.vmax:
            raise ResolutionInsufficient(f"relaxation target {np.max(np.abs(c)):.3f} outside vmax")
        fi = f[idx]
        if coupled:
            mom = moments(fi, grid)
        fi, dg = _strang(fi, c, dt, eps, grid, cfg.x_scheme)
        f[idx] = fi
        if coupled:
            ui = heat_update(ui, mom.J - eps * mom.rho * ui, dt)
            u[idx] = ui
        drift[idx] = np.maximum(drift[idx], dg.mass_drift)
        clipped[idx] += dg.clipped
        lost[idx] += dg.boundary_loss
        nsteps[idx] += 1
        t[idx] = np.where(hit, nb, t[idx] + dt)
        bptr[idx] += hit
        u_sup[idx] = np.maximum(u_sup[idx], np.abs(ui).max(-1))
        bound = jb0 + driver.c_star + eps * u_sup[idx]
        moment_ratio[idx] = np.maximum(moment_ratio[idx], jbar(fi, grid) / bound)
        safe = np.minimum(optr[idx], n_out - 1)
        rec = hit & (optr[idx] < n_out) & (np.abs(t[idx] - out_t[safe]) <= 1e-12)
        if rec.any():
            ri = idx[rec]
            mo = moments(f[ri], grid)
            rec_rho[ri, optr[ri]] = mo.rho
            rec_J[ri, optr[ri]] = mo.J
            rec_u[ri, optr[ri]] = u[ri]
            rec_mass[ri, optr[ri]] = total_mass(f[ri], grid)
            optr[ri] += 1
        active[idx] = bptr[idx] < nbounds[idx]
    if check:
        worst = int(np.argmax(drift))
        if drift[worst] > MASS_DRIFT_LIMIT:
            raise ResolutionInsufficient(f"run {worst}: mass drift {drift[worst]:.3e} before renormalisation")
        if lost.max() > BOUNDARY_LOSS_LIMIT:
            raise ResolutionInsufficient(f"mass {lost.max():.3e} left the velocity window")
    ub = u_apriori_bound(T, driver.c_star, float(np.abs(u0).max()), jb0, eps)
    return KineticRuns(out_t, rec_rho, rec_u, rec_J, st[:, 0].copy(), rec_mass, drift, clipped,
                       lost, moment_ratio, u_sup, ub, nsteps, grid)


def simulate_kinetic(cfg: RunConfig, driver: DriverSpec, seed: int, run_id: int = 0,
                     eps: float | None = None) -> KineticRuns:
    eps = cfg.epsilon if eps is None else eps
    paths = driver_paths(cfg, driver, eps, seed, [run_id])
    return run_kinetic(cfg, driver, paths, eps)


# ---------------------------------------------------------------------------
# Picard iteration at eps = 1


@dataclass
class PicardResult:
    u: np.ndarray  # (n_steps + 1, nx) on the step grid
    step_times: np.ndarray
    rho: np.ndarray
    iterations: int
    differences: list
    mu: float


def contraction_rate(mu: float, lip: float) -> float:
    """Estimate k_mu = L int_0^inf e^{-mu s} (1 + 1/(2 sqrt(pi s))) ds."""
    return lip * (1.0 / mu + 0.5 / np.sqrt(mu))


def choose_mu(lip: float, target: float = 0.45) -> float:
    return float(optimize.brentq(lambda m: contraction_rate(m, lip) - target, 1e-8, 1e12))


def step_grid(cfg: RunConfig, path: JumpTrajectory) -> np.ndarray:
    """The step boundaries run_kinetic uses for a single path."""
    T = cfg.horizon
    out_t = cfg.times()
    b = np.unique(np.concatenate([path.jump_times[path.jump_times < T], out_t[out_t > 0], [T]]))
    pts = [0.0]
    t = 0.0
    for nb in b:
        while nb - t > cfg.dt_max * (1 + 1e-9):
            t = t + cfg.dt_max
            pts.append(t)
        t = nb
        pts.append(nb)
    return np.array(pts)


def picard_solve(cfg: RunConfig, driver: DriverSpec, path: JumpTrajectory, tol: float = 1e-10,
                 max_iters: int = 50) -> PicardResult:
    """Fixed point of u -> u[f[m + u]] on one frozen driver path at eps = 1."""
    eps = 1.0
    cfg = cfg.replace(output_times=None, n_outputs=None)
    grid = phase_grid(cfg, driver)
    ts = step_grid(cfg, path)
    n = ts.size - 1
    dts = np.diff(ts)
    f0 = initial_density(grid, cfg.rho0_series, cfg.v_mean, cfg.v_std)
    u0 = cfg.u0_series(grid.x)
    lip = 1.0 + driver.c_star + float(jbar(f0, grid)) + float(np.abs(u0).max())
    mu = choose_mu(lip * (1.0 + cfg.horizon))
    weights = np.exp(-mu * ts)
    u_old = np.repeat(u0[None], n + 1, axis=0)
    diffs = []
    states = driver.states
    rho_hist = None
    for it in range(1, max_iters + 1):
        f = f0.copy()
        u_new = np.empty_like(u_old)
        u_new[0] = u0
        rho_hist = np.empty((n + 1, grid.nx))
        for k in range(n):
            mom = moments(f, grid)
            rho_hist[k] = mom.rho
            sidx = int(path.state_at(ts[k]))
            c = states[sidx] + eps * u_old[k]
            fn, _ = _strang(f[None], c[None], np.array([dts[k]]), eps, grid, cfg.x_scheme)
            f = fn[0]
            u_new[k + 1] = heat_update(u_new[k], mom.J - eps * mom.rho * u_old[k], dts[k])
        rho_hist[n] = moments(f, grid).rho
        d = float(np.max(weights * np.abs(u_new - u_old).max(-1)))
        diffs.append(d)
        u_old = u_new
        if d < tol:
            return PicardResult(u_new, ts, rho_hist, it, diffs, mu)
    raise NoConvergence(f"Picard iteration stalled at {diffs[-1]:.3e} after {max_iters} iterations")
