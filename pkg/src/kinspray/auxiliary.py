"""Auxiliary relaxation process, stationary weight, correctors and the limiting generator.

With the driver frozen in x, the fast dynamics g_t(f, n)(x, v) = e^t f(x, e^t (v - w_t(n)(x)))
relax the velocity profile onto the weighted driver average

    w_t(n) = int_0^t e^{-(t-s)} m_s(n) ds.

Its v-moments are explicit, J(g_t) = e^{-t} J + w rho and
K(g_t) = e^{-2t} K + 2 e^{-t} w J + w^2 rho, so the long-time averages only
need the law of (w~, m~_0).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .coefficients import LimitCoefficients, apply_ito_drift
from .errors import InsufficientEnsemble
from .grid import check_grid, ddx, inner
from .kinetic_solver import Moments, PhaseGrid, v_remap
from .markov_driver import DriverSpec, JumpTrajectory

BURN_IN_FACTOR = 20.0


# ---------------------------------------------------------------------------
# test functions


@dataclass(frozen=True)
class TestFunction:
    """phi(rho, u) = Phi(<rho, xi>, <u, zeta>) with the partials the generator needs."""

    __test__ = False  # not a pytest class

    xi: np.ndarray
    zeta: np.ndarray
    outer: Callable
    d1: Callable
    d2: Callable
    d11: Callable
    name: str = "phi"

    @classmethod
    def linear(cls, xi, zeta=None, alpha: float = 1.0, beta: float = 0.0) -> "TestFunction":
        xi = np.asarray(xi, dtype=float)
        zeta = np.zeros_like(xi) if zeta is None else np.asarray(zeta, dtype=float)
        return cls(xi, zeta,
                   lambda r, s: alpha * r + beta * s,
                   lambda r, s: alpha + 0.0 * r,
                   lambda r, s: beta + 0.0 * r,
                   lambda r, s: 0.0 * r,
                   "linear")

    @classmethod
    def quadratic(cls, xi, zeta=None, shift: float = 0.0) -> "TestFunction":
        """Phi(r, s) = (r + shift)^2."""
        xi = np.asarray(xi, dtype=float)
        zeta = np.zeros_like(xi) if zeta is None else np.asarray(zeta, dtype=float)
        return cls(xi, zeta,
                   lambda r, s: (r + shift) ** 2,
                   lambda r, s: 2.0 * (r + shift),
                   lambda r, s: 0.0 * r,
                   lambda r, s: 2.0 + 0.0 * r,
                   "quadratic")

    @classmethod
    def constant(cls, xi, value: float = 1.0) -> "TestFunction":
        xi = np.asarray(xi, dtype=float)
        zero = lambda r, s: 0.0 * r  # noqa: E731
        return cls(xi, np.zeros_like(xi), lambda r, s: value + 0.0 * r, zero, zero, zero,
                   "constant")

    def args(self, rho, u):
        check_grid(rho, self.xi)
        return inner(rho, self.xi), inner(u, self.zeta)

    def __call__(self, rho, u) -> np.ndarray:
        return self.outer(*self.args(rho, u))


@dataclass(frozen=True)
class WeightField:
    w: np.ndarray  # (..., Nx)
    dw: np.ndarray


# ---------------------------------------------------------------------------
# auxiliary flow


def aux_flow(f: np.ndarray, w, t: float, grid: PhaseGrid):
    """g_t = e^t f(x, e^t (v - w(x))) as cell averages; returns (g, mass lost at |v| = vmax)."""
    if t < 0:
        raise ValueError("t must be >= 0")
    w = w.w if isinstance(w, WeightField) else np.asarray(w, dtype=float)
    et = math.exp(t)
    return v_remap(f, et, -et * w, grid)


def aux_moments(mom: Moments, w, t: float) -> Moments:
    """Moments of g_t by change of variables (exact, no v-grid)."""
    w = w.w if isinstance(w, WeightField) else np.asarray(w, dtype=float)
    e = math.exp(-t)
    return Moments(mom.rho, e * mom.J + w * mom.rho,
                   e * e * mom.K + 2.0 * e * w * mom.J + w * w * mom.rho)


# ---------------------------------------------------------------------------
# weights


def weight_coefficients(starts, stops, states, t: float, n_states: int) -> np.ndarray:
    """c_j = int over the segments in state j of e^{-(t-s)} ds."""
    contrib = np.exp(-(t - np.asarray(stops))) - np.exp(-(t - np.asarray(starts)))
    c = np.zeros(n_states)
    np.add.at(c, np.asarray(states), contrib)
    return c


def weight_w(traj: JumpTrajectory, driver: DriverSpec, t: float) -> WeightField:
    if t < 0 or t > traj.horizon * (1 + 1e-12):
        raise ValueError(f"t = {t} outside [0, {traj.horizon}]")
    starts, stops, states = traj.segments(t)
    c = weight_coefficients(starts, stops, states, t, driver.n_states)
    return WeightField(c @ driver.states, c @ driver.dstates)


class WTildeSample(NamedTuple):
    w: np.ndarray  # (n, Nx)
    dw: np.ndarray  # (n, Nx)
    state: np.ndarray  # (n,) driver state at the sampling time
    burn_in: float


def _chain_weights(driver: DriverSpec, start: np.ndarray, horizon: float, stream):
    """Vectorised driver paths on [0, horizon]: weight coefficients (n, J) and final states."""
    n = start.size
    J = driver.n_states
    cum = np.cumsum(driver.transition, axis=1)
    counts = stream.poisson(horizon, size=n)
    K = int(counts.max()) if n else 0
    times = np.sort(np.where(np.arange(K)[None, :] < counts[:, None],
                             stream.uniform(0.0, horizon, size=(n, K)), horizon), axis=1)
    states = np.empty((n, K + 1), dtype=np.int64)
    states[:, 0] = start
    cur = start.copy()
    for i in range(K):
        u = stream.random(n)
        nxt = np.minimum((cum[cur] <= u[:, None]).sum(axis=1), J - 1)
        cur = np.where(i < counts, nxt, cur)
        states[:, i + 1] = cur
    edges = np.concatenate([np.zeros((n, 1)), times, np.full((n, 1), horizon)], axis=1)
    contrib = np.exp(-(horizon - edges[:, 1:])) - np.exp(-(horizon - edges[:, :-1]))
    C = np.zeros((n, J))
    np.add.at(C, (np.repeat(np.arange(n), K + 1), states.ravel()), contrib.ravel())
    return C, cur


def default_burn_in(driver: DriverSpec) -> float:
    return BURN_IN_FACTOR / driver.decay_rate


def sample_wtilde(driver: DriverSpec, burn_in: float | None, stream, n: int = 1,
                  start: int | None = None) -> WTildeSample:
    """n samples of (w~, m~_0) from paths of length burn_in.

    Paths start from a nu-draw unless ``start`` is given (used to estimate Q_t
    from a fixed state).  The bias from the finite horizon is at most
    C* e^{-burn_in}.
    """
    floor = default_burn_in(driver)
    burn_in = floor if burn_in is None else float(burn_in)
    if start is None and burn_in < floor * (1 - 1e-12):
        raise ValueError(f"burn_in {burn_in:.3g} is below 20/gamma = {floor:.3g}")
    if start is None:
        s0 = np.searchsorted(np.cumsum(driver.stationary), stream.random(n), side="right")
        s0 = np.minimum(s0, driver.n_states - 1)
    else:
        s0 = np.full(n, int(start), dtype=np.int64)
    C, last = _chain_weights(driver, s0, burn_in, stream)
    return WTildeSample(C @ driver.states, C @ driver.dstates, last, burn_in)


def invariant_moments(mom: Moments, coeffs: LimitCoefficients) -> Moments:
    """First three v-moments of the invariant measure rho (x) delta_{w~}: (rho, E[w~] rho, E[w~^2] rho)."""
    kd = coeffs.cross.kww_diag
    return Moments(mom.rho, np.zeros_like(mom.rho), kd * mom.rho)


# ---------------------------------------------------------------------------
# corrector and generator


def corrector_phi1(mom: Moments, psi_n, phi: TestFunction, u=None) -> np.ndarray:
    """<J(f) - Psi(n) rho, d_x xi> * d_1 Phi(<rho, xi>, <u, zeta>)."""
    rho = np.asarray(mom.rho)
    u = np.zeros_like(rho) if u is None else np.asarray(u)
    check_grid(rho, mom.J, psi_n, phi.xi)
    r, s = phi.args(rho, u)
    return inner(mom.J - np.asarray(psi_n) * rho, ddx(phi.xi)) * phi.d1(r, s)


def quadratic_variation_density(rho, xi, coeffs: LimitCoefficients) -> np.ndarray:
    """iint k(x,y) rho(x) xi'(x) rho(y) xi'(y) dx dy on the grid (batched over rho)."""
    check_grid(rho, xi, coeffs.a)
    g = np.asarray(rho) * ddx(xi)
    nx = g.shape[-1]
    return np.einsum("...x,xy,...y->...", g, coeffs.kernel.values, g) / (nx * nx)


def limiting_generator(rho, u, phi: TestFunction, coeffs: LimitCoefficients) -> np.ndarray:
    """L phi at (rho, u); rho may be a batch (B, Nx) with u of shape (Nx,) or (B, Nx)."""
    rho = np.asarray(rho, dtype=float)
    u = np.broadcast_to(np.asarray(u, dtype=float), rho.shape)
    check_grid(rho, u, phi.xi, coeffs.a)
    r, s = phi.args(rho, u)
    first = inner(apply_ito_drift(rho, u, coeffs.a, coeffs.kernel), phi.xi) * phi.d1(r, s)
    heat = inner(ddx(u, 2), phi.zeta) * phi.d2(r, s)
    second = 0.5 * phi.d11(r, s) * quadratic_variation_density(rho, phi.xi, coeffs)
    return first + heat + second


# ---------------------------------------------------------------------------
# martingale defect


class DefectEstimate(NamedTuple):
    value: float
    se: float
    n: int
    s: float
    t: float


def martingale_defect(times, rho, u, phi: TestFunction, coeffs: LimitCoefficients,
                      pairs=None, resolution: float | None = None) -> list[DefectEstimate]:
    """E[phi(t) - phi(s) - int_s^t L phi] over an ensemble recorded at ``times``.

    rho has shape (B, T, Nx); u is (T, Nx) for a deterministic field or (B, T, Nx).
    The time integral is the trapezoid rule over the recorded times.
    """
    times = np.asarray(times, dtype=float)
    rho = np.asarray(rho, dtype=float)
    B = rho.shape[0]
    if B < 2:
        raise InsufficientEnsemble("need at least 2 runs")
    u = np.broadcast_to(np.asarray(u, dtype=float), rho.shape)
    vals = phi(rho, u)  # (B, T)
    gen = limiting_generator(rho.reshape(-1, rho.shape[-1]), u.reshape(-1, u.shape[-1]),
                             phi, coeffs).reshape(B, -1)
    pairs = [(0, times.size - 1)] if pairs is None else pairs
    out = []
    for i, j in pairs:
        seg = slice(i, j + 1)
        integral = np.trapezoid(gen[:, seg], times[seg], axis=1)
        d = vals[:, j] - vals[:, i] - integral
        mean = math.fsum(d) / B
        se = float(np.std(d, ddof=1) / math.sqrt(B))
        if resolution is not None and se > resolution:
            raise InsufficientEnsemble(f"standard error {se:.3g} exceeds resolution {resolution:.3g}")
        out.append(DefectEstimate(mean, se, B, float(times[i]), float(times[j])))
    return out
