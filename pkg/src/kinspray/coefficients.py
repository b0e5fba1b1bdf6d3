"""Drift, covariance kernel, cross kernels and noise basis of the limit equation.

All time integrals of stationary correlations have the form

    int_0^inf w(t) E[d^i m~_0(x) d^j m~_t(y)] dt
        = sum_{j,l} nu_j d^i n^j(x) [int_0^inf w(t) (e^{t(P-I)} - 1 nu) dt]_{jl} d^j n^l(y),

because the stationary mean is zero.  The J x J matrix integral is computed
once per weight by adaptive composite Gauss-Legendre quadrature and then
contracted with the state fields, which is the same linear operation as
integrating C(t, x, y) node by node on the grid.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConsistencyFailure, IndefiniteKernel, NoSpectralGap, NotCentered
from .grid import check_grid, ddx
from .markov_driver import (CorrelationTable, DriverSpec, PoissonSolution, correlation_table,
                            minv_I, semigroup_batch)

log = logging.getLogger(__name__)

TAIL_TOL = 1e-12
QUAD_TOL = 1e-14
GL_LOW, GL_HIGH = 10, 20
ROUNDOFF = 64 * np.finfo(float).eps
ITO_ASSEMBLY_TOL = 1e-6
REVERSIBLE_TOL = 1e-8
CROSS_TOL = 1e-8


# ---------------------------------------------------------------------------
# time quadrature


def t_cut(decay_rate: float, c0: float) -> float:
    if decay_rate <= 0:
        raise NoSpectralGap(f"decay rate {decay_rate} <= 0")
    if c0 <= 0:
        return 0.0
    return max(-np.log(TAIL_TOL * decay_rate / c0) / decay_rate, 0.0)


def _gl(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def _panel(fun, a: float, b: float, n: int):
    x, w = _gl(n)
    vals = fun(a + (b - a) * x)
    return (b - a) * np.tensordot(w, vals, axes=1)


def adaptive_gl(fun, a: float, b: float, tol: float = QUAD_TOL, n_init: int | None = None,
                max_panels: int = 4096, scale: float = 0.0):
    """Adaptive composite Gauss-Legendre for array-valued ``fun(ts) -> (len(ts), ...)``.

    Panels are bisected until the 10/20-point estimates differ by less than
    ``tol`` times the panel's share of [a, b], or by less than the round-off
    level of an integrand computed from terms of size ``scale``.
    """
    if b <= a:
        return 0.0, 0.0
    n_init = n_init or max(4, int(np.ceil(b - a)))
    edges = np.linspace(a, b, n_init + 1)
    stack = list(zip(edges[:-1], edges[1:]))
    total = 0.0
    err = 0.0
    count = 0
    while stack:
        lo, hi = stack.pop()
        coarse = _panel(fun, lo, hi, GL_LOW)
        fine = _panel(fun, lo, hi, GL_HIGH)
        diff = float(np.max(np.abs(fine - coarse)))
        floor = ROUNDOFF * (hi - lo) * scale
        count += 1
        if diff <= max(tol * (hi - lo) / (b - a), floor) or count > max_panels:
            total = total + fine
            err += diff
        else:
            mid = 0.5 * (lo + hi)
            stack.extend([(lo, mid), (mid, hi)])
    return total, err


WEIGHTS = {
    "one": lambda t: np.ones_like(t),
    "exp": lambda t: np.exp(-t),
}


@dataclass(frozen=True)
class StateIntegrals:
    """int_0^T_cut w(t) (e^{t(P-I)} - 1 nu) dt for the weights in WEIGHTS."""

    one: np.ndarray
    exp: np.ndarray
    t_cut: float
    decay_rate: float
    quad_error: float
    tail_bound: float


def state_integrals(driver: DriverSpec) -> StateIntegrals:
    gamma = driver.decay_rate
    tc = t_cut(gamma, driver.c0)
    J = driver.n_states
    proj = np.outer(np.ones(J), driver.stationary)
    out = {}
    err = 0.0
    for name, w in WEIGHTS.items():
        def fun(ts, w=w):
            return w(ts)[:, None, None] * (semigroup_batch(driver.transition, ts) - proj[None])
        val, e = adaptive_gl(fun, 0.0, tc, scale=1.0) if tc > 0 else (np.zeros((J, J)), 0.0)
        out[name] = np.asarray(val) if np.ndim(val) else np.zeros((J, J))
        err = max(err, e)
    tail = driver.c0 * np.exp(-gamma * tc) / gamma if driver.c0 > 0 else 0.0
    return StateIntegrals(out["one"], out["exp"], tc, gamma, err, tail)


def _contract(driver: DriverSpec, S: np.ndarray, left: int, right: int) -> np.ndarray:
    A = driver.stationary[:, None] * driver.fields[:, left]
    return A.T @ S @ driver.fields[:, right]


def _contract_diag(driver: DriverSpec, S: np.ndarray, left: int, right: int) -> np.ndarray:
    A = driver.stationary[:, None] * driver.fields[:, left]
    return np.einsum("jx,jl,lx->x", A, S, driver.fields[:, right])


# ---------------------------------------------------------------------------
# kernels


def _diag_derivative(values: np.ndarray) -> np.ndarray:
    """(d1 + d2) values at (x, x), spectrally."""
    return np.diag(ddx(values, 1, axis=0) + ddx(values, 1, axis=1)).copy()


@dataclass(frozen=True)
class Kernel2D:
    values: np.ndarray
    diag: np.ndarray
    diag_deriv: np.ndarray

    @classmethod
    def from_values(cls, values: np.ndarray) -> "Kernel2D":
        values = np.asarray(values, dtype=float)
        return cls(values, np.diag(values).copy(), _diag_derivative(values))

    @property
    def nx(self) -> int:
        return self.values.shape[0]


def _integrals_of(table: CorrelationTable, integrals: StateIntegrals | None) -> StateIntegrals:
    if table.decay_rate <= 0:
        raise NoSpectralGap(f"decay rate {table.decay_rate} <= 0")
    if not table.driver.centered:
        raise NotCentered("coefficients need a centered driver")
    return integrals if integrals is not None else state_integrals(table.driver)


def kernel_k(table: CorrelationTable, integrals: StateIntegrals | None = None) -> Kernel2D:
    ints = _integrals_of(table, integrals)
    K1 = _contract(table.driver, ints.one, 0, 0)
    return Kernel2D.from_values(K1 + K1.T)


def drift_a(driver: DriverSpec, table: CorrelationTable,
            integrals: StateIntegrals | None = None) -> np.ndarray:
    ints = _integrals_of(table, integrals)
    t1 = _contract_diag(driver, ints.one, 1, 0)  # E[d m~_0(x) m~_t(x)]
    t2 = _contract_diag(driver, ints.one, 0, 1)  # E[m~_0(x) d m~_t(x)]
    t3 = _contract_diag(driver, ints.exp, 0, 1)  # e^{-t}-weighted
    a = 0.5 * (t1 - t2) + t3
    if driver.reversible:
        gap = float(np.max(np.abs(a - t3))) if a.size else 0.0
        if gap > REVERSIBLE_TOL:
            raise ConsistencyFailure(f"general and reversible drift forms differ by {gap:.3e}")
    return a


def drift_a_reversible(driver: DriverSpec, table: CorrelationTable,
                       integrals: StateIntegrals | None = None) -> np.ndarray:
    ints = _integrals_of(table, integrals)
    return _contract_diag(driver, ints.exp, 0, 1)


@dataclass(frozen=True)
class CrossKernels:
    kww: np.ndarray  # E[w~(x) w~(y)]
    g: np.ndarray  # E[w~(x) Psi(m~_0)(y)]
    dpsi_w: np.ndarray  # d_2 G(x, y) at y = x, i.e. E[dPsi(x) w~(x)]
    identity_error: float

    @property
    def kww_diag(self) -> np.ndarray:
        return np.diag(self.kww).copy()


def cross_kernels(driver: DriverSpec, table: CorrelationTable, psi: PoissonSolution,
                  integrals: StateIntegrals | None = None) -> CrossKernels:
    ints = _integrals_of(table, integrals)
    Ke = _contract(driver, ints.exp, 0, 0)
    kww = 0.5 * (Ke + Ke.T)
    G = -_contract(driver, ints.one - ints.exp, 0, 0)
    # E[m~_0(x) Psi(m~_0)(y)] + E[w~(x) m~_0(y)] must reproduce G
    direct = (driver.stationary[:, None] * driver.states).T @ psi.values + Ke
    err = float(np.max(np.abs(direct - G))) if G.size else 0.0
    if err > CROSS_TOL:
        raise ConsistencyFailure(f"cross-kernel identity violated by {err:.3e}")
    dpsi_w = np.diag(ddx(G, 1, axis=1)).copy()
    return CrossKernels(kww, G, dpsi_w, err)


# ---------------------------------------------------------------------------
# noise basis


@dataclass(frozen=True)
class NoiseBasis:
    modes: np.ndarray  # (K, Nx), phi_k = sqrt(lambda_k) * unit eigenfield
    eigenvalues: np.ndarray
    energy: float  # retained fraction of the trace

    @property
    def n_modes(self) -> int:
        return self.modes.shape[0]

    def kernel_diag(self) -> np.ndarray:
        return np.sum(self.modes**2, axis=0)

    def reconstruct(self) -> np.ndarray:
        return self.modes.T @ self.modes


def noise_basis(kernel: Kernel2D, energy_tol: float = 1e-10) -> NoiseBasis:
    k = kernel.values
    nx = k.shape[0]
    dx = 1.0 / nx
    mu, vec = np.linalg.eigh(dx * 0.5 * (k + k.T))
    mu = mu[::-1]
    vec = vec[:, ::-1]
    lam_max = float(mu[0]) if mu.size else 0.0
    if lam_max <= 0:
        if mu.size and mu[-1] < -1e-12:
            raise IndefiniteKernel("kernel has only negative spectrum")
        return NoiseBasis(np.zeros((0, nx)), np.zeros(0), 1.0)
    if mu[-1] < -1e-8 * lam_max:
        raise IndefiniteKernel(f"most negative eigenvalue {mu[-1]:.3e} vs max {lam_max:.3e}")
    keep = mu > 1e-12 * lam_max
    mu = mu[keep]
    vec = vec[:, keep]
    total = mu.sum()
    frac = np.cumsum(mu) / total
    n = int(np.searchsorted(frac, 1.0 - energy_tol)) + 1
    n = min(n, mu.size)
    mu = mu[:n]
    # unit eigenvectors in the grid L2 inner product are vec / sqrt(dx)
    modes = np.sqrt(mu)[:, None] * vec[:, :n].T / np.sqrt(dx)
    sign = np.sign(modes[np.arange(n), np.argmax(np.abs(modes), axis=1)])
    modes = modes * sign[:, None]
    return NoiseBasis(modes, mu, float(frac[n - 1]))


# ---------------------------------------------------------------------------
# grid operators


def apply_strat_drift(rho, u, a) -> np.ndarray:
    check_grid(rho, u, a)
    return ddx((np.asarray(a) - np.asarray(u)) * np.asarray(rho))


def apply_ito_correction(rho, kernel: Kernel2D) -> np.ndarray:
    check_grid(rho, kernel.diag)
    rho = np.asarray(rho)
    return 0.5 * ddx(kernel.diag * rho, 2) - 0.25 * ddx(kernel.diag_deriv * rho)


def apply_ito_drift(rho, u, a, kernel: Kernel2D, cross: CrossKernels | None = None,
                    tol: float = ITO_ASSEMBLY_TOL) -> np.ndarray:
    out = apply_strat_drift(rho, u, a) + apply_ito_correction(rho, kernel)
    if cross is not None:
        check_grid(rho, cross.dpsi_w)
        rho = np.asarray(rho)
        alt = 0.5 * ddx(kernel.diag * rho, 2) + ddx(cross.dpsi_w * rho) - ddx(np.asarray(u) * rho)
        gap = float(np.max(np.abs(out - alt)))
        if gap > tol:
            raise ConsistencyFailure(f"Ito drift assemblies differ by {gap:.3e}")
    return out


# ---------------------------------------------------------------------------
# bundle


@dataclass(frozen=True)
class LimitCoefficients:
    driver: DriverSpec
    a: np.ndarray
    kernel: Kernel2D
    cross: CrossKernels
    basis: NoiseBasis
    psi: PoissonSolution
    integrals: StateIntegrals = field(repr=False)

    @property
    def x(self) -> np.ndarray:
        return self.driver.x

    def metadata(self) -> dict:
        return {
            "nx": int(self.driver.nx),
            "n_states": int(self.driver.n_states),
            "stationary": [float(v) for v in self.driver.stationary],
            "decay_rate": float(self.integrals.decay_rate),
            "t_cut": float(self.integrals.t_cut),
            "quad_error": float(self.integrals.quad_error),
            "tail_bound": float(self.integrals.tail_bound),
            "n_modes": int(self.basis.n_modes),
            "energy_retained": float(self.basis.energy),
            "eigenvalues": [float(v) for v in self.basis.eigenvalues],
            "cross_identity_error": float(self.cross.identity_error),
        }


def compute_coefficients(driver: DriverSpec, energy_tol: float = 1e-10) -> LimitCoefficients:
    ints = state_integrals(driver)
    table = correlation_table(driver, [0.0])
    a = drift_a(driver, table, ints)
    kern = kernel_k(table, ints)
    psi = minv_I(driver)
    cross = cross_kernels(driver, table, psi, ints)
    basis = noise_basis(kern, energy_tol)
    log.debug("coefficients: gamma=%.4g t_cut=%.4g modes=%d", ints.decay_rate, ints.t_cut,
              basis.n_modes)
    return LimitCoefficients(driver, a, kern, cross, basis, psi, ints)
