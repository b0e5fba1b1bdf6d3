"""Finite-state jump Markov driver m_t.

The driver jumps at the events of a rate-one Poisson clock (unscaled time).
At each event the next state is drawn from the current row of the transition
matrix P with the cumulative-sum jump function

    T(j; U) = first index l with U < P(j, 0) + ... + P(j, l).

Between events the driver is a fixed spatial field n^j(x), stored together
with its exact first and second derivatives.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy import stats

from .errors import (NonFiniteTime, NonStochasticMatrix, NotCentered,
                     ReducibleChain, SingularBeyondKernel)
from .grid import FourierSeries, sample_series, xgrid

POISSON_TAIL = 1e-14
CENTER_TOL = 1e-12


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class DriverSpec:
    """Validated driver.  ``fields[j, d]`` is the d-th derivative of n^j on ``x``."""

    x: np.ndarray
    fields: np.ndarray
    transition: np.ndarray
    stationary: np.ndarray
    centered: bool
    reversible: bool = False
    series: tuple = field(default=(), compare=False)
    jump_rate: float = 1.0

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def nx(self) -> int:
        return self.x.size

    @property
    def states(self) -> np.ndarray:
        return self.fields[:, 0]

    @property
    def dstates(self) -> np.ndarray:
        return self.fields[:, 1]

    @property
    def c_star(self) -> float:
        """sup_j ||n^j||_inf on the grid."""
        return float(np.max(np.abs(self.states))) if self.fields.size else 0.0

    @property
    def norm_e(self) -> float:
        """sup-norm of values and first two derivatives (the norm used on E)."""
        return float(np.max(np.abs(self.fields))) if self.fields.size else 0.0

    @property
    def c0(self) -> float:
        return self.c_star**2

    @property
    def decay_rate(self) -> float:
        return spectral_gap(self.transition)

    def resample(self, nx: int) -> "DriverSpec":
        """Same driver sampled on another grid (needs the Fourier description)."""
        if not self.series:
            raise ValueError("driver has no Fourier description to resample")
        return build_driver(self.series, self.transition, xgrid(nx), reversible=self.reversible,
                            stationary=self.stationary)


# ---------------------------------------------------------------------------
# construction


def _check_stochastic(P: np.ndarray) -> None:
    if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] < 1:
        raise NonStochasticMatrix(f"transition matrix must be square, got shape {P.shape}")
    if np.any(P < 0):
        raise NonStochasticMatrix("transition matrix has negative entries")
    dev = np.max(np.abs(P.sum(axis=1) - 1.0))
    if dev > 1e-10:
        raise NonStochasticMatrix(f"row sums deviate from 1 by {dev:.3e}")


def _check_primitive(P: np.ndarray) -> None:
    # Wielandt: an irreducible aperiodic J x J matrix has P^k > 0 for k = (J-1)^2 + 1
    J = P.shape[0]
    pattern = (P > 0).astype(float)
    k = (J - 1) ** 2 + 1
    power = np.linalg.matrix_power(pattern, k)
    if not np.all(power > 0):
        raise ReducibleChain("transition matrix is reducible or periodic")


def stationary_law(P: np.ndarray) -> np.ndarray:
    J = P.shape[0]
    A = P.T - np.eye(J)
    A[-1, :] = 1.0
    b = np.zeros(J)
    b[-1] = 1.0
    nu = np.linalg.solve(A, b)
    nu = np.clip(nu, 0.0, None)
    return nu / nu.sum()


def spectral_gap(P: np.ndarray) -> float:
    """1 - (second largest eigenvalue modulus of P); 1 for a single state."""
    J = P.shape[0]
    if J == 1:
        return 1.0
    ev = np.linalg.eigvals(P)
    idx = np.argmin(np.abs(ev - 1.0))
    rest = np.delete(ev, idx)
    return float(1.0 - np.max(np.abs(rest)))


def build_driver(states, P, x: np.ndarray, reversible: bool = False,
                 stationary: np.ndarray | None = None) -> DriverSpec:
    """Validate a driver.

    ``states`` is either a sequence of :class:`FourierSeries` or an array of
    shape (J, 2, Nx) / (J, 3, Nx) holding values and derivatives on ``x``.
    """
    P = np.array(P, dtype=float)
    _check_stochastic(P)
    _check_primitive(P)
    x = np.asarray(x, dtype=float)
    series: tuple = ()
    if len(states) and isinstance(states[0], FourierSeries):
        series = tuple(states)
        fields = sample_series(series, x)
    else:
        fields = np.asarray(states, dtype=float)
        if fields.ndim != 3 or fields.shape[1] not in (2, 3):
            raise ValueError("state array must have shape (J, 2|3, Nx)")
        if fields.shape[1] == 2:
            fields = np.concatenate([fields, np.zeros_like(fields[:, :1])], axis=1)
    if fields.shape[0] != P.shape[0]:
        raise ValueError(f"{fields.shape[0]} states but P is {P.shape[0]}x{P.shape[0]}")
    if fields.shape[2] != x.size:
        raise ValueError("states are not sampled on the given grid")
    nu = stationary_law(P) if stationary is None else np.asarray(stationary, dtype=float)
    mean = np.tensordot(nu, fields[:, 0], axes=1)
    centered = bool(np.max(np.abs(mean)) <= CENTER_TOL)
    return DriverSpec(_frozen(x), _frozen(fields), _frozen(P), _frozen(nu), centered,
                      bool(reversible), series)


def center_states(driver: DriverSpec) -> DriverSpec:
    nu = driver.stationary
    mean = np.tensordot(nu, driver.fields, axes=1)  # (3, Nx)
    fields = driver.fields - mean[None]
    series = driver.series
    if series:
        avg = FourierSeries()
        for w, s in zip(nu, series):
            avg = avg + s.scale(w)
        series = tuple(s + avg.scale(-1.0) for s in series)
    return DriverSpec(driver.x, _frozen(fields), driver.transition, driver.stationary, True,
                      driver.reversible, series)


def telegraph_driver(c: float, p: float, nx: int) -> DriverSpec:
    """Two states +-c sin(2 pi x) switching with probability p at each event."""
    s = FourierSeries(0.0, (), (float(c),))
    P = [[1.0 - p, p], [p, 1.0 - p]]
    return build_driver([s, s.scale(-1.0)], P, xgrid(nx), reversible=True)


def load_driver(source, nx: int) -> DriverSpec:
    """Build a centered driver from a file path, a preset name or a dict.

    Accepted shapes::

        {"telegraph": {"c": 0.5, "p": 0.5}}
        {"states": [{"const": .., "cos": [..], "sin": [..]}, ...],
         "transition": [[..], ..], "reversible": false}
    """
    if isinstance(source, (str, Path)):
        path = Path(source)
        if path.is_file():
            source = json.loads(path.read_text())
        else:
            cand = resources.files("kinspray") / "presets" / f"{source}.json"
            if not cand.is_file():
                raise FileNotFoundError(f"driver file or preset not found: {source}")
            source = json.loads(cand.read_text())
    if "telegraph" in source:
        tp = source["telegraph"]
        drv = telegraph_driver(float(tp["c"]), float(tp["p"]), nx)
    else:
        series = [FourierSeries.from_dict(s) for s in source["states"]]
        drv = build_driver(series, source["transition"], xgrid(nx),
                           reversible=bool(source.get("reversible", False)))
    return drv if drv.centered else center_states(drv)


# ---------------------------------------------------------------------------
# semigroup


def _check_time(t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(t)) or np.any(t < 0):
        raise NonFiniteTime(f"time must be finite and >= 0, got {t}")
    return t


def semigroup_batch(P: np.ndarray, times) -> np.ndarray:
    """e^{t(P - I)} for every t in ``times`` by uniformization, shape (T, J, J)."""
    times = np.atleast_1d(_check_time(times))
    J = P.shape[0]
    tmax = float(times.max()) if times.size else 0.0
    kmax = int(stats.poisson.isf(POISSON_TAIL, tmax)) + 2 if tmax > 0 else 0
    powers = np.empty((kmax + 1, J, J))
    powers[0] = np.eye(J)
    for k in range(1, kmax + 1):
        powers[k] = powers[k - 1] @ P
    ks = np.arange(kmax + 1)
    weights = stats.poisson.pmf(ks[None, :], times[:, None])
    weights[times == 0.0] = 0.0
    weights[times == 0.0, 0] = 1.0
    return np.einsum("tk,kij->tij", weights, powers)


def transition_semigroup(driver: DriverSpec, t: float) -> np.ndarray:
    return semigroup_batch(driver.transition, [t])[0]


# ---------------------------------------------------------------------------
# sampling


@dataclass(frozen=True)
class JumpTrajectory:
    """State ``state_indices[i]`` holds on [jump_times[i-1], jump_times[i]) with jump_times[-1] := 0."""

    jump_times: np.ndarray
    state_indices: np.ndarray
    horizon: float

    def state_at(self, t) -> np.ndarray:
        idx = np.searchsorted(self.jump_times, np.asarray(t), side="right")
        return self.state_indices[idx]

    def segments(self, t_end: float | None = None):
        """(start, stop, state) triples covering [0, t_end]."""
        t_end = self.horizon if t_end is None else t_end
        edges = np.concatenate([[0.0], self.jump_times[self.jump_times < t_end], [t_end]])
        n = edges.size - 1
        return edges[:-1], edges[1:], self.state_indices[:n]

    def scaled(self, factor: float) -> "JumpTrajectory":
        return JumpTrajectory(self.jump_times * factor, self.state_indices, self.horizon * factor)


def jump_function(cum_row: np.ndarray, u: float) -> int:
    j = int(np.searchsorted(cum_row, u, side="right"))
    return min(j, cum_row.size - 1)


def _clock(horizon: float, stream: np.random.Generator) -> np.ndarray:
    n = stream.poisson(horizon)
    return np.sort(stream.uniform(0.0, horizon, size=n))


def _run_chain(cum: np.ndarray, start: int, uniforms: np.ndarray) -> np.ndarray:
    out = np.empty(uniforms.size + 1, dtype=np.int64)
    out[0] = start
    j = start
    J = cum.shape[0]
    for i, u in enumerate(uniforms, start=1):
        j = min(int(np.searchsorted(cum[j], u, side="right")), J - 1)
        out[i] = j
    return out


def sample_path(driver: DriverSpec, start_index: int, horizon: float,
                stream: np.random.Generator) -> JumpTrajectory:
    if not (0 <= start_index < driver.n_states):
        raise IndexError(f"start index {start_index} outside 0..{driver.n_states - 1}")
    times = _clock(horizon, stream)
    uniforms = stream.random(times.size)
    cum = np.cumsum(driver.transition, axis=1)
    return JumpTrajectory(times, _run_chain(cum, start_index, uniforms), float(horizon))


def draw_stationary(driver: DriverSpec, stream: np.random.Generator) -> int:
    return jump_function(np.cumsum(driver.stationary), stream.random())


class CoupledSample(NamedTuple):
    star: JumpTrajectory
    tilde: JumpTrajectory
    tau: float  # clock time of the meeting jump, inf if no meeting before horizon
    meeting_index: int  # -1 if no meeting before horizon


def coupled_sample(driver: DriverSpec, start_index: int, horizon: float,
                   stream: np.random.Generator) -> CoupledSample:
    cum = np.cumsum(driver.transition, axis=1)
    J = driver.n_states
    companion = draw_stationary(driver, stream)
    times = _clock(horizon, stream)
    u_star = stream.random(times.size)
    u_tilde = stream.random(times.size)
    tilde = _run_chain(cum, companion, u_tilde)
    star = np.empty_like(tilde)
    star[0] = start_index
    meet = 0 if start_index == companion else -1
    j = start_index
    for i in range(1, times.size + 1):
        if meet >= 0:
            star[i] = tilde[i]
            continue
        j = min(int(np.searchsorted(cum[j], u_star[i - 1], side="right")), J - 1)
        star[i] = j
        if j == tilde[i]:
            meet = i
    if meet >= 0:
        star[meet:] = tilde[meet:]
    tau = 0.0 if meet == 0 else (float(times[meet - 1]) if meet > 0 else np.inf)
    return CoupledSample(JumpTrajectory(times, star, float(horizon)),
                         JumpTrajectory(times, tilde, float(horizon)), tau, meet)


def meeting_indices(driver: DriverSpec, start_index: int, n: int,
                    stream: np.random.Generator, max_steps: int = 100_000) -> np.ndarray:
    """Discrete meeting index tau of the coupled chains (no clock), n samples."""
    cum = np.cumsum(driver.transition, axis=1)
    J = driver.n_states
    a = np.full(n, start_index, dtype=np.int64)
    b = np.searchsorted(np.cumsum(driver.stationary), stream.random(n), side="right").clip(max=J - 1)
    tau = np.where(a == b, 0, -1)
    for i in range(1, max_steps + 1):
        open_ = tau < 0
        if not open_.any():
            break
        ua = stream.random(n)
        ub = stream.random(n)
        a = np.minimum((cum[a] <= ua[:, None]).sum(axis=1), J - 1)
        b = np.minimum((cum[b] <= ub[:, None]).sum(axis=1), J - 1)
        tau[open_ & (a == b)] = i
    return tau


# ---------------------------------------------------------------------------
# correlations and Poisson equation


@dataclass(frozen=True)
class CorrelationTable:
    times: np.ndarray
    values: np.ndarray  # (T, Nx, Nx)
    decay_rate: float
    c0: float
    driver: DriverSpec = field(compare=False, repr=False)


def correlation_matrices(driver: DriverSpec, times, left: int = 0, right: int = 0) -> np.ndarray:
    """E[d^left m~_0(x) d^right m~_t(y)] on the grid, shape (T, Nx, Nx)."""
    E = semigroup_batch(driver.transition, times)
    A = driver.stationary[:, None] * driver.fields[:, left]
    return np.einsum("jx,tjl,ly->txy", A, E, driver.fields[:, right])


def correlation_table(driver: DriverSpec, times) -> CorrelationTable:
    if not driver.centered:
        raise NotCentered("correlation table needs a centered driver")
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size == 0 or np.any(np.diff(times) < 0):
        raise ValueError("times must be a sorted 1-d array")
    vals = correlation_matrices(driver, times)
    vals.setflags(write=False)
    return CorrelationTable(_frozen(times), vals, driver.decay_rate, driver.c0, driver)


@dataclass(frozen=True)
class PoissonSolution:
    """Psi(n^j)(x) = (M^-1 I)(n^j)(x) with derivatives, shape (J, 3, Nx)."""

    fields: np.ndarray
    residual: float

    @property
    def values(self) -> np.ndarray:
        return self.fields[:, 0]

    @property
    def dvalues(self) -> np.ndarray:
        return self.fields[:, 1]


def fundamental_matrix(P: np.ndarray, nu: np.ndarray) -> np.ndarray:
    J = P.shape[0]
    Zinv = np.eye(J) - P + np.outer(np.ones(J), nu)
    if np.linalg.cond(Zinv) > 1e12:
        raise SingularBeyondKernel("P - I is singular on the centered subspace")
    return np.linalg.inv(Zinv)


def minv_I(driver: DriverSpec) -> PoissonSolution:
    """Centered solution of (P - I) Psi = N, pointwise in x."""
    if not driver.centered:
        raise NotCentered("the Poisson equation needs a centered driver")
    Z = fundamental_matrix(driver.transition, driver.stationary)
    psi = -np.einsum("jl,ldx->jdx", Z, driver.fields)
    G = driver.transition - np.eye(driver.n_states)
    resid = float(np.max(np.abs(G @ psi[:, 0] - driver.states))) if psi.size else 0.0
    return PoissonSolution(_frozen(psi), resid)
