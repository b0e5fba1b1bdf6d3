import numpy as np
import pytest

from kinspray.coefficients import compute_coefficients
from kinspray.config import RunConfig
from kinspray.errors import StabilityViolation
from kinspray.grid import xgrid
from kinspray.markov_driver import telegraph_driver
from kinspray.rng import substream
from kinspray.spde_solver import (SPDEState, _ito_update, _midpoint_update, diff_matrix,
                                  heat_propagate, ito_drift, ito_operator, run_spde,
                                  simulate_spde, spde_step, stability_bound, time_steps)

from conftest import zscore

TWO_PI = 2 * np.pi
NX = 32


@pytest.fixture(scope="module")
def coeffs32():
    return compute_coefficients(telegraph_driver(0.5, 0.5, NX))


def _cfg(**kw):
    base = dict(nx=NX, horizon=0.1, rho0={"const": 1.0, "cos": [0.4], "sin": [0.3]})
    base.update(kw)
    return RunConfig(**base)


def test_diff_matrix_matches_ddx():
    x = xgrid(NX)
    D = diff_matrix(NX)
    f = np.sin(TWO_PI * x) + 0.3 * np.cos(6 * np.pi * x)
    np.testing.assert_allclose(D @ f, TWO_PI * np.cos(TWO_PI * x) - 0.9 * TWO_PI * np.sin(6 * np.pi * x),
                               atol=1e-11)
    np.testing.assert_allclose(D, -D.T, atol=1e-12)


def test_operator_matches_drift():
    x = xgrid(NX)
    b = 0.2 * np.sin(TWO_PI * x)
    modes = np.stack([0.3 * np.cos(TWO_PI * x), 0.1 + 0 * x])
    rho = 1 + 0.5 * np.cos(4 * np.pi * x)
    np.testing.assert_allclose(ito_operator(b, modes) @ rho, ito_drift(rho, b, modes), atol=1e-11)


def test_heat_propagate():
    x = xgrid(NX)
    u = np.cos(TWO_PI * x)
    np.testing.assert_allclose(heat_propagate(u, 0.01), np.exp(-TWO_PI**2 * 0.01) * u, atol=1e-14)
    with pytest.raises(ValueError):
        heat_propagate(u, -1.0)


def test_time_steps_land_on_outputs():
    s = time_steps(np.array([0.0, 0.03, 0.1]), 0.1, 0.007)
    assert np.all(s <= 0.007 + 1e-15)
    ends = np.cumsum(s)
    assert np.any(np.abs(ends - 0.03) < 1e-14)
    assert ends[-1] == pytest.approx(0.1, abs=1e-14)


def test_no_noise_no_drift_is_static(zero_driver):
    co = compute_coefficients(zero_driver)
    cfg = RunConfig(horizon=0.05)
    r = simulate_spde(cfg, co, 0)
    np.testing.assert_allclose(r.rho[0, -1], cfg.rho0_series(co.x), atol=1e-13)


def test_constant_noise_mean_decay():
    # phi = kappa: rho is translated by a Brownian motion; the drift-implicit
    # mean of a cos mode is damped by (1 + 2 pi^2 kappa^2 dt)^-1 per step exactly
    x = xgrid(NX)
    kappa, dt, n, B = 0.3, 1e-3, 100, 4000
    modes = np.full((1, NX), kappa)
    b = np.zeros(NX)
    rho = np.repeat((1 + np.cos(TWO_PI * x))[None], B, axis=0)
    rng = substream(0, 0)
    for _ in range(n):
        rho = _ito_update(rho, b, modes, dt, np.sqrt(dt) * rng.standard_normal((B, 1)))
    amp = 2 * rho @ np.cos(TWO_PI * x) / NX
    disc = (1 + 2 * np.pi**2 * kappa**2 * dt) ** -n
    assert abs(zscore(amp, disc)) < 4
    assert abs(disc - np.exp(-2 * np.pi**2 * kappa**2 * n * dt)) < 2e-3
    np.testing.assert_allclose(rho.mean(-1), 1.0, atol=1e-13)


def test_midpoint_constant_noise_is_isometric():
    x = xgrid(NX)
    modes = np.full((1, NX), 0.5)
    rho = (1 + 0.5 * np.cos(TWO_PI * x) + 0.2 * np.sin(6 * np.pi * x))[None]
    norm0 = np.sum(rho**2)
    rng = substream(1, 0)
    for _ in range(50):
        rho = _midpoint_update(rho, np.zeros(NX), modes, 1e-3, 0.03 * rng.standard_normal((1, 1)))
    assert np.sum(rho**2) == pytest.approx(norm0, rel=1e-12)
    assert rho.mean() == pytest.approx(1.0, abs=1e-14)


def test_spde_step_stability_check(coeffs32):
    x = coeffs32.x
    st0 = SPDEState(np.ones(NX), np.zeros(NX), 0.0)
    bound = stability_bound(coeffs32.basis, NX)
    with pytest.raises(StabilityViolation):
        spde_step(st0, coeffs32.a, coeffs32.basis, 2 * bound, substream(0, 0))
    new = spde_step(st0, coeffs32.a, coeffs32.basis, bound, substream(0, 0))
    assert new.rho.mean() == pytest.approx(1.0, abs=1e-14)
    assert new.t == bound
    with pytest.raises(StabilityViolation):
        run_spde(_cfg(), coeffs32, 0, [0], dt=2 * bound)
    del x


def test_stability_bound_no_noise(zero_driver):
    assert stability_bound(compute_coefficients(zero_driver).basis, 64) == np.inf


def test_mass_and_determinism(coeffs32):
    cfg = _cfg(n_outputs=4)
    a = run_spde(cfg, coeffs32, 3, [0, 1, 2, 3])
    b = run_spde(cfg, coeffs32, 3, [2])
    np.testing.assert_allclose(a.rho[2], b.rho[0], atol=1e-12)
    assert a.max_mass_change.max() < 1e-12
    np.testing.assert_allclose(a.mass, 1.0, atol=1e-12)
    assert a.rho.shape == (4, 5, NX) and a.u.shape == (5, NX)


@pytest.mark.parametrize("scheme", ["ito", "stratonovich"])
def test_martingale_identities(coeffs32, scheme):
    cfg = _cfg()
    r = run_spde(cfg, coeffs32, 11, range(400), scheme=scheme)
    for k in r.martingale:
        m, q = r.martingale[k], r.qv[k]
        assert abs(zscore(m, 0.0)) < 4
        if q.mean() > 1e-8:
            assert abs(zscore(m * m - q, 0.0)) < 4


def test_schemes_agree_in_law(coeffs32):
    cfg = _cfg()
    ito = run_spde(cfg, coeffs32, 5, range(400), scheme="ito")
    mid = run_spde(cfg, coeffs32, 6, range(400), scheme="stratonovich")
    xi = np.cos(TWO_PI * coeffs32.x)
    a, b = ito.rho[:, -1] @ xi / NX, mid.rho[:, -1] @ xi / NX
    se = np.hypot(a.std(), b.std()) / np.sqrt(400)
    assert abs(a.mean() - b.mean()) < 4 * se
