"""Run configuration (JSON file) with defaults and a stable digest."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .grid import FourierSeries

DEFAULT_OBSERVABLES = {
    "sin2pix": {"sin": [1.0]},
    "cos2pix": {"cos": [1.0]},
    "cos4pix": {"cos": [0.0, 1.0]},
}

SCHEMA_HELP = """\
Config file: one JSON object, every key optional.

  epsilon        scale parameter for single kinetic runs (default 0.2)
  epsilons       list of scale parameters for ensembles (default [0.4, 0.2, 0.1])
  nx, nv         phase-space grid sizes (default 64, 64)
  vmax           velocity cut-off; null = 2 (C* + |u0|_inf + |v_mean| + 5 v_std)
  dt_max         kinetic step (default 1e-3)
  horizon        final rescaled time T (default 0.5)
  output_times   list of recording times; null = [horizon]
  n_outputs      alternative to output_times: uniform outputs on (0, T], plus t = 0
  rho0           initial density, Fourier dict {"const", "cos": [...], "sin": [...]}
  v_mean, v_std  Gaussian velocity profile of f0 (default 0, 0.1)
  u0             initial fluid velocity, Fourier dict (default 0)
  driver         "telegraph", a preset name, a file path or an inline dict
                 ({"telegraph": {"c": .., "p": ..}} or {"states": [...], "transition": [...]})
  driver_start   "stationary" (draw from nu) or a state index (default "stationary")
  fluid          "coupled" (u solves the forced heat equation) or "frozen" (u = u0)
  x_scheme       kinetic x-transport: "conservative" (monotone cubic remap, default)
                 or "spectral" (Fourier phase shift, clipped)
  spde_dt        SPDE step; null = largest stable step dividing the output spacing
  energy_tol     noise-basis truncation tolerance (default 1e-10)
  spde_scheme    "ito" (drift-implicit Euler-Maruyama, default) or
                 "stratonovich" (implicit midpoint)
  observables    {name: Fourier dict} test functions xi_j (default sin 2pi x, cos 2pi x, cos 4pi x)
  runs           ensemble size (default 512)
  seed           master seed (default 0)
"""


@dataclass
class RunConfig:
    epsilon: float = 0.2
    epsilons: list = field(default_factory=lambda: [0.4, 0.2, 0.1])
    nx: int = 64
    nv: int = 64
    vmax: float | None = None
    dt_max: float = 1e-3
    horizon: float = 0.5
    output_times: list | None = None
    n_outputs: int | None = None
    rho0: dict = field(default_factory=lambda: {"const": 1.0, "cos": [0.4], "sin": [0.3]})
    v_mean: float = 0.0
    v_std: float = 0.1
    u0: dict = field(default_factory=dict)
    driver: object = "telegraph"
    driver_start: object = "stationary"
    fluid: str = "coupled"
    x_scheme: str = "conservative"
    spde_dt: float | None = None
    energy_tol: float = 1e-10
    spde_scheme: str = "ito"
    observables: dict = field(default_factory=lambda: dict(DEFAULT_OBSERVABLES))
    runs: int = 512
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    def replace(self, **kw) -> "RunConfig":
        d = self.to_dict()
        d.update(kw)
        return RunConfig.from_dict(d)

    def validate(self) -> None:
        if not (0 < self.epsilon <= 1) or any(not (0 < e <= 1) for e in self.epsilons):
            raise ConfigError("epsilon values must lie in (0, 1]")
        if self.nx < 8 or self.nv < 8:
            raise ConfigError("nx and nv must be >= 8")
        if self.dt_max <= 0 or self.horizon <= 0:
            raise ConfigError("dt_max and horizon must be positive")
        if self.vmax is not None and self.vmax <= 0:
            raise ConfigError("vmax must be positive")
        if self.v_std <= 0:
            raise ConfigError("v_std must be positive")
        if self.fluid not in ("coupled", "frozen"):
            raise ConfigError("fluid must be 'coupled' or 'frozen'")
        if self.x_scheme not in ("conservative", "spectral"):
            raise ConfigError("x_scheme must be 'conservative' or 'spectral'")
        if self.spde_scheme not in ("ito", "stratonovich"):
            raise ConfigError("spde_scheme must be 'ito' or 'stratonovich'")
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        for name in ("rho0", "u0"):
            try:
                FourierSeries.from_dict(getattr(self, name))
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{name}: {exc}") from exc
        rho0 = self.rho0_series
        if abs(rho0.const - 1.0) > 1e-12:
            raise ConfigError("rho0 must have unit mean (const = 1)")
        if np.min(rho0(np.arange(1024) / 1024)) < 0:
            raise ConfigError("rho0 must be nonnegative")
        t = self.times()
        if np.any(t < 0) or np.any(t > self.horizon + 1e-12) or np.any(np.diff(t) <= 0):
            raise ConfigError("output_times must be increasing and inside [0, horizon]")

    @property
    def rho0_series(self) -> FourierSeries:
        return FourierSeries.from_dict(self.rho0)

    @property
    def u0_series(self) -> FourierSeries:
        return FourierSeries.from_dict(self.u0)

    def observable_series(self) -> dict:
        return {k: FourierSeries.from_dict(v) for k, v in self.observables.items()}

    def times(self) -> np.ndarray:
        if self.output_times is not None:
            return np.asarray(self.output_times, dtype=float)
        if self.n_outputs:
            return np.linspace(0.0, self.horizon, int(self.n_outputs) + 1)
        return np.array([self.horizon])

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]
