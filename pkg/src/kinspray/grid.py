"""Periodic x-grid helpers: truncated Fourier series and spectral operators.

Fields on the torus [0, 1) are plain numpy arrays whose last axis is the
x-grid.  Leading axes are treated as batch dimensions by every operator.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import GridMismatch

TWO_PI = 2.0 * np.pi


def xgrid(nx: int) -> np.ndarray:
    return np.arange(nx) / nx


@dataclass(frozen=True)
class FourierSeries:
    """f(x) = const + sum_k cos[k-1] cos(2 pi k x) + sin[k-1] sin(2 pi k x)."""

    const: float = 0.0
    cos: tuple = ()
    sin: tuple = ()

    @classmethod
    def from_dict(cls, d: dict | float | int | None) -> "FourierSeries":
        if d is None:
            return cls()
        if isinstance(d, (int, float)):
            return cls(float(d))
        unknown = set(d) - {"const", "cos", "sin"}
        if unknown:
            raise ValueError(f"unknown Fourier keys {sorted(unknown)}")
        return cls(float(d.get("const", 0.0)), tuple(float(c) for c in d.get("cos", ())),
                   tuple(float(s) for s in d.get("sin", ())))

    def to_dict(self) -> dict:
        return {"const": self.const, "cos": list(self.cos), "sin": list(self.sin)}

    @property
    def max_mode(self) -> int:
        return max(len(self.cos), len(self.sin))

    def __add__(self, other: "FourierSeries") -> "FourierSeries":
        n = max(self.max_mode, other.max_mode)
        c = np.zeros(n)
        s = np.zeros(n)
        for fs in (self, other):
            c[: len(fs.cos)] += fs.cos
            s[: len(fs.sin)] += fs.sin
        return FourierSeries(self.const + other.const, tuple(c), tuple(s))

    def scale(self, alpha: float) -> "FourierSeries":
        return FourierSeries(alpha * self.const, tuple(alpha * c for c in self.cos),
                             tuple(alpha * s for s in self.sin))

    def __call__(self, x: np.ndarray, deriv: int = 0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.full_like(x, self.const if deriv == 0 else 0.0)
        for k, a in enumerate(self.cos, start=1):
            w = TWO_PI * k
            out += a * w**deriv * np.cos(w * x + deriv * np.pi / 2)
        for k, b in enumerate(self.sin, start=1):
            w = TWO_PI * k
            out += b * w**deriv * np.sin(w * x + deriv * np.pi / 2)
        return out

    def sup_bound(self) -> float:
        return abs(self.const) + float(np.sum(np.abs(self.cos)) + np.sum(np.abs(self.sin)))


def check_grid(*fields: np.ndarray) -> int:
    """Return the common x-length of the fields or raise GridMismatch."""
    sizes = {np.shape(f)[-1] for f in fields}
    if len(sizes) != 1:
        raise GridMismatch(f"fields live on different grids: sizes {sorted(sizes)}")
    return sizes.pop()


def _wavenumbers(n: int, order: int) -> np.ndarray:
    k = np.fft.rfftfreq(n, 1.0 / n)
    mult = (2j * np.pi * k) ** order
    if order % 2 == 1 and n % 2 == 0:
        mult[-1] = 0.0  # Nyquist mode has no odd derivative on the grid
    return mult


def ddx(f: np.ndarray, order: int = 1, axis: int = -1) -> np.ndarray:
    """Spectral derivative of a real periodic field along ``axis``."""
    f = np.asarray(f, dtype=float)
    n = f.shape[axis]
    fh = np.fft.rfft(f, axis=axis)
    shape = [1] * f.ndim
    shape[axis] = -1
    return np.fft.irfft(fh * _wavenumbers(n, order).reshape(shape), n=n, axis=axis)


def inner(f: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Grid quadrature of f*g over the torus (batched over leading axes)."""
    check_grid(f, g)
    return np.mean(np.asarray(f) * np.asarray(g), axis=-1)


def heat_multiplier(n: int, dt: float | np.ndarray) -> np.ndarray:
    """e^{-(2 pi j)^2 dt} for the rfft modes; dt may be an array (batch)."""
    lam = (TWO_PI * np.fft.rfftfreq(n, 1.0 / n)) ** 2
    return np.exp(-np.multiply.outer(np.asarray(dt, dtype=float), lam))


def phi1_multiplier(n: int, dt: float | np.ndarray) -> np.ndarray:
    """(1 - e^{-lam dt}) / lam, equal to dt for the mean mode."""
    lam = (TWO_PI * np.fft.rfftfreq(n, 1.0 / n)) ** 2
    dt = np.asarray(dt, dtype=float)
    z = np.multiply.outer(dt, lam)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = -np.expm1(-z) / lam
    out[..., 0] = dt
    return out


def sample_series(series: Sequence[FourierSeries], x: np.ndarray) -> np.ndarray:
    """Values, first and second derivatives, shape (J, 3, Nx)."""
    return np.stack([np.stack([s(x, d) for d in range(3)]) for s in series])
