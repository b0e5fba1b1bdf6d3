"""Randomly forced kinetic spray system, its diffusion limit and a Monte Carlo harness."""
from .config import RunConfig
from .errors import KinsprayError

__version__ = "0.1.0"

__all__ = ["RunConfig", "KinsprayError", "__version__"]
