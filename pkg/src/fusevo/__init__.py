"""Monocular visual odometry that fuses photometric and geometric residuals
in a single scalarized optimization, plus a synthetic verification harness."""

from .config import Config, load_config
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["Config", "load_config", "BACKEND", "__version__"]
