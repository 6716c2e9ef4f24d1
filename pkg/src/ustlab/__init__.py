"""Uniform spanning tree laboratory on finite windows of the square lattice."""

from ustlab.constants import D_F, D_W, KAPPA
from ustlab.lattice import WIRED_ROOT, Site, Window
from ustlab.rng import RngStream

__all__ = ["D_F", "D_W", "KAPPA", "WIRED_ROOT", "Site", "Window", "RngStream"]
__version__ = "0.1.0"
