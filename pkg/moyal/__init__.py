"""Steady-state Wigner-Moyal transport on a discrete (x, k) grid with tunable observation windows."""

__version__ = "0.1.0"
