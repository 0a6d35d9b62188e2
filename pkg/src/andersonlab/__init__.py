"""Numerical laboratory for the weakly disordered Anderson model on the cubic lattice."""

__version__ = "0.1.0"
