"""Genetic meta-structure search over heterogeneous information networks."""

__version__ = "1.0.0"
