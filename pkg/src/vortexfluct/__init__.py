"""Stochastic point vortices with common noise: particles, mean-field SPDE,
fluctuation SPDE and the statistics that compare them."""

__version__ = "0.1.0"
