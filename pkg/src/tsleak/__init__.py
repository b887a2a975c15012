"""Gradient-leakage laboratory for federated time-series forecasting.

The package simulates one FedSGD round per client over small forecasting
models, captures the shared gradient (optionally defended), reconstructs
the private observation/target windows from it with optimization-based
and learned attacks, and scores the reconstructions.
"""

from . import attacks, autodiff, data, federation, inversion, metrics, models, optim, plots

__all__ = [
    "attacks",
    "autodiff",
    "data",
    "federation",
    "inversion",
    "metrics",
    "models",
    "optim",
    "plots",
]

__version__ = "0.1.0"
